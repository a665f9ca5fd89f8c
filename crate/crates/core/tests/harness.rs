mod common;

use std::fs;
use std::path::Path;

use amvq::amvq::{am_vq, defuse, AmVqConfig, ThresholdRule};
use amvq::channel::{deserialize, serialize, transmit_bits, Bitstream, ChannelConfig, ChannelKind, RawPrecision};
use amvq::harness::{
    ingest_dataset, load_dataset, rd_sweep, run_pipeline, synth_panorama, threshold_sweep, vpsnr_rises, ExperimentConfig, Model,
    CHECKPOINT_DIR, TRAIN_LOG, VPSNR_RISE_TOLERANCE_DB,
};
use amvq::metrics::{vpsnr, ViewportSet};
use amvq::vq::quantize_nearest;
use common::tiny_model;

fn write_png(path: &Path, w: u32, h: u32) {
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 3) as u8, (y * 5) as u8, 90])).save(path).unwrap();
}

#[test]
fn ingest_resizes_filters_and_orders() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("b.png"), 128, 64);
    let one = ingest_dataset(dir.path(), 64, 128).unwrap();
    assert_eq!(one.samples.len(), 1);
    assert_eq!(one.samples[0].image.shape(), &[3, 64, 128]);
    assert!(one.samples[0].image.data().iter().all(|v| (-1.0..=1.0).contains(v)));

    write_png(&dir.path().join("a.png"), 64, 32);
    write_png(&dir.path().join("c.png"), 100, 100);
    write_png(&dir.path().join("d.png"), 90, 30);
    fs::write(dir.path().join("notes.txt"), "not an image").unwrap();
    let mixed = ingest_dataset(dir.path(), 32, 64).unwrap();
    let ids: Vec<&str> = mixed.samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["a", "b"]);
    assert_eq!(mixed.warnings.len(), 2);
    assert!(mixed.warnings[0].contains("c.png") && mixed.warnings[1].contains("d.png"));
    let again = ingest_dataset(dir.path(), 32, 64).unwrap();
    assert_eq!(mixed.samples.iter().map(|s| &s.image).collect::<Vec<_>>(), again.samples.iter().map(|s| &s.image).collect::<Vec<_>>());

    let empty = tempfile::tempdir().unwrap();
    assert!(ingest_dataset(empty.path(), 32, 64).is_err());
}

#[test]
fn synthetic_panoramas() {
    let a = synth_panorama(1, 64).unwrap();
    let b = synth_panorama(2, 64).unwrap();
    assert_eq!(a, synth_panorama(1, 64).unwrap());
    let diff = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / a.len() as f64;
    assert!(diff > 0.05, "{diff}");
    let (h, w) = (64, 128);
    for c in 0..3 {
        for r in 0..h {
            let row = &a.data()[(c * h + r) * w..(c * h + r + 1) * w];
            assert!(((row[0] - row[w - 1]) as f64).abs() * 127.5 < 2.0);
        }
    }
    assert!(synth_panorama(1, 16).is_err());
}

#[test]
fn default_experiment_constants() {
    let cfg = ExperimentConfig::default();
    let snapshot = serde_json::to_value(&cfg).unwrap();
    assert_eq!(snapshot["train"]["beta"], 0.25);
    assert_eq!(snapshot["train"]["lambda"], 0.8);
    assert_eq!(snapshot["train"]["threshold"], 0.3);
    assert_eq!(snapshot["vq"]["codebook_size"], 1024);
    assert!(cfg.t_grid.contains(&0.3));
    assert_eq!(cfg.t_grid.len(), 11);
    assert_eq!((cfg.codec.image_height, cfg.codec.image_width), (64, 128));
    assert_eq!(load_dataset(&cfg).unwrap().samples.len(), 16);
    assert_eq!(cfg.train.steps, 300);
    assert_eq!(cfg.channel.kind, ChannelKind::Noiseless);
}

fn checkpoint_files(out: &Path) {
    assert!(out.join(TRAIN_LOG).exists());
    assert!(out.join(CHECKPOINT_DIR).is_dir());
}

#[test]
fn sweeps_on_a_trained_model() {
    let out = tempfile::tempdir().unwrap();
    let (mut cfg, model) = tiny_model(out.path());
    checkpoint_files(out.path());
    let log = fs::read_to_string(out.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), cfg.train.steps);
    let reloaded = Model::load(&out.path().join(CHECKPOINT_DIR)).unwrap();
    assert_eq!(reloaded.codebook, model.codebook);

    cfg.t_grid = vec![0.0, 0.3, 1.0];
    let sweep_dir = out.path().join("sweep");
    let points = rd_sweep(&cfg, &model, &sweep_dir).unwrap();
    assert_eq!(points.len(), 3);
    assert!(points[0].bpp >= points[1].bpp && points[1].bpp >= points[2].bpp, "{points:?}");
    assert!(points[0].feature_distortion <= points[2].feature_distortion);
    assert!(points.iter().all(|p| p.bpp > 0.0));
    assert_eq!(points[2].raw_fraction, 0.0);
    for cell in ["T0.00_noiseless", "T0.30_noiseless", "T1.00_noiseless"] {
        for i in 0..4 {
            assert!(sweep_dir.join("recon").join(cell).join(format!("synth_{i:04}.png")).exists());
        }
    }
    let images = fs::read_to_string(sweep_dir.join("rd_images.csv")).unwrap();
    assert_eq!(images.lines().next().unwrap(), "image_id,bpp,vpsnr_db,vssim,perceptual,raw_fraction,T,snr_db");
    assert_eq!(images.lines().count(), 1 + 12);

    // per image: T = 1 is plain VQ and T = 0 never does worse
    let am = cfg.train.am_vq();
    for s in load_dataset(&cfg).unwrap().samples {
        let run = |t| run_pipeline(&model, &s.image, &AmVqConfig { threshold: t, ..am }, cfg.raw_precision, &cfg.channel).unwrap();
        let (lo, hi) = (run(0.0), run(1.0));
        assert_eq!(hi.feature_distortion, hi.plain_vq_distortion);
        assert!(lo.feature_distortion <= hi.feature_distortion);
        let f = model.codec.encode(&s.image).unwrap();
        let plain = quantize_nearest(&f, &model.codebook).unwrap();
        let fused = defuse(&am_vq(&f, &model.codebook, &AmVqConfig { threshold: 1.0, ..am }).unwrap().stream, &model.codebook).unwrap();
        assert_eq!(fused.data, plain.quantized.data);
    }

    // a second sweep in the same process writes identical files
    let again = out.path().join("again");
    assert_eq!(rd_sweep(&cfg, &model, &again).unwrap(), points);
    for name in ["rd_images.csv", "rd_points.csv"] {
        assert_eq!(fs::read(sweep_dir.join(name)).unwrap(), fs::read(again.join(name)).unwrap(), "{name}");
    }

    cfg.t_grid = (0..=10).map(|i| i as f64 / 10.0).collect();
    let rows = threshold_sweep(&cfg, &model, &out.path().join("thr")).unwrap();
    assert_eq!(rows.len(), 11);
    assert!(rows.windows(2).all(|w| w[1].raw_fraction_eq7 <= w[0].raw_fraction_eq7));
    assert!(rows.windows(2).all(|w| w[1].raw_fraction_inv >= w[0].raw_fraction_inv));
    // VPSNR is not guaranteed to fall with T; rises beyond the tolerance are reported
    let rises = vpsnr_rises(&rows);
    for i in 0..rows.len() - 1 {
        assert_eq!(rises.contains(&i), rows[i + 1].vpsnr_eq7 > rows[i].vpsnr_eq7 + VPSNR_RISE_TOLERANCE_DB);
    }
    let text = fs::read_to_string(out.path().join("thr/threshold_sweep.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "T,vpsnr_eq7,bpp_eq7,raw_fraction_eq7,vpsnr_inv,bpp_inv,raw_fraction_inv");

    // the pipeline equals the modules chained by hand, over a noisy channel too
    let x = &load_dataset(&cfg).unwrap().samples[1].image;
    let channel = ChannelConfig { kind: ChannelKind::Rayleigh, snr_db: 12.0, seed: 9, ..Default::default() };
    for ch in [cfg.channel, channel] {
        let am = AmVqConfig { threshold: 0.3, rule: ThresholdRule::QuantizeAtOrBelow, ..am };
        let ev = run_pipeline(&model, x, &am, RawPrecision::Half, &ch).unwrap();
        let f = model.codec.encode(x).unwrap();
        let stream = am_vq(&f, &model.codebook, &am).unwrap().stream;
        let sent = serialize(&stream, RawPrecision::Half).unwrap();
        let bits = transmit_bits(&sent.body_bit_vec(), &ch).unwrap();
        let received = if bits == sent.body_bit_vec() {
            deserialize::<f32>(&Bitstream::from_body_bits(sent.header, &bits)).unwrap()
        } else {
            amvq::channel::deserialize_tolerant(&sent.header, &bits)
        };
        let f_hat = defuse(&received, &model.codebook).unwrap().with_layout(f.height, f.width).unwrap();
        let y = model.codec.decode(&f_hat).unwrap();
        assert_eq!(ev.reconstruction, y);
        assert_eq!(ev.bpp, sent.total_bits() as f64 / (32.0 * 64.0));
        let vs = ViewportSet::default_for(64);
        assert_eq!(vpsnr(x, &ev.reconstruction, &vs).unwrap(), vpsnr(x, &y, &vs).unwrap());
    }
}

#[test]
fn invalid_configs_are_config_errors() {
    let bad = [
        serde_json::json!({"t_grid": []}),
        serde_json::json!({"train": {"lambda": -1.0}}),
        serde_json::json!({"codec": {"image_height": 64, "image_width": 64}}),
        serde_json::json!({"vq": {"codebook_size": 1}}),
    ];
    let dir = tempfile::tempdir().unwrap();
    for (i, v) in bad.iter().enumerate() {
        let path = dir.path().join(format!("{i}.json"));
        fs::write(&path, v.to_string()).unwrap();
        let err = ExperimentConfig::from_json_file(&path).and_then(|c| c.validate()).unwrap_err();
        assert!(err.is_config(), "{v}: {err}");
    }
    let path = dir.path().join("broken.json");
    fs::write(&path, "{ not json").unwrap();
    assert!(ExperimentConfig::from_json_file(&path).unwrap_err().is_config());
}
