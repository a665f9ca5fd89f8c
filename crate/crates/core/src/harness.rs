//! Experiment orchestration: datasets, the end-to-end transmit pipeline and
//! rate-distortion / threshold sweeps.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amvq::{am_vq, defuse, AmVqConfig, ThresholdRule};
use crate::channel::{bits_per_pixel, transmit, ChannelConfig, ChannelKind, RawPrecision};
use crate::codec::{Codec, CodecConfig};
use crate::error::{Error, Result};
use crate::metrics::{perceptual_loss, vpsnr, vssim, write_rows, MetricRow, PerceptualExtractor, ViewportSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{Trainer, TrainConfig, CODEBOOK_STEM};
use crate::vq::{quantize_nearest, Codebook, VqConfig};

pub const TRAIN_LOG: &str = "train_log.ndjson";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    /// `count` procedural panoramas with seeds `seed, seed + 1, …`.
    Synthetic { count: usize, seed: u64 },
    /// A directory of PNG/PPM equirectangular images.
    Directory { path: PathBuf },
}

fn default_t_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub codec: CodecConfig,
    pub train: TrainConfig,
    pub channel: ChannelConfig,
    pub vq: VqConfig,
    pub raw_precision: RawPrecision,
    pub t_grid: Vec<f64>,
    pub snr_grid: Vec<f64>,
    pub dataset: DatasetSpec,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Optional external perceptual-extractor checkpoint directory.
    pub perceptual_weights: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            codec: CodecConfig { image_height: 64, image_width: 128, ..CodecConfig::default() },
            train: TrainConfig::default(),
            channel: ChannelConfig::default(),
            vq: VqConfig::default(),
            raw_precision: RawPrecision::Half,
            t_grid: default_t_grid(),
            snr_grid: vec![ChannelConfig::default().snr_db],
            dataset: DatasetSpec::Synthetic { count: 16, seed: 0 },
            output_dir: PathBuf::from("out"),
            seed: 0,
            perceptual_weights: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.train.validate()?;
        self.channel.validate()?;
        self.vq.validate()?;
        if self.t_grid.is_empty() || self.snr_grid.is_empty() {
            return Err(Error::Config("t_grid and snr_grid must be non-empty".into()));
        }
        if self.t_grid.iter().any(|t| !(*t >= 0.0)) || self.snr_grid.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("thresholds must be non-negative and SNRs finite".into()));
        }
        if self.codec.image_width != 2 * self.codec.image_height {
            return Err(Error::Config("panoramas need image_width == 2 * image_height".into()));
        }
        if let DatasetSpec::Synthetic { count: 0, .. } = self.dataset {
            return Err(Error::Config("synthetic dataset needs at least one image".into()));
        }
        Ok(())
    }

    /// Applies the master seed to the training run and the channel.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.channel.seed = seed;
        if let DatasetSpec::Synthetic { seed: s, .. } = &mut self.dataset {
            *s = seed;
        }
        self
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn great_circle(lon_a: f64, lat_a: f64, lon_b: f64, lat_b: f64) -> f64 {
    let c = lat_a.sin() * lat_b.sin() + lat_a.cos() * lat_b.cos() * (lon_a - lon_b).cos();
    c.clamp(-1.0, 1.0).acos()
}

struct Disc {
    lon: f64,
    lat: f64,
    radius: f64,
    color: [f64; 3],
}

const SHAPE_SOFTNESS: f64 = 0.06;

/// A `[3, H, 2H]` procedural panorama in `[-1, 1]`: a horizon gradient,
/// soft discs and band-limited texture. Every longitude-dependent term is
/// even about the ±180° meridian and no disc reaches it, so the two edge
/// columns coincide.
pub fn synth_panorama(seed: u64, height: usize) -> Result<Tensor<f32>> {
    if height < 32 {
        return Err(Error::Config(format!("synthetic panoramas need H ≥ 32, got {height}")));
    }
    let width = 2 * height;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { [0, 1, 2].map(|_| rng.random_range(-0.8..0.8)) };
    let sky_top = color(&mut rng);
    let sky_low = color(&mut rng);
    let ground = color(&mut rng);
    let wave: Vec<(f64, f64)> = (1..=3).map(|k| (k as f64, rng.random_range(-0.12..0.12))).collect();
    let texture: Vec<(f64, f64, f64, [f64; 3])> = (0..6)
        .map(|_| {
            let k = rng.random_range(1..=6) as f64;
            let j = rng.random_range(1..=6) as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            (k, j, phase, [0, 1, 2].map(|_| rng.random_range(-0.08..0.08)))
        })
        .collect();
    let seam: Vec<f64> = (0..=64).map(|i| -PI / 2.0 + PI * i as f64 / 64.0).collect();
    let mut discs = Vec::new();
    while discs.len() < 5 {
        let d = Disc {
            lon: rng.random_range(-PI..PI),
            lat: rng.random_range(-1.0..1.0),
            radius: rng.random_range(0.2..0.6),
            color: color(&mut rng),
        };
        let clearance = seam.iter().map(|&lat| great_circle(d.lon, d.lat, PI, lat)).fold(f64::INFINITY, f64::min);
        if clearance > d.radius + SHAPE_SOFTNESS + 0.05 {
            discs.push(d);
        }
    }
    let mut data = vec![0f32; 3 * height * width];
    for r in 0..height {
        let lat = PI / 2.0 - (r as f64 + 0.5) / height as f64 * PI;
        for c in 0..width {
            let lon = (c as f64 + 0.5) / width as f64 * 2.0 * PI - PI;
            let horizon: f64 = wave.iter().map(|(k, a)| a * (k * (lon - PI)).cos()).sum();
            let sky_t = smoothstep(0.0, 1.2, lat);
            let ground_w = 1.0 - smoothstep(horizon - 0.08, horizon + 0.08, lat);
            let mut px = [0.0; 3];
            for ch in 0..3 {
                let sky = sky_low[ch] + (sky_top[ch] - sky_low[ch]) * sky_t;
                px[ch] = sky + (ground[ch] - sky) * ground_w;
                for (k, j, phase, amp) in &texture {
                    px[ch] += amp[ch] * (k * (lon - PI)).cos() * (j * lat + phase).cos();
                }
            }
            for d in &discs {
                let dist = great_circle(lon, lat, d.lon, d.lat);
                let w = 1.0 - smoothstep(d.radius - SHAPE_SOFTNESS, d.radius, dist);
                for ch in 0..3 {
                    px[ch] += (d.color[ch] - px[ch]) * w;
                }
            }
            for ch in 0..3 {
                data[(ch * height + r) * width + c] = px[ch].clamp(-1.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(vec![3, height, width], data)
}

/// An image loaded for the experiment, tagged with its source name.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// One message per skipped file.
    pub warnings: Vec<String>,
}

/// `[3, H, W]` in `[-1, 1]` from an RGB image, resized to `height × width`.
pub fn image_to_tensor(img: &image::DynamicImage, height: usize, width: usize) -> Result<Tensor<f32>> {
    let rgb = img.to_rgb8();
    let rgb = if rgb.dimensions() == (width as u32, height as u32) {
        rgb
    } else {
        image::imageops::resize(&rgb, width as u32, height as u32, FilterType::Triangle)
    };
    let mut data = vec![0f32; 3 * height * width];
    for (x, y, p) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * height + y as usize) * width + x as usize] = p[ch] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, height, width], data)
}

pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    image_to_tensor(&img, height, width)
}

/// Writes a `[3, H, W]` image in `[-1, 1]` as 8-bit PNG.
pub fn save_png<S: Scalar>(t: &Tensor<S>, path: &Path) -> Result<()> {
    let &[3, h, w] = t.shape() else {
        return Err(Error::shape("save_png", format!("expected [3, H, W], got {:?}", t.shape())));
    };
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| {
            let v = t.data()[(ch * h + y as usize) * w + x as usize].as_f64();
            ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    });
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path)?;
    Ok(())
}

/// PNG/PPM files of `dir` in lexicographic order; images that are not 2:1
/// are skipped with a warning.
pub fn ingest_dataset(dir: &Path, height: usize, width: usize) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
        })
        .collect();
    paths.sort();
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for p in paths {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let (w, h) = image::image_dimensions(&p)?;
        if w != 2 * h {
            let msg = format!("skipping {name}: {w}x{h} is not a 2:1 equirectangular image");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let id = p.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or(name);
        samples.push(Sample { id, image: load_image(&p, height, width)? });
    }
    if samples.is_empty() {
        return Err(Error::Invalid(format!("no usable images in {}", dir.display())));
    }
    log::info!("loaded {} images from {}", samples.len(), dir.display());
    Ok(Dataset { samples, warnings })
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSpec::Synthetic { count, seed } => {
            let samples = (0..*count as u64)
                .map(|i| {
                    let image = synth_panorama(seed.wrapping_add(i), cfg.codec.image_height)?;
                    let image = if image.shape()[2] == cfg.codec.image_width {
                        image
                    } else {
                        return Err(Error::Config("synthetic panoramas need image_width == 2 * image_height".into()));
                    };
                    Ok(Sample { id: format!("synth_{i:04}"), image })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset { samples, warnings: Vec::new() })
        }
        DatasetSpec::Directory { path } => ingest_dataset(path, cfg.codec.image_height, cfg.codec.image_width),
    }
}

/// A trained codec and its codebook.
pub struct Model {
    pub codec: Codec<f32>,
    pub codebook: Codebook<f32>,
}

impl Model {
    pub fn load(dir: &Path) -> Result<Self> {
        let codec = Codec::load(dir)?;
        let codebook = Codebook::load(dir, CODEBOOK_STEM)?;
        if codebook.dim() != codec.config.feature_channels {
            return Err(Error::Format("codebook and codec feature widths differ".into()));
        }
        Ok(Model { codec, codebook })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.codec.save(dir)?;
        self.codebook.save(dir, CODEBOOK_STEM)
    }
}

/// Trains on the configured dataset, writing the log and the checkpoint
/// under `out`.
pub fn train_model(cfg: &ExperimentConfig, out: &Path) -> Result<Model> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let images: Vec<Tensor<f32>> = data.samples.into_iter().map(|s| s.image).collect();
    let mut trainer = Trainer::<f32>::new(cfg.codec.clone(), cfg.train, cfg.vq)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let ckpt = out.join(CHECKPOINT_DIR);
    trainer.fit(&images, cfg.train.steps, Some(&mut log), Some(&ckpt))?;
    std::io::Write::flush(&mut log).map_err(|e| Error::io(&log_path, e))?;
    let codebook = trainer.codebook()?.clone();
    Ok(Model { codec: trainer.codec, codebook })
}

/// Everything measured for one image through one pipeline cell.
#[derive(Clone, Debug)]
pub struct ImageEval {
    pub reconstruction: Tensor<f32>,
    pub bpp: f64,
    pub raw_fraction: f64,
    /// `Σ ||f̂ − f||²` after transmission.
    pub feature_distortion: f64,
    /// Same with every position quantized.
    pub plain_vq_distortion: f64,
    pub bit_errors: usize,
}

/// encode → quantize → fuse → serialize → channel → deserialize → defuse → decode.
pub fn run_pipeline(
    model: &Model,
    x: &Tensor<f32>,
    am: &AmVqConfig,
    precision: RawPrecision,
    channel: &ChannelConfig,
) -> Result<ImageEval> {
    let cfg = &model.codec.config;
    let f = model.codec.encode(x)?;
    let out = am_vq(&f, &model.codebook, am)?;
    let tx = transmit(&out.stream, precision, channel)?;
    let f_hat = defuse(&tx.received, &model.codebook)?.with_layout(f.height, f.width)?;
    let reconstruction = model.codec.decode(&f_hat)?;
    let plain = quantize_nearest(&f, &model.codebook)?;
    Ok(ImageEval {
        reconstruction,
        bpp: bits_per_pixel(&tx.sent, cfg.image_height, cfg.image_width)?,
        raw_fraction: out.stream.raw_fraction(),
        feature_distortion: f_hat.squared_errors(&f)?.iter().sum(),
        plain_vq_distortion: plain.quantized.squared_errors(&f)?.iter().sum(),
        bit_errors: tx.bit_errors,
    })
}

/// Mean over images of one (T, SNR) sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    #[serde(rename = "T")]
    pub t: f64,
    pub snr_db: Option<f64>,
    pub bpp: f64,
    pub vpsnr_db: f64,
    pub vssim: f64,
    pub perceptual: f64,
    pub raw_fraction: f64,
    pub feature_distortion: f64,
}

fn extractor(cfg: &ExperimentConfig) -> Result<PerceptualExtractor> {
    match &cfg.perceptual_weights {
        Some(dir) => PerceptualExtractor::load(dir),
        None => Ok(PerceptualExtractor::seeded()),
    }
}

fn cell_channel(cfg: &ExperimentConfig, cell: usize, image: usize, snr: f64) -> ChannelConfig {
    let seed = cfg.channel.seed ^ ((cell as u64) << 32 | image as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChannelConfig { snr_db: snr, seed, ..cfg.channel }
}

fn cell_dir_name(t: f64, snr: Option<f64>) -> String {
    match snr {
        Some(s) => format!("T{t:.2}_snr{s:.1}"),
        None => format!("T{t:.2}_noiseless"),
    }
}

/// One row per (T, SNR) cell, plus per-image rows and reconstructions under `out`.
pub fn rd_sweep(cfg: &ExperimentConfig, model: &Model, out: &Path) -> Result<Vec<RdPoint>> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let ext = extractor(cfg)?;
    let viewports = ViewportSet::default_for(cfg.codec.image_width);
    let snrs: Vec<Option<f64>> = if cfg.channel.kind == ChannelKind::Noiseless {
        vec![None]
    } else {
        cfg.snr_grid.iter().copied().map(Some).collect()
    };
    let mut points = Vec::new();
    let mut rows = Vec::new();
    let mut cell = 0;
    for &snr in &snrs {
        for &t in &cfg.t_grid {
            let am = AmVqConfig { threshold: t, ..cfg.train.am_vq() };
            let mut acc = RdPoint { t, snr_db: snr, bpp: 0.0, vpsnr_db: 0.0, vssim: 0.0, perceptual: 0.0, raw_fraction: 0.0, feature_distortion: 0.0 };
            let dir = out.join("recon").join(cell_dir_name(t, snr));
            for (i, s) in data.samples.iter().enumerate() {
                let ch = cell_channel(cfg, cell, i, snr.unwrap_or(cfg.channel.snr_db));
                let ev = run_pipeline(model, &s.image, &am, cfg.raw_precision, &ch)?;
                let row = MetricRow {
                    image_id: s.id.clone(),
                    bpp: ev.bpp,
                    vpsnr_db: vpsnr(&s.image, &ev.reconstruction, &viewports)?,
                    vssim: vssim(&s.image, &ev.reconstruction, &viewports)?,
                    perceptual: perceptual_loss(&s.image, &ev.reconstruction, &ext)?,
                    raw_fraction: ev.raw_fraction,
                    t,
                    snr_db: snr,
                };
                acc.bpp += row.bpp;
                acc.vpsnr_db += row.vpsnr_db;
                acc.vssim += row.vssim;
                acc.perceptual += row.perceptual;
                acc.raw_fraction += row.raw_fraction;
                acc.feature_distortion += ev.feature_distortion;
                save_png(&ev.reconstruction, &dir.join(format!("{}.png", s.id)))?;
                rows.push(row);
            }
            let n = data.samples.len() as f64;
            for v in [&mut acc.bpp, &mut acc.vpsnr_db, &mut acc.vssim, &mut acc.perceptual, &mut acc.raw_fraction, &mut acc.feature_distortion] {
                *v /= n;
            }
            points.push(acc);
            cell += 1;
        }
        check_coverage(points.iter().rev().take(cfg.t_grid.len()).rev().map(|p| (p.t, p.raw_fraction)), cfg.train.am_vq().rule);
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_csv(&out.join("rd_images.csv"), &rows)?;
    write_csv(&out.join("rd_points.csv"), &points)?;
    Ok(points)
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(std::io::BufWriter::new(f), rows)
}

/// Logs a warning if the raw fraction moves the wrong way as T grows.
fn check_coverage(cells: impl Iterator<Item = (f64, f64)>, rule: ThresholdRule) -> bool {
    let mut cells: Vec<(f64, f64)> = cells.collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ok = cells.windows(2).all(|w| match rule {
        ThresholdRule::QuantizeAtOrBelow => w[1].1 <= w[0].1,
        ThresholdRule::QuantizeAbove => w[1].1 >= w[0].1,
    });
    if !ok {
        log::warn!("raw fraction is not monotone in T under {rule:?}");
    }
    ok
}

/// Both threshold conventions at each T, averaged over the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    #[serde(rename = "T")]
    pub t: f64,
    pub vpsnr_eq7: f64,
    pub bpp_eq7: f64,
    pub raw_fraction_eq7: f64,
    pub vpsnr_inv: f64,
    pub bpp_inv: f64,
    pub raw_fraction_inv: f64,
}

/// VPSNR tolerance before a rise with T is reported.
pub const VPSNR_RISE_TOLERANCE_DB: f64 = 0.2;

/// Indices `i` where the quantize-at-or-below VPSNR rises from row `i` to
/// row `i + 1` by more than [`VPSNR_RISE_TOLERANCE_DB`].
pub fn vpsnr_rises(rows: &[ThresholdRow]) -> Vec<usize> {
    (0..rows.len().saturating_sub(1))
        .filter(|&i| rows[i + 1].vpsnr_eq7 > rows[i].vpsnr_eq7 + VPSNR_RISE_TOLERANCE_DB)
        .collect()
}

pub fn threshold_sweep(cfg: &ExperimentConfig, model: &Model, out: &Path) -> Result<Vec<ThresholdRow>> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let viewports = ViewportSet::default_for(cfg.codec.image_width);
    let mut grid = cfg.t_grid.clone();
    grid.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(grid.len());
    for (cell, &t) in grid.iter().enumerate() {
        let measure = |rule: ThresholdRule| -> Result<[f64; 3]> {
            let am = AmVqConfig { threshold: t, rule, ..cfg.train.am_vq() };
            let mut acc = [0.0; 3];
            for (i, s) in data.samples.iter().enumerate() {
                let ch = cell_channel(cfg, cell, i, cfg.channel.snr_db);
                let ev = run_pipeline(model, &s.image, &am, cfg.raw_precision, &ch)?;
                acc[0] += vpsnr(&s.image, &ev.reconstruction, &viewports)?;
                acc[1] += ev.bpp;
                acc[2] += ev.raw_fraction;
            }
            Ok(acc.map(|v| v / data.samples.len() as f64))
        };
        let [vpsnr_eq7, bpp_eq7, raw_fraction_eq7] = measure(ThresholdRule::QuantizeAtOrBelow)?;
        let [vpsnr_inv, bpp_inv, raw_fraction_inv] = measure(ThresholdRule::QuantizeAbove)?;
        rows.push(ThresholdRow { t, vpsnr_eq7, bpp_eq7, raw_fraction_eq7, vpsnr_inv, bpp_inv, raw_fraction_inv });
    }
    check_coverage(rows.iter().map(|r| (r.t, r.raw_fraction_eq7)), ThresholdRule::QuantizeAtOrBelow);
    for i in vpsnr_rises(&rows) {
        let (a, b) = (&rows[i], &rows[i + 1]);
        log::warn!(
            "VPSNR rises from {:.3} dB at T={} to {:.3} dB at T={} under the quantize-at-or-below rule",
            a.vpsnr_eq7,
            a.t,
            b.vpsnr_eq7,
            b.t
        );
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_csv(&out.join("threshold_sweep.csv"), &rows)?;
    Ok(rows)
}
