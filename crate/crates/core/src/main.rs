use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use amvq::amvq::{am_vq, defuse};
use amvq::channel::{bits_per_pixel, deserialize, serialize, Bitstream};
use amvq::harness::{
    load_dataset, load_image, rd_sweep, run_pipeline, save_png, threshold_sweep, train_model, ExperimentConfig, Model,
    CHECKPOINT_DIR,
};
use amvq::metrics::{perceptual_loss, vpsnr, vssim, write_rows, MetricRow, PerceptualExtractor, ViewportSet};
use amvq::{Error, Result};

#[derive(Parser)]
#[command(name = "amvq", version, about = "Activation-map guided VQ image transmission experiments")]
struct Cli {
    /// Experiment configuration (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for training, data synthesis and the channel.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory holding a trained codec and codebook.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Send raw features where the activation map is at or below T instead of above it.
    #[arg(long, global = true)]
    invert_threshold: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the codec and codebook on the configured dataset.
    Train,
    /// Encode one image into a bitstream file.
    Encode {
        #[arg(long)]
        input: PathBuf,
    },
    /// Decode a bitstream file into a PNG.
    Decode {
        #[arg(long)]
        input: PathBuf,
    },
    /// Encode, send over the configured channel, decode and score one image.
    Transmit {
        #[arg(long)]
        input: PathBuf,
    },
    /// Rate-distortion sweep over the T and SNR grids.
    RdSweep {
        /// Train a model first when no checkpoint is given.
        #[arg(long)]
        train: bool,
    },
    /// VPSNR, bpp and raw fraction against T under both threshold conventions.
    ThresholdSweep {
        #[arg(long)]
        train: bool,
    },
    /// Score a distorted panorama against a reference.
    Metrics {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        distorted: PathBuf,
    },
    /// Write the synthetic dataset as PNG files.
    Synth,
}

#[derive(Serialize)]
struct QualityRow {
    image_id: String,
    vpsnr_db: f64,
    vssim: f64,
    perceptual: f64,
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(std::io::BufWriter::new(f), rows)
}

fn extractor(cfg: &ExperimentConfig) -> Result<PerceptualExtractor> {
    match &cfg.perceptual_weights {
        Some(dir) => PerceptualExtractor::load(dir),
        None => Ok(PerceptualExtractor::seeded()),
    }
}

fn model_for(cli_checkpoint: Option<&Path>, train_first: bool, cfg: &ExperimentConfig, out: &Path) -> Result<Model> {
    match cli_checkpoint {
        Some(dir) => Model::load(dir),
        None if train_first => train_model(cfg, out),
        None => Err(Error::Config("a --checkpoint is required (or pass --train)".into())),
    }
}

fn require_checkpoint(dir: Option<&Path>) -> Result<Model> {
    Model::load(dir.ok_or_else(|| Error::Config("a --checkpoint is required".into()))?)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if cli.invert_threshold {
        cfg.train.invert_threshold = true;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let checkpoint = cli.checkpoint.as_deref();

    match cli.command {
        Command::Train => {
            train_model(&cfg, &out)?;
            log::info!("checkpoint written to {}", out.join(CHECKPOINT_DIR).display());
        }
        Command::Encode { input } => {
            let model = require_checkpoint(checkpoint)?;
            let c = &model.codec.config;
            let x = load_image(&input, c.image_height, c.image_width)?;
            let f = model.codec.encode(&x)?;
            let tx = am_vq(&f, &model.codebook, &cfg.train.am_vq())?;
            let bits = serialize(&tx.stream, cfg.raw_precision)?;
            let path = out.join(format!("{}.amvq", stem(&input)));
            fs::write(&path, bits.to_bytes()).map_err(|e| Error::io(&path, e))?;
            log::info!(
                "{}: {} bits, {:.4} bpp, raw fraction {:.3}",
                path.display(),
                bits.total_bits(),
                bits_per_pixel(&bits, c.image_height, c.image_width)?,
                tx.stream.raw_fraction()
            );
        }
        Command::Decode { input } => {
            let model = require_checkpoint(checkpoint)?;
            let bytes = fs::read(&input).map_err(|e| Error::io(&input, e))?;
            let stream = deserialize::<f32>(&Bitstream::from_bytes(&bytes)?)?;
            let c = &model.codec.config;
            let f = defuse(&stream, &model.codebook)?.with_layout(c.grid_height(), c.grid_width())?;
            save_png(&model.codec.decode(&f)?, &out.join(format!("{}.png", stem(&input))))?;
        }
        Command::Transmit { input } => {
            let model = require_checkpoint(checkpoint)?;
            let c = &model.codec.config;
            let x = load_image(&input, c.image_height, c.image_width)?;
            let ev = run_pipeline(&model, &x, &cfg.train.am_vq(), cfg.raw_precision, &cfg.channel)?;
            let viewports = ViewportSet::default_for(c.image_width);
            let row = MetricRow {
                image_id: stem(&input),
                bpp: ev.bpp,
                vpsnr_db: vpsnr(&x, &ev.reconstruction, &viewports)?,
                vssim: vssim(&x, &ev.reconstruction, &viewports)?,
                perceptual: perceptual_loss(&x, &ev.reconstruction, &extractor(&cfg)?)?,
                raw_fraction: ev.raw_fraction,
                t: cfg.train.threshold,
                snr_db: (cfg.channel.kind != amvq::channel::ChannelKind::Noiseless).then_some(cfg.channel.snr_db),
            };
            save_png(&ev.reconstruction, &out.join(format!("{}_recon.png", stem(&input))))?;
            write_csv(&out.join("transmit.csv"), &[row])?;
            log::info!("{} bit errors", ev.bit_errors);
        }
        Command::RdSweep { train } => {
            let model = model_for(checkpoint, train, &cfg, &out)?;
            let points = rd_sweep(&cfg, &model, &out)?;
            log::info!("{} rate-distortion points", points.len());
        }
        Command::ThresholdSweep { train } => {
            let model = model_for(checkpoint, train, &cfg, &out)?;
            threshold_sweep(&cfg, &model, &out)?;
        }
        Command::Metrics { reference, distorted } => {
            let (h, w) = (cfg.codec.image_height, cfg.codec.image_width);
            let x = load_image(&reference, h, w)?;
            let y = load_image(&distorted, h, w)?;
            let viewports = ViewportSet::default_for(w);
            let row = QualityRow {
                image_id: stem(&distorted),
                vpsnr_db: vpsnr(&x, &y, &viewports)?,
                vssim: vssim(&x, &y, &viewports)?,
                perceptual: perceptual_loss(&x, &y, &extractor(&cfg)?)?,
            };
            write_csv(&out.join("metrics.csv"), &[row])?;
        }
        Command::Synth => {
            for s in load_dataset(&cfg)?.samples {
                save_png(&s.image, &out.join(format!("{}.png", s.id)))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
