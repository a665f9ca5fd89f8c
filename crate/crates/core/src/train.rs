//! Reconstruction + adversarial training of the codec and codebook.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amvq::{feature_map, threshold_fuse, AmVqConfig, GradientPooling, Symbol, ThresholdRule, DEFAULT_THRESHOLD};
use crate::channel::bitstream::{body_bits, header_for, RawPrecision, HEADER_BITS};
use crate::codec::{batched, nchw_to_rows, rows_to_nchw, Codec, CodecConfig, FeatureGrid};
use crate::error::{Error, Result};
use crate::nn::{apply_batch_stats, BatchNorm2d, Conv2d, Ctx, Kind, Module, Param};
use crate::optim::{Adam, ParamGrads};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Graph, Tensor, Var};
use crate::vq::{quantize_nearest, straight_through, vq_loss_graph, Codebook, UpdateMode, VqConfig, DEFAULT_BETA};

pub const DEFAULT_LAMBDA: f64 = 0.8;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const CODEBOOK_STEM: &str = "codebook";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta: f64,
    pub lambda: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub threshold: f64,
    pub invert_threshold: bool,
    pub gradient_pooling: GradientPooling,
    pub gan_enabled: bool,
    pub gan_start_step: usize,
    pub discriminator_channels: usize,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: DEFAULT_BETA,
            lambda: DEFAULT_LAMBDA,
            lr_generator: 1e-4,
            lr_discriminator: 4e-4,
            steps: 300,
            batch_size: 1,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            invert_threshold: false,
            gradient_pooling: GradientPooling::Signed,
            gan_enabled: true,
            gan_start_step: 100,
            discriminator_channels: 16,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr_generator", self.lr_generator)?;
        positive("lr_discriminator", self.lr_discriminator)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.discriminator_channels == 0 {
            return Err(Error::Config("batch_size and discriminator_channels must be positive".into()));
        }
        self.am_vq().validate()
    }

    pub fn am_vq(&self) -> AmVqConfig {
        AmVqConfig {
            beta: self.beta,
            threshold: self.threshold,
            rule: ThresholdRule::from_inverted(self.invert_threshold),
            pooling: self.gradient_pooling,
        }
    }

    pub fn gan_active(&self, step: usize) -> bool {
        self.gan_enabled && step >= self.gan_start_step
    }
}

/// PatchGAN: a spatial map of real/fake logits.
#[derive(Clone, Debug)]
pub struct Discriminator<S> {
    pub stem: Conv2d<S>,
    pub groups: Vec<(Conv2d<S>, BatchNorm2d<S>)>,
    pub head: Conv2d<S>,
}

impl<S: Scalar> Discriminator<S> {
    pub fn new<R: rand::Rng>(in_channels: usize, base: usize, rng: &mut R) -> Self {
        let down = Conv2dSpec::new(2, 1);
        let same = Conv2dSpec::new(1, 1);
        let stem = Conv2d::new("disc.stem", in_channels, base, 4, down, rng);
        let widths = [(base, base * 2, 4, down), (base * 2, base * 4, 4, down), (base * 4, base * 4, 3, same)];
        let groups = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, k, spec))| {
                let name = format!("disc.group{i}");
                (Conv2d::new(&format!("{name}.conv"), cin, cout, k, spec, rng), BatchNorm2d::new(&format!("{name}.bn"), cout))
            })
            .collect();
        let head = Conv2d::new("disc.head", base * 4, 1, 3, same, rng);
        Discriminator { stem, groups, head }
    }

    /// `[1, C, H, W] → [1, 1, H/8, W/8]` logits.
    pub fn forward(&self, g: &mut Graph<S>, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let h = self.stem.forward(g, x)?;
        let mut h = g.leaky_relu(h, LEAKY_SLOPE);
        for (conv, bn) in &self.groups {
            h = conv.forward(g, h)?;
            h = bn.forward(g, h, ctx)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        self.head.forward(g, h)
    }
}

impl<S: Scalar> Module<S> for Discriminator<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>, Kind)) {
        self.stem.visit(f);
        for (c, b) in &self.groups {
            c.visit(f);
            b.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>, Kind)) {
        self.stem.visit_mut(f);
        for (c, b) in &mut self.groups {
            c.visit_mut(f);
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

/// Graph handles of the reconstruction objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct RecTerms {
    pub total: Var,
    pub distortion: Var,
    pub codebook: Var,
    pub commitment: Var,
}

/// `||x − x̂||² + Σ_m ||sg[f_m] − z_k||² + β·||sg[z_k] − f_m||²`.
/// `features` and `codewords` are `[M, L]` rows.
pub fn rec_loss<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    x_hat: Var,
    features: Var,
    codewords: Var,
    beta: f64,
) -> Result<RecTerms> {
    let d = g.sub(x, x_hat)?;
    let distortion = g.squared_l2(d);
    let (vq, codebook, commitment) = vq_loss_graph(g, features, codewords, beta)?;
    let total = g.add(distortion, vq)?;
    Ok(RecTerms { total, distortion, codebook, commitment })
}

/// Discriminator and non-saturating generator BCE losses, each a mean over
/// patches. `x_hat` is detached inside the discriminator loss.
pub fn gan_loss<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    x_hat: Var,
    disc: &Discriminator<S>,
    ctx: &mut Ctx,
) -> Result<(Var, Var)> {
    let real = disc.forward(g, x, ctx)?;
    let fake_detached = g.stop_gradient(x_hat);
    let fake = disc.forward(g, fake_detached, ctx)?;
    let real_loss = g.bce_with_logits(real, 1.0);
    let fake_loss = g.bce_with_logits(fake, 0.0);
    let disc_loss = g.add(real_loss, fake_loss)?;
    let fake_for_gen = disc.forward(g, x_hat, ctx)?;
    let gen_loss = g.bce_with_logits(fake_for_gen, 1.0);
    Ok((disc_loss, gen_loss))
}

/// Generator objective `rec + λ·gen_gan`.
pub fn total_objective<S: Scalar>(g: &mut Graph<S>, rec: Var, gen_gan: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let weighted = g.scale(gen_gan, lambda);
    g.add(rec, weighted)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub rec: f64,
    pub vq: f64,
    pub commit: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub raw_fraction: f64,
    pub bpp: f64,
    pub mse: f64,
    pub total: f64,
}

/// Codec, codebook and discriminator with their optimizers.
pub struct Trainer<S> {
    pub config: TrainConfig,
    pub vq: VqConfig,
    pub codec: Codec<S>,
    pub codebook: Option<Codebook<S>>,
    pub disc: Discriminator<S>,
    adam_codec: Adam,
    adam_codebook: Adam,
    adam_disc: Adam,
    step: usize,
}

struct Forward<S> {
    x_hat: Tensor<S>,
    features: FeatureGrid<S>,
    indices: Vec<usize>,
}

fn seeded(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

impl<S: Scalar> Trainer<S> {
    pub fn new(codec_config: CodecConfig, config: TrainConfig, vq: VqConfig) -> Result<Self> {
        config.validate()?;
        vq.validate()?;
        let codec = Codec::new(codec_config, config.seed)?;
        let disc = Discriminator::new(codec.config.input_channels, config.discriminator_channels, &mut seeded(config.seed, 1));
        let codebook_lr = match vq.update {
            UpdateMode::LossGradient { lr } => lr,
            UpdateMode::Ema { .. } => 0.0,
        };
        Ok(Trainer {
            config,
            vq,
            codec,
            codebook: None,
            disc,
            adam_codec: Adam::new(config.lr_generator),
            adam_codebook: Adam::new(codebook_lr),
            adam_disc: Adam::new(config.lr_discriminator),
            step: 0,
        })
    }

    /// Resumes from a saved codec and codebook.
    pub fn with_state(mut self, codec: Codec<S>, codebook: Codebook<S>) -> Result<Self> {
        if codebook.dim() != codec.config.feature_channels {
            return Err(Error::Config("codebook dimension differs from the codec feature width".into()));
        }
        self.codec = codec;
        self.codebook = Some(codebook);
        Ok(self)
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn codebook(&self) -> Result<&Codebook<S>> {
        self.codebook.as_ref().ok_or_else(|| Error::Invalid("codebook not initialized; run a training step first".into()))
    }

    fn init_codebook(&mut self, batch: &[Tensor<S>]) -> Result<()> {
        if self.codebook.is_some() {
            return Ok(());
        }
        let features = batch
            .iter()
            .map(|x| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone().reshape(&batched(x.shape()))?);
                let f = self.codec.encoder.forward(&mut g, xv, &mut Ctx::train())?;
                FeatureGrid::from_nchw(g.value(f))
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&FeatureGrid<S>> = features.iter().collect();
        self.codebook = Some(Codebook::kmeans_plus_plus(&refs, self.vq.codebook_size, &mut seeded(self.config.seed, 2))?);
        Ok(())
    }

    /// One generator update followed (when the adversarial term is active)
    /// by one discriminator update.
    pub fn train_step(&mut self, batch: &[Tensor<S>]) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty training batch".into()));
        }
        for x in batch {
            self.codec.check_image(x)?;
        }
        self.init_codebook(batch)?;
        let gan = self.config.gan_active(self.step);
        let n = batch.len() as f64;
        let mut log = StepLog {
            step: self.step,
            rec: 0.0,
            vq: 0.0,
            commit: 0.0,
            gan_g: 0.0,
            gan_d: 0.0,
            raw_fraction: 0.0,
            bpp: 0.0,
            mse: 0.0,
            total: 0.0,
        };
        let mut grads = ParamGrads::new();
        let mut stats = Vec::new();
        let mut forwards = Vec::with_capacity(batch.len());
        for x in batch {
            let (fw, terms) = self.generator_pass(x, gan, &mut grads, &mut stats)?;
            for (acc, v) in [
                (&mut log.rec, terms[0]),
                (&mut log.vq, terms[1]),
                (&mut log.commit, terms[2]),
                (&mut log.gan_g, terms[3]),
                (&mut log.raw_fraction, terms[4]),
                (&mut log.bpp, terms[5]),
                (&mut log.mse, terms[6]),
                (&mut log.total, terms[7]),
            ] {
                *acc += v / n;
            }
            forwards.push(fw);
        }
        grads.scale(1.0 / n);
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!("step {}: generator gradient", self.step)));
        }
        self.adam_codec.step(&mut self.codec, &grads);
        apply_batch_stats(&mut self.codec, &stats);
        let cb = self.codebook.as_mut().expect("initialized above");
        match self.vq.update {
            UpdateMode::LossGradient { .. } => self.adam_codebook.step(cb, &grads),
            UpdateMode::Ema { .. } => {
                let pairs: Vec<(&FeatureGrid<S>, &[usize])> =
                    forwards.iter().map(|f| (&f.features, f.indices.as_slice())).collect();
                cb.update(&pairs, self.vq.update)?;
            }
        }
        if gan {
            log.gan_d = self.discriminator_step(batch, &forwards)?;
        }
        self.step += 1;
        Ok(log)
    }

    /// Forward and backward for one image. Returns the per-image log terms
    /// `[rec, vq, commit, gan_g, raw_fraction, bpp, mse, total]`.
    fn generator_pass(
        &self,
        x: &Tensor<S>,
        gan: bool,
        grads: &mut ParamGrads,
        stats: &mut Vec<(String, crate::tensor::BatchStats)>,
    ) -> Result<(Forward<S>, [f64; 8])> {
        let cfg = &self.codec.config;
        let cb = self.codebook()?;
        let am = self.config.am_vq();
        let mut g = Graph::new();
        let mut ctx = Ctx::train();
        let xv = g.constant(x.clone().reshape(&batched(x.shape()))?);
        let f = self.codec.encoder.forward(&mut g, xv, &mut ctx)?;
        let grid = FeatureGrid::from_nchw(g.value(f))?;
        let result = quantize_nearest(&grid, cb)?;
        let map = feature_map(&grid, &result, &am)?;
        let stream = threshold_fuse(&grid, &result, &map, am.threshold, am.rule, cb.k())?;
        let mut hybrid = Vec::with_capacity(grid.data.len());
        for (s, v) in stream.symbols.iter().zip(grid.vectors()) {
            match s {
                Symbol::Index(k) => hybrid.extend_from_slice(cb.vector(*k as usize)),
                Symbol::Raw(_) => hybrid.extend_from_slice(v),
            }
        }
        let rows = nchw_to_rows(&mut g, f)?;
        let table = cb.graph_param(&mut g);
        let z = g.gather_rows(table, &result.indices)?;
        let hybrid = g.constant(Tensor::new(vec![grid.positions(), grid.dim], hybrid)?);
        let st = straight_through(&mut g, rows, hybrid)?;
        let fin = rows_to_nchw(&mut g, st, grid.height, grid.width)?;
        let x_hat = self.codec.decoder.forward(&mut g, fin, &mut ctx)?;
        let rec = rec_loss(&mut g, xv, x_hat, rows, z, self.config.beta)?;
        let (total, gan_g) = if gan {
            let logits = self.disc.forward(&mut g, x_hat, &mut Ctx::train())?;
            let gen = g.bce_with_logits(logits, 1.0);
            (total_objective(&mut g, rec.total, gen, self.config.lambda)?, Some(gen))
        } else {
            (rec.total, None)
        };
        let value = |v: Var| g.value(v).item().map(|s| s.as_f64());
        let header = header_for(&stream, RawPrecision::Half)?;
        let bits = HEADER_BITS + body_bits(&stream, &header);
        let terms = [
            value(rec.total)?,
            value(rec.codebook)?,
            value(rec.commitment)?,
            gan_g.map(value).transpose()?.unwrap_or(0.0),
            stream.raw_fraction(),
            bits as f64 / (cfg.image_height * cfg.image_width) as f64,
            value(rec.distortion)? / x.len() as f64,
            value(total)?,
        ];
        if terms.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!(
                "step {}: rec={} vq={} commit={} gan_g={} total={}",
                self.step, terms[0], terms[1], terms[2], terms[3], terms[7]
            )));
        }
        let x_hat_value = g.value(x_hat).clone().reshape(x.shape())?;
        stats.append(&mut ctx.stats);
        grads.accumulate(&g.backward(total)?);
        Ok((Forward { x_hat: x_hat_value, features: grid, indices: result.indices }, terms))
    }

    fn discriminator_step(&mut self, batch: &[Tensor<S>], forwards: &[Forward<S>]) -> Result<f64> {
        let mut grads = ParamGrads::new();
        let mut stats = Vec::new();
        let mut loss_sum = 0.0;
        for (x, fw) in batch.iter().zip(forwards) {
            let (loss, mut s) = disc_pass(&self.disc, x, &fw.x_hat, &mut grads)?;
            loss_sum += loss;
            stats.append(&mut s);
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        if !grads.all_finite() || !loss_sum.is_finite() {
            return Err(Error::NonFinite(format!("step {}: discriminator loss {}", self.step, loss_sum / n)));
        }
        self.adam_disc.step(&mut self.disc, &grads);
        apply_batch_stats(&mut self.disc, &stats);
        Ok(loss_sum / n)
    }

    /// Runs `steps` training steps over `images`, cycling through them in
    /// order `batch_size` at a time. Each step's log is written as one JSON
    /// line to `log`; checkpoints go to `checkpoint_dir` when given.
    pub fn fit(
        &mut self,
        images: &[Tensor<S>],
        steps: usize,
        mut log: Option<&mut dyn Write>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<Vec<StepLog>> {
        if images.is_empty() {
            return Err(Error::Invalid("no training images".into()));
        }
        let bs = self.config.batch_size.min(images.len());
        let mut logs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let start = (self.step * bs) % images.len();
            let batch: Vec<Tensor<S>> = (0..bs).map(|i| images[(start + i) % images.len()].clone()).collect();
            let entry = self.train_step(&batch)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &entry)?;
                w.write_all(b"\n")?;
            }
            logs.push(entry);
            let every = self.config.checkpoint_every;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && self.step.is_multiple_of(every) {
                    self.save(dir)?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save(dir)?;
        }
        Ok(logs)
    }

    /// Writes the codec checkpoint and the codebook files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.codec.save(dir)?;
        self.codebook()?.save(dir, CODEBOOK_STEM)
    }
}

/// Discriminator loss and gradients for one real/fake pair.
fn disc_pass<S: Scalar>(
    disc: &Discriminator<S>,
    x: &Tensor<S>,
    x_hat: &Tensor<S>,
    grads: &mut ParamGrads,
) -> Result<(f64, Vec<(String, crate::tensor::BatchStats)>)> {
    let mut g = Graph::new();
    let mut ctx = Ctx::train();
    let xv = g.constant(x.clone().reshape(&batched(x.shape()))?);
    let fake = g.constant(x_hat.clone().reshape(&batched(x_hat.shape()))?);
    let real = disc.forward(&mut g, xv, &mut ctx)?;
    let fake = disc.forward(&mut g, fake, &mut ctx)?;
    let real_loss = g.bce_with_logits(real, 1.0);
    let fake_loss = g.bce_with_logits(fake, 0.0);
    let loss = g.add(real_loss, fake_loss)?;
    let value = g.value(loss).item()?.as_f64();
    grads.accumulate(&g.backward(loss)?);
    Ok((value, ctx.stats))
}

/// A single discriminator update on a fixed pair, with the generator frozen.
pub fn discriminator_update<S: Scalar>(
    disc: &mut Discriminator<S>,
    adam: &mut Adam,
    x: &Tensor<S>,
    x_hat: &Tensor<S>,
) -> Result<f64> {
    let mut grads = ParamGrads::new();
    let (loss, stats) = disc_pass(disc, x, x_hat, &mut grads)?;
    adam.step(disc, &grads);
    apply_batch_stats(disc, &stats);
    Ok(loss)
}

/// Discriminator loss on a fixed pair without updating anything.
pub fn discriminator_loss<S: Scalar>(disc: &Discriminator<S>, x: &Tensor<S>, x_hat: &Tensor<S>) -> Result<f64> {
    disc_pass(disc, x, x_hat, &mut ParamGrads::new()).map(|(l, _)| l)
}
