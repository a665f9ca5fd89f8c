//! The semantic encoder and decoder.
//!
//! Encoder: 3×3 conv + ReLU stem, then per scale two residual blocks, a
//! stride-2 conv, ReLU, and a batch-normalized conv. Decoder mirrors it:
//! stem conv + ReLU, per scale a residual block, nearest ×2 upsample, conv,
//! batch-norm, ReLU, then a final conv and `tanh`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Kind, Module, Param, ResidualBlock};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    /// Number of stride-2 down/up-sampling stages.
    pub num_scales: usize,
    /// Length of each transmitted feature vector.
    pub feature_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            input_channels: 3,
            base_channels: 16,
            num_scales: 4,
            feature_channels: 64,
            image_height: 64,
            image_width: 64,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 || self.feature_channels == 0 || self.base_channels == 0 || self.input_channels == 0 {
            return Err(Error::Config(format!(
                "num_scales, feature_channels, base_channels and input_channels must be positive: {self:?}"
            )));
        }
        let step = 1usize << self.num_scales;
        if self.image_height == 0
            || self.image_width == 0
            || !self.image_height.is_multiple_of(step)
            || !self.image_width.is_multiple_of(step)
        {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by 2^{} = {step}",
                self.image_height, self.image_width, self.num_scales
            )));
        }
        Ok(())
    }

    pub fn grid_height(&self) -> usize {
        self.image_height >> self.num_scales
    }

    pub fn grid_width(&self) -> usize {
        self.image_width >> self.num_scales
    }

    /// Number of feature vectors per image.
    pub fn positions(&self) -> usize {
        self.grid_height() * self.grid_width()
    }

    /// Width of the feature tensor entering scale `s` (`s == num_scales` is the bottleneck).
    pub fn channels_at(&self, s: usize) -> usize {
        if s >= self.num_scales {
            self.feature_channels
        } else {
            (self.base_channels << s).min(self.feature_channels)
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.input_channels, self.image_height, self.image_width]
    }
}

/// The semantic feature: `M = height·width` vectors of length `dim`, stored row-major by position.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<S> {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> FeatureGrid<S> {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<S>) -> Result<Self> {
        if height * width * dim != data.len() || dim == 0 || height * width == 0 {
            return Err(Error::shape(
                "feature_grid",
                format!("{height}x{width} positions of dim {dim} from {} values", data.len()),
            ));
        }
        Ok(FeatureGrid { height, width, dim, data })
    }

    /// Wraps `M` rows of length `dim` as a `1 × M` grid.
    pub fn from_rows(rows: usize, dim: usize, data: Vec<S>) -> Result<Self> {
        Self::new(1, rows, dim, data)
    }

    /// Same vectors, reinterpreted on an `height × width` layout.
    pub fn with_layout(self, height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, self.dim, self.data)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn vector(&self, m: usize) -> &[S] {
        &self.data[m * self.dim..(m + 1) * self.dim]
    }

    pub fn vectors(&self) -> std::slice::ChunksExact<'_, S> {
        self.data.chunks_exact(self.dim)
    }

    /// From a `[1, L, h, w]` network output.
    pub fn from_nchw(t: &Tensor<S>) -> Result<Self> {
        let [n, l, h, w] = t.dims4("feature_grid")?;
        if n != 1 {
            return Err(Error::shape("feature_grid", format!("batch of {n}, expected one image")));
        }
        let m = h * w;
        let mut data = vec![S::zero(); m * l];
        for c in 0..l {
            for p in 0..m {
                data[p * l + c] = t.data()[c * m + p];
            }
        }
        Self::new(h, w, l, data)
    }

    /// To a `[1, L, h, w]` tensor.
    pub fn to_nchw(&self) -> Tensor<S> {
        let (m, l) = (self.positions(), self.dim);
        Tensor::from_fn(&[1, l, self.height, self.width], |i| {
            let (c, p) = (i / m, i % m);
            self.data[p * l + c]
        })
    }

    /// `[M, L]` matrix view.
    pub fn to_rows(&self) -> Tensor<S> {
        Tensor::new(vec![self.positions(), self.dim], self.data.clone()).expect("grid is non-empty")
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.dim == other.dim
    }

    /// `||self_m − other_m||²` for every position.
    pub fn squared_errors(&self, other: &Self) -> Result<Vec<f64>> {
        if !self.same_layout(other) {
            return Err(Error::shape(
                "feature_grid",
                format!(
                    "{}x{}x{} vs {}x{}x{}",
                    self.height, self.width, self.dim, other.height, other.width, other.dim
                ),
            ));
        }
        Ok(self
            .vectors()
            .zip(other.vectors())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum())
            .collect())
    }

    pub fn cast<T: Scalar>(&self) -> FeatureGrid<T> {
        FeatureGrid {
            height: self.height,
            width: self.width,
            dim: self.dim,
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }
}

/// `[M, L]` rows of a `[1, L, h, w]` graph value.
pub fn nchw_to_rows<S: Scalar>(g: &mut Graph<S>, f: Var) -> Result<Var> {
    let [n, l, h, w] = g.value(f).dims4("nchw_to_rows")?;
    if n != 1 {
        return Err(Error::shape("nchw_to_rows", format!("batch of {n}, expected one image")));
    }
    let flat = g.reshape(f, &[l, h * w])?;
    g.transpose(flat)
}

/// Inverse of [`nchw_to_rows`].
pub fn rows_to_nchw<S: Scalar>(g: &mut Graph<S>, rows: Var, height: usize, width: usize) -> Result<Var> {
    let l = g.shape(rows)[1];
    let t = g.transpose(rows)?;
    g.reshape(t, &[1, l, height, width])
}

#[derive(Clone, Debug)]
pub struct DownBlock<S> {
    pub res: [ResidualBlock<S>; 2],
    pub down: Conv2d<S>,
    pub conv: Conv2d<S>,
    pub bn: BatchNorm2d<S>,
}

#[derive(Clone, Debug)]
pub struct Encoder<S> {
    pub stem: Conv2d<S>,
    pub blocks: Vec<DownBlock<S>>,
}

impl<S: Scalar> Encoder<S> {
    pub fn new<R: rand::Rng>(cfg: &CodecConfig, rng: &mut R) -> Self {
        let same = Conv2dSpec::new(1, 1);
        let stem = Conv2d::new("enc.stem", cfg.input_channels, cfg.channels_at(0), 3, same, rng);
        let blocks = (0..cfg.num_scales)
            .map(|s| {
                let (cin, cout) = (cfg.channels_at(s), cfg.channels_at(s + 1));
                let p = format!("enc.down{s}");
                DownBlock {
                    res: [
                        ResidualBlock::new(&format!("{p}.res0"), cin, rng),
                        ResidualBlock::new(&format!("{p}.res1"), cin, rng),
                    ],
                    down: Conv2d::new(&format!("{p}.stride"), cin, cout, 3, Conv2dSpec::new(2, 1), rng),
                    conv: Conv2d::new(&format!("{p}.conv"), cout, cout, 3, same, rng),
                    bn: BatchNorm2d::new(&format!("{p}.bn"), cout),
                }
            })
            .collect();
        Encoder { stem, blocks }
    }

    /// `[1, C, H, W] → [1, L, H/2^s, W/2^s]`.
    pub fn forward(&self, g: &mut Graph<S>, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let h = self.stem.forward(g, x)?;
        let mut h = g.relu(h);
        for b in &self.blocks {
            h = b.res[0].forward(g, h, ctx)?;
            h = b.res[1].forward(g, h, ctx)?;
            h = b.down.forward(g, h)?;
            h = g.relu(h);
            h = b.conv.forward(g, h)?;
            h = b.bn.forward(g, h, ctx)?;
        }
        Ok(h)
    }
}

impl<S: Scalar> Module<S> for Encoder<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>, Kind)) {
        self.stem.visit(f);
        for b in &self.blocks {
            b.res[0].visit(f);
            b.res[1].visit(f);
            b.down.visit(f);
            b.conv.visit(f);
            b.bn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>, Kind)) {
        self.stem.visit_mut(f);
        for b in &mut self.blocks {
            let [r0, r1] = &mut b.res;
            r0.visit_mut(f);
            r1.visit_mut(f);
            b.down.visit_mut(f);
            b.conv.visit_mut(f);
            b.bn.visit_mut(f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct UpBlock<S> {
    pub res: ResidualBlock<S>,
    pub conv: Conv2d<S>,
    pub bn: BatchNorm2d<S>,
}

#[derive(Clone, Debug)]
pub struct Decoder<S> {
    pub stem: Conv2d<S>,
    /// Deepest scale first.
    pub blocks: Vec<UpBlock<S>>,
    pub head: Conv2d<S>,
}

impl<S: Scalar> Decoder<S> {
    pub fn new<R: rand::Rng>(cfg: &CodecConfig, rng: &mut R) -> Self {
        let same = Conv2dSpec::new(1, 1);
        let bottleneck = cfg.channels_at(cfg.num_scales);
        let stem = Conv2d::new("dec.stem", cfg.feature_channels, bottleneck, 3, same, rng);
        let blocks = (0..cfg.num_scales)
            .rev()
            .map(|s| {
                let (cin, cout) = (cfg.channels_at(s + 1), cfg.channels_at(s));
                let p = format!("dec.up{s}");
                UpBlock {
                    res: ResidualBlock::new(&format!("{p}.res"), cin, rng),
                    conv: Conv2d::new(&format!("{p}.conv"), cin, cout, 3, same, rng),
                    bn: BatchNorm2d::new(&format!("{p}.bn"), cout),
                }
            })
            .collect();
        let head = Conv2d::new("dec.head", cfg.channels_at(0), cfg.input_channels, 3, same, rng);
        Decoder { stem, blocks, head }
    }

    /// `[1, L, h, w] → [1, C, h·2^s, w·2^s]`, values in `[-1, 1]`.
    pub fn forward(&self, g: &mut Graph<S>, f: Var, ctx: &mut Ctx) -> Result<Var> {
        let h = self.stem.forward(g, f)?;
        let mut h = g.relu(h);
        for b in &self.blocks {
            h = b.res.forward(g, h, ctx)?;
            h = g.upsample2x(h)?;
            h = b.conv.forward(g, h)?;
            h = b.bn.forward(g, h, ctx)?;
            h = g.relu(h);
        }
        let out = self.head.forward(g, h)?;
        Ok(g.tanh(out))
    }
}

impl<S: Scalar> Module<S> for Decoder<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>, Kind)) {
        self.stem.visit(f);
        for b in &self.blocks {
            b.res.visit(f);
            b.conv.visit(f);
            b.bn.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>, Kind)) {
        self.stem.visit_mut(f);
        for b in &mut self.blocks {
            b.res.visit_mut(f);
            b.conv.visit_mut(f);
            b.bn.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

/// Encoder and decoder for one configuration.
#[derive(Clone, Debug)]
pub struct Codec<S> {
    pub config: CodecConfig,
    pub encoder: Encoder<S>,
    pub decoder: Decoder<S>,
}

pub const CHECKPOINT_STEM: &str = "codec";

impl<S: Scalar> Codec<S> {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config, &mut rng);
        let decoder = Decoder::new(&config, &mut rng);
        Ok(Codec { config, encoder, decoder })
    }

    pub(crate) fn check_image(&self, x: &Tensor<S>) -> Result<()> {
        if x.shape() != self.config.image_shape() {
            return Err(Error::shape(
                "encode",
                format!("image {:?}, codec expects {:?}", x.shape(), self.config.image_shape()),
            ));
        }
        Ok(())
    }

    /// Inference-mode encoding of a `[C, H, W]` image in `[-1, 1]`.
    pub fn encode(&self, x: &Tensor<S>) -> Result<FeatureGrid<S>> {
        self.check_image(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone().reshape(&batched(x.shape()))?);
        let f = self.encoder.forward(&mut g, xv, &mut Ctx::eval())?;
        FeatureGrid::from_nchw(g.value(f))
    }

    /// Inference-mode reconstruction `[C, H, W]` from a feature grid.
    pub fn decode(&self, f: &FeatureGrid<S>) -> Result<Tensor<S>> {
        let cfg = &self.config;
        if (f.height, f.width, f.dim) != (cfg.grid_height(), cfg.grid_width(), cfg.feature_channels) {
            return Err(Error::shape(
                "decode",
                format!(
                    "grid {}x{}x{}, codec expects {}x{}x{}",
                    f.height,
                    f.width,
                    f.dim,
                    cfg.grid_height(),
                    cfg.grid_width(),
                    cfg.feature_channels
                ),
            ));
        }
        let mut g = Graph::new();
        let fv = g.constant(f.to_nchw());
        let y = self.decoder.forward(&mut g, fv, &mut Ctx::eval())?;
        g.value(y).clone().reshape(&cfg.image_shape())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config, "scalar": S::NAME });
        checkpoint::save(dir, CHECKPOINT_STEM, self, meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index = checkpoint::read_index(dir, CHECKPOINT_STEM)?;
        let config: CodecConfig = serde_json::from_value(
            index.meta.get("config").cloned().ok_or_else(|| Error::Format("checkpoint lacks config".into()))?,
        )?;
        let mut codec = Codec::new(config, 0)?;
        checkpoint::load_into(dir, CHECKPOINT_STEM, &mut codec)?;
        Ok(codec)
    }
}

impl<S: Scalar> Module<S> for Codec<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>, Kind)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>, Kind)) {
        self.encoder.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

pub(crate) fn batched(shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(1);
    s.extend_from_slice(shape);
    s
}
