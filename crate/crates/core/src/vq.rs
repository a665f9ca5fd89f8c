//! Codebook, nearest-codeword quantization, the VQ/commitment loss and the
//! straight-through estimator.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::FeatureGrid;
use crate::error::{Error, Result};
use crate::nn::{Kind, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::{io, Graph, Tensor, Var};

pub const DEFAULT_CODEBOOK_SIZE: usize = 1024;
pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;
pub const CODEBOOK_PARAM: &str = "codebook";
const FILE_VERSION: u32 = 1;

/// `K` shared codewords of length `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<S> {
    vectors: Param<S>,
    ema: Option<EmaState>,
}

#[derive(Clone, Debug, PartialEq)]
struct EmaState {
    counts: Vec<f64>,
    sums: Vec<f64>,
}

/// How codewords follow the features assigned to them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum UpdateMode {
    /// Gradient step on `Σ ||sg[f_m] − z_k||²`.
    LossGradient { lr: f64 },
    /// Exponential moving average of the assigned features.
    Ema { decay: f64 },
}

impl Default for UpdateMode {
    fn default() -> Self {
        UpdateMode::LossGradient { lr: 1e-3 }
    }
}

/// Codebook size and how it is trained; the vector length is the codec's feature width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub update: UpdateMode,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig { codebook_size: DEFAULT_CODEBOOK_SIZE, update: UpdateMode::default() }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 || self.codebook_size > u32::MAX as usize {
            return Err(Error::Config(format!("codebook size {} outside [2, 2^32)", self.codebook_size)));
        }
        match self.update {
            UpdateMode::LossGradient { lr } if !(lr > 0.0 && lr.is_finite()) => {
                Err(Error::Config(format!("codebook learning rate must be positive, got {lr}")))
            }
            UpdateMode::Ema { decay } if !(0.0..=1.0).contains(&decay) => {
                Err(Error::Config(format!("EMA decay {decay} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CodebookMeta {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "L_dim")]
    dim: usize,
    version: u32,
}

impl<S: Scalar> Codebook<S> {
    pub fn new(k: usize, dim: usize, vectors: Vec<S>) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("codebook needs at least 2 codewords, got {k}")));
        }
        let t = Tensor::new(vec![k, dim], vectors)?;
        if !t.all_finite() {
            return Err(Error::NonFinite("codebook entry".into()));
        }
        Ok(Codebook { vectors: Param::new(CODEBOOK_PARAM, t), ema: None })
    }

    pub fn from_tensor(t: Tensor<S>) -> Result<Self> {
        let &[k, dim] = t.shape() else {
            return Err(Error::shape("codebook", format!("expected [K, L], got {:?}", t.shape())));
        };
        Self::new(k, dim, t.into_data())
    }

    pub fn k(&self) -> usize {
        self.vectors.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.value.shape()[1]
    }

    pub fn vector(&self, k: usize) -> &[S] {
        let d = self.dim();
        &self.vectors.value.data()[k * d..(k + 1) * d]
    }

    pub fn as_tensor(&self) -> &Tensor<S> {
        &self.vectors.value
    }

    /// Registers the codebook as a trainable graph leaf.
    pub fn graph_param(&self, g: &mut Graph<S>) -> Var {
        g.param(&self.vectors.name, &self.vectors.value)
    }

    /// k-means++ seeding from the rows of `features`. Once every distinct
    /// feature has been chosen, remaining codewords are random features plus
    /// small Gaussian jitter so they stay distinct.
    pub fn kmeans_plus_plus<R: Rng>(features: &[&FeatureGrid<S>], k: usize, rng: &mut R) -> Result<Self> {
        let dim = features.first().map(|f| f.dim).ok_or_else(|| Error::Invalid("no features to seed from".into()))?;
        if features.iter().any(|f| f.dim != dim) {
            return Err(Error::shape("kmeans_plus_plus", "feature grids differ in vector length"));
        }
        let points: Vec<Vec<f64>> = features
            .iter()
            .flat_map(|f| f.vectors().map(|v| v.iter().map(|x| x.as_f64()).collect()))
            .collect();
        let n = points.len();
        let spread = {
            let mean_sq = points.iter().flatten().map(|v| v * v).sum::<f64>() / (n * dim) as f64;
            mean_sq.sqrt().max(1e-6)
        };
        let jitter = Normal::new(0.0, 1e-2 * spread).expect("valid jitter scale");
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        centers.push(points[rng.random_range(0..n)].clone());
        let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
        while centers.len() < k {
            let total: f64 = nearest.iter().sum();
            let next = if total > 0.0 {
                let mut target = rng.random_range(0.0..total);
                let mut pick = n - 1;
                for (i, &d) in nearest.iter().enumerate() {
                    if target < d {
                        pick = i;
                        break;
                    }
                    target -= d;
                }
                points[pick].clone()
            } else {
                let base = &points[rng.random_range(0..n)];
                base.iter().map(|v| v + jitter.sample(rng)).collect()
            };
            for (d, p) in nearest.iter_mut().zip(&points) {
                *d = d.min(sq_dist(p, &next));
            }
            centers.push(next);
        }
        let flat = centers.into_iter().flatten().map(S::lit).collect();
        Self::new(k, dim, flat)
    }

    /// Applies one update from a batch of `(features, assigned indices)`.
    /// Codewords with no assigned features are left untouched.
    pub fn update(&mut self, batch: &[(&FeatureGrid<S>, &[usize])], mode: UpdateMode) -> Result<()> {
        let (k, dim) = (self.k(), self.dim());
        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0f64; k * dim];
        for (f, idx) in batch {
            if f.dim != dim || idx.len() != f.positions() {
                return Err(Error::shape(
                    "codebook_update",
                    format!("{} indices for {} positions of dim {}", idx.len(), f.positions(), f.dim),
                ));
            }
            for (v, &i) in f.vectors().zip(idx.iter()) {
                if i >= k {
                    return Err(Error::Invalid(format!("index {i} out of range for {k} codewords")));
                }
                counts[i] += 1;
                for (s, x) in sums[i * dim..(i + 1) * dim].iter_mut().zip(v) {
                    *s += x.as_f64();
                }
            }
        }
        match mode {
            UpdateMode::LossGradient { lr } => {
                // ∂/∂z_k Σ_{m→k} ||f_m − z_k||² = 2 (n_k z_k − Σ f_m)
                let data = self.vectors.value.data_mut();
                for i in (0..k).filter(|&i| counts[i] > 0) {
                    for d in 0..dim {
                        let z = data[i * dim + d].as_f64();
                        let grad = 2.0 * (counts[i] as f64 * z - sums[i * dim + d]);
                        data[i * dim + d] = S::lit(z - lr * grad);
                    }
                }
            }
            UpdateMode::Ema { decay } => {
                if !(0.0..=1.0).contains(&decay) {
                    return Err(Error::Config(format!("EMA decay {decay} outside [0, 1]")));
                }
                let current: Vec<f64> = self.vectors.value.data().iter().map(|v| v.as_f64()).collect();
                let ema = self.ema.get_or_insert_with(|| EmaState { counts: vec![1.0; k], sums: current });
                let data = self.vectors.value.data_mut();
                for i in (0..k).filter(|&i| counts[i] > 0) {
                    ema.counts[i] = decay * ema.counts[i] + (1.0 - decay) * counts[i] as f64;
                    for d in 0..dim {
                        let j = i * dim + d;
                        ema.sums[j] = decay * ema.sums[j] + (1.0 - decay) * sums[j];
                        data[j] = S::lit(ema.sums[j] / ema.counts[i]);
                    }
                }
            }
        }
        Ok(())
    }

    /// Canonical byte form shared by transmitter and receiver.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        io::encode(&self.vectors.value)
    }

    /// Writes `<stem>.tensor` (the `K × L` container) and `<stem>.json` (`{K, L_dim, version}`).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensor_path = dir.join(format!("{stem}.tensor"));
        std::fs::write(&tensor_path, self.to_bytes()?).map_err(|e| Error::io(&tensor_path, e))?;
        let meta = CodebookMeta { k: self.k(), dim: self.dim(), version: FILE_VERSION };
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&json_path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let json_path = dir.join(format!("{stem}.json"));
        let meta: CodebookMeta =
            serde_json::from_slice(&std::fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?)?;
        if meta.version != FILE_VERSION {
            return Err(Error::Format(format!("codebook version {}", meta.version)));
        }
        let t: Tensor<S> = io::load(&dir.join(format!("{stem}.tensor")))?;
        if t.shape() != [meta.k, meta.dim] {
            return Err(Error::Format(format!("codebook tensor {:?} disagrees with metadata", t.shape())));
        }
        Self::from_tensor(t)
    }
}

impl<S: Scalar> Module<S> for Codebook<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>, Kind)) {
        f(&self.vectors, Kind::Param)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>, Kind)) {
        f(&mut self.vectors, Kind::Param)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Outcome of nearest-codeword quantization of one feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult<S> {
    pub indices: Vec<usize>,
    /// `quantized.vector(m) == codebook.vector(indices[m])`.
    pub quantized: FeatureGrid<S>,
    /// Value of `Σ ||sg[f_m] − z_k||²`.
    pub vq_loss: f64,
    /// Value of `Σ ||sg[z_k] − f_m||²` (numerically equal to `vq_loss`; they differ in gradient).
    pub commitment_loss: f64,
    source: u64,
}

impl<S: Scalar> QuantizationResult<S> {
    /// Whether this result was computed from exactly these features.
    pub fn matches(&self, f: &FeatureGrid<S>) -> bool {
        self.source == fingerprint(f)
    }
}

pub(crate) fn fingerprint<S: Scalar>(f: &FeatureGrid<S>) -> u64 {
    let mut h = DefaultHasher::new();
    (f.height, f.width, f.dim).hash(&mut h);
    for v in &f.data {
        v.as_f64().to_bits().hash(&mut h);
    }
    h.finish()
}

/// Index of the nearest codeword by squared Euclidean distance (same argmin
/// as Euclidean); ties go to the lowest index.
pub fn nearest_codeword<S: Scalar>(v: &[S], cb: &Codebook<S>) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (k, z) in cb.as_tensor().data().chunks_exact(cb.dim()).enumerate() {
        let d: f64 = v.iter().zip(z).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

pub fn quantize_nearest<S: Scalar>(f: &FeatureGrid<S>, cb: &Codebook<S>) -> Result<QuantizationResult<S>> {
    if f.dim != cb.dim() {
        return Err(Error::shape(
            "quantize_nearest",
            format!("features of dim {} vs codebook dim {}", f.dim, cb.dim()),
        ));
    }
    let mut indices = Vec::with_capacity(f.positions());
    let mut data = Vec::with_capacity(f.data.len());
    let mut total = 0.0;
    for v in f.vectors() {
        let (k, d) = nearest_codeword(v, cb);
        indices.push(k);
        data.extend_from_slice(cb.vector(k));
        total += d;
    }
    let quantized = FeatureGrid::new(f.height, f.width, f.dim, data)?;
    Ok(QuantizationResult { indices, quantized, vq_loss: total, commitment_loss: total, source: fingerprint(f) })
}

/// `Σ_m ||sg[f_m] − z_k||² + β·||sg[z_k] − f_m||²` evaluated on values.
pub fn vq_loss<S: Scalar>(f: &FeatureGrid<S>, result: &QuantizationResult<S>, beta: f64) -> Result<f64> {
    let d: f64 = f.squared_errors(&result.quantized)?.iter().sum();
    Ok(d + beta * d)
}

/// Graph form of the VQ loss over `[M, L]` rows: returns `(total, codebook term, commitment term)`.
///
/// Gradient reaches `features` only through the β-weighted commitment term,
/// and `codewords` only through the first term.
pub fn vq_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    features: Var,
    codewords: Var,
    beta: f64,
) -> Result<(Var, Var, Var)> {
    let f_stop = g.stop_gradient(features);
    let diff = g.sub(f_stop, codewords)?;
    let codebook_term = g.squared_l2(diff);
    let z_stop = g.stop_gradient(codewords);
    let diff = g.sub(z_stop, features)?;
    let commit_term = g.squared_l2(diff);
    let weighted = g.scale(commit_term, beta);
    let total = g.add(codebook_term, weighted)?;
    Ok((total, codebook_term, commit_term))
}

/// `f + sg[q − f]`: forward value exactly `q`, identity gradient into `f`.
pub fn straight_through<S: Scalar>(g: &mut Graph<S>, features: Var, quantized: Var) -> Result<Var> {
    g.straight_through(features, quantized)
}
