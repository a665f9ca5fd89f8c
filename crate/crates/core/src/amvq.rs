//! Activation-map guided quantization: a per-position distortion map built
//! from the gradient of the VQ loss, thresholded to choose between sending a
//! codebook index or the raw feature vector.

use serde::{Deserialize, Serialize};

use crate::codec::FeatureGrid;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};
use crate::vq::{quantize_nearest, vq_loss_graph, Codebook, QuantizationResult, DEFAULT_BETA};

pub const DEFAULT_THRESHOLD: f64 = 0.3;

/// How per-channel weights pool the gradient grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientPooling {
    #[default]
    Signed,
    Absolute,
}

/// Which side of the threshold is quantized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdRule {
    /// INDEX where `map ≤ T`, RAW otherwise.
    #[default]
    QuantizeAtOrBelow,
    /// INDEX where `map > T`, RAW otherwise.
    QuantizeAbove,
}

impl ThresholdRule {
    pub fn from_inverted(inverted: bool) -> Self {
        if inverted {
            ThresholdRule::QuantizeAbove
        } else {
            ThresholdRule::QuantizeAtOrBelow
        }
    }

    pub fn quantizes(self, value: f64, threshold: f64) -> bool {
        match self {
            ThresholdRule::QuantizeAtOrBelow => value <= threshold,
            ThresholdRule::QuantizeAbove => value > threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmVqConfig {
    pub beta: f64,
    pub threshold: f64,
    pub rule: ThresholdRule,
    pub pooling: GradientPooling,
}

impl Default for AmVqConfig {
    fn default() -> Self {
        AmVqConfig {
            beta: DEFAULT_BETA,
            threshold: DEFAULT_THRESHOLD,
            rule: ThresholdRule::default(),
            pooling: GradientPooling::default(),
        }
    }
}

impl AmVqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be finite and non-negative, got {}", self.beta)));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Config(format!("threshold must be non-negative, got {}", self.threshold)));
        }
        Ok(())
    }
}

fn check_fresh<S: Scalar>(f: &FeatureGrid<S>, result: &QuantizationResult<S>) -> Result<()> {
    if !result.matches(f) {
        return Err(Error::Invalid("quantization result was computed from different features".into()));
    }
    Ok(())
}

fn transpose_rows<S: Scalar>(rows: &Tensor<S>) -> Tensor<S> {
    let (m, l) = (rows.shape()[0], rows.shape()[1]);
    Tensor::from_fn(&[l, m], |i| rows.data()[(i % m) * l + i / m])
}

/// `∂ℓ_VQ/∂f` as an `[L, M]` grid, by reverse-mode differentiation.
pub fn vq_loss_gradient<S: Scalar>(f: &FeatureGrid<S>, result: &QuantizationResult<S>, beta: f64) -> Result<Tensor<S>> {
    check_fresh(f, result)?;
    let mut g = Graph::new();
    let fv = g.leaf(f.to_rows(), true);
    let z = g.constant(result.quantized.to_rows());
    let (total, _, _) = vq_loss_graph(&mut g, fv, z, beta)?;
    let grad = g.backward(total)?.get(fv);
    Ok(transpose_rows(&grad))
}

/// Closed form of [`vq_loss_gradient`]: `2β(f_m − z_k)`.
pub fn vq_loss_gradient_analytic<S: Scalar>(
    f: &FeatureGrid<S>,
    result: &QuantizationResult<S>,
    beta: f64,
) -> Result<Tensor<S>> {
    check_fresh(f, result)?;
    let rows = Tensor::new(
        vec![f.positions(), f.dim],
        f.data
            .iter()
            .zip(&result.quantized.data)
            .map(|(a, z)| S::lit(2.0 * beta * (a.as_f64() - z.as_f64())))
            .collect(),
    )?;
    Ok(transpose_rows(&rows))
}

/// Global average pooling over positions: `α_l = mean_m grad[l][m]`.
pub fn channel_weights<S: Scalar>(grad: &Tensor<S>, pooling: GradientPooling) -> Result<Vec<f64>> {
    let &[l, m] = grad.shape() else {
        return Err(Error::shape("channel_weights", format!("expected [L, M], got {:?}", grad.shape())));
    };
    Ok((0..l)
        .map(|c| {
            let row = &grad.data()[c * m..(c + 1) * m];
            let sum: f64 = match pooling {
                GradientPooling::Signed => row.iter().map(|v| v.as_f64()).sum(),
                GradientPooling::Absolute => row.iter().map(|v| v.as_f64().abs()).sum(),
            };
            sum / m as f64
        })
        .collect())
}

/// Per-position non-negative distortion saliency.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub height: usize,
    pub width: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl ActivationMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("activation_map", format!("{} values for {height}x{width}", values.len())));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invalid("activation map values must be finite and non-negative".into()));
        }
        Ok(ActivationMap { height, width, values, normalized: false })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Divides by the maximum (if positive) and marks the map normalized.
    pub fn normalize(mut self) -> Self {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            for v in &mut self.values {
                *v /= max;
            }
        }
        self.normalized = true;
        self
    }
}

/// `L_m = max(0, Σ_l α_l f_m[l])`.
pub fn activation_map<S: Scalar>(f: &FeatureGrid<S>, alpha: &[f64]) -> Result<ActivationMap> {
    if alpha.len() != f.dim {
        return Err(Error::shape("activation_map", format!("{} weights for dim {}", alpha.len(), f.dim)));
    }
    let values = f
        .vectors()
        .map(|v| v.iter().zip(alpha).map(|(x, a)| a * x.as_f64()).sum::<f64>().max(0.0))
        .collect();
    ActivationMap::new(f.height, f.width, values)
}

pub fn normalize_map(map: ActivationMap) -> ActivationMap {
    map.normalize()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Symbol<S> {
    Index(u32),
    Raw(Vec<S>),
}

impl<S> Symbol<S> {
    pub fn is_index(&self) -> bool {
        matches!(self, Symbol::Index(_))
    }
}

/// One symbol per position plus the header fields needed to interpret them.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridSymbolStream<S> {
    pub dim: usize,
    pub codebook_size: usize,
    pub symbols: Vec<Symbol<S>>,
}

impl<S: Scalar> HybridSymbolStream<S> {
    pub fn new(dim: usize, codebook_size: usize, symbols: Vec<Symbol<S>>) -> Result<Self> {
        let s = HybridSymbolStream { dim, codebook_size, symbols };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.symbols.is_empty() || self.dim == 0 {
            return Err(Error::Invalid("stream needs at least one position and a non-zero dimension".into()));
        }
        for (m, s) in self.symbols.iter().enumerate() {
            match s {
                Symbol::Index(k) if *k as usize >= self.codebook_size => {
                    return Err(Error::Invalid(format!(
                        "position {m}: index {k} out of range for {} codewords",
                        self.codebook_size
                    )))
                }
                Symbol::Raw(v) if v.len() != self.dim => {
                    return Err(Error::shape("hybrid_stream", format!("position {m}: raw length {}", v.len())))
                }
                Symbol::Raw(v) if v.iter().any(|x| !x.is_finite()) => {
                    return Err(Error::NonFinite(format!("raw payload at position {m}")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.symbols.len()
    }

    pub fn raw_count(&self) -> usize {
        self.symbols.iter().filter(|s| !s.is_index()).count()
    }

    pub fn raw_fraction(&self) -> f64 {
        self.raw_count() as f64 / self.positions() as f64
    }
}

/// Chooses INDEX or RAW per position from a normalized map.
pub fn threshold_fuse<S: Scalar>(
    f: &FeatureGrid<S>,
    result: &QuantizationResult<S>,
    map: &ActivationMap,
    threshold: f64,
    rule: ThresholdRule,
    codebook_size: usize,
) -> Result<HybridSymbolStream<S>> {
    if !map.is_normalized() {
        return Err(Error::Invalid("threshold_fuse needs a normalized activation map".into()));
    }
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!("threshold must be non-negative, got {threshold}")));
    }
    check_fresh(f, result)?;
    if map.values().len() != f.positions() {
        return Err(Error::shape("threshold_fuse", format!("{} map values for {} positions", map.values().len(), f.positions())));
    }
    let symbols = map
        .values()
        .iter()
        .zip(f.vectors())
        .zip(&result.indices)
        .map(|((&a, v), &k)| if rule.quantizes(a, threshold) { Symbol::Index(k as u32) } else { Symbol::Raw(v.to_vec()) })
        .collect();
    HybridSymbolStream::new(f.dim, codebook_size, symbols)
}

/// Rebuilds features: codewords for INDEX entries, payloads for RAW entries.
/// The result is a `1 × M` grid; use [`FeatureGrid::with_layout`] to restore the spatial shape.
pub fn defuse<S: Scalar>(stream: &HybridSymbolStream<S>, cb: &Codebook<S>) -> Result<FeatureGrid<S>> {
    if stream.codebook_size != cb.k() || stream.dim != cb.dim() {
        return Err(Error::shape(
            "defuse",
            format!(
                "stream K={} L={} vs codebook K={} L={}",
                stream.codebook_size,
                stream.dim,
                cb.k(),
                cb.dim()
            ),
        ));
    }
    let mut data = Vec::with_capacity(stream.positions() * stream.dim);
    for s in &stream.symbols {
        match s {
            Symbol::Index(k) if (*k as usize) < cb.k() => data.extend_from_slice(cb.vector(*k as usize)),
            Symbol::Index(k) => return Err(Error::Invalid(format!("index {k} out of range for {} codewords", cb.k()))),
            Symbol::Raw(v) if v.len() == stream.dim => data.extend_from_slice(v),
            Symbol::Raw(v) => return Err(Error::shape("defuse", format!("raw length {}", v.len()))),
        }
    }
    FeatureGrid::from_rows(stream.positions(), stream.dim, data)
}

/// Everything the transmitter derives from one feature grid.
#[derive(Clone, Debug)]
pub struct AmVqOutput<S> {
    pub result: QuantizationResult<S>,
    pub map: ActivationMap,
    pub stream: HybridSymbolStream<S>,
}

/// Quantize, build and normalize the map, then fuse.
pub fn am_vq<S: Scalar>(f: &FeatureGrid<S>, cb: &Codebook<S>, cfg: &AmVqConfig) -> Result<AmVqOutput<S>> {
    cfg.validate()?;
    let result = quantize_nearest(f, cb)?;
    let map = feature_map(f, &result, cfg)?;
    let stream = threshold_fuse(f, &result, &map, cfg.threshold, cfg.rule, cb.k())?;
    Ok(AmVqOutput { result, map, stream })
}

/// The normalized map for `f`, via the analytic gradient.
pub fn feature_map<S: Scalar>(f: &FeatureGrid<S>, result: &QuantizationResult<S>, cfg: &AmVqConfig) -> Result<ActivationMap> {
    let grad = vq_loss_gradient_analytic(f, result, cfg.beta)?;
    let alpha = channel_weights(&grad, cfg.pooling)?;
    Ok(activation_map(f, &alpha)?.normalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[&[f64]]) -> FeatureGrid<f64> {
        FeatureGrid::from_rows(r.len(), r[0].len(), r.concat()).unwrap()
    }

    #[test]
    fn gradient_of_single_position() {
        let f = rows(&[&[1.0, 0.0]]);
        let cb = Codebook::new(2, 2, vec![0.0, 0.0, 4.0, 4.0]).unwrap();
        let r = quantize_nearest(&f, &cb).unwrap();
        let g = vq_loss_gradient(&f, &r, 0.25).unwrap();
        assert_eq!(g.shape(), &[2, 1]);
        assert_eq!(g.data(), &[0.5, 0.0]);
        assert_eq!(vq_loss_gradient_analytic(&f, &r, 0.25).unwrap(), g);
    }

    #[test]
    fn stale_result_is_rejected() {
        let f = rows(&[&[1.0, 0.0]]);
        let cb = Codebook::new(2, 2, vec![0.0, 0.0, 4.0, 4.0]).unwrap();
        let r = quantize_nearest(&f, &cb).unwrap();
        let other = rows(&[&[1.0, 0.5]]);
        assert!(vq_loss_gradient(&other, &r, 0.25).is_err());
        assert!(vq_loss_gradient_analytic(&other, &r, 0.25).is_err());
    }

    #[test]
    fn pooling() {
        let g = Tensor::new(vec![1, 2], vec![0.2, 0.4]).unwrap();
        assert!((channel_weights(&g, GradientPooling::Signed).unwrap()[0] - 0.3).abs() < 1e-15);
        let g = Tensor::new(vec![2, 2], vec![-1.0, 1.0, 3.0, 3.0]).unwrap();
        assert_eq!(channel_weights(&g, GradientPooling::Signed).unwrap(), vec![0.0, 3.0]);
        assert_eq!(channel_weights(&g, GradientPooling::Absolute).unwrap(), vec![1.0, 3.0]);
    }

    #[test]
    fn map_values_and_relu() {
        let f = rows(&[&[0.5, 0.2], &[0.2, 0.5]]);
        let map = activation_map(&f, &[1.0, -1.0]).unwrap();
        assert!((map.values()[0] - 0.3).abs() < 1e-15);
        assert_eq!(map.values()[1], 0.0);
        assert!(!map.is_normalized());
        assert!(activation_map(&f, &[0.0, 0.0]).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization() {
        let m = ActivationMap::new(1, 3, vec![0.0, 2.0, 4.0]).unwrap().normalize();
        assert_eq!(m.values(), &[0.0, 0.5, 1.0]);
        assert_eq!(m.clone().normalize(), m);
        let z = ActivationMap::new(1, 2, vec![0.0, 0.0]).unwrap().normalize();
        assert!(z.is_normalized());
        assert_eq!(z.values(), &[0.0, 0.0]);
    }

    fn fixture() -> (FeatureGrid<f64>, Codebook<f64>, QuantizationResult<f64>) {
        let f = rows(&[&[0.1, 0.0], &[0.9, 0.4], &[2.0, -1.0]]);
        let cb = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let r = quantize_nearest(&f, &cb).unwrap();
        (f, cb, r)
    }

    #[test]
    fn tags_follow_the_threshold() {
        let (f, _, r) = fixture();
        let map = ActivationMap::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap().normalize();
        let s = threshold_fuse(&f, &r, &map, 0.3, ThresholdRule::QuantizeAtOrBelow, 2).unwrap();
        let tags: Vec<bool> = s.symbols.iter().map(Symbol::is_index).collect();
        assert_eq!(tags, vec![true, false, false]);
        let s = threshold_fuse(&f, &r, &map, 0.3, ThresholdRule::QuantizeAbove, 2).unwrap();
        let tags: Vec<bool> = s.symbols.iter().map(Symbol::is_index).collect();
        assert_eq!(tags, vec![false, true, true]);
        let s = threshold_fuse(&f, &r, &map, 1.0, ThresholdRule::QuantizeAtOrBelow, 2).unwrap();
        assert_eq!(s.raw_count(), 0);
    }

    #[test]
    fn unnormalized_map_is_rejected() {
        let (f, _, r) = fixture();
        let map = ActivationMap::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert!(threshold_fuse(&f, &r, &map, 0.3, ThresholdRule::default(), 2).is_err());
    }

    #[test]
    fn defuse_all_index_and_all_raw() {
        let (f, cb, r) = fixture();
        let zeros = ActivationMap::new(1, 3, vec![0.0; 3]).unwrap().normalize();
        let s = threshold_fuse(&f, &r, &zeros, 0.0, ThresholdRule::QuantizeAtOrBelow, 2).unwrap();
        assert_eq!(defuse(&s, &cb).unwrap(), r.quantized);
        let ones = ActivationMap::new(1, 3, vec![1.0; 3]).unwrap().normalize();
        let s = threshold_fuse(&f, &r, &ones, 0.5, ThresholdRule::QuantizeAtOrBelow, 2).unwrap();
        assert_eq!(defuse(&s, &cb).unwrap(), f);
    }

    #[test]
    fn mixed_stream_error_counts_only_index_positions() {
        let (f, cb, r) = fixture();
        let map = ActivationMap::new(1, 3, vec![0.0, 0.2, 1.0]).unwrap().normalize();
        let s = threshold_fuse(&f, &r, &map, 0.3, ThresholdRule::QuantizeAtOrBelow, 2).unwrap();
        let back = defuse(&s, &cb).unwrap();
        let err: f64 = back.squared_errors(&f).unwrap().iter().sum();
        let plain = r.quantized.squared_errors(&f).unwrap();
        assert!((err - (plain[0] + plain[1])).abs() < 1e-15);
    }

    #[test]
    fn defuse_rejects_out_of_range_index() {
        let cb = Codebook::new(2, 1, vec![0.0, 1.0]).unwrap();
        let s = HybridSymbolStream { dim: 1, codebook_size: 2, symbols: vec![Symbol::Index(5)] };
        assert!(s.validate().is_err());
        assert!(defuse(&s, &cb).is_err());
    }
}
