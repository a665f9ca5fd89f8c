//! Straight-line reverse-mode autodiff.
//!
//! Every operation appends a node to the [`Graph`]; nodes only reference
//! earlier nodes, so insertion order is a topological order and the backward
//! sweep is a single reverse pass. A graph is consumed by [`Graph::backward`].

use crate::error::{Error, Result};
use crate::scalar::{MatRef, Scalar};

use super::conv::{conv2d_backward, conv2d_forward, Conv2dSpec};
use super::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Per-channel batch statistics from a training-mode batch-norm, used by the
/// caller to update running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when only one value per channel).
    pub var: Vec<f64>,
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Shift(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    Upsample2x(Var),
    Relu(Var),
    LeakyRelu(Var, S),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    BceWithLogits { logits: Var, target: S },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S>, train: bool },
    Mean(Var),
    Sum(Var),
    SquaredL2(Var),
    Reshape(Var),
    Transpose(Var),
    GatherRows { table: Var, indices: Vec<usize> },
    StraightThrough(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Logits are clamped to this magnitude inside [`Graph::bce_with_logits`].
pub const LOGIT_CLAMP: f64 = 30.0;

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: Vec<(String, Var)>,
    /// Outputs of each `stop_gradient` call, in call order.
    stopped: Vec<Tensor<S>>,
    /// When set, the k-th `stop_gradient` call returns `pinned[k]` instead of its input.
    pinned: Option<Vec<Tensor<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: Vec::new(), stopped: Vec::new(), pinned: None }
    }

    /// A graph whose `stop_gradient` calls return the given values in order,
    /// i.e. every stopped sub-expression is replaced by a constant. Used by the
    /// finite-difference checker to perturb only the differentiable path.
    pub fn with_pinned_stops(pinned: Vec<Tensor<S>>) -> Self {
        Graph { pinned: Some(pinned), ..Self::new() }
    }

    /// Values produced by `stop_gradient` so far.
    pub fn stopped_values(&self) -> &[Tensor<S>] {
        &self.stopped
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a named trainable tensor; its gradient is retrievable by name.
    /// Later registrations under the same name reuse the first leaf, so
    /// gradients from every use of a parameter accumulate in one place.
    pub fn param(&mut self, name: &str, value: &Tensor<S>) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.push((name.to_owned(), v));
        v
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.value(a).zip_map(self.value(b), op, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let k = S::lit(factor);
        let out = self.value(a).map(|x| x * k);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Var {
        let k = S::lit(shift);
        let out = self.value(a).map(|x| x + k);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Shift(a), rg)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(Error::shape("matmul", format!("expected matrices, got {sa:?} and {sb:?}")));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dimensions differ: {sa:?} × {sb:?}")));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            &mut out,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Output size per spatial axis: `floor((in + 2·pad − kernel)/stride) + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, rg))
    }

    /// Nearest-neighbour ×2 upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("upsample2x")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w * 4);
        for plane in src.chunks(h * w) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![n, c, 2 * h, 2 * w], out)?, Op::Upsample2x(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let k = S::lit(slope);
        let out = self.value(x).map(|v| if v > S::zero() { v } else { v * k });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::LeakyRelu(x, k), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Natural logarithm; non-positive inputs produce non-finite values.
    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.ln());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Log(x), rg)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a constant
    /// label (`0` or `1`), with logits clamped to ±[`LOGIT_CLAMP`].
    ///
    /// Uses the log-sigmoid form so saturated logits stay finite.
    pub fn bce_with_logits(&mut self, logits: Var, target: f64) -> Var {
        let t = target;
        let lim = LOGIT_CLAMP;
        let n = self.value(logits).len() as f64;
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .map(|z| {
                let z = z.as_f64().clamp(-lim, lim);
                -(t * log_sigmoid(z) + (1.0 - t) * log_sigmoid(-z))
            })
            .sum();
        let rg = self.any_grad(&[logits]);
        self.push(Tensor::scalar(S::lit(total / n)), Op::BceWithLogits { logits, target: S::lit(t) }, rg)
    }

    /// Training-mode batch normalization over the N, H, W axes of an NCHW tensor.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let [n, c, h, w] = self.value(x).dims4("batch_norm")?;
        self.check_affine(gamma, beta, c)?;
        let count = n * h * w;
        let plane = h * w;
        let data = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ci in 0..c {
            let vals = (0..n).flat_map(|ni| data[(ni * c + ci) * plane..(ni * c + ci + 1) * plane].iter());
            let m = vals.clone().map(|v| v.as_f64()).sum::<f64>() / count as f64;
            let v = vals.map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / count as f64;
            mean[ci] = m;
            var[ci] = v;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.normalize(x, gamma, beta, &mean, &inv_std, c, plane, true);
        let unbiased = if count > 1 {
            var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect()
        } else {
            var
        };
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let [_, c, h, w] = self.value(x).dims4("batch_norm")?;
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running statistics of length {} for {c} channels", running_mean.len()),
            ));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.normalize(x, gamma, beta, running_mean, &inv_std, c, h * w, false))
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("affine params {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        c: usize,
        plane: usize,
        train: bool,
    ) -> Var {
        let src = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for (i, chunk) in src.data().chunks(plane).enumerate() {
            let ci = i % c;
            for &v in chunk {
                let xh = S::lit((v.as_f64() - mean[ci]) * inv_std[ci]);
                xhat.push(xh);
                out.push(g[ci] * xh + b[ci]);
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape as input");
        let rg = self.any_grad(&[x, gamma, beta]);
        let inv_std = inv_std.iter().map(|&v| S::lit(v)).collect();
        self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = S::lit(t.sum_f64() / t.len() as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(out), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = S::lit(self.value(x).sum_f64());
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(out), Op::Sum(x), rg)
    }

    /// `Σ x²`.
    pub fn squared_l2(&mut self, x: Var) -> Var {
        let out: f64 = self.value(x).data().iter().map(|v| v.as_f64().powi(2)).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(S::lit(out)), Op::SquaredL2(x), rg)
    }

    /// Identity in the forward pass; contributes no gradient to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let k = self.stopped.len();
        let value = match &self.pinned {
            Some(pinned) if k < pinned.len() => pinned[k].clone(),
            _ => self.value(x).clone(),
        };
        self.stopped.push(value.clone());
        self.push(value, Op::Leaf, false)
    }

    /// Takes the value of `forward` and passes gradient unchanged to `x`;
    /// `forward` itself receives none. Same as `x + sg(forward − x)` without
    /// the rounding of the round trip.
    pub fn straight_through(&mut self, x: Var, forward: Var) -> Result<Var> {
        self.value(x).expect_same_shape(self.value(forward), "straight_through")?;
        let value = self.value(forward).clone();
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::StraightThrough(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[r, c] = t.shape() else {
            return Err(Error::shape("transpose", format!("expected a matrix, got {:?}", t.shape())));
        };
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    /// Selects rows of a `[K, L]` table: output `[indices.len(), L]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let &[k, l] = t.shape() else {
            return Err(Error::shape("gather_rows", format!("expected a matrix, got {:?}", t.shape())));
        };
        if let Some(bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {k} rows")));
        }
        if indices.is_empty() {
            return Err(Error::shape("gather_rows", "no rows selected"));
        }
        let mut out = Vec::with_capacity(indices.len() * l);
        for &i in indices {
            out.extend_from_slice(&t.data()[i * l..(i + 1) * l]);
        }
        let rg = self.any_grad(&[table]);
        let value = Tensor::new(vec![indices.len(), l], out)?;
        Ok(self.push(value, Op::GatherRows { table, indices: indices.to_vec() }, rg))
    }

    /// Back-propagates from a one-element `loss`, consuming the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let Graph { nodes, params, .. } = self;
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), S::one()));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            let mut contribs: Vec<(Var, Tensor<S>)> = Vec::new();
            let wants = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(dy);
                    continue;
                }
                Op::Add(a, b) => {
                    contribs.push((*a, dy.clone()));
                    contribs.push((*b, dy.clone()));
                }
                Op::Sub(a, b) => {
                    contribs.push((*a, dy.clone()));
                    contribs.push((*b, dy.map(|v| -v)));
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        contribs.push((*a, dy.zip_map(val(*b), "mul", |g, y| g * y)?));
                    }
                    if wants(*b) {
                        contribs.push((*b, dy.zip_map(val(*a), "mul", |g, x| g * x)?));
                    }
                }
                Op::Scale(a, k) => contribs.push((*a, dy.map(|g| g * *k))),
                Op::Shift(a) | Op::StraightThrough(a) => contribs.push((*a, dy.clone())),
                Op::MatMul(a, b) => {
                    let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let n = val(*b).shape()[1];
                    if wants(*a) {
                        let mut da = vec![S::zero(); m * k];
                        S::gemm(
                            MatRef::row_major(dy.data(), m, n),
                            MatRef::transposed(val(*b).data(), n, k),
                            &mut da,
                            false,
                        );
                        contribs.push((*a, Tensor::new(vec![m, k], da)?));
                    }
                    if wants(*b) {
                        let mut db = vec![S::zero(); k * n];
                        S::gemm(
                            MatRef::transposed(val(*a).data(), k, m),
                            MatRef::row_major(dy.data(), m, n),
                            &mut db,
                            false,
                        );
                        contribs.push((*b, Tensor::new(vec![k, n], db)?));
                    }
                }
                Op::Conv2d { x, w, b, spec } => {
                    let want = [wants(*x), wants(*w), b.is_some_and(wants)];
                    let g = conv2d_backward(val(*x), val(*w), *spec, &dy, want)?;
                    contribs.extend(g.input.map(|t| (*x, t)));
                    contribs.extend(g.weight.map(|t| (*w, t)));
                    if let (Some(b), Some(t)) = (b, g.bias) {
                        contribs.push((*b, t));
                    }
                }
                Op::Upsample2x(x) => {
                    let [n, c, h, w] = val(*x).dims4("upsample2x")?;
                    let mut dx = vec![S::zero(); n * c * h * w];
                    let (w2, plane2) = (2 * w, 4 * h * w);
                    for (p, src) in dy.data().chunks(plane2).enumerate() {
                        let dst = &mut dx[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..w2 {
                                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                            }
                        }
                    }
                    contribs.push((*x, Tensor::new(vec![n, c, h, w], dx)?));
                }
                Op::Relu(x) => {
                    let dx = dy.zip_map(val(*x), "relu", |g, v| if v > S::zero() { g } else { S::zero() })?;
                    contribs.push((*x, dx));
                }
                Op::LeakyRelu(x, k) => {
                    let dx = dy.zip_map(val(*x), "leaky_relu", |g, v| if v > S::zero() { g } else { g * *k })?;
                    contribs.push((*x, dx));
                }
                Op::Tanh(x) => {
                    let dx = dy.zip_map(&node.value, "tanh", |g, y| g * (S::one() - y * y))?;
                    contribs.push((*x, dx));
                }
                Op::Sigmoid(x) => {
                    let dx = dy.zip_map(&node.value, "sigmoid", |g, y| g * y * (S::one() - y))?;
                    contribs.push((*x, dx));
                }
                Op::Log(x) => {
                    let dx = dy.zip_map(val(*x), "log", |g, v| g / v)?;
                    contribs.push((*x, dx));
                }
                Op::BceWithLogits { logits, target } => {
                    let z = val(*logits);
                    let scale = dy.item()?.as_f64() / z.len() as f64;
                    let t = target.as_f64();
                    let dz = z.map(|v| {
                        let v = v.as_f64();
                        if v.abs() >= LOGIT_CLAMP {
                            S::zero()
                        } else {
                            S::lit(scale * (sigmoid_f64(v) - t))
                        }
                    });
                    contribs.push((*logits, dz));
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let [n, c, h, w] = val(*x).dims4("batch_norm")?;
                    let plane = h * w;
                    let count = (n * plane) as f64;
                    let mut sum_dy = vec![0.0f64; c];
                    let mut sum_dy_xhat = vec![0.0f64; c];
                    for (i, (g, xh)) in dy.data().chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                        let ci = i % c;
                        for (&gv, &xv) in g.iter().zip(xh) {
                            sum_dy[ci] += gv.as_f64();
                            sum_dy_xhat[ci] += gv.as_f64() * xv.as_f64();
                        }
                    }
                    if wants(*x) {
                        let gam = val(*gamma).data();
                        let mut dx = Vec::with_capacity(dy.len());
                        for (i, (g, xh)) in dy.data().chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                            let ci = i % c;
                            let k = gam[ci].as_f64() * inv_std[ci].as_f64();
                            for (&gv, &xv) in g.iter().zip(xh) {
                                let d = if *train {
                                    k / count
                                        * (count * gv.as_f64() - sum_dy[ci] - xv.as_f64() * sum_dy_xhat[ci])
                                } else {
                                    k * gv.as_f64()
                                };
                                dx.push(S::lit(d));
                            }
                        }
                        contribs.push((*x, Tensor::new(val(*x).shape().to_vec(), dx)?));
                    }
                    if wants(*gamma) {
                        contribs.push((*gamma, Tensor::new(vec![c], sum_dy_xhat.iter().map(|&v| S::lit(v)).collect())?));
                    }
                    if wants(*beta) {
                        contribs.push((*beta, Tensor::new(vec![c], sum_dy.iter().map(|&v| S::lit(v)).collect())?));
                    }
                }
                Op::Mean(x) => {
                    let t = val(*x);
                    let g = dy.item()? / S::lit(t.len() as f64);
                    contribs.push((*x, Tensor::full(t.shape(), g)));
                }
                Op::Sum(x) => {
                    let g = dy.item()?;
                    contribs.push((*x, Tensor::full(val(*x).shape(), g)));
                }
                Op::SquaredL2(x) => {
                    let g = dy.item()? * S::lit(2.0);
                    contribs.push((*x, val(*x).map(|v| v * g)));
                }
                Op::Reshape(x) => contribs.push((*x, dy.reshape(val(*x).shape())?)),
                Op::Transpose(x) => {
                    let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                    let mut dx = vec![S::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = dy.data()[j * r + i];
                        }
                    }
                    contribs.push((*x, Tensor::new(vec![r, c], dx)?));
                }
                Op::GatherRows { table, indices } => {
                    let shape = val(*table).shape().to_vec();
                    let l = shape[1];
                    let mut dt = vec![S::zero(); shape[0] * l];
                    for (row, &i) in dy.data().chunks(l).zip(indices) {
                        for (d, &g) in dt[i * l..(i + 1) * l].iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    contribs.push((*table, Tensor::new(shape, dt)?));
                }
            }
            for (v, g) in contribs {
                if !nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        // only leaves keep their gradients
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, params, shapes })
    }
}

/// Gradients of a loss with respect to every leaf that required them.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: Vec<(String, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<S> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Gradient of the parameter registered under `name`, if it was registered.
    pub fn param(&self, name: &str) -> Option<Tensor<S>> {
        self.params.iter().find(|(n, _)| n == name).map(|&(_, v)| self.get(v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    S::lit(sigmoid_f64(v.as_f64()))
}

fn sigmoid_f64(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(z)` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}
