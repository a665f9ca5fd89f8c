//! Trainable layers shared by the codec, the discriminator and the perceptual extractor.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchStats, Conv2dSpec, Graph, Tensor, Var};

/// Whether a tensor is optimized or only carried as state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Param,
    Buffer,
}

/// A named tensor: a trainable parameter or a running-statistics buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        Param { name: name.into(), value }
    }
}

/// Anything holding named tensors, enumerated in a fixed order.
pub trait Module<S: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>, Kind));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>, Kind));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p, kind| {
            if kind == Kind::Param {
                n += p.value.len();
            }
        });
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass context: the batch-norm mode, plus the batch statistics
/// collected in training mode (applied afterwards with [`apply_batch_stats`]).
pub struct Ctx {
    pub mode: Mode,
    pub stats: Vec<(String, BatchStats)>,
}

impl Ctx {
    pub fn train() -> Self {
        Ctx { mode: Mode::Train, stats: Vec::new() }
    }

    pub fn eval() -> Self {
        Ctx { mode: Mode::Eval, stats: Vec::new() }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub spec: Conv2dSpec,
}

impl<S: Scalar> Conv2d<S> {
    /// He-uniform weights (`±sqrt(6 / fan_in)`), zero bias.
    pub fn new<R: Rng>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: Conv2dSpec,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = Tensor::from_fn(&[out_ch, in_ch, kernel, kernel], |_| {
            S::lit(rng.random_range(-bound..bound))
        });
        Conv2d {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            spec,
        }
    }

    pub fn forward(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight.name, &self.weight.value);
        let b = g.param(&self.bias.name, &self.bias.value);
        g.conv2d(x, w, Some(b), self.spec)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl<S: Scalar> Module<S> for Conv2d<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>, Kind)) {
        f(&self.weight, Kind::Param);
        f(&self.bias, Kind::Param);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>, Kind)) {
        f(&mut self.weight, Kind::Param);
        f(&mut self.bias, Kind::Param);
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct BatchNorm2d<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Param<S>,
    pub running_var: Param<S>,
    prefix: String,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::new(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::new(format!("{name}.running_var"), Tensor::ones(&[channels])),
            prefix: name.to_owned(),
        }
    }

    pub fn forward(&self, g: &mut Graph<S>, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let gamma = g.param(&self.gamma.name, &self.gamma.value);
        let beta = g.param(&self.beta.name, &self.beta.value);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                ctx.stats.push((self.prefix.clone(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let to64 = |t: &Tensor<S>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
                let (m, v) = (to64(&self.running_mean.value), to64(&self.running_var.value));
                g.batch_norm_eval(x, gamma, beta, &m, &v, BN_EPS)
            }
        }
    }

    /// Exponential moving update of the running statistics.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let blend = |t: &mut Tensor<S>, batch: &[f64]| {
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = S::lit((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * b);
            }
        };
        blend(&mut self.running_mean.value, &stats.mean);
        blend(&mut self.running_var.value, &stats.var);
    }
}

impl<S: Scalar> Module<S> for BatchNorm2d<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>, Kind)) {
        f(&self.gamma, Kind::Param);
        f(&self.beta, Kind::Param);
        f(&self.running_mean, Kind::Buffer);
        f(&self.running_var, Kind::Buffer);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>, Kind)) {
        f(&mut self.gamma, Kind::Param);
        f(&mut self.beta, Kind::Param);
        f(&mut self.running_mean, Kind::Buffer);
        f(&mut self.running_var, Kind::Buffer);
    }
}

/// Folds training-mode batch statistics into the running averages of every
/// batch-norm layer of `module`, matched by name.
pub fn apply_batch_stats<S: Scalar, M: Module<S> + ?Sized>(module: &mut M, stats: &[(String, BatchStats)]) {
    for (prefix, s) in stats {
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        module.visit_mut(&mut |p, kind| {
            if kind != Kind::Buffer {
                return;
            }
            let src = if p.name == mean_name {
                &s.mean
            } else if p.name == var_name {
                &s.var
            } else {
                return;
            };
            for (r, &b) in p.value.data_mut().iter_mut().zip(src) {
                *r = S::lit((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * b);
            }
        });
    }
}

/// Snapshot of every named tensor of a module, in visiting order.
pub fn state_of<S: Scalar, M: Module<S> + ?Sized>(module: &M) -> Vec<Param<S>> {
    let mut out = Vec::new();
    module.visit(&mut |p, _| out.push(p.clone()));
    out
}

/// Overwrites a module's tensors from a snapshot; names and shapes must match exactly.
pub fn load_state<S: Scalar, M: Module<S> + ?Sized>(module: &mut M, state: &[Param<S>]) -> Result<()> {
    let mut expected = 0usize;
    let mut error = None;
    module.visit_mut(&mut |p, _| {
        expected += 1;
        if error.is_some() {
            return;
        }
        match state.iter().find(|s| s.name == p.name) {
            Some(s) if s.value.shape() == p.value.shape() => p.value = s.value.clone(),
            Some(s) => {
                error = Some(Error::Format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    s.value.shape(),
                    p.value.shape()
                )))
            }
            None => error = Some(Error::Format(format!("missing tensor {}", p.name))),
        }
    });
    if let Some(e) = error {
        return Err(e);
    }
    if expected != state.len() {
        return Err(Error::Format(format!("state holds {} tensors, module has {expected}", state.len())));
    }
    Ok(())
}

/// `t + F(t)` with `F = conv → batch-norm → ReLU → conv`, channel count preserved.
#[derive(Clone, Debug)]
pub struct ResidualBlock<S> {
    pub conv1: Conv2d<S>,
    pub bn1: BatchNorm2d<S>,
    pub conv2: Conv2d<S>,
}

impl<S: Scalar> ResidualBlock<S> {
    pub fn new<R: Rng>(name: &str, channels: usize, rng: &mut R) -> Self {
        let spec = Conv2dSpec::new(1, 1);
        ResidualBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), channels, channels, 3, spec, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), channels),
            conv2: Conv2d::new(&format!("{name}.conv2"), channels, channels, 3, spec, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<S>, t: Var, ctx: &mut Ctx) -> Result<Var> {
        let h = self.conv1.forward(g, t)?;
        let h = self.bn1.forward(g, h, ctx)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        g.add(t, h)
    }
}

impl<S: Scalar> Module<S> for ResidualBlock<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>, Kind)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>, Kind)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}
