//! Adam over named module parameters.

use std::collections::BTreeMap;

use crate::nn::{Kind, Module};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tensor};

/// Parameter gradients keyed by parameter name, accumulated in `f64`.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: BTreeMap<String, Vec<f64>>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every registered parameter gradient of one backward pass.
    pub fn accumulate<S: Scalar>(&mut self, grads: &Gradients<S>) {
        for name in grads.param_names() {
            let g = grads.param(name).expect("registered parameter");
            self.add(name, &g);
        }
    }

    pub fn add<S: Scalar>(&mut self, name: &str, g: &Tensor<S>) {
        let acc = self.grads.entry(name.to_owned()).or_insert_with(|| vec![0.0; g.len()]);
        for (a, v) in acc.iter_mut().zip(g.data()) {
            *a += v.as_f64();
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn scale(&mut self, k: f64) {
        self.grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= k);
    }

    /// Sum of `|g|` over all entries.
    pub fn l1(&self) -> f64 {
        self.grads.values().flatten().map(|v| v.abs()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter of `module` that has a gradient in `grads`.
    pub fn step<S: Scalar, M: Module<S> + ?Sized>(&mut self, module: &mut M, grads: &ParamGrads) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (lr, eps) = (self.lr, self.eps);
        let moments = &mut self.moments;
        module.visit_mut(&mut |p, kind| {
            if kind != Kind::Param {
                return;
            }
            let Some(g) = grads.get(&p.name) else { return };
            let (m, v) = moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                *w = S::lit(w.as_f64() - update);
            }
        });
    }
}
