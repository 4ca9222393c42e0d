//! Optimizers and learning-rate schedules.
//!
//! Both optimizers read `Parameter::grad` and update `Parameter::value` in
//! store order. Per-parameter learning-rate multipliers implement parameter
//! groups (e.g. a reduced encoder rate during retraining).

use serde::{Deserialize, Serialize};

use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup from 0 over `warmup_steps`, then cosine decay to 0 at `total_steps`.
    WarmupCosine {
        warmup_steps: usize,
        total_steps: usize,
    },
    /// `(1 - step/total)^power`, optionally after a linear warmup.
    Polynomial {
        warmup_steps: usize,
        total_steps: usize,
        power: f64,
    },
}

impl Schedule {
    /// Learning rate for 0-based `step`.
    pub fn lr(&self, base: f64, step: usize) -> f64 {
        let warm = |w: usize| {
            if w > 0 && step < w {
                Some(base * (step + 1) as f64 / w as f64)
            } else {
                None
            }
        };
        match *self {
            Schedule::Constant => base,
            Schedule::WarmupCosine {
                warmup_steps,
                total_steps,
            } => warm(warmup_steps).unwrap_or_else(|| {
                let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
                let t = ((step - warmup_steps) as f64 / span).min(1.0);
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }),
            Schedule::Polynomial {
                warmup_steps,
                total_steps,
                power,
            } => warm(warmup_steps).unwrap_or_else(|| {
                let t = (step as f64 / total_steps.max(1) as f64).min(1.0);
                base * (1.0 - t).powf(power)
            }),
        }
    }
}

pub trait Optimizer<T: Scalar> {
    /// One update with global learning rate `lr`.
    fn step(&mut self, store: &mut ParamStore<T>, lr: f64);
}

/// Adam with decoupled weight decay. Decay applies only to parameters of
/// rank ≥ 2 (weights, embeddings), not to biases or norm scales.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    lr_scale: Vec<f64>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            lr_scale: vec![1.0; store.len()],
            m: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            t: 0,
        }
    }

    pub fn with_lr_scale(mut self, scale: impl Fn(&str) -> f64, store: &ParamStore<T>) -> Self {
        self.lr_scale = store.iter().map(|p| scale(&p.name)).collect();
        self
    }
}

impl<T: Scalar> Optimizer<T> for AdamW<T> {
    fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let eps = T::lit(self.eps);
        for (i, p) in store.iter_mut().enumerate() {
            let lr_i = lr * self.lr_scale[i];
            let decay = if p.value.rank() >= 2 {
                T::lit(1.0 - lr_i * self.weight_decay)
            } else {
                T::one()
            };
            let step = T::lit(lr_i / bc1);
            let inv_bc2 = T::lit(1.0 / bc2);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w = *w * decay - step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// SGD with heavy-ball momentum: `u ← μu + g + wd·w`, `w ← w − lr·u`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    lr_scale: Vec<f64>,
    u: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            lr_scale: vec![1.0; store.len()],
            u: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn with_lr_scale(mut self, scale: impl Fn(&str) -> f64, store: &ParamStore<T>) -> Self {
        self.lr_scale = store.iter().map(|p| scale(&p.name)).collect();
        self
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        let mu = T::lit(self.momentum);
        let wd = T::lit(self.weight_decay);
        for (i, p) in store.iter_mut().enumerate() {
            let lr_i = T::lit(lr * self.lr_scale[i]);
            for ((w, &g), u) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(self.u[i].data_mut())
            {
                *u = mu * *u + g + wd * *w;
                *w -= lr_i * *u;
            }
        }
    }
}
