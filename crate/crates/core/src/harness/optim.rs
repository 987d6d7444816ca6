//! AdamW and weight EMA over parameter trees.

use serde::{Deserialize, Serialize};

use crate::error::{DigError, Result};
use crate::params::Tree;
use crate::tensor::Tensor;

fn leaves<T: Tree<Tensor>>(t: &T) -> Vec<Tensor> {
    let mut out = Vec::new();
    t.visit_with("", &mut |_, x| out.push(x.clone()));
    out
}

/// Apply `f(target, source)` leaf by leaf over two trees of equal
/// structure.
pub fn zip_leaves<T: Tree<Tensor>>(
    target: &mut T,
    source: &T,
    mut f: impl FnMut(&mut Tensor, &Tensor),
) -> Result<()> {
    let src = leaves(source);
    let mut k = 0;
    let mut mismatch = None;
    target.visit_mut_with("", &mut |name, x| {
        match src.get(k) {
            Some(s) if s.shape() == x.shape() => f(x, s),
            _ => mismatch = mismatch.take().or(Some(name.to_string())),
        }
        k += 1;
    });
    match mismatch {
        Some(name) => Err(DigError::shape("zip_leaves", format!("structure differs at {name}"))),
        None if k != src.len() => Err(DigError::shape("zip_leaves", "leaf counts differ")),
        None => Ok(()),
    }
}

/// Euclidean norm over every leaf.
pub fn global_norm<T: Tree<Tensor>>(t: &T) -> f64 {
    let mut sq = 0.0;
    t.visit_with("", &mut |_, x| sq += x.data().iter().map(|v| v * v).sum::<f64>());
    sq.sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Decoupled-weight-decay Adam. Moments share the parameter tree's
/// structure.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub m: T,
    pub v: T,
    pub step: u64,
}

impl<T: Tree<Tensor> + Clone> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &T) -> Self
    where
        T: Tree<Tensor, Mapped<Tensor> = T>,
    {
        let zeros = params.map_with("", &mut |_, x| Tensor::zeros(x.shape()));
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut T, grads: &T) -> Result<()> {
        let c = self.cfg;
        self.step += 1;
        zip_leaves(&mut self.m, grads, |m, g| {
            for (a, b) in m.data_mut().iter_mut().zip(g.data()) {
                *a = c.beta1 * *a + (1.0 - c.beta1) * b;
            }
        })?;
        zip_leaves(&mut self.v, grads, |v, g| {
            for (a, b) in v.data_mut().iter_mut().zip(g.data()) {
                *a = c.beta2 * *a + (1.0 - c.beta2) * b * b;
            }
        })?;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let v = leaves(&self.v);
        let mut k = 0;
        zip_leaves(params, &self.m, |p, m| {
            for ((x, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v[k].data()) {
                let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                *x -= c.lr * (update + c.weight_decay * *x);
            }
            k += 1;
        })
    }
}

/// `ema ← decay · ema + (1 − decay) · params`.
pub fn ema_update<T: Tree<Tensor>>(ema: &mut T, params: &T, decay: f64) -> Result<()> {
    zip_leaves(ema, params, |e, p| {
        for (a, b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    })
}
