//! Parameter trees.
//!
//! Every learnable structure is generic over its leaf type `P`: `Tensor`
//! for stored weights, `Var` once bound onto a [`Graph`]. [`Tree`] walks the
//! leaves with dotted names, which is all that checkpointing, EMA, the
//! optimizer and gradient checks need.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub trait Tree<P> {
    type Mapped<Q>;
    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q>;
    fn visit_with(&self, prefix: &str, f: &mut dyn FnMut(&str, &P));
    fn visit_mut_with(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Put every leaf on `g` as a trainable parameter.
pub fn bind<T: Tree<Tensor>>(g: &Graph, t: &T) -> T::Mapped<Var> {
    t.map_with("", &mut |_, x| g.param(x.clone()))
}

/// Put every leaf on `g` as a constant.
pub fn bind_const<T: Tree<Tensor>>(g: &Graph, t: &T) -> T::Mapped<Var> {
    t.map_with("", &mut |_, x| g.constant(x.clone()))
}

/// Adjoint of every bound leaf, in the same structure.
pub fn grads_of<T: Tree<Var>>(bound: &T, grads: &Gradients) -> T::Mapped<Tensor> {
    bound.map_with("", &mut |_, v| grads.wrt(*v))
}

pub fn named<T: Tree<Tensor>>(t: &T) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    t.visit_with("", &mut |name, x| out.push((name.to_string(), x.clone())));
    out
}

pub fn count_params<T: Tree<Tensor>>(t: &T) -> usize {
    let mut n = 0;
    t.visit_with("", &mut |_, x| n += x.len());
    n
}

impl<P, T: Tree<P>> Tree<P> for Vec<T> {
    type Mapped<Q> = Vec<T::Mapped<Q>>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q> {
        self.iter()
            .enumerate()
            .map(|(i, t)| t.map_with(&join(prefix, &i.to_string()), f))
            .collect()
    }

    fn visit_with(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        for (i, t) in self.iter().enumerate() {
            t.visit_with(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut_with(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        for (i, t) in self.iter_mut().enumerate() {
            t.visit_mut_with(&join(prefix, &i.to_string()), f);
        }
    }
}

/// `y = x W (+ b)` with `W: [in × out]`, `b: [1 × out]`.
#[derive(Clone, Debug)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: Option<P>,
}

impl Linear<Tensor> {
    /// Xavier-uniform weight, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a);
        let weight = Tensor::from_fn(&[fan_in, fan_out], |_| dist.sample(rng));
        Self {
            weight,
            bias: bias.then(|| Tensor::zeros(&[1, fan_out])),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: bias.then(|| Tensor::zeros(&[1, fan_out])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => {
                let c = b.len();
                Ok(Tensor::from_fn(y.shape(), |k| y.data()[k] + b.data()[k % c]))
            }
            None => Ok(y),
        }
    }
}

impl Linear<Var> {
    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => g.add_row(y, b),
            None => Ok(y),
        }
    }
}

impl<P> Tree<P> for Linear<P> {
    type Mapped<Q> = Linear<Q>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(&join(prefix, "bias"), b)),
        }
    }

    fn visit_with(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut_with(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Gradient-check every leaf of a parameter tree against central
/// differences. Returns `(name, max relative error, zero adjoint)` per leaf.
pub fn grad_check_tree<T, F>(params: &T, f: F, h: f64) -> Result<Vec<(String, f64, bool)>>
where
    T: Tree<Tensor> + Clone,
    T::Mapped<Var>: Tree<Var>,
    F: Fn(&Graph, &T::Mapped<Var>) -> Result<Var>,
{
    let g = Graph::new();
    let bound = bind(&g, params);
    let loss = f(&g, &bound)?;
    let grads = g.backward(loss)?;
    let mut analytic = Vec::new();
    bound.visit_with("", &mut |_, v| analytic.push((grads.wrt(*v), grads.reached(*v))));

    let eval = |p: &T| -> Result<f64> {
        let g = Graph::new();
        let bound = bind(&g, p);
        let y = f(&g, &bound)?;
        Ok(g.value(y).item())
    };

    let names: Vec<String> = named(params).into_iter().map(|(n, _)| n).collect();
    let mut report = Vec::with_capacity(names.len());
    for (leaf, name) in names.iter().enumerate() {
        let (a, reached) = &analytic[leaf];
        let mut numeric = Tensor::zeros(a.shape());
        for i in 0..a.len() {
            let shifted = |delta: f64| {
                let mut p = params.clone();
                let mut k = 0;
                p.visit_mut_with("", &mut |_, x| {
                    if k == leaf {
                        x.data_mut()[i] += delta;
                    }
                    k += 1;
                });
                p
            };
            numeric.data_mut()[i] = crate::autograd::central_difference(|d| eval(&shifted(d)), h)?;
        }
        let (rel, _) = crate::autograd::relative_error(a, &numeric);
        report.push((name.clone(), rel, !reached));
    }
    Ok(report)
}
