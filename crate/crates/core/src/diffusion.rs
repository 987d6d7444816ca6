//! DDPM forward process, posterior, losses and the ancestral sampler.
//!
//! Physical timesteps run `t = 1..=T` with `ᾱ_0 = 1`; the network is fed
//! the zero-based index `t - 1`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Var};
use crate::error::{DigError, Result};
use crate::tensor::{sigmoid, Tensor};

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 2e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    /// `β_t` at index `t - 1`.
    pub betas: Vec<f64>,
    /// `ᾱ_t` at index `t`, with `ᾱ_0 = 1`.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from 1e-4 to 2e-2, both ends scaled by `1000 / steps`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(DigError::Config(format!("need at least 2 diffusion steps, got {steps}")));
        }
        let scale = 1000.0 / steps as f64;
        let (lo, hi) = (scale * BETA_START, scale * BETA_END);
        if hi >= 1.0 {
            return Err(DigError::Config(format!("{steps} steps push β past 1")));
        }
        let betas = (0..steps)
            .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(DigError::Config("β must lie in (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize, lowest: usize) -> Result<()> {
        if t < lowest || t > self.steps() {
            return Err(DigError::OutOfRange {
                what: "diffusion step",
                index: t,
                bound: self.steps() + 1,
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(DigError::UndefinedPosterior("t = 0 has no predecessor".into()));
        }
        self.check(t, 1)?;
        Ok(self.beta(t) * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]))
    }

    /// `log β̃_t`, with the `t = 1` value (log 0) replaced by `log β̃_2`.
    pub fn posterior_log_variance_clipped(&self, t: usize) -> Result<f64> {
        let t = if t == 1 { 2.min(self.steps()) } else { t };
        Ok(self.posterior_variance(t)?.ln())
    }

    /// `(c₀, c_t)` with `μ̃ = c₀ x₀ + c_t x_t`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.posterior_variance(t)?;
        let (ab, ab_prev) = (self.alpha_bar[t], self.alpha_bar[t - 1]);
        let b = self.beta(t);
        Ok((b * ab_prev.sqrt() / (1.0 - ab), (1.0 - ab_prev) * (1.0 - b).sqrt() / (1.0 - ab)))
    }
}

/// `x_t = √ᾱ_t x₀ + √(1 − ᾱ_t) ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check(t, 0)?;
    let ab = s.alpha_bar[t];
    x0.zip_map(eps, |x, e| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
}

/// One forward step `x_t = √(1 − β_t) x_{t−1} + √β_t ε`.
pub fn q_step(x_prev: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check(t, 1)?;
    let b = s.beta(t);
    x_prev.zip_map(eps, |x, e| (1.0 - b).sqrt() * x + b.sqrt() * e)
}

/// Mean and variance of `q(x_{t−1} | x_t, x₀)`.
pub fn q_posterior(x0: &Tensor, xt: &Tensor, t: usize, s: &NoiseSchedule) -> Result<(Tensor, f64)> {
    let (c0, ct) = s.posterior_coefficients(t)?;
    let mean = x0.zip_map(xt, |a, b| c0 * a + ct * b)?;
    Ok((mean, s.posterior_variance(t)?))
}

/// `KL(N(μ₁, e^{lv₁}) ‖ N(μ₂, e^{lv₂}))`, elementwise.
pub fn gaussian_kl(mean1: f64, logvar1: f64, mean2: f64, logvar2: f64) -> f64 {
    let d = logvar2 - logvar1;
    0.5 * (d + (-d).exp() - 1.0 + (mean1 - mean2).powi(2) * (-logvar2).exp())
}

/// `μ_θ = (x_t − β_t / √(1 − ᾱ_t) · ε_θ) / √α_t`.
pub fn eps_to_mean(xt: &Tensor, eps: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    s.check(t, 1)?;
    let (b, ab) = (s.beta(t), s.alpha_bar[t]);
    let k = b / (1.0 - ab).sqrt();
    xt.zip_map(eps, |x, e| (x - k * e) / (1.0 - b).sqrt())
}

/// `log Σ_θ = v log β_t + (1 − v) log β̃_t` with `v = σ(raw)`.
pub fn model_log_variance(cov_raw: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    let (hi, lo) = (s.beta(t).ln(), s.posterior_log_variance_clipped(t)?);
    Ok(cov_raw.map(|r| {
        let v = sigmoid(r);
        v * hi + (1.0 - v) * lo
    }))
}

/// `mean((ε_θ − ε)²)`.
pub fn loss_simple_graph(g: &Graph, eps_pred: Var, eps: &Tensor) -> Result<Var> {
    let diff = g.sub(eps_pred, g.constant(eps.clone()))?;
    Ok(g.mean(g.square(diff)))
}

fn log_variance_graph(g: &Graph, cov_raw: Var, t: usize, s: &NoiseSchedule) -> Result<Var> {
    let (hi, lo) = (s.beta(t).ln(), s.posterior_log_variance_clipped(t)?);
    Ok(g.add_scalar(g.scale(g.sigmoid(cov_raw), hi - lo), lo))
}

/// Variational-bound term at step `t`, averaged over elements. The noise
/// prediction is detached, so only `cov_raw` receives gradient. At `t = 1`
/// this is the Gaussian negative log-likelihood of `x₀`.
pub fn loss_vb_graph(
    g: &Graph,
    x0: &Tensor,
    xt: &Tensor,
    t: usize,
    eps_pred: Var,
    cov_raw: Var,
    s: &NoiseSchedule,
) -> Result<Var> {
    s.check(t, 1)?;
    let eps = g.value(g.detach(eps_pred));
    let mean = g.constant(eps_to_mean(xt, &eps, t, s)?);
    let logvar = log_variance_graph(g, cov_raw, t, s)?;
    let inv_var = g.exp(g.scale(logvar, -1.0));
    let out = if t == 1 {
        let err = g.square(g.sub(g.constant(x0.clone()), mean)?);
        let quad = g.mul(err, inv_var)?;
        g.scale(g.add_scalar(g.add(logvar, quad)?, (2.0 * PI).ln()), 0.5)
    } else {
        let (true_mean, var) = q_posterior(x0, xt, t, s)?;
        let lv1 = var.ln();
        let sq = g.square(g.sub(g.constant(true_mean), mean)?);
        let ratio = g.scale(inv_var, lv1.exp());
        let terms = g.add(g.add(g.add_scalar(logvar, -1.0 - lv1), ratio)?, g.mul(sq, inv_var)?)?;
        g.scale(terms, 0.5)
    };
    let value = g.value(out);
    if !value.is_finite() {
        return Err(DigError::Numeric(format!("non-finite variational bound at t = {t}")));
    }
    Ok(g.mean(out))
}

/// Ancestral sampling from `x_T ~ N(0, I)`. `model(x_t, t - 1)` returns
/// `(ε_θ, cov_raw)`; the final step adds no noise.
pub fn p_sample_loop<R, F>(
    model: F,
    shape: &[usize],
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor>
where
    R: Rng + ?Sized,
    F: FnMut(&Tensor, usize) -> Result<(Tensor, Tensor)>,
{
    let x = Tensor::randn(shape, 1.0, rng);
    p_sample_from(model, x, s, rng)
}

/// Ancestral sampling from a given `x_T`.
pub fn p_sample_from<R, F>(mut model: F, mut x: Tensor, s: &NoiseSchedule, rng: &mut R) -> Result<Tensor>
where
    R: Rng + ?Sized,
    F: FnMut(&Tensor, usize) -> Result<(Tensor, Tensor)>,
{
    for t in (1..=s.steps()).rev() {
        let (eps, cov_raw) = model(&x, t - 1)?;
        let mean = eps_to_mean(&x, &eps, t, s)?;
        x = if t > 1 {
            let logvar = model_log_variance(&cov_raw, t, s)?;
            let mut next = mean;
            for (v, lv) in next.data_mut().iter_mut().zip(logvar.data()) {
                let z: f64 = rng.sample(StandardNormal);
                *v += (0.5 * lv).exp() * z;
            }
            next
        } else {
            mean
        };
        if !x.is_finite() {
            return Err(DigError::Numeric(format!("non-finite sample at step {}", t - 1)));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const N: usize = 100_000;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn moments(x: &Tensor) -> (f64, f64) {
        let m = x.mean();
        let v = x.data().iter().map(|a| (a - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        (m, v)
    }

    /// Three-sigma agreement of sample mean and variance with `(mu, var)`.
    fn within_bands(x: &Tensor, mu: f64, var: f64) {
        let (m, v) = moments(x);
        let n = x.len() as f64;
        assert!((m - mu).abs() < 3.0 * (var / n).sqrt(), "mean {m} vs {mu}");
        assert!((v - var).abs() < 3.0 * var * (2.0 / (n - 1.0)).sqrt(), "var {v} vs {var}");
    }

    #[test]
    fn schedule_is_monotone_and_normalized() {
        let s = NoiseSchedule::linear(1000).unwrap();
        assert_eq!(s.betas[0], 1e-4);
        assert!((s.betas[999] - 2e-2).abs() < 1e-15);
        assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(s.alpha_bar.windows(2).all(|w| w[0] > w[1]));
        for &ab in &s.alpha_bar {
            assert!((ab.sqrt().powi(2) + (1.0 - ab) - 1.0).abs() < 1e-15);
        }
        let toy = NoiseSchedule::linear(100).unwrap();
        assert!((toy.betas[0] - 1e-3).abs() < 1e-15);
        assert!(toy.alpha_bar[100] < 1e-3);
        assert!(NoiseSchedule::linear(1).is_err());
        assert!(NoiseSchedule::linear(20).is_err());
    }

    #[test]
    fn alpha_bar_matches_log_sum() {
        let s = NoiseSchedule::linear(100).unwrap();
        for t in [1, 10, 50, 100] {
            let log: f64 = s.betas[..t].iter().map(|b| (1.0 - b).ln()).sum();
            assert!((s.alpha_bar[t] - log.exp()).abs() < 1e-13);
        }
    }

    #[test]
    fn q_sample_endpoints() {
        let s = NoiseSchedule::linear(100).unwrap();
        let x0 = Tensor::randn(&[5], 1.0, &mut rng(0));
        let eps = Tensor::randn(&[5], 1.0, &mut rng(1));
        assert_eq!(q_sample(&x0, 0, &eps, &s).unwrap(), x0);
        let tiny = NoiseSchedule::from_betas(vec![1.0 - 1e-12; 2]).unwrap();
        let xt = q_sample(&x0, 2, &eps, &tiny).unwrap();
        assert!(xt.max_abs_diff(&eps).unwrap() < 1e-10);
        assert!(q_sample(&x0, 101, &eps, &s).is_err());
    }

    #[test]
    fn q_sample_moments_match_closed_form() {
        let s = NoiseSchedule::linear(100).unwrap();
        let mut r = rng(2);
        for (t, x0) in [(1, 1.5), (20, -0.7), (60, 2.0), (100, 0.3)] {
            let x = Tensor::full(&[N], x0);
            let eps = Tensor::randn(&[N], 1.0, &mut r);
            let xt = q_sample(&x, t, &eps, &s).unwrap();
            within_bands(&xt, s.alpha_bar[t].sqrt() * x0, 1.0 - s.alpha_bar[t]);
        }
    }

    #[test]
    fn iterated_steps_match_marginal() {
        let s = NoiseSchedule::linear(100).unwrap();
        let mut r = rng(3);
        let x0 = 1.2;
        let mut x = Tensor::full(&[N], x0);
        for t in 1..=60 {
            x = q_step(&x, t, &Tensor::randn(&[N], 1.0, &mut r), &s).unwrap();
            if [5, 30, 60].contains(&t) {
                let closed = q_sample(&Tensor::full(&[N], x0), t, &Tensor::randn(&[N], 1.0, &mut r), &s).unwrap();
                let ab = s.alpha_bar[t];
                within_bands(&x, ab.sqrt() * x0, 1.0 - ab);
                within_bands(&closed, ab.sqrt() * x0, 1.0 - ab);
            }
        }
    }

    #[test]
    fn posterior_at_first_step_is_exact() {
        let s = NoiseSchedule::linear(100).unwrap();
        assert_eq!(s.posterior_variance(1).unwrap(), 0.0);
        let x0 = Tensor::randn(&[4], 1.0, &mut rng(4));
        let xt = Tensor::randn(&[4], 1.0, &mut rng(5));
        let (mean, var) = q_posterior(&x0, &xt, 1, &s).unwrap();
        assert!(mean.max_abs_diff(&x0).unwrap() < 1e-12);
        assert_eq!(var, 0.0);
        assert!(matches!(q_posterior(&x0, &xt, 0, &s), Err(DigError::UndefinedPosterior(_))));
    }

    #[test]
    fn posterior_mean_interpolates_toward_x0() {
        let s = NoiseSchedule::linear(100).unwrap();
        let x0 = Tensor::full(&[1], 2.0);
        for t in [2, 10, 50, 100] {
            let xt = q_sample(&x0, t, &Tensor::zeros(&[1]), &s).unwrap();
            let (mean, var) = q_posterior(&x0, &xt, t, &s).unwrap();
            let expect = s.alpha_bar[t - 1].sqrt() * 2.0;
            assert!((mean.item() - expect).abs() < 1e-12, "t = {t}");
            let other = q_posterior(&x0.scale(-3.0), &xt.scale(7.0), t, &s).unwrap().1;
            assert_eq!(var, other);
        }
    }

    #[test]
    fn posterior_mean_agrees_with_eps_parameterization() {
        let s = NoiseSchedule::linear(100).unwrap();
        let x0 = Tensor::randn(&[6], 1.0, &mut rng(6));
        let eps = Tensor::randn(&[6], 1.0, &mut rng(7));
        for t in [1, 2, 37, 100] {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let (mean, _) = q_posterior(&x0, &xt, t, &s).unwrap();
            let via_eps = eps_to_mean(&xt, &eps, t, &s).unwrap();
            assert!(mean.max_abs_diff(&via_eps).unwrap() < 1e-10, "t = {t}");
        }
    }

    #[test]
    fn gaussian_kl_hand_cases() {
        assert_eq!(gaussian_kl(0.0, 0.0, 1.0, 0.0), 0.5);
        assert_eq!(gaussian_kl(0.3, -1.2, 0.3, -1.2), 0.0);
        let kl = gaussian_kl(0.0, 0.0, 0.0, 2f64.ln());
        assert!((kl - 0.5 * (2f64.ln() - 0.5)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn gaussian_kl_is_nonnegative(m1 in -5.0..5.0f64, l1 in -5.0..5.0f64, m2 in -5.0..5.0f64, l2 in -5.0..5.0f64) {
            prop_assert!(gaussian_kl(m1, l1, m2, l2) >= -1e-12);
        }
    }

    #[test]
    fn loss_simple_zero_for_perfect_and_one_for_zero_prediction() {
        let g = Graph::new();
        let eps = Tensor::randn(&[N], 1.0, &mut rng(8));
        let perfect = loss_simple_graph(&g, g.param(eps.clone()), &eps).unwrap();
        assert_eq!(g.value(perfect).item(), 0.0);
        let zero = loss_simple_graph(&g, g.param(Tensor::zeros(&[N])), &eps).unwrap();
        assert!((g.value(zero).item() - 1.0).abs() < 0.02);
    }

    fn vb_inputs(t: usize, s: &NoiseSchedule) -> (Tensor, Tensor, Tensor) {
        let x0 = Tensor::randn(&[2, 3, 3], 1.0, &mut rng(9));
        let eps = Tensor::randn(&[2, 3, 3], 1.0, &mut rng(10));
        let xt = q_sample(&x0, t, &eps, s).unwrap();
        (x0, eps, xt)
    }

    #[test]
    fn vb_term_matches_elementwise_kl() {
        let s = NoiseSchedule::linear(100).unwrap();
        let t = 40;
        let (x0, _, xt) = vb_inputs(t, &s);
        let eps_pred = Tensor::randn(&[2, 3, 3], 1.0, &mut rng(11));
        let raw = Tensor::randn(&[2, 3, 3], 1.0, &mut rng(12));
        let g = Graph::new();
        let loss = loss_vb_graph(&g, &x0, &xt, t, g.param(eps_pred.clone()), g.param(raw.clone()), &s).unwrap();

        let mu = eps_to_mean(&xt, &eps_pred, t, &s).unwrap();
        let lv = model_log_variance(&raw, t, &s).unwrap();
        let (true_mu, var) = q_posterior(&x0, &xt, t, &s).unwrap();
        let expect: f64 = (0..x0.len())
            .map(|i| gaussian_kl(true_mu.data()[i], var.ln(), mu.data()[i], lv.data()[i]))
            .sum::<f64>()
            / x0.len() as f64;
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn vb_term_vanishes_when_model_matches_posterior() {
        let s = NoiseSchedule::linear(100).unwrap();
        let t = 25;
        let (x0, eps, xt) = vb_inputs(t, &s);
        let (hi, lo) = (s.beta(t).ln(), s.posterior_log_variance_clipped(t).unwrap());
        assert!(hi > lo);
        // v = 0 exactly is unreachable through a sigmoid; a very negative raw output gets within 1e-12
        let g = Graph::new();
        let raw = g.param(Tensor::full(&[2, 3, 3], -40.0));
        let loss = loss_vb_graph(&g, &x0, &xt, t, g.param(eps), raw, &s).unwrap();
        assert!(g.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn first_step_term_is_gaussian_nll() {
        let s = NoiseSchedule::linear(100).unwrap();
        let (x0, _, xt) = vb_inputs(1, &s);
        let eps_pred = Tensor::zeros(&[2, 3, 3]);
        let g = Graph::new();
        let loss = loss_vb_graph(&g, &x0, &xt, 1, g.param(eps_pred.clone()), g.param(Tensor::zeros(&[2, 3, 3])), &s)
            .unwrap();
        let mu = eps_to_mean(&xt, &eps_pred, 1, &s).unwrap();
        let lv = 0.5 * s.beta(1).ln() + 0.5 * s.posterior_log_variance_clipped(1).unwrap();
        let expect: f64 = x0
            .data()
            .iter()
            .zip(mu.data())
            .map(|(x, m)| 0.5 * ((2.0 * PI).ln() + lv + (x - m).powi(2) / lv.exp()))
            .sum::<f64>()
            / 18.0;
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn losses_respect_detachment() {
        let s = NoiseSchedule::linear(100).unwrap();
        let t = 30;
        let (x0, eps, xt) = vb_inputs(t, &s);
        let g = Graph::new();
        let pred = g.param(Tensor::randn(&[2, 3, 3], 1.0, &mut rng(13)));
        let raw = g.param(Tensor::randn(&[2, 3, 3], 1.0, &mut rng(14)));
        let simple = loss_simple_graph(&g, pred, &eps).unwrap();
        let grads = g.backward(simple).unwrap();
        assert!(grads.reached(pred) && !grads.reached(raw));
        let vb = loss_vb_graph(&g, &x0, &xt, t, pred, raw, &s).unwrap();
        let grads = g.backward(vb).unwrap();
        assert!(!grads.reached(pred) && grads.reached(raw));
    }

    #[test]
    fn vb_gradient_matches_finite_differences() {
        let s = NoiseSchedule::linear(100).unwrap();
        for t in [1, 2, 70] {
            let (x0, _, xt) = vb_inputs(t, &s);
            let pred = Tensor::randn(&[2, 3, 3], 1.0, &mut rng(15));
            let report = grad_check(
                |g, raw| loss_vb_graph(g, &x0, &xt, t, g.constant(pred.clone()), raw, &s),
                &Tensor::randn(&[2, 3, 3], 1.0, &mut rng(16)),
                1e-4,
                1e-5,
            )
            .unwrap();
            assert!(report.passed, "t = {t}: {}", report.max_rel_err);
        }
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let s = NoiseSchedule::linear(50).unwrap();
        let model = |x: &Tensor, _t: usize| Ok((x.scale(0.1), x.scale(-0.5)));
        let a = p_sample_loop(model, &[3, 4], &s, &mut rng(17)).unwrap();
        let b = p_sample_loop(model, &[3, 4], &s, &mut rng(17)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_model_sampler_matches_closed_recursion() {
        let steps = 50;
        let s = NoiseSchedule::linear(steps).unwrap();
        let zero = |x: &Tensor, _t: usize| Ok((Tensor::zeros(x.shape()), Tensor::zeros(x.shape())));
        let mut r = rng(18);
        let x_t = Tensor::randn(&[7], 1.0, &mut r);
        let sample = p_sample_from(zero, x_t.clone(), &s, &mut r.clone()).unwrap();

        // independent recursion: x ← x / √α_t + exp(½·(½ log β_t + ½ log β̃_t)) z
        let scale = 1000.0 / steps as f64;
        let beta = |t: usize| scale * (1e-4 + (2e-2 - 1e-4) * (t - 1) as f64 / (steps - 1) as f64);
        let abar = |t: usize| (1..=t).map(|k| 1.0 - beta(k)).product::<f64>();
        let tilde = |t: usize| beta(t) * (1.0 - abar(t - 1)) / (1.0 - abar(t));
        let mut noise = r.clone();
        let mut x: Vec<f64> = x_t.data().to_vec();
        for t in (1..=steps).rev() {
            let lv = 0.5 * beta(t).ln() + 0.5 * tilde(if t == 1 { 2 } else { t }).ln();
            for v in x.iter_mut() {
                *v /= (1.0 - beta(t)).sqrt();
                if t > 1 {
                    let z: f64 = noise.sample(StandardNormal);
                    *v += (0.5 * lv).exp() * z;
                }
            }
        }
        for (a, b) in sample.data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn sampler_reports_failing_step() {
        let s = NoiseSchedule::linear(50).unwrap();
        let bad = |x: &Tensor, t: usize| {
            let e = if t == 4 { x.map(|_| f64::NAN) } else { Tensor::zeros(x.shape()) };
            Ok((e, Tensor::zeros(x.shape())))
        };
        let err = p_sample_loop(bad, &[2], &s, &mut rng(19)).unwrap_err();
        assert!(err.to_string().contains("step 4"), "{err}");
    }
}
