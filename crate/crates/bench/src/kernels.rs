//! Timed kernels and their `f64` correctness pre-check.
//!
//! Both methods take single-head `[T × D]` inputs. Softmax attention is
//! non-causal and processed in blocks of query rows; GLA is causal with
//! outer-product gates and `d_k = d_v = D`.

use dig_core::gla::kernel::{chunked_scan, recurrent_scan, Gates};
use dig_core::linear_attention::softmax_attention_raw;
use dig_core::{DigError, Result};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// Largest per-token log-decay of the benchmark gates.
pub const GATE_LOG_DECAY: f64 = 0.005;

/// Random inputs, stored once in `f64` and converted on demand.
#[derive(Clone, Debug)]
pub struct BenchInputs<F> {
    pub len: usize,
    pub d: usize,
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    pub alpha: Vec<F>,
    pub beta: Vec<F>,
}

impl BenchInputs<f64> {
    /// Unit-variance `Q, K, V`; gates `exp(−u · GATE_LOG_DECAY)` with
    /// `u ~ U(0, 1)`.
    pub fn random(len: usize, d: usize, seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize| -> Vec<f64> {
            (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
        };
        let (q, k, v) = (normal(len * d), normal(len * d), normal(len * d));
        let mut gate = |n: usize| -> Vec<f64> {
            (0..n).map(|_| (-r.gen::<f64>() * GATE_LOG_DECAY).exp()).collect()
        };
        let (alpha, beta) = (gate(len * d), gate(len * d));
        Self { len, d, q, k, v, alpha, beta }
    }

    pub fn to_f32(&self) -> BenchInputs<f32> {
        let c = |x: &[f64]| x.iter().map(|&a| a as f32).collect();
        BenchInputs {
            len: self.len,
            d: self.d,
            q: c(&self.q),
            k: c(&self.k),
            v: c(&self.v),
            alpha: c(&self.alpha),
            beta: c(&self.beta),
        }
    }
}

impl<F: Float> BenchInputs<F> {
    pub fn softmax(&self) -> Vec<F> {
        softmax_attention_raw(&self.q, &self.k, &self.v, self.len, self.d, self.d, false)
    }

    pub fn gla_chunked(&self, chunk: usize) -> Vec<F> {
        let d = self.d;
        chunked_scan(&self.q, &self.k, &self.v, &self.alpha, &self.beta, self.len, d, d, chunk).0
    }

    /// Chunks actually used; fewer than `⌈T/M⌉` never happens, more means
    /// the kernel closed chunks early on strongly decaying gates.
    pub fn gla_chunk_count(&self, chunk: usize) -> usize {
        let d = self.d;
        chunked_scan(&self.q, &self.k, &self.v, &self.alpha, &self.beta, self.len, d, d, chunk).1.chunks
    }

    pub fn gla_recurrent(&self) -> Vec<F> {
        let gates = Gates::Outer {
            alpha: &self.alpha,
            beta: &self.beta,
        };
        recurrent_scan(&self.q, &self.k, &self.v, gates, self.len, self.d, self.d)
    }
}

/// Full `T × T` softmax with explicit normalization.
pub fn softmax_oracle(x: &BenchInputs<f64>) -> Vec<f64> {
    let (t, d) = (x.len, x.d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let scores: Vec<f64> = (0..t)
            .map(|j| (0..d).map(|c| x.q[i * d + c] * x.k[j * d + c]).sum::<f64>() * scale)
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = w.iter().sum();
        for (j, wj) in w.iter().enumerate() {
            for c in 0..d {
                out[i * d + c] += wj / total * x.v[j * d + c];
            }
        }
    }
    out
}

fn max_abs_diff<F: Float>(a: &[F], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x.to_f64().unwrap() - y).abs())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct PrecheckReport {
    pub len: usize,
    pub d: usize,
    pub chunk: usize,
    pub softmax_f64: f64,
    pub softmax_f32: f64,
    pub gla_f64: f64,
    pub gla_f32: f64,
}

pub const F64_TOL: f64 = 1e-9;
pub const F32_TOL: f64 = 1e-3;

/// Compares both timed kernels against oracles at `len`. `f64` paths must
/// agree to `F64_TOL`; the `f32` paths to `F32_TOL` relative to the
/// largest output.
pub fn precheck(len: usize, d: usize, chunk: usize, seed: u64) -> Result<PrecheckReport> {
    let x = BenchInputs::random(len, d, seed);
    let xf = x.to_f32();
    let soft = softmax_oracle(&x);
    let gla = x.gla_recurrent();
    let rel = |v: &[f64]| v.iter().fold(1.0f64, |m, a| m.max(a.abs()));
    let report = PrecheckReport {
        len,
        d,
        chunk,
        softmax_f64: max_abs_diff(&x.softmax(), &soft),
        softmax_f32: max_abs_diff(&xf.softmax(), &soft) / rel(&soft),
        gla_f64: max_abs_diff(&x.gla_chunked(chunk), &gla),
        gla_f32: max_abs_diff(&xf.gla_chunked(chunk), &gla) / rel(&gla),
    };
    let ok = report.softmax_f64 <= F64_TOL
        && report.gla_f64 <= F64_TOL
        && report.softmax_f32 <= F32_TOL
        && report.gla_f32 <= F32_TOL;
    if ok {
        Ok(report)
    } else {
        Err(DigError::Numeric(format!("kernel pre-check failed: {report:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_on_single_token_returns_value() {
        let x = BenchInputs::random(1, 4, 0);
        assert_eq!(softmax_oracle(&x), x.v);
    }

    #[test]
    fn precheck_passes_for_several_chunks() {
        for chunk in [1, 7, 64, 200] {
            precheck(96, 16, chunk, chunk as u64).unwrap();
        }
    }

    #[test]
    fn inputs_have_unit_scale_and_gentle_gates() {
        let x = BenchInputs::random(512, 8, 3);
        let var = x.q.iter().map(|a| a * a).sum::<f64>() / x.q.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
        let lo = (-GATE_LOG_DECAY).exp();
        assert!(x.alpha.iter().all(|&a| a > lo && a <= 1.0));
    }

    #[test]
    fn full_length_chunk_stays_single() {
        let x = BenchInputs::random(4096, 4, 1).to_f32();
        assert_eq!(x.gla_chunk_count(4096), 1);
        assert_eq!(x.gla_chunk_count(64), 64);
    }
}
