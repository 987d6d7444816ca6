//! Runtime scaling of softmax attention against chunked GLA.

use std::collections::BTreeMap;
use std::fmt;

use dig_core::{DigError, Result};
use serde::Serialize;

use crate::kernels::{precheck, BenchInputs, PrecheckReport};
use crate::memory::{gla_chunked_bytes, softmax_bytes};
use crate::timing::time_it;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Softmax,
    /// Chunked GLA at the configured chunk length.
    GlaChunked,
    /// Chunked GLA with one chunk spanning the whole sequence.
    GlaFullChunk,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Softmax => "softmax",
            Method::GlaChunked => "gla_chunked",
            Method::GlaFullChunk => "gla_full_chunk",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingConfig {
    pub d: usize,
    pub m: usize,
    pub t_list: Vec<usize>,
    pub batch: usize,
    pub warmup: usize,
    pub repeats: usize,
    /// `M = T` runs stop above this length.
    pub full_chunk_max_t: usize,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            d: 64,
            m: 64,
            t_list: (8..=14).map(|p| 1 << p).collect(),
            batch: 1,
            warmup: 2,
            repeats: 5,
            full_chunk_max_t: 4096,
            seed: 0,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_list.is_empty() || self.t_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DigError::Config("T list must be non-empty and strictly ascending".into()));
        }
        if self.d == 0 || self.m == 0 || self.batch == 0 {
            return Err(DigError::Config("d, m and batch must be positive".into()));
        }
        if self.repeats < 5 || self.warmup < 2 {
            return Err(DigError::Config("need at least 5 repeats after 2 warmups".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub method: Method,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub est_peak_bytes: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub config: ScalingConfig,
    pub precheck: Vec<PrecheckReport>,
    pub rows: Vec<ScalingRow>,
    /// Log-log slope per method, for methods timed at ≥ 4 lengths.
    pub slopes: BTreeMap<String, f64>,
    /// Smallest `T` from which chunked GLA beats softmax at every larger `T`.
    pub crossover_t: Option<usize>,
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return None;
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

impl ScalingReport {
    pub fn median(&self, method: Method, t: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.t == t)
            .map(|r| r.median_ms)
    }

    pub fn slope(&self, method: Method) -> Option<f64> {
        self.slopes.get(&method.to_string()).copied()
    }

    /// Chunked GLA strictly faster than softmax at the largest `T`.
    pub fn gla_faster_at_largest(&self) -> bool {
        let t = *self.config.t_list.last().expect("validated non-empty");
        match (self.median(Method::GlaChunked, t), self.median(Method::Softmax, t)) {
            (Some(g), Some(s)) => g < s,
            _ => false,
        }
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "d": self.config.d,
            "m": self.config.m,
            "t_list": self.config.t_list,
            "slopes": self.slopes,
            "crossover_t": self.crossover_t,
            "gla_faster_at_largest_t": self.gla_faster_at_largest(),
            "precheck": self.precheck,
        })
    }
}

const PRECHECK_LEN: usize = 192;

/// Times every method at every length. Kernels are pre-checked against
/// `f64` oracles first; a failing pre-check aborts before any timing.
pub fn scaling_run(cfg: &ScalingConfig) -> Result<ScalingReport> {
    cfg.validate()?;
    let pre = vec![
        precheck(PRECHECK_LEN, cfg.d, cfg.m, cfg.seed)?,
        precheck(PRECHECK_LEN, cfg.d, PRECHECK_LEN, cfg.seed + 1)?,
    ];
    let elem = std::mem::size_of::<f32>();
    let mut rows = Vec::new();
    for &t in &cfg.t_list {
        let inputs: Vec<BenchInputs<f32>> = (0..cfg.batch)
            .map(|b| BenchInputs::random(t, cfg.d, cfg.seed ^ ((t as u64) << 8) ^ b as u64).to_f32())
            .collect();
        let mut push = |method, m: Option<usize>, bytes, f: &dyn Fn(&BenchInputs<f32>) -> Vec<f32>| {
            let timing = time_it(cfg.warmup, cfg.repeats, || {
                inputs.iter().map(|x| f(x).len()).sum::<usize>()
            });
            rows.push(ScalingRow {
                method,
                t,
                d: cfg.d,
                m,
                median_ms: timing.median_ms,
                p10_ms: timing.p10_ms,
                p90_ms: timing.p90_ms,
                est_peak_bytes: bytes,
            });
        };
        push(Method::Softmax, None, softmax_bytes(cfg.batch, t, elem), &|x| x.softmax());
        let bytes = gla_chunked_bytes(cfg.batch, cfg.m.min(t), cfg.d, cfg.d, elem);
        push(Method::GlaChunked, Some(cfg.m), bytes, &|x| x.gla_chunked(cfg.m));
        if t <= cfg.full_chunk_max_t {
            let bytes = gla_chunked_bytes(cfg.batch, t, cfg.d, cfg.d, elem);
            push(Method::GlaFullChunk, Some(t), bytes, &|x| x.gla_chunked(t));
        }
    }

    let mut slopes = BTreeMap::new();
    for method in [Method::Softmax, Method::GlaChunked, Method::GlaFullChunk] {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| (r.t as f64, r.median_ms))
            .collect();
        if pts.len() >= 4 {
            if let Some(s) = fit_slope(&pts) {
                slopes.insert(method.to_string(), s);
            }
        }
    }

    let mut report = ScalingReport {
        config: cfg.clone(),
        precheck: pre,
        rows,
        slopes,
        crossover_t: None,
    };
    let faster = |t| match (report.median(Method::GlaChunked, t), report.median(Method::Softmax, t)) {
        (Some(g), Some(s)) => g < s,
        _ => false,
    };
    let mut crossover = None;
    for &t in cfg.t_list.iter().rev() {
        if !faster(t) {
            break;
        }
        crossover = Some(t);
    }
    report.crossover_t = crossover;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [16.0, 32.0, 64.0, 128.0].iter().map(|&x| (x, 3.0 * x * x)).collect();
        assert!((fit_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(fit_slope(&[(1.0, 1.0)]), None);
        assert_eq!(fit_slope(&[(1.0, 1.0), (1.0, 2.0)]), None);
        assert_eq!(fit_slope(&[(1.0, 0.0), (2.0, 2.0)]), None);
    }

    #[test]
    fn config_rules() {
        assert!(ScalingConfig::default().validate().is_ok());
        let descending = ScalingConfig {
            t_list: vec![512, 256],
            ..ScalingConfig::default()
        };
        assert!(descending.validate().is_err());
        let few = ScalingConfig {
            repeats: 3,
            ..ScalingConfig::default()
        };
        assert!(few.validate().is_err());
    }

    #[test]
    fn small_run_has_every_row() {
        let cfg = ScalingConfig {
            d: 8,
            m: 4,
            t_list: vec![16, 32, 64, 128],
            full_chunk_max_t: 32,
            ..ScalingConfig::default()
        };
        let rep = scaling_run(&cfg).unwrap();
        assert_eq!(rep.rows.len(), 4 * 2 + 2);
        assert!(rep.slope(Method::Softmax).is_some());
        assert!(rep.slope(Method::GlaFullChunk).is_none());
        assert!(rep.rows.iter().all(|r| r.median_ms > 0.0 && r.p10_ms <= r.p90_ms));
        let json = rep.summary_json();
        assert!(json["slopes"]["softmax"].is_number());
    }
}
