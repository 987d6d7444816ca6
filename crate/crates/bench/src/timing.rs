//! Wall-clock sampling with warmup and order statistics.

use std::time::Instant;

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub repeats: usize,
    /// Calls folded into each sample when one call is below the timer floor.
    pub inner: usize,
}

/// Below this a single call is repeated inside one sample.
const MIN_SAMPLE_MS: f64 = 2.0;

/// Linear-interpolated quantile of sorted data, `q ∈ [0, 1]`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Runs `f` `warmup` times, then records `repeats` samples.
pub fn time_it<T>(warmup: usize, repeats: usize, mut f: impl FnMut() -> T) -> Timing {
    assert!(repeats >= 1, "need at least one repeat");
    let mut first = f64::INFINITY;
    for _ in 0..warmup.max(1) {
        let start = Instant::now();
        std::hint::black_box(f());
        first = first.min(start.elapsed().as_secs_f64() * 1e3);
    }
    let inner = if first < MIN_SAMPLE_MS {
        (MIN_SAMPLE_MS / first.max(1e-6)).ceil() as usize
    } else {
        1
    };
    let mut samples: Vec<f64> = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..inner {
                std::hint::black_box(f());
            }
            start.elapsed().as_secs_f64() * 1e3 / inner as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    Timing {
        median_ms: quantile(&samples, 0.5),
        p10_ms: quantile(&samples, 0.1),
        p90_ms: quantile(&samples, 0.9),
        repeats,
        inner,
    }
}
