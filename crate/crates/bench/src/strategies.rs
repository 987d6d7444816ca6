//! Timing of the three scan strategies on equal inputs.

use dig_core::block::ScanStrategy;
use dig_core::gla::{gla_forward, GlaParams};
use dig_core::srem::{reorient, scan_4directional, scan_bidirectional, scan_block, transpose_perm};
use dig_core::{DigError, ModelConfig, Result, ScanMode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::timing::time_it;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategyRow {
    pub strategy: ScanStrategy,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub matrix_ops: usize,
    pub scan_ops: usize,
}

/// Strategy outputs rebuilt from single GLA calls and tensor permutations.
fn oracle(strategy: ScanStrategy, x: &Tensor, gla: &dyn Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let side = (x.rows() as f64).sqrt() as usize;
    let tp = transpose_perm(side);
    match strategy {
        ScanStrategy::Causal => reorient(&gla(x)?, 0),
        ScanStrategy::Bidirectional => gla(x)?.add(&gla(&x.flip_seq())?.flip_seq()),
        ScanStrategy::FourDirectional => {
            let xt = x.permute_rows(&tp)?;
            let mut acc = gla(x)?.add(&gla(&x.flip_seq())?.flip_seq())?;
            acc = acc.add(&gla(&xt)?.permute_rows(&tp)?)?;
            acc.add(&gla(&xt.flip_seq())?.flip_seq().permute_rows(&tp)?)
        }
    }
}

/// Times block-by-block, bidirectional and 4-directional scanning at the
/// width and token count of `preset`.
pub fn scan_strategy_bench(preset: &str, warmup: usize, repeats: usize, seed: u64) -> Result<Vec<StrategyRow>> {
    let cfg = ModelConfig::preset(preset)?;
    let (d, t) = (cfg.hidden, cfg.tokens());
    let gcfg = cfg.gla_config(d)?;
    let mode = ScanMode::Chunked(cfg.chunk);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let p = GlaParams::init(&gcfg, &mut r);
    let x = Tensor::randn(&[t, d], 1.0, &mut r);
    let gla = |x: &Tensor| gla_forward(x, &p, &gcfg, mode);

    let run = |s: ScanStrategy| match s {
        ScanStrategy::Causal => scan_block(&x, &p, &gcfg, mode, 0),
        ScanStrategy::Bidirectional => scan_bidirectional(&x, &p, &gcfg, mode),
        ScanStrategy::FourDirectional => scan_4directional(&x, &p, &gcfg, mode),
    };

    let mut rows = Vec::new();
    for s in [ScanStrategy::Causal, ScanStrategy::Bidirectional, ScanStrategy::FourDirectional] {
        let (out, ops) = run(s)?;
        let diff = out.max_abs_diff(&oracle(s, &x, &gla)?)?;
        if diff > 1e-12 {
            return Err(DigError::Numeric(format!("{s:?} differs from oracle by {diff:e}")));
        }
        let timing = time_it(warmup, repeats, || run(s).map(|(o, _)| o.len()));
        rows.push(StrategyRow {
            strategy: s,
            t,
            d,
            median_ms: timing.median_ms,
            p10_ms: timing.p10_ms,
            p90_ms: timing.p90_ms,
            matrix_ops: ops.matrix_ops,
            scan_ops: ops.scan_ops,
        });
    }
    Ok(rows)
}

/// Strict `block < bidirectional < 4-directional` on medians.
pub fn ordering_holds(rows: &[StrategyRow]) -> bool {
    rows.len() == 3 && rows.windows(2).all(|w| w[0].median_ms < w[1].median_ms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_preset_rows_and_counts() {
        let rows = scan_strategy_bench("toy-s", 2, 5, 0).unwrap();
        let counts: Vec<(usize, usize)> = rows.iter().map(|r| (r.matrix_ops, r.scan_ops)).collect();
        assert_eq!(counts, [(2, 0), (3, 1), (13, 3)]);
        assert_eq!((rows[0].t, rows[0].d), (16, 16));
    }

    #[test]
    fn ordering_needs_strict_increase() {
        let mk = |ms| StrategyRow {
            strategy: ScanStrategy::Causal,
            t: 1,
            d: 1,
            median_ms: ms,
            p10_ms: ms,
            p90_ms: ms,
            matrix_ops: 0,
            scan_ops: 0,
        };
        assert!(ordering_holds(&[mk(1.0), mk(2.0), mk(3.0)]));
        assert!(!ordering_holds(&[mk(1.0), mk(1.0), mk(3.0)]));
        assert!(!ordering_holds(&[mk(1.0), mk(2.0)]));
    }
}
