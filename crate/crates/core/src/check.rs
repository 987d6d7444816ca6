//! Self-contained invariant checks with pass/fail reports.
//!
//! Each check regenerates its own inputs from a seed, so the same suite
//! backs the acceptance runner and the `check` subcommand.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::block::{dig_block_forward_graph, BlockConfig, DiGBlockParams, ScanStrategy};
use crate::diffusion::{gaussian_kl, q_sample, q_step, NoiseSchedule};
use crate::error::Result;
use crate::gla::{gla_scan, gla_scan_chunked, outer_gates, ChunkSpec, GlaConfig, ScanMode};
use crate::harness::{
    cycle_labels, eval_loss_simple, projected_energy_distance, sample, train, RunConfig,
    TrainState,
};
use crate::linear_attention::{lin_attn_normalized, lin_attn_normalized_batch, lin_attn_simple, FeatureMap};
use crate::model::{dit_macs, flops_estimate, model_forward, model_forward_graph, ModelConfig, ModelParams};
use crate::params::{bind_const, grad_check_tree, Tree};
use crate::srem::{dwconv2d, identity_init, OpCounter, ReorientSchedule};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed_ms: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gates in `(0, 1)` shaped like the cell's `σ(·)^{1/τ}`.
fn random_gate(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 2.0, r).map(|x| crate::tensor::sigmoid(x).powf(1.0 / 16.0))
}

/// Chunked scan against the recurrent scan over random shapes and chunk
/// lengths `M ∈ {1, 2, 4, 8, L}`.
pub fn gla_equivalence(cases: usize, seed: u64) -> CheckOutcome {
    timed("gla chunked == recurrent", || {
        let mut r = rng(seed);
        let mut worst = 0.0f64;
        for case in 0..cases {
            let l = r.gen_range(1..=64);
            let (dk, dv) = (r.gen_range(1..=32), r.gen_range(1..=32));
            let m = [1, 2, 4, 8, l][case % 5];
            let q = Tensor::randn(&[l, dk], 1.0, &mut r);
            let k = Tensor::randn(&[l, dk], 1.0, &mut r);
            let v = Tensor::randn(&[l, dv], 1.0, &mut r);
            let alpha = random_gate(&[l, dk], &mut r);
            let beta = random_gate(&[l, dv], &mut r);
            let full = gla_scan(&q, &k, &v, &outer_gates(&alpha, &beta)?)?;
            let chunked = gla_scan_chunked(&q, &k, &v, &alpha, &beta, ChunkSpec::new(m)?)?;
            worst = worst.max(full.max_abs_diff(&chunked)?);
        }
        Ok((worst <= 1e-9, format!("{cases} cases, max |diff| {worst:.3e}")))
    })
}

/// Unit gates reduce the scan to plain linear attention, and the streaming
/// normalized form matches the masked batch form.
pub fn reductions(seed: u64) -> CheckOutcome {
    timed("linear attention reductions", || {
        let mut r = rng(seed);
        let (mut ones_err, mut norm_err) = (0.0f64, 0.0f64);
        for _ in 0..50 {
            let l = r.gen_range(1..=32);
            let (dk, dv) = (r.gen_range(1..=8), r.gen_range(1..=8));
            let q = Tensor::randn(&[l, dk], 1.0, &mut r);
            let k = Tensor::randn(&[l, dk], 1.0, &mut r);
            let v = Tensor::randn(&[l, dv], 1.0, &mut r);
            let g = gla_scan(&q, &k, &v, &Tensor::ones(&[l, dk, dv]))?;
            ones_err = ones_err.max(g.max_abs_diff(&lin_attn_simple(&q, &k, &v)?)?);
            let stream = lin_attn_normalized(&q, &k, &v, FeatureMap::EluPlusOne)?;
            let batch = lin_attn_normalized_batch(&q, &k, &v, FeatureMap::EluPlusOne)?;
            norm_err = norm_err.max(stream.max_abs_diff(&batch)?);
        }
        Ok((
            ones_err <= 1e-12 && norm_err <= 1e-12,
            format!("G=1 vs simple {ones_err:.3e}; streaming vs batch {norm_err:.3e}"),
        ))
    })
}

/// Two-block model with `D = 8` on a 4×4 token grid.
pub fn gradient_toy() -> ModelConfig {
    let mut cfg = ModelConfig::preset("toy-s").expect("built-in preset");
    cfg.name = "grad-toy".into();
    cfg.layers = 2;
    cfg.hidden = 8;
    cfg.image = 4;
    cfg.patch = 1;
    cfg.freq_dim = 8;
    cfg.chunk = 4;
    cfg.num_classes = 3;
    cfg.dk_divisor = 2;
    cfg.dv_divisor = 2;
    cfg
}

/// Finite differences against the tape for every learnable tensor of the
/// gradient toy, with all parameters perturbed away from their init.
pub fn gradients(seed: u64) -> CheckOutcome {
    timed("end-to-end gradients", || {
        let cfg = gradient_toy();
        let mut r = rng(seed);
        let mut p = ModelParams::init(&cfg, &mut r)?;
        p.visit_mut_with("", &mut |_, t| *t = t.add(&Tensor::randn(t.shape(), 0.3, &mut r)).unwrap());
        let shape = [cfg.channels, cfg.image, cfg.image];
        let x = Tensor::randn(&shape, 1.0, &mut r);
        let (wn, wc) = (Tensor::randn(&shape, 1.0, &mut r), Tensor::randn(&shape, 1.0, &mut r));
        let report = grad_check_tree(
            &p,
            |g, b| {
                let (n, c) = model_forward_graph(
                    g,
                    g.constant(x.clone()),
                    4,
                    2,
                    b,
                    &cfg,
                    ScanMode::Chunked(cfg.chunk),
                    &mut OpCounter::default(),
                )?;
                let a = g.sum(g.mul(n, g.constant(wn.clone()))?);
                let c = g.sum(g.mul(c, g.constant(wc.clone()))?);
                g.add(a, c)
            },
            1e-3,
        )?;
        let (worst_name, worst) = report
            .iter()
            .map(|(n, rel, _)| (n.clone(), *rel))
            .fold((String::new(), 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        let passed = report.iter().all(|(_, rel, _)| *rel < 1e-4);
        Ok((
            passed,
            format!("{} tensors, worst rel err {worst:.3e} ({worst_name})", report.len()),
        ))
    })
}

/// Identity convolution, zero-output init, window identity and distinct
/// reading orders.
pub fn structural(seed: u64) -> CheckOutcome {
    timed("structural invariants", || {
        let mut r = rng(seed);
        let mut notes = Vec::new();

        let grid = Tensor::randn(&[36, 5], 1.0, &mut r);
        let conv_ok = dwconv2d(&grid, &identity_init(5))? == grid;
        notes.push(format!("identity conv bitwise {conv_ok}"));

        let mut zero_ok = true;
        for name in ["toy-s", "toy-udig", "xl-toy"] {
            let cfg = ModelConfig::preset(name)?;
            let p = ModelParams::init(&cfg, &mut r)?;
            let x = Tensor::randn(&[cfg.channels, cfg.image, cfg.image], 1.0, &mut r);
            let (noise, _) = model_forward(&x, 3, 1, &p, &cfg, ScanMode::Chunked(cfg.chunk))?;
            zero_ok &= noise.data().iter().all(|&v| v == 0.0);
        }
        notes.push(format!("fresh model outputs zero {zero_ok}"));

        let (mut window_ok, mut distinct_ok) = (true, true);
        for side in 2..=8 {
            let sched = ReorientSchedule::new(12, side * side)?;
            let identity: Vec<usize> = (0..side * side).collect();
            for start in 0..=sched.num_layers - 4 {
                window_ok &= sched.restore_range(start, 4) == identity;
                let orders: Vec<Vec<usize>> = (start..start + 4).map(|l| sched.reading_order(l)).collect();
                for i in 0..4 {
                    for j in i + 1..4 {
                        distinct_ok &= orders[i] != orders[j];
                    }
                }
            }
        }
        notes.push(format!("4-block windows identity {window_ok}"));
        notes.push(format!("reading orders distinct {distinct_ok}"));
        Ok((conv_ok && zero_ok && window_ok && distinct_ok, notes.join("; ")))
    })
}

/// `(strategy, layer, (matrix ops, scan ops))`.
pub type OpCountRow = (ScanStrategy, usize, (usize, usize));

/// Extra operations recorded by one block under each scan strategy.
pub fn strategy_op_counts() -> Result<Vec<OpCountRow>> {
    let mut r = rng(0);
    let d = 16;
    let mut out = Vec::new();
    for strategy in [ScanStrategy::Causal, ScanStrategy::Bidirectional, ScanStrategy::FourDirectional] {
        let mut cfg = BlockConfig::new(d, d, GlaConfig::standard(d)?)?;
        cfg.strategy = strategy;
        cfg.reorient = strategy == ScanStrategy::Causal;
        cfg.dwconv = false;
        let p = DiGBlockParams::init(&cfg, &mut r);
        for layer in [0, 1] {
            let g = Graph::new();
            let bound = bind_const(&g, &p);
            let z = g.constant(Tensor::randn(&[16, d], 1.0, &mut r));
            let cond = g.constant(Tensor::randn(&[1, d], 1.0, &mut r));
            let mut ops = OpCounter::default();
            dig_block_forward_graph(&g, z, cond, layer, &bound, &cfg, ScanMode::Chunked(4), &mut ops)?;
            out.push((strategy, layer, ops.as_pair()));
        }
    }
    Ok(out)
}

pub fn op_counts() -> CheckOutcome {
    timed("scan strategy op counts", || {
        let expected = |s| match s {
            ScanStrategy::Causal => (2, 0),
            ScanStrategy::Bidirectional => (3, 1),
            ScanStrategy::FourDirectional => (13, 3),
        };
        let rows = strategy_op_counts()?;
        let passed = rows.iter().all(|&(s, _, got)| got == expected(s));
        let detail = rows
            .iter()
            .map(|(s, l, (m, k))| format!("{s:?}@{l}=({m},{k})"))
            .collect::<Vec<_>>()
            .join(" ");
        Ok((passed, detail))
    })
}

/// Published Gflops and percentage of the matching DiT.
pub const PAPER_FLOPS: [(&str, f64, f64); 5] = [
    ("dig-s", 4.30, 70.8),
    ("dig-b", 17.07, 74.1),
    ("dig-l", 61.66, 76.3),
    ("dig-xl", 89.40, 75.3),
    ("udig-s", 4.10, 67.6),
];

pub const DIT_S2_GFLOPS: f64 = 6.06;

pub fn flops_table() -> CheckOutcome {
    timed("analytic flops", || {
        let mut passed = true;
        let mut parts = Vec::new();
        for (name, gflops, pct) in PAPER_FLOPS {
            let rep = flops_estimate(&ModelConfig::preset(name)?)?;
            let ratio = 100.0 * rep.ratio.unwrap_or(f64::NAN);
            let ok = (rep.gflops / gflops - 1.0).abs() <= 0.05 && (ratio - pct).abs() <= 2.0;
            passed &= ok;
            parts.push(format!("{name} {:.2}G {ratio:.1}%", rep.gflops));
        }
        let dit = dit_macs(12, 384, 2, 32, 4, 256) as f64 / 1e9;
        passed &= (dit / DIT_S2_GFLOPS - 1.0).abs() <= 0.05;
        parts.push(format!("dit-s/2 {dit:.2}G"));
        Ok((passed, parts.join("; ")))
    })
}

/// Schedule normalization, forward-chain marginals at 10⁵ samples and
/// closed-form KL values.
pub fn diffusion_identities(seed: u64) -> CheckOutcome {
    timed("diffusion identities", || {
        let s = NoiseSchedule::linear(1000)?;
        let norm = s
            .alpha_bar
            .iter()
            .map(|ab| (ab.sqrt().powi(2) + (1.0 - ab) - 1.0).abs())
            .fold(0.0, f64::max);

        const N: usize = 100_000;
        let toy = NoiseSchedule::linear(100)?;
        let mut r = rng(seed);
        let x0 = 1.2;
        let mut x = Tensor::full(&[N], x0);
        let mut bands_ok = true;
        for t in 1..=60 {
            x = q_step(&x, t, &Tensor::randn(&[N], 1.0, &mut r), &toy)?;
            if [5, 30, 60].contains(&t) {
                let closed = q_sample(&Tensor::full(&[N], x0), t, &Tensor::randn(&[N], 1.0, &mut r), &toy)?;
                let ab = toy.alpha_bar[t];
                for sample in [&x, &closed] {
                    bands_ok &= within_bands(sample, ab.sqrt() * x0, 1.0 - ab);
                }
            }
        }

        let kl_ok = gaussian_kl(0.3, -0.7, 0.3, -0.7) == 0.0
            && gaussian_kl(1.0, 0.0, 0.0, 0.0) == 0.5
            && gaussian_kl(0.0, 0.0, 0.0, 4f64.ln()) == (0.5 * (4f64.ln() + 0.25 - 1.0))
            && gaussian_kl(2.0, 0.0, 0.0, 0.0) == 2.0;

        Ok((
            norm < 1e-15 && bands_ok && kl_ok,
            format!("normalization {norm:.1e}; marginal bands {bands_ok}; kl hand cases {kl_ok}"),
        ))
    })
}

fn within_bands(x: &Tensor, mu: f64, var: f64) -> bool {
    let n = x.len() as f64;
    let m = x.mean();
    let v = x.data().iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m - mu).abs() < 3.0 * (var / n).sqrt() && (v - var).abs() < 3.0 * var * (2.0 / (n - 1.0)).sqrt()
}

#[derive(Clone, Debug, Serialize)]
pub struct ToyRunReport {
    pub steps: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub energy_trained: f64,
    pub energy_untrained: f64,
}

impl ToyRunReport {
    pub fn loss_reduction(&self) -> f64 {
        1.0 - self.loss_after / self.loss_before
    }

    pub fn energy_ratio(&self) -> f64 {
        self.energy_trained / self.energy_untrained
    }

    pub fn passed(&self) -> bool {
        self.loss_reduction() >= 0.5 && self.energy_ratio() < 0.5
    }
}

const EVAL_PAIRS: usize = 512;

/// Trains from the run's seed, then compares held-out `L_simple` and the
/// EMA sampler's projected energy distance against the untrained model.
pub fn toy_run(run: &RunConfig, steps: usize) -> Result<ToyRunReport> {
    let (data, held_out) = run.datasets()?;
    let mut state = TrainState::seeded(run)?;
    let untrained = state.ema.clone();
    let eval_seed = run.train.seed ^ 0xe7a1;
    let loss_before = eval_loss_simple(run, &state.params, &held_out, EVAL_PAIRS, eval_seed)?;
    train(run, &data, &mut state, steps, |_| Ok(()))?;
    let loss_after = eval_loss_simple(run, &state.params, &held_out, EVAL_PAIRS, eval_seed)?;

    let labels = cycle_labels(run.train.sample_count, run.model.num_classes);
    let reference = held_out.rows();
    let energy = |p: &ModelParams<Tensor>| -> Result<f64> {
        let rows: Vec<Vec<f64>> = sample(run, p, &labels, run.train.seed)?
            .into_iter()
            .map(Tensor::into_data)
            .collect();
        projected_energy_distance(&reference, &rows)
    };
    Ok(ToyRunReport {
        steps,
        loss_before,
        loss_after,
        energy_trained: energy(&state.ema)?,
        energy_untrained: energy(&untrained)?,
    })
}

pub fn toy_training(run: &RunConfig, steps: usize) -> CheckOutcome {
    timed("toy training", || {
        let rep = toy_run(run, steps)?;
        Ok((
            rep.passed(),
            format!(
                "{} steps: L_simple {:.4} -> {:.4} ({:.0}% lower); energy {:.4} vs untrained {:.4} (ratio {:.3})",
                rep.steps,
                rep.loss_before,
                rep.loss_after,
                100.0 * rep.loss_reduction(),
                rep.energy_trained,
                rep.energy_untrained,
                rep.energy_ratio()
            ),
        ))
    })
}

/// Every check except toy training, in a fixed order.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        gla_equivalence(200, seed),
        reductions(seed),
        gradients(seed),
        structural(seed),
        op_counts(),
        flops_table(),
        diffusion_identities(seed),
    ]
}
