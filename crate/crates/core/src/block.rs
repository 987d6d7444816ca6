//! One DiG block.
//!
//! ```text
//! α₁ β₁ γ₁ α₂ β₂ γ₂ = Linear(SiLU(t + y))
//! z'  = z  + α₁ ⊙ GLA(LN(z)  ⊙ (1 + γ₁) + β₁)
//! z'' = z' + α₂ ⊙ FFN(LN(z') ⊙ (1 + γ₂) + β₂)
//! out = reorient(DWConv(z''), l)
//! ```
//!
//! The modulation layer starts at zero and the convolution at identity, so a
//! fresh block is a pure reorientation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{DigError, Result};
use crate::gla::{kernel, GlaConfig, GlaParams, ScanMode};
use crate::params::{bind_const, join, Linear, Tree};
use crate::srem::{
    identity_init, reorient_graph, scan_4directional_graph, scan_bidirectional_graph,
    DWConvKernel, GlaCall, OpCounter,
};
use crate::tensor::Tensor;

pub const MLP_RATIO: usize = 4;

/// Where the convolution + reorientation pair sits inside the block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SremPosition {
    #[default]
    AfterFfn,
    BeforeAttn,
    BetweenAttnFfn,
}

/// What replaces the single causal GLA call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanStrategy {
    #[default]
    Causal,
    Bidirectional,
    FourDirectional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d: usize,
    /// Width of the conditioning vector `t + y`.
    pub cond_dim: usize,
    pub gla: GlaConfig,
    pub srem: SremPosition,
    pub strategy: ScanStrategy,
    pub dwconv: bool,
    pub reorient: bool,
}

impl BlockConfig {
    pub fn new(d: usize, cond_dim: usize, gla: GlaConfig) -> Result<Self> {
        if gla.d != d {
            return Err(DigError::Config(format!("gla width {} for block width {d}", gla.d)));
        }
        Ok(Self {
            d,
            cond_dim,
            gla,
            srem: SremPosition::default(),
            strategy: ScanStrategy::default(),
            dwconv: true,
            reorient: true,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DiGBlockParams<P> {
    pub adaln: Linear<P>,
    pub gla: GlaParams<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
    pub dwconv: DWConvKernel<P>,
}

impl DiGBlockParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &BlockConfig, rng: &mut R) -> Self {
        let d = cfg.d;
        Self {
            adaln: Linear::zeros(cfg.cond_dim, 6 * d, true),
            gla: GlaParams::init(&cfg.gla, rng),
            fc1: Linear::init(d, MLP_RATIO * d, true, rng),
            fc2: Linear::init(MLP_RATIO * d, d, true, rng),
            dwconv: identity_init(d),
        }
    }
}

impl<P> Tree<P> for DiGBlockParams<P> {
    type Mapped<Q> = DiGBlockParams<Q>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> DiGBlockParams<Q> {
        DiGBlockParams {
            adaln: self.adaln.map_with(&join(prefix, "adaln"), f),
            gla: self.gla.map_with(&join(prefix, "gla"), f),
            fc1: self.fc1.map_with(&join(prefix, "fc1"), f),
            fc2: self.fc2.map_with(&join(prefix, "fc2"), f),
            dwconv: self.dwconv.map_with(&join(prefix, "dwconv"), f),
        }
    }

    fn visit_with(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        self.adaln.visit_with(&join(prefix, "adaln"), f);
        self.gla.visit_with(&join(prefix, "gla"), f);
        self.fc1.visit_with(&join(prefix, "fc1"), f);
        self.fc2.visit_with(&join(prefix, "fc2"), f);
        self.dwconv.visit_with(&join(prefix, "dwconv"), f);
    }

    fn visit_mut_with(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.adaln.visit_mut_with(&join(prefix, "adaln"), f);
        self.gla.visit_mut_with(&join(prefix, "gla"), f);
        self.fc1.visit_mut_with(&join(prefix, "fc1"), f);
        self.fc2.visit_mut_with(&join(prefix, "fc2"), f);
        self.dwconv.visit_mut_with(&join(prefix, "dwconv"), f);
    }
}

/// The six modulation vectors, each `[1 × D]`.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub alpha1: Var,
    pub beta1: Var,
    pub gamma1: Var,
    pub alpha2: Var,
    pub beta2: Var,
    pub gamma2: Var,
}

/// `Linear(SiLU(c))` split into α₁, β₁, γ₁, α₂, β₂, γ₂.
pub fn adaln_modulation_graph(g: &Graph, cond: Var, adaln: &Linear<Var>, d: usize) -> Result<Modulation> {
    let m = adaln.forward(g, g.silu(cond))?;
    let part = |i: usize| g.slice_cols(m, i * d, d);
    Ok(Modulation {
        alpha1: part(0)?,
        beta1: part(1)?,
        gamma1: part(2)?,
        alpha2: part(3)?,
        beta2: part(4)?,
        gamma2: part(5)?,
    })
}

pub fn adaln_modulation(
    t_emb: &Tensor,
    y_emb: &Tensor,
    p: &DiGBlockParams<Tensor>,
) -> Result<[Tensor; 6]> {
    let d = p.fc1.fan_in();
    let g = Graph::new();
    let adaln = bind_const(&g, &p.adaln);
    let cond = g.add(g.constant(t_emb.clone()), g.constant(y_emb.clone()))?;
    let m = adaln_modulation_graph(&g, cond, &adaln, d)?;
    let v = |x: Var| (*g.value(x)).clone();
    Ok([
        v(m.alpha1),
        v(m.beta1),
        v(m.gamma1),
        v(m.alpha2),
        v(m.beta2),
        v(m.gamma2),
    ])
}

/// `LN(x) ⊙ (1 + scale) + shift`.
pub fn modulate(g: &Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let scaled = g.mul_row(g.layer_norm(x), g.add_scalar(scale, 1.0))?;
    g.add_row(scaled, shift)
}

fn srem_graph(
    g: &Graph,
    x: Var,
    p: &DiGBlockParams<Var>,
    cfg: &BlockConfig,
    layer: usize,
    ops: &mut OpCounter,
) -> Result<Var> {
    let y = if cfg.dwconv { g.dwconv2d(x, p.dwconv.weight)? } else { x };
    if cfg.reorient {
        reorient_graph(g, y, layer, ops)
    } else {
        Ok(y)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dig_block_forward_graph(
    g: &Graph,
    z: Var,
    cond: Var,
    layer: usize,
    p: &DiGBlockParams<Var>,
    cfg: &BlockConfig,
    mode: ScanMode,
    ops: &mut OpCounter,
) -> Result<Var> {
    let m = adaln_modulation_graph(g, cond, &p.adaln, cfg.d)?;
    let call = GlaCall {
        params: &p.gla,
        cfg: &cfg.gla,
        mode,
    };

    let mut z = z;
    if cfg.srem == SremPosition::BeforeAttn {
        z = srem_graph(g, z, p, cfg, layer, ops)?;
    }

    let h = modulate(g, z, m.beta1, m.gamma1)?;
    let attn = match cfg.strategy {
        ScanStrategy::Causal => call.run(g, h)?,
        ScanStrategy::Bidirectional => scan_bidirectional_graph(g, h, &call, ops)?,
        ScanStrategy::FourDirectional => scan_4directional_graph(g, h, &call, ops)?,
    };
    z = g.add(z, g.mul_row(attn, m.alpha1)?)?;

    if cfg.srem == SremPosition::BetweenAttnFfn {
        z = srem_graph(g, z, p, cfg, layer, ops)?;
    }

    let h = modulate(g, z, m.beta2, m.gamma2)?;
    let ffn = p.fc2.forward(g, g.gelu(p.fc1.forward(g, h)?))?;
    z = g.add(z, g.mul_row(ffn, m.alpha2)?)?;

    if cfg.srem == SremPosition::AfterFfn {
        z = srem_graph(g, z, p, cfg, layer, ops)?;
    }
    Ok(z)
}

#[allow(clippy::too_many_arguments)]
pub fn dig_block_forward(
    z: &Tensor,
    t_emb: &Tensor,
    y_emb: &Tensor,
    layer: usize,
    p: &DiGBlockParams<Tensor>,
    cfg: &BlockConfig,
    mode: ScanMode,
) -> Result<Tensor> {
    let g = Graph::new();
    let bound = bind_const(&g, p);
    let cond = g.add(g.constant(t_emb.clone()), g.constant(y_emb.clone()))?;
    let out = dig_block_forward_graph(
        &g,
        g.constant(z.clone()),
        cond,
        layer,
        &bound,
        cfg,
        mode,
        &mut OpCounter::default(),
    )?;
    Ok((*g.value(out)).clone())
}

/// Scan multiply-accumulates of a multi-head GLA cell over `tokens`.
pub fn scan_macs(gla: &GlaConfig, tokens: usize, mode: ScanMode) -> u64 {
    let (hk, hv) = (gla.dk / gla.heads, gla.dv / gla.heads);
    let per_head = match mode {
        ScanMode::Recurrent => kernel::recurrent_macs(tokens, hk, hv),
        ScanMode::Chunked(m) => kernel::chunked_macs(tokens, hk, hv, m),
    };
    gla.heads as u64 * per_head
}

/// Multiply-accumulates of one GLA cell: seven projections plus the scan.
pub fn gla_macs(gla: &GlaConfig, tokens: usize, mode: ScanMode) -> u64 {
    let (t, d, dk, dv) = (tokens as u64, gla.d as u64, gla.dk as u64, gla.dv as u64);
    t * d * (3 * dk + 3 * dv) + t * dv * d + scan_macs(gla, tokens, mode)
}

/// Multiply-accumulates of one causal block, as counted on the tape.
pub fn block_macs(cfg: &BlockConfig, tokens: usize, mode: ScanMode) -> u64 {
    let (t, d, c) = (tokens as u64, cfg.d as u64, cfg.cond_dim as u64);
    let scans = match cfg.strategy {
        ScanStrategy::Causal => 1,
        ScanStrategy::Bidirectional => 2,
        ScanStrategy::FourDirectional => 4,
    };
    let conv = if cfg.dwconv { 9 * t * d } else { 0 };
    c * 6 * d + scans * gla_macs(&cfg.gla, tokens, mode) + 2 * MLP_RATIO as u64 * t * d * d + conv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::grad_check_tree;
    use crate::srem::{flip_perm, reorient};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn config(d: usize) -> BlockConfig {
        BlockConfig::new(d, d, GlaConfig::new(d, d / 2, d / 2, 2, 2.0).unwrap()).unwrap()
    }

    /// Every leaf perturbed away from its structured initialization.
    fn random_block(cfg: &BlockConfig, seed: u64) -> DiGBlockParams<Tensor> {
        let mut r = rng(seed);
        let mut p = DiGBlockParams::init(cfg, &mut r);
        p.visit_mut_with("", &mut |_, t| {
            let noise = Tensor::randn(t.shape(), 0.3, &mut r);
            *t = t.add(&noise).unwrap();
        });
        p
    }

    fn embeddings(d: usize, seed: u64) -> (Tensor, Tensor) {
        let mut r = rng(seed);
        (Tensor::randn(&[1, d], 1.0, &mut r), Tensor::randn(&[1, d], 1.0, &mut r))
    }

    #[test]
    fn fresh_modulation_is_zero() {
        let cfg = config(8);
        let p = DiGBlockParams::init(&cfg, &mut rng(0));
        let (t, y) = embeddings(8, 1);
        for m in adaln_modulation(&t, &y, &p).unwrap() {
            assert_eq!(m.shape(), &[1, 8]);
            assert_eq!(m.max_abs(), 0.0);
        }
    }

    #[test]
    fn modulation_depends_only_on_the_sum() {
        let cfg = config(8);
        let p = random_block(&cfg, 2);
        let (t, y) = embeddings(8, 3);
        let shift = Tensor::randn(&[1, 8], 1.0, &mut rng(4));
        let a = adaln_modulation(&t, &y, &p).unwrap();
        let b = adaln_modulation(&t.add(&shift).unwrap(), &y.sub(&shift).unwrap(), &p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y).unwrap() < 1e-12);
        }
    }

    #[test]
    fn modulation_gradient_check() {
        let cfg = config(4);
        let p = random_block(&cfg, 5);
        let cond = Tensor::randn(&[1, 4], 1.0, &mut rng(6));
        let w = Tensor::randn(&[1, 24], 1.0, &mut rng(7));
        let report = grad_check_tree(
            &p.adaln,
            |g, lin| {
                let m = lin.forward(g, g.silu(g.constant(cond.clone())))?;
                Ok(g.sum(g.mul(m, g.constant(w.clone()))?))
            },
            1e-6,
        )
        .unwrap();
        for (name, rel, _) in report {
            assert!(rel < 1e-4, "{name}: {rel}");
        }
    }

    #[test]
    fn fresh_block_is_pure_reorientation() {
        let cfg = config(8);
        let p = DiGBlockParams::init(&cfg, &mut rng(8));
        let z = Tensor::randn(&[16, 8], 1.0, &mut rng(9));
        let (t, y) = embeddings(8, 10);
        for layer in 0..4 {
            let out = dig_block_forward(&z, &t, &y, layer, &p, &cfg, ScanMode::Recurrent).unwrap();
            assert_eq!(out, reorient(&z, layer).unwrap());
        }
    }

    #[test]
    fn zero_gates_leave_only_srem() {
        let cfg = config(8);
        let mut p = random_block(&cfg, 11);
        for (i, x) in p.adaln.weight.data_mut().iter_mut().enumerate() {
            let col = i % 48;
            if col < 8 || (24..32).contains(&col) {
                *x = 0.0;
            }
        }
        let bias = p.adaln.bias.as_mut().unwrap().data_mut();
        bias[..8].fill(0.0);
        bias[24..32].fill(0.0);
        let z = Tensor::randn(&[9, 8], 1.0, &mut rng(12));
        let (t, y) = embeddings(8, 13);
        let out = dig_block_forward(&z, &t, &y, 1, &p, &cfg, ScanMode::Recurrent).unwrap();
        let conv = crate::srem::dwconv2d(&z, &p.dwconv).unwrap();
        assert!(out.max_abs_diff(&reorient(&conv, 1).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn four_fresh_blocks_are_identity() {
        let cfg = config(8);
        let z = Tensor::randn(&[25, 8], 1.0, &mut rng(14));
        let (t, y) = embeddings(8, 15);
        let mut x = z.clone();
        for layer in 0..8 {
            let p = DiGBlockParams::init(&cfg, &mut rng(100 + layer as u64));
            x = dig_block_forward(&x, &t, &y, layer, &p, &cfg, ScanMode::Chunked(4)).unwrap();
        }
        assert_eq!(x, z);
    }

    #[test]
    fn block_is_causal_before_the_flip() {
        let mut cfg = config(8);
        cfg.dwconv = false;
        let p = random_block(&cfg, 16);
        let z = Tensor::randn(&[16, 8], 1.0, &mut rng(17));
        let (t, y) = embeddings(8, 18);
        let base = dig_block_forward(&z, &t, &y, 1, &p, &cfg, ScanMode::Recurrent).unwrap();
        let flip = flip_perm(16);
        for j in [3usize, 9, 15] {
            let mut z2 = z.clone();
            z2.data_mut()[j * 8] += 1.0;
            let moved = dig_block_forward(&z2, &t, &y, 1, &p, &cfg, ScanMode::Recurrent).unwrap();
            for (row, &src) in flip.iter().enumerate() {
                let same = base.row(row) == moved.row(row);
                assert_eq!(same, src < j, "row {row} from token {src}, perturbed {j}");
            }
        }
    }

    #[test]
    fn full_block_gradient_check() {
        let cfg = config(4);
        let p = random_block(&cfg, 19);
        let z = Tensor::randn(&[4, 4], 1.0, &mut rng(20));
        let (t, y) = embeddings(4, 21);
        let w = Tensor::randn(&[4, 4], 1.0, &mut rng(22));
        for pos in [SremPosition::AfterFfn, SremPosition::BeforeAttn, SremPosition::BetweenAttnFfn] {
            let mut cfg = cfg.clone();
            cfg.srem = pos;
            let report = grad_check_tree(
                &p,
                |g, b| {
                    let cond = g.add(g.constant(t.clone()), g.constant(y.clone()))?;
                    let out = dig_block_forward_graph(
                        g,
                        g.constant(z.clone()),
                        cond,
                        0,
                        b,
                        &cfg,
                        ScanMode::Chunked(2),
                        &mut OpCounter::default(),
                    )?;
                    Ok(g.sum(g.mul(out, g.constant(w.clone()))?))
                },
                1e-3,
            )
            .unwrap();
            assert_eq!(report.len(), 17);
            for (name, rel, zero) in report {
                assert!(rel < 1e-4 && !zero, "{pos:?} {name}: {rel}");
            }
        }
    }

    #[test]
    fn srem_positions_differ_once_trained() {
        let cfg = config(8);
        let p = random_block(&cfg, 23);
        let z = Tensor::randn(&[16, 8], 1.0, &mut rng(24));
        let (t, y) = embeddings(8, 25);
        let outs: Vec<Tensor> = [SremPosition::AfterFfn, SremPosition::BeforeAttn, SremPosition::BetweenAttnFfn]
            .into_iter()
            .map(|pos| {
                let mut c = cfg.clone();
                c.srem = pos;
                dig_block_forward(&z, &t, &y, 0, &p, &c, ScanMode::Recurrent).unwrap()
            })
            .collect();
        assert!(outs[0].max_abs_diff(&outs[1]).unwrap() > 1e-6);
        assert!(outs[0].max_abs_diff(&outs[2]).unwrap() > 1e-6);
    }

    #[test]
    fn strategies_count_their_extra_ops() {
        let mut cfg = config(8);
        let p = random_block(&cfg, 26);
        let z = Tensor::randn(&[16, 8], 1.0, &mut rng(27));
        let cond = Tensor::randn(&[1, 8], 1.0, &mut rng(28));
        for (strategy, expected) in [
            (ScanStrategy::Causal, (2, 0)),
            (ScanStrategy::Bidirectional, (5, 1)),
            (ScanStrategy::FourDirectional, (15, 3)),
        ] {
            cfg.strategy = strategy;
            let g = Graph::new();
            let b = bind_const(&g, &p);
            let mut ops = OpCounter::default();
            dig_block_forward_graph(&g, g.constant(z.clone()), g.constant(cond.clone()), 0, &b, &cfg, ScanMode::Recurrent, &mut ops)
                .unwrap();
            assert_eq!(ops.as_pair(), expected, "{strategy:?}");
        }
    }

    #[test]
    fn tape_macs_match_analytic_count() {
        for (strategy, mode) in [
            (ScanStrategy::Causal, ScanMode::Chunked(4)),
            (ScanStrategy::Causal, ScanMode::Recurrent),
            (ScanStrategy::Bidirectional, ScanMode::Chunked(3)),
            (ScanStrategy::FourDirectional, ScanMode::Chunked(16)),
        ] {
            let mut cfg = config(8);
            cfg.strategy = strategy;
            let p = DiGBlockParams::init(&cfg, &mut rng(29));
            let z = Tensor::randn(&[16, 8], 1.0, &mut rng(30));
            let g = Graph::new();
            let b = bind_const(&g, &p);
            let cond = g.constant(Tensor::randn(&[1, 8], 1.0, &mut rng(31)));
            dig_block_forward_graph(&g, g.constant(z), cond, 0, &b, &cfg, mode, &mut OpCounter::default()).unwrap();
            assert_eq!(g.macs(), block_macs(&cfg, 16, mode), "{strategy:?} {mode}");
        }
    }
}
