//! Spatial reorientation and enhancement.
//!
//! Tokens live on a row-major `n × n` grid. Block `l` (0-based) reorients
//! its output: even blocks transpose the grid, odd blocks reverse the
//! sequence. Transpose and reversal commute and are involutions, so any four
//! consecutive blocks compose to the identity while each of the four scans
//! in that window reads the grid in a different direction.
//!
//! Permutations use the gather convention `out[i] = in[perm[i]]`.
//!
//! The multi-path baselines count their extra work in an [`OpCounter`]:
//! flip, transpose, flatten and elementwise add each count as one matrix op;
//! `reshape2d` is a free view of the same buffer.

use crate::autograd::{dwconv_forward, Graph, Var};
use crate::error::{DigError, Result};
use crate::gla::{gla_forward_graph, GlaConfig, GlaParams, ScanMode};
use crate::params::{bind_const, join, Tree};
use crate::tensor::{grid_side, Tensor};

/// Per-channel 3×3 kernel, `weight: [D × 3 × 3]`, no bias.
#[derive(Clone, Debug)]
pub struct DWConvKernel<P> {
    pub weight: P,
}

/// Center tap 1, every other tap 0, for every channel.
pub fn identity_init(d: usize) -> DWConvKernel<Tensor> {
    DWConvKernel {
        weight: Tensor::from_fn(&[d, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 }),
    }
}

impl<P> Tree<P> for DWConvKernel<P> {
    type Mapped<Q> = DWConvKernel<Q>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> DWConvKernel<Q> {
        DWConvKernel {
            weight: f(&join(prefix, "weight"), &self.weight),
        }
    }

    fn visit_with(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        f(&join(prefix, "weight"), &self.weight);
    }

    fn visit_mut_with(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}

/// Depthwise 3×3 convolution, zero padding, stride 1. Accepts `[T × D]`
/// tokens or an `[n × n × D]` grid and returns the same shape.
pub fn dwconv2d(tokens: &Tensor, k: &DWConvKernel<Tensor>) -> Result<Tensor> {
    let flat = match tokens.rank() {
        3 if tokens.shape()[0] == tokens.shape()[1] => tokens.flatten()?,
        2 => tokens.clone(),
        _ => {
            return Err(DigError::shape(
                "dwconv2d",
                format!("expected [T, D] or [n, n, D], got {:?}", tokens.shape()),
            ))
        }
    };
    dwconv_forward(&flat, &k.weight)?.reshape(tokens.shape())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReorientOp {
    /// reshape2d → transpose → flatten
    Transpose,
    /// flatten → flip
    Flip,
}

pub fn reorient_op(layer: usize) -> ReorientOp {
    if layer.is_multiple_of(2) {
        ReorientOp::Transpose
    } else {
        ReorientOp::Flip
    }
}

pub fn transpose_perm(side: usize) -> Vec<usize> {
    (0..side * side).map(|i| (i % side) * side + i / side).collect()
}

pub fn flip_perm(len: usize) -> Vec<usize> {
    (0..len).rev().collect()
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(a then b)[i] = a[b[i]]` under the gather convention.
pub fn compose(a: &[usize], b: &[usize]) -> Vec<usize> {
    b.iter().map(|&i| a[i]).collect()
}

/// Reorientation plan for a stack of blocks on an `n × n` grid.
#[derive(Clone, Debug)]
pub struct ReorientSchedule {
    pub num_layers: usize,
    pub side: usize,
}

impl ReorientSchedule {
    pub fn new(num_layers: usize, tokens: usize) -> Result<Self> {
        let side = grid_side(tokens).ok_or_else(|| {
            DigError::shape("reorient", format!("token count {tokens} is not a perfect square"))
        })?;
        Ok(Self { num_layers, side })
    }

    pub fn tokens(&self) -> usize {
        self.side * self.side
    }

    pub fn layer_perm(&self, layer: usize) -> Vec<usize> {
        match reorient_op(layer) {
            ReorientOp::Transpose => transpose_perm(self.side),
            ReorientOp::Flip => flip_perm(self.tokens()),
        }
    }

    /// Where each output row of block `layer` came from in the original
    /// row-major order, after blocks `0..=layer`.
    pub fn cumulative_perm(&self, layer: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..self.tokens()).collect();
        for l in 0..=layer {
            p = compose(&p, &self.layer_perm(l));
        }
        p
    }

    /// Original grid positions in the order block `layer` scans them.
    pub fn reading_order(&self, layer: usize) -> Vec<usize> {
        if layer == 0 {
            (0..self.tokens()).collect()
        } else {
            self.cumulative_perm(layer - 1)
        }
    }

    /// Gather that restores row-major order after every block has run.
    pub fn restore_perm(&self) -> Vec<usize> {
        self.restore_range(0, self.num_layers)
    }

    /// Gather that undoes blocks `first..first+count`.
    pub fn restore_range(&self, first: usize, count: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..self.tokens()).collect();
        for l in first..first + count {
            p = compose(&p, &self.layer_perm(l));
        }
        invert(&p)
    }
}

/// Extra work beyond one GLA scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub matrix_ops: usize,
    pub scan_ops: usize,
}

impl OpCounter {
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn as_pair(&self) -> (usize, usize) {
        (self.matrix_ops, self.scan_ops)
    }
}

fn side_of(g: &Graph, x: Var) -> Result<usize> {
    let t = g.shape(x)[0];
    grid_side(t).ok_or_else(|| {
        DigError::shape("reorient", format!("token count {t} is not a perfect square"))
    })
}

fn flip(g: &Graph, x: Var, ops: &mut OpCounter) -> Var {
    ops.matrix_ops += 1;
    g.flip_rows(x)
}

/// `flatten(transpose(reshape2d(x)))`: two counted ops.
fn grid_transpose(g: &Graph, x: Var, ops: &mut OpCounter) -> Result<Var> {
    ops.matrix_ops += 2;
    g.permute_rows(x, &transpose_perm(side_of(g, x)?))
}

fn add(g: &Graph, a: Var, b: Var, ops: &mut OpCounter) -> Result<Var> {
    ops.matrix_ops += 1;
    g.add(a, b)
}

pub fn reorient_graph(g: &Graph, x: Var, layer: usize, ops: &mut OpCounter) -> Result<Var> {
    match reorient_op(layer) {
        ReorientOp::Transpose => grid_transpose(g, x, ops),
        ReorientOp::Flip => {
            side_of(g, x)?;
            ops.matrix_ops += 1;
            Ok(flip(g, x, ops))
        }
    }
}

pub fn reorient(tokens: &Tensor, layer: usize) -> Result<Tensor> {
    let g = Graph::new();
    let x = g.constant(tokens.clone());
    let y = reorient_graph(&g, x, layer, &mut OpCounter::default())?;
    Ok((*g.value(y)).clone())
}

/// Tape-level GLA shorthand shared by the scan strategies.
pub struct GlaCall<'a> {
    pub params: &'a GlaParams<Var>,
    pub cfg: &'a GlaConfig,
    pub mode: ScanMode,
}

impl GlaCall<'_> {
    pub fn run(&self, g: &Graph, x: Var) -> Result<Var> {
        gla_forward_graph(g, x, self.params, self.cfg, self.mode)
    }
}

/// `GLA(x) + flip(GLA(flip(x)))`.
pub fn scan_bidirectional_graph(g: &Graph, x: Var, gla: &GlaCall<'_>, ops: &mut OpCounter) -> Result<Var> {
    let out1 = gla.run(g, x)?;
    let x2 = flip(g, x, ops);
    ops.scan_ops += 1;
    let out2 = gla.run(g, x2)?;
    let back2 = flip(g, out2, ops);
    add(g, out1, back2, ops)
}

/// Sum of row-forward, row-backward, column-forward and column-backward
/// scans, each mapped back to row-major order.
pub fn scan_4directional_graph(g: &Graph, x: Var, gla: &GlaCall<'_>, ops: &mut OpCounter) -> Result<Var> {
    side_of(g, x)?;
    let out1 = gla.run(g, x)?;

    let x2 = flip(g, x, ops);
    ops.scan_ops += 1;
    let back2 = flip(g, gla.run(g, x2)?, ops);

    let x3 = grid_transpose(g, x, ops)?;
    ops.scan_ops += 1;
    let back3 = grid_transpose(g, gla.run(g, x3)?, ops)?;

    let x4 = flip(g, x3, ops);
    ops.scan_ops += 1;
    let out4 = gla.run(g, x4)?;
    let back4 = grid_transpose(g, flip(g, out4, ops), ops)?;

    let s = add(g, out1, back2, ops)?;
    let s = add(g, s, back3, ops)?;
    add(g, s, back4, ops)
}

/// One causal scan followed by the block's reorientation.
pub fn scan_block_graph(
    g: &Graph,
    x: Var,
    gla: &GlaCall<'_>,
    layer: usize,
    ops: &mut OpCounter,
) -> Result<Var> {
    let out = gla.run(g, x)?;
    reorient_graph(g, out, layer, ops)
}

fn run_tensor(
    x: &Tensor,
    p: &GlaParams<Tensor>,
    cfg: &GlaConfig,
    mode: ScanMode,
    f: impl Fn(&Graph, Var, &GlaCall<'_>, &mut OpCounter) -> Result<Var>,
) -> Result<(Tensor, OpCounter)> {
    let g = Graph::new();
    let bound = bind_const(&g, p);
    let call = GlaCall {
        params: &bound,
        cfg,
        mode,
    };
    let mut ops = OpCounter::default();
    let y = f(&g, g.constant(x.clone()), &call, &mut ops)?;
    Ok(((*g.value(y)).clone(), ops))
}

pub fn scan_bidirectional(
    x: &Tensor,
    p: &GlaParams<Tensor>,
    cfg: &GlaConfig,
    mode: ScanMode,
) -> Result<(Tensor, OpCounter)> {
    run_tensor(x, p, cfg, mode, scan_bidirectional_graph)
}

pub fn scan_4directional(
    x: &Tensor,
    p: &GlaParams<Tensor>,
    cfg: &GlaConfig,
    mode: ScanMode,
) -> Result<(Tensor, OpCounter)> {
    run_tensor(x, p, cfg, mode, scan_4directional_graph)
}

pub fn scan_block(
    x: &Tensor,
    p: &GlaParams<Tensor>,
    cfg: &GlaConfig,
    mode: ScanMode,
    layer: usize,
) -> Result<(Tensor, OpCounter)> {
    run_tensor(x, p, cfg, mode, |g, x, call, ops| {
        scan_block_graph(g, x, call, layer, ops)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::gla::gla_forward;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn letters() -> Tensor {
        Tensor::new(&[4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    /// Direct nested-loop convolution on an `n × n × d` grid.
    fn conv_oracle(x: &Tensor, k: &Tensor, n: usize, d: usize) -> Tensor {
        Tensor::from_fn(&[n * n, d], |idx| {
            let (pos, ch) = (idx / d, idx % d);
            let (r, c) = ((pos / n) as i64, (pos % n) as i64);
            let mut s = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && cc >= 0 && rr < n as i64 && cc < n as i64 {
                        let w = k.at(&[ch, (dr + 1) as usize, (dc + 1) as usize]);
                        s += w * x.at(&[(rr as usize) * n + cc as usize, ch]);
                    }
                }
            }
            s
        })
    }

    #[test]
    fn identity_kernel_layout() {
        let k = identity_init(1);
        assert_eq!(k.weight.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_conv_is_bitwise_identity() {
        let x = Tensor::randn(&[25, 3], 10.0, &mut rng(0));
        assert_eq!(dwconv2d(&x, &identity_init(3)).unwrap(), x);
        let grid = x.reshape(&[5, 5, 3]).unwrap();
        assert_eq!(dwconv2d(&grid, &identity_init(3)).unwrap(), grid);
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let x = Tensor::full(&[16, 1], 2.0);
        let k = DWConvKernel {
            weight: Tensor::ones(&[1, 3, 3]),
        };
        let y = dwconv2d(&x, &k).unwrap();
        assert_eq!(y.at(&[5, 0]), 18.0);
        assert_eq!(y.at(&[0, 0]), 8.0);
        assert_eq!(y.at(&[1, 0]), 12.0);
    }

    #[test]
    fn conv_matches_nested_loops() {
        let x = Tensor::randn(&[16, 2], 1.0, &mut rng(1));
        let k = Tensor::randn(&[2, 3, 3], 1.0, &mut rng(2));
        let y = dwconv2d(&x, &DWConvKernel { weight: k.clone() }).unwrap();
        assert!(y.max_abs_diff(&conv_oracle(&x, &k, 4, 2)).unwrap() < 1e-14);
    }

    #[test]
    fn conv_rejects_non_square() {
        let x = Tensor::zeros(&[6, 2]);
        assert!(dwconv2d(&x, &identity_init(2)).is_err());
    }

    #[test]
    fn kernel_gradient_at_identity_init() {
        let x = Tensor::randn(&[9, 2], 1.0, &mut rng(3));
        let w = Tensor::randn(&[9, 2], 1.0, &mut rng(4));
        let r = grad_check(
            |g, k| {
                let y = g.dwconv2d(g.constant(x.clone()), k)?;
                Ok(g.sum(g.square(g.mul(y, g.constant(w.clone()))?)))
            },
            &identity_init(2).weight,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{}", r.max_rel_err);
    }

    #[test]
    fn reorient_small_grid() {
        let t = reorient(&letters(), 0).unwrap();
        assert_eq!(t.data(), &[0.0, 2.0, 1.0, 3.0]);
        let f = reorient(&letters(), 1).unwrap();
        assert_eq!(f.data(), &[3.0, 2.0, 1.0, 0.0]);
        assert!(reorient(&Tensor::zeros(&[3, 1]), 0).is_err());
        assert!(reorient(&Tensor::zeros(&[3, 1]), 1).is_err());
    }

    #[test]
    fn four_layers_compose_to_identity() {
        let x = Tensor::from_fn(&[16, 1], |i| i as f64);
        let mut y = x.clone();
        for l in 0..4 {
            y = reorient(&y, l).unwrap();
        }
        assert_eq!(y, x);
    }

    #[test]
    fn windows_are_identity_and_orders_distinct() {
        for side in 2..=8 {
            let s = ReorientSchedule::new(12, side * side).unwrap();
            let id: Vec<usize> = (0..side * side).collect();
            for start in 0..=8 {
                let mut p = id.clone();
                for l in start..start + 4 {
                    p = compose(&p, &s.layer_perm(l));
                }
                assert_eq!(p, id, "side {side} window {start}");
                let orders: Vec<Vec<usize>> = (start..start + 4).map(|l| s.reading_order(l)).collect();
                for a in 0..4 {
                    for b in a + 1..4 {
                        assert_ne!(orders[a], orders[b], "side {side} window {start}");
                    }
                }
            }
        }
    }

    #[test]
    fn restore_perm_undoes_partial_stacks() {
        for layers in 1..8 {
            let s = ReorientSchedule::new(layers, 9).unwrap();
            let x = Tensor::from_fn(&[9, 1], |i| i as f64);
            let mut y = x.clone();
            for l in 0..layers {
                y = reorient(&y, l).unwrap();
            }
            assert_eq!(y.permute_rows(&s.restore_perm()).unwrap(), x);
        }
    }

    fn cell(seed: u64) -> (GlaParams<Tensor>, GlaConfig) {
        let cfg = GlaConfig::new(4, 2, 2, 1, 2.0).unwrap();
        let mut r = rng(seed);
        let mut p = GlaParams::init(&cfg, &mut r);
        p.r.bias = Some(Tensor::randn(&[1, 2], 0.5, &mut r));
        (p, cfg)
    }

    #[test]
    fn op_counts_per_strategy() {
        let (p, cfg) = cell(5);
        let x = Tensor::randn(&[16, 4], 1.0, &mut rng(6));
        let m = ScanMode::Recurrent;
        assert_eq!(scan_bidirectional(&x, &p, &cfg, m).unwrap().1.as_pair(), (3, 1));
        assert_eq!(scan_4directional(&x, &p, &cfg, m).unwrap().1.as_pair(), (13, 3));
        assert_eq!(scan_block(&x, &p, &cfg, m, 0).unwrap().1.as_pair(), (2, 0));
        assert_eq!(scan_block(&x, &p, &cfg, m, 1).unwrap().1.as_pair(), (2, 0));
    }

    #[test]
    fn bidirectional_sees_the_last_token() {
        let (p, cfg) = cell(7);
        let x = Tensor::randn(&[9, 4], 1.0, &mut rng(8));
        let mut x2 = x.clone();
        x2.data_mut()[8 * 4] += 1.0;
        let a = scan_bidirectional(&x, &p, &cfg, ScanMode::Recurrent).unwrap().0;
        let b = scan_bidirectional(&x2, &p, &cfg, ScanMode::Recurrent).unwrap().0;
        assert_ne!(a.row(0), b.row(0));
    }

    #[test]
    fn bidirectional_preserves_reversal_symmetry() {
        let (p, cfg) = cell(9);
        let half = Tensor::randn(&[4, 4], 1.0, &mut rng(10));
        let mut rows: Vec<&[f64]> = (0..4).map(|i| half.row(i)).collect();
        rows.push(&[0.3, -0.2, 0.1, 0.5]);
        rows.extend((0..4).rev().map(|i| half.row(i)));
        let x = Tensor::from_rows(&rows).unwrap();
        assert_eq!(x.flip_seq(), x);
        let y = scan_bidirectional(&x, &p, &cfg, ScanMode::Recurrent).unwrap().0;
        assert!(y.max_abs_diff(&y.flip_seq()).unwrap() < 1e-12);
    }

    #[test]
    fn four_directional_single_token() {
        let (p, cfg) = cell(11);
        let x = Tensor::randn(&[1, 4], 1.0, &mut rng(12));
        let y = scan_4directional(&x, &p, &cfg, ScanMode::Recurrent).unwrap().0;
        let single = gla_forward(&x, &p, &cfg, ScanMode::Recurrent).unwrap();
        assert!(y.max_abs_diff(&single.scale(4.0)).unwrap() < 1e-14);
    }

    #[test]
    fn four_directional_branches_are_permuted_scans() {
        let (p, cfg) = cell(13);
        let n = 3;
        let x = Tensor::randn(&[n * n, 4], 1.0, &mut rng(14));
        let m = ScanMode::Recurrent;
        let t = transpose_perm(n);
        let f = flip_perm(n * n);
        let tf = compose(&t, &f);
        let mut expected = Tensor::zeros(x.shape());
        for order in [(0..n * n).collect::<Vec<_>>(), f, t, tf] {
            let y = gla_forward(&x.permute_rows(&order).unwrap(), &p, &cfg, m).unwrap();
            expected = expected.add(&y.permute_rows(&invert(&order)).unwrap()).unwrap();
        }
        let y = scan_4directional(&x, &p, &cfg, m).unwrap().0;
        assert!(y.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn block_scan_rows_are_permutation_of_gla() {
        let (p, cfg) = cell(15);
        let x = Tensor::randn(&[16, 4], 1.0, &mut rng(16));
        let plain = gla_forward(&x, &p, &cfg, ScanMode::Recurrent).unwrap();
        for l in 0..2 {
            let y = scan_block(&x, &p, &cfg, ScanMode::Recurrent, l).unwrap().0;
            let s = ReorientSchedule::new(1, 16).unwrap();
            assert_eq!(y, plain.permute_rows(&s.layer_perm(l)).unwrap());
        }
    }

    proptest! {
        #[test]
        fn grid_permutations_are_involutions(side in 1usize..10) {
            let t = transpose_perm(side);
            let f = flip_perm(side * side);
            let id: Vec<usize> = (0..side * side).collect();
            prop_assert_eq!(compose(&t, &t), id.clone());
            prop_assert_eq!(compose(&f, &f), id);
            prop_assert_eq!(compose(&t, &f), compose(&f, &t));
        }
    }
}
