//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value and its parents. Node ids are issued in creation order, which
//! is a topological order, so [`Graph::backward`] is a single reverse sweep
//! that visits every node once. Nodes that depend on no parameter are marked
//! as not needing a gradient and are skipped.
//!
//! The tape also counts multiply-accumulates of matmul-like work (matmul,
//! depthwise convolution, GLA scans) so the analytic FLOP estimator can be
//! checked against what a forward pass actually executed.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{DigError, Result};
use crate::gla::kernel::{self, Gates};
use crate::gla::ScanMode;
use crate::tensor::{gelu, gelu_grad, grid_side, row_moments, sigmoid, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Silu(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    Square(Var),
    LayerNorm(Var),
    Gather { x: Var, index: Rc<Vec<usize>> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    DwConv { x: Var, kernel: Var, side: usize },
    GlaScan(Box<ScanInputs>),
}

#[derive(Debug)]
struct ScanInputs {
    q: Var,
    k: Var,
    v: Var,
    alpha: Var,
    beta: Var,
    heads: usize,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Tape for one forward/backward pass. Confined to a single thread.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    macs: Cell<u64>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Whether any gradient flowed into `v` at all.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulates executed so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub fn reset_macs(&self) {
        self.macs.set(0);
    }

    fn count(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn needs_any(&self, vs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let t = (*self.value(v)).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        self.push(t, op, self.needs(x))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let t = va.matmul(&vb)?;
        self.count((va.shape()[0] * va.shape()[1] * vb.shape()[1]) as u64);
        Ok(self.push(t, Op::MatMul(a, b), self.needs_any(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).add(&self.value(b))?;
        Ok(self.push(t, Op::Add(a, b), self.needs_any(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).sub(&self.value(b))?;
        Ok(self.push(t, Op::Sub(a, b), self.needs_any(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).mul(&self.value(b))?;
        Ok(self.push(t, Op::Mul(a, b), self.needs_any(&[a, b])))
    }

    fn row_broadcast(
        &self,
        x: Var,
        row: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vx.rank() != 2 || vr.shape() != [1, vx.shape()[1]] {
            return Err(DigError::shape(
                op,
                format!("{:?} with row {:?}", vx.shape(), vr.shape()),
            ));
        }
        let c = vx.shape()[1];
        let r = vr.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, r[i % c]))
            .collect();
        Tensor::new(vx.shape(), data)
    }

    /// `x[m×n] + row[1×n]` broadcast over rows.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(x, row, "add_row", |a, b| a + b)?;
        Ok(self.push(t, Op::AddRow(x, row), self.needs_any(&[x, row])))
    }

    /// `x[m×n] ⊙ row[1×n]` broadcast over rows.
    pub fn mul_row(&self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast(x, row, "mul_row", |a, b| a * b)?;
        Ok(self.push(t, Op::MulRow(x, row), self.needs_any(&[x, row])))
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        self.unary(x, |a| a * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Var {
        self.unary(x, |a| a + s, Op::AddScalar(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// SiLU / Swish.
    pub fn silu(&self, x: Var) -> Var {
        self.unary(x, crate::tensor::swish, Op::Silu(x))
    }

    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn powf(&self, x: Var, p: f64) -> Var {
        self.unary(x, |a| a.powf(p), Op::Powf(x, p))
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |a| a * a, Op::Square(x))
    }

    /// Non-affine LayerNorm over the trailing axis.
    pub fn layer_norm(&self, x: Var) -> Var {
        let t = self.value(x).layer_norm();
        self.push(t, Op::LayerNorm(x), self.needs(x))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, x: Var, shape: &[usize], index: Rc<Vec<usize>>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= vx.len()) {
            return Err(DigError::OutOfRange {
                what: "gather",
                index: bad,
                bound: vx.len(),
            });
        }
        let data = index.iter().map(|&i| vx.data()[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather { x, index }, self.needs(x)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), self.needs(x)))
    }

    /// `out[i] = x[perm[i]]` along the leading axis.
    pub fn permute_rows(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if perm.len() != shape[0] {
            return Err(DigError::shape(
                "permute_rows",
                format!("{} indices for {} rows", perm.len(), shape[0]),
            ));
        }
        let c: usize = shape[1..].iter().product();
        let index = perm.iter().flat_map(|&p| p * c..(p + 1) * c).collect();
        self.gather(x, &shape, Rc::new(index))
    }

    pub fn flip_rows(&self, x: Var) -> Var {
        let n = self.shape(x)[0];
        let perm: Vec<usize> = (0..n).rev().collect();
        self.permute_rows(x, &perm).expect("flip permutation matches row count")
    }

    /// Columns `start..start+width` of a rank-2 tensor.
    pub fn slice_cols(&self, x: Var, start: usize, width: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || start + width > shape[1] || width == 0 {
            return Err(DigError::shape(
                "slice_cols",
                format!("{start}..{} of {shape:?}", start + width),
            ));
        }
        let c = shape[1];
        let index = (0..shape[0])
            .flat_map(|r| r * c + start..r * c + start + width)
            .collect();
        self.gather(x, &[shape[0], width], Rc::new(index))
    }

    pub fn sum(&self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), self.needs(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        self.push(t, Op::Mean(x), self.needs(x))
    }

    /// Depthwise 3×3 convolution, stride 1, zero padding, on a row-major
    /// token grid `x: [T × D]` with `kernel: [D × 3 × 3]`.
    pub fn dwconv2d(&self, x: Var, kernel: Var) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        let t = dwconv_forward(&vx, &vk)?;
        let side = grid_side(vx.shape()[0]).expect("checked by dwconv_forward");
        self.count(9 * vx.len() as u64);
        Ok(self.push(
            t,
            Op::DwConv { x, kernel, side },
            self.needs_any(&[x, kernel]),
        ))
    }

    /// Multi-head GLA scan with outer-product gates. Heads occupy contiguous
    /// column blocks of `q, k, alpha` (`[L × dk]`) and `v, beta` (`[L × dv]`).
    #[allow(clippy::too_many_arguments)]
    pub fn gla_scan(
        &self,
        q: Var,
        k: Var,
        v: Var,
        alpha: Var,
        beta: Var,
        heads: usize,
        mode: ScanMode,
    ) -> Result<Var> {
        let (vq, vk, vv, va, vb) = (
            self.value(q),
            self.value(k),
            self.value(v),
            self.value(alpha),
            self.value(beta),
        );
        let (out, macs) = multi_head_scan(&vq, &vk, &vv, &va, &vb, heads, mode)?;
        self.count(macs);
        Ok(self.push(
            out,
            Op::GlaScan(Box::new(ScanInputs {
                q,
                k,
                v,
                alpha,
                beta,
                heads,
            })),
            self.needs_any(&[q, k, v, alpha, beta]),
        ))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[out.0].value.len() != 1 {
            return Err(DigError::shape(
                "backward",
                format!("output must be scalar, got {:?}", nodes[out.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[out.0] = Some(Tensor::ones(nodes[out.0].value.shape()));

        let acc = |grads: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };

        for i in (0..=out.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let y = &node.value;
            let val = |v: Var| Rc::clone(&nodes[v.0].value);
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[a.0].needs_grad {
                        acc(&mut grads, *a, gy.matmul(&vb.transpose2d()?)?);
                    }
                    if nodes[b.0].needs_grad {
                        acc(&mut grads, *b, va.transpose2d()?.matmul(&gy)?);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, gy.scale(-1.0));
                    acc(&mut grads, *a, gy);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(&mut grads, *a, gy.mul(&vb)?);
                    acc(&mut grads, *b, gy.mul(&va)?);
                }
                Op::AddRow(x, r) => {
                    acc(&mut grads, *r, col_sums(&gy));
                    acc(&mut grads, *x, gy);
                }
                Op::MulRow(x, r) => {
                    let (vx, vr) = (val(*x), val(*r));
                    let c = vr.len();
                    let gx = Tensor::from_fn(gy.shape(), |k| gy.data()[k] * vr.data()[k % c]);
                    acc(&mut grads, *r, col_sums(&gy.mul(&vx)?));
                    acc(&mut grads, *x, gx);
                }
                Op::Scale(x, s) => acc(&mut grads, *x, gy.scale(*s)),
                Op::AddScalar(x) => acc(&mut grads, *x, gy),
                Op::Sigmoid(x) => {
                    let g = gy.zip_map(y, |g, s| g * s * (1.0 - s))?;
                    acc(&mut grads, *x, g);
                }
                Op::Silu(x) => {
                    let g = gy.zip_map(&val(*x), |g, a| {
                        let s = sigmoid(a);
                        g * (s + a * s * (1.0 - s))
                    })?;
                    acc(&mut grads, *x, g);
                }
                Op::Gelu(x) => {
                    let g = gy.zip_map(&val(*x), |g, a| g * gelu_grad(a))?;
                    acc(&mut grads, *x, g);
                }
                Op::Exp(x) => acc(&mut grads, *x, gy.mul(y)?),
                Op::Ln(x) => {
                    let g = gy.zip_map(&val(*x), |g, a| g / a)?;
                    acc(&mut grads, *x, g);
                }
                Op::Powf(x, p) => {
                    let g = gy.zip_map(&val(*x), |g, a| g * p * a.powf(p - 1.0))?;
                    acc(&mut grads, *x, g);
                }
                Op::Square(x) => {
                    let g = gy.zip_map(&val(*x), |g, a| 2.0 * g * a)?;
                    acc(&mut grads, *x, g);
                }
                Op::LayerNorm(x) => {
                    let vx = val(*x);
                    acc(&mut grads, *x, layer_norm_backward(&vx, y, &gy));
                }
                Op::Gather { x, index } => {
                    let mut g = Tensor::zeros(nodes[x.0].value.shape());
                    let gd = g.data_mut();
                    for (k, &src) in index.iter().enumerate() {
                        gd[src] += gy.data()[k];
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Reshape(x) => {
                    let g = gy.reshape(nodes[x.0].value.shape())?;
                    acc(&mut grads, *x, g);
                }
                Op::Sum(x) => {
                    let g = Tensor::full(nodes[x.0].value.shape(), gy.item());
                    acc(&mut grads, *x, g);
                }
                Op::Mean(x) => {
                    let shape = nodes[x.0].value.shape();
                    let n = nodes[x.0].value.len() as f64;
                    acc(&mut grads, *x, Tensor::full(shape, gy.item() / n));
                }
                Op::DwConv { x, kernel, side } => {
                    let (gx, gk) = dwconv_backward(&val(*x), &val(*kernel), &gy, *side);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *kernel, gk);
                }
                Op::GlaScan(s) => {
                    let [gq, gk, gv, ga, gb] = multi_head_scan_backward(
                        &val(s.q),
                        &val(s.k),
                        &val(s.v),
                        &val(s.alpha),
                        &val(s.beta),
                        &gy,
                        s.heads,
                    )?;
                    acc(&mut grads, s.q, gq);
                    acc(&mut grads, s.k, gk);
                    acc(&mut grads, s.v, gv);
                    acc(&mut grads, s.alpha, ga);
                    acc(&mut grads, s.beta, gb);
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let c = g.shape()[1];
    let mut out = vec![0.0; c];
    for (k, &x) in g.data().iter().enumerate() {
        out[k % c] += x;
    }
    Tensor::new(&[1, c], out).expect("row shape")
}

fn layer_norm_backward(x: &Tensor, y: &Tensor, gy: &Tensor) -> Tensor {
    let c = x.cols();
    let mut gx = vec![0.0; x.len()];
    for r in 0..x.rows() {
        let (_, inv_std) = row_moments(x.row(r));
        let yr = y.row(r);
        let gr = gy.row(r);
        let mean_g = gr.iter().sum::<f64>() / c as f64;
        let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
        for j in 0..c {
            gx[r * c + j] = inv_std * (gr[j] - mean_g - yr[j] * mean_gy);
        }
    }
    Tensor::new(x.shape(), gx).expect("same shape")
}

pub(crate) fn dwconv_forward(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    x.expect_rank("dwconv2d", 2)?;
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let n = grid_side(t).ok_or_else(|| {
        DigError::shape("dwconv2d", format!("token count {t} is not a perfect square"))
    })?;
    if kernel.shape() != [d, 3, 3] {
        return Err(DigError::shape(
            "dwconv2d",
            format!("kernel {:?} for {d} channels", kernel.shape()),
        ));
    }
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; t * d];
    for r in 0..n {
        for c in 0..n {
            let o = &mut out[(r * n + c) * d..(r * n + c + 1) * d];
            for dr in 0..3 {
                let rr = r as isize + dr as isize - 1;
                if rr < 0 || rr >= n as isize {
                    continue;
                }
                for dc in 0..3 {
                    let cc = c as isize + dc as isize - 1;
                    if cc < 0 || cc >= n as isize {
                        continue;
                    }
                    let src = (rr as usize * n + cc as usize) * d;
                    for ch in 0..d {
                        o[ch] += kd[ch * 9 + dr * 3 + dc] * xd[src + ch];
                    }
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

fn dwconv_backward(x: &Tensor, kernel: &Tensor, gy: &Tensor, n: usize) -> (Tensor, Tensor) {
    let d = x.shape()[1];
    let (xd, kd, gd) = (x.data(), kernel.data(), gy.data());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernel.len()];
    for r in 0..n {
        for c in 0..n {
            let go = &gd[(r * n + c) * d..(r * n + c + 1) * d];
            for dr in 0..3 {
                let rr = r as isize + dr as isize - 1;
                if rr < 0 || rr >= n as isize {
                    continue;
                }
                for dc in 0..3 {
                    let cc = c as isize + dc as isize - 1;
                    if cc < 0 || cc >= n as isize {
                        continue;
                    }
                    let src = (rr as usize * n + cc as usize) * d;
                    for ch in 0..d {
                        let w = ch * 9 + dr * 3 + dc;
                        gx[src + ch] += kd[w] * go[ch];
                        gk[w] += xd[src + ch] * go[ch];
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape(), gx).expect("same shape"),
        Tensor::new(kernel.shape(), gk).expect("same shape"),
    )
}

struct HeadLayout {
    len: usize,
    dk: usize,
    dv: usize,
    hk: usize,
    hv: usize,
}

fn head_layout(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
    heads: usize,
) -> Result<HeadLayout> {
    for t in [q, k, v, alpha, beta] {
        t.expect_rank("gla_scan", 2)?;
    }
    let len = q.shape()[0];
    let (dk, dv) = (q.shape()[1], v.shape()[1]);
    if k.shape() != q.shape() || alpha.shape() != q.shape() || beta.shape() != v.shape() || v.shape()[0] != len {
        return Err(DigError::shape(
            "gla_scan",
            format!(
                "q {:?} k {:?} v {:?} alpha {:?} beta {:?}",
                q.shape(),
                k.shape(),
                v.shape(),
                alpha.shape(),
                beta.shape()
            ),
        ));
    }
    if heads == 0 || dk % heads != 0 || dv % heads != 0 {
        return Err(DigError::Config(format!(
            "{heads} heads do not split dk={dk}, dv={dv}"
        )));
    }
    Ok(HeadLayout {
        len,
        dk,
        dv,
        hk: dk / heads,
        hv: dv / heads,
    })
}

fn head_cols(t: &Tensor, h: usize, width: usize) -> Vec<f64> {
    let c = t.shape()[1];
    (0..t.shape()[0])
        .flat_map(|r| t.data()[r * c + h * width..r * c + (h + 1) * width].iter().copied())
        .collect()
}

fn scatter_head(dst: &mut [f64], src: &[f64], h: usize, width: usize, cols: usize) {
    for (r, chunk) in src.chunks(width).enumerate() {
        dst[r * cols + h * width..r * cols + (h + 1) * width].copy_from_slice(chunk);
    }
}

pub(crate) fn multi_head_scan(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
    heads: usize,
    mode: ScanMode,
) -> Result<(Tensor, u64)> {
    let l = head_layout(q, k, v, alpha, beta, heads)?;
    let mut out = vec![0.0; l.len * l.dv];
    let mut macs = 0;
    for h in 0..heads {
        let (qh, kh, ah) = (
            head_cols(q, h, l.hk),
            head_cols(k, h, l.hk),
            head_cols(alpha, h, l.hk),
        );
        let (vh, bh) = (head_cols(v, h, l.hv), head_cols(beta, h, l.hv));
        let o = match mode {
            ScanMode::Recurrent => {
                macs += kernel::recurrent_macs(l.len, l.hk, l.hv);
                kernel::recurrent_scan(
                    &qh,
                    &kh,
                    &vh,
                    Gates::Outer {
                        alpha: &ah,
                        beta: &bh,
                    },
                    l.len,
                    l.hk,
                    l.hv,
                )
            }
            ScanMode::Chunked(m) => {
                if m == 0 {
                    return Err(DigError::Config("chunk length must be >= 1".into()));
                }
                let (o, stats) =
                    kernel::chunked_scan(&qh, &kh, &vh, &ah, &bh, l.len, l.hk, l.hv, m);
                macs += stats.macs;
                o
            }
        };
        scatter_head(&mut out, &o, h, l.hv, l.dv);
    }
    Ok((Tensor::new(&[l.len, l.dv], out)?, macs))
}

const SCAN_CHECKPOINT: usize = 64;

fn multi_head_scan_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
    gy: &Tensor,
    heads: usize,
) -> Result<[Tensor; 5]> {
    let l = head_layout(q, k, v, alpha, beta, heads)?;
    let mut gq = vec![0.0; l.len * l.dk];
    let mut gk = vec![0.0; l.len * l.dk];
    let mut ga = vec![0.0; l.len * l.dk];
    let mut gv = vec![0.0; l.len * l.dv];
    let mut gb = vec![0.0; l.len * l.dv];
    for h in 0..heads {
        let g = kernel::recurrent_scan_backward(
            &head_cols(q, h, l.hk),
            &head_cols(k, h, l.hk),
            &head_cols(v, h, l.hv),
            &head_cols(alpha, h, l.hk),
            &head_cols(beta, h, l.hv),
            &head_cols(gy, h, l.hv),
            l.len,
            l.hk,
            l.hv,
            SCAN_CHECKPOINT,
        );
        scatter_head(&mut gq, &g.dq, h, l.hk, l.dk);
        scatter_head(&mut gk, &g.dk, h, l.hk, l.dk);
        scatter_head(&mut ga, &g.dalpha, h, l.hk, l.dk);
        scatter_head(&mut gv, &g.dv, h, l.hv, l.dv);
        scatter_head(&mut gb, &g.dbeta, h, l.hv, l.dv);
    }
    Ok([
        Tensor::new(&[l.len, l.dk], gq)?,
        Tensor::new(&[l.len, l.dk], gk)?,
        Tensor::new(&[l.len, l.dv], gv)?,
        Tensor::new(&[l.len, l.dk], ga)?,
        Tensor::new(&[l.len, l.dv], gb)?,
    ])
}

/// Outcome of comparing reverse-mode and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-8)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// No gradient reached the input (e.g. it only feeds detached paths).
    pub zero_adjoint: bool,
    pub passed: bool,
}

/// Floor on the relative-error denominator, so entries whose true gradient
/// is zero are judged by absolute error at this scale.
pub const REL_ERR_FLOOR: f64 = 1e-8;

pub fn relative_error(a: &Tensor, n: &Tensor) -> (f64, f64) {
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (&x, &y) in a.data().iter().zip(n.data()) {
        let abs = (x - y).abs();
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / x.abs().max(y.abs()).max(REL_ERR_FLOOR));
    }
    (max_rel, max_abs)
}

/// Five-point central difference `f'(0)` with step `h`, error `O(h⁴)`.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let (p1, m1) = (f(h)?, f(-h)?);
    let (p2, m2) = (f(2.0 * h)?, f(-2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// Check the gradient of a scalar function `f` at `x` by central differences
/// with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&g, xv)?;
    let fx = g.value(y).item();
    if !fx.is_finite() {
        return Err(DigError::Numeric(format!("f(x) = {fx}")));
    }
    let grads = g.backward(y)?;
    let zero_adjoint = !grads.reached(xv);
    let analytic = grads.wrt(xv);

    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::new();
        let v = g.param(t);
        let y = f(&g, v)?;
        let val = g.value(y).item();
        if val.is_nan() {
            return Err(DigError::Numeric("NaN in finite-difference evaluation".into()));
        }
        Ok(val)
    };
    let mut numeric = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        numeric.data_mut()[i] = central_difference(
            |d| {
                let mut shifted = x.clone();
                shifted.data_mut()[i] += d;
                eval(shifted)
            },
            h,
        )?;
    }
    let (max_rel_err, max_abs_err) = relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_err,
        max_abs_err,
        zero_adjoint,
        passed: max_rel_err < tol,
    })
}
