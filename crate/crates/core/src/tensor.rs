//! Dense row-major `f64` tensor with the small amount of shape algebra the
//! backbone needs.
//!
//! Tensors are plain values. Differentiation lives in [`crate::autograd`],
//! which records operations on `Tensor` values into a tape.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DigError, Result};

/// LayerNorm epsilon used everywhere in the crate.
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(DigError::shape("new", format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DigError::shape(
                "new",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "invalid shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, x) in t.data.iter_mut().enumerate() {
            *x = f(i);
        }
        t
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(DigError::shape("from_rows", "ragged rows"));
        }
        Self::new(&[r, c], rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading extent.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing extents.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &e) in idx.iter().zip(&self.shape) {
            flat = flat * e + i;
        }
        self.data[flat]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(DigError::shape(
                op,
                format!("expected rank {rank}, got shape {:?}", self.shape),
            ));
        }
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(DigError::shape(
                "elementwise",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        self.expect_rank("matmul", 2)?;
        b.expect_rank("matmul", 2)?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (b.shape[0], b.shape[1]);
        if k != k2 {
            return Err(DigError::shape(
                "matmul",
                format!("inner dims {:?} x {:?}", self.shape, b.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &b.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }

    /// Matrix transpose of a rank-2 tensor, or swap of the two leading axes
    /// of a rank-3 `[n, n, D]` token grid.
    pub fn transpose2d(&self) -> Result<Tensor> {
        match self.shape.len() {
            2 => {
                let (r, c) = (self.shape[0], self.shape[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = self.data[i * c + j];
                    }
                }
                Tensor::new(&[c, r], out)
            }
            3 => {
                let (a, b, d) = (self.shape[0], self.shape[1], self.shape[2]);
                let mut out = vec![0.0; a * b * d];
                for i in 0..a {
                    for j in 0..b {
                        let src = (i * b + j) * d;
                        let dst = (j * a + i) * d;
                        out[dst..dst + d].copy_from_slice(&self.data[src..src + d]);
                    }
                }
                Tensor::new(&[b, a, d], out)
            }
            _ => Err(DigError::shape(
                "transpose2d",
                format!("needs rank 2 or 3, got {:?}", self.shape),
            )),
        }
    }

    /// `[T, D]` token sequence to `[√T, √T, D]` grid.
    pub fn reshape2d(&self) -> Result<Tensor> {
        self.expect_rank("reshape2d", 2)?;
        let t = self.shape[0];
        let n = grid_side(t).ok_or_else(|| {
            DigError::shape("reshape2d", format!("token count {t} is not a perfect square"))
        })?;
        self.reshape(&[n, n, self.shape[1]])
    }

    /// `[a, b, D]` grid to `[a·b, D]` sequence.
    pub fn flatten(&self) -> Result<Tensor> {
        self.expect_rank("flatten", 3)?;
        self.reshape(&[self.shape[0] * self.shape[1], self.shape[2]])
    }

    /// Reverse the leading (token) axis.
    pub fn flip_seq(&self) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(self.len());
        for i in (0..self.rows()).rev() {
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Reorder leading-axis rows: `out[i] = self[perm[i]]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Tensor> {
        if perm.len() != self.rows() {
            return Err(DigError::shape(
                "permute_rows",
                format!("{} indices for {} rows", perm.len(), self.rows()),
            ));
        }
        let c = self.cols();
        let mut out = Vec::with_capacity(self.len());
        for &p in perm {
            out.extend_from_slice(&self.data[p * c..(p + 1) * c]);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Columns `start..start+width` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor> {
        self.expect_rank("slice_cols", 2)?;
        let (r, c) = (self.shape[0], self.shape[1]);
        if start + width > c || width == 0 {
            return Err(DigError::shape(
                "slice_cols",
                format!("{start}..{} of {c}", start + width),
            ));
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Tensor::new(&[r, width], out)
    }

    /// Stack rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let r = parts
            .first()
            .ok_or_else(|| DigError::shape("concat_cols", "no parts"))?
            .rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            p.expect_rank("concat_cols", 2)?;
            if p.rows() != r {
                return Err(DigError::shape("concat_cols", "row counts differ"));
            }
            widths.push(p.shape[1]);
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Tensor::new(&[r, c], out)
    }

    /// Non-affine LayerNorm over the trailing axis.
    pub fn layer_norm(&self) -> Tensor {
        let c = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let (mean, inv_std) = row_moments(row);
            for x in row.iter_mut() {
                *x = (*x - mean) * inv_std;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Row-wise softmax over the trailing axis.
    pub fn softmax_rows(&self) -> Tensor {
        let c = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Serialize as `u64` LE header length, JSON header, then LE `f64` data.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::to_vec(&TensorHeader {
            shape: self.shape.clone(),
        })
        .map_err(|e| DigError::Format(e.to_string()))?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        write_f64s(w, &self.data)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: TensorHeader =
            serde_json::from_slice(&header).map_err(|e| DigError::Format(e.to_string()))?;
        let n = header.shape.iter().product();
        let data = read_f64s(r, n)?;
        Tensor::new(&header.shape, data)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    shape: Vec<usize>,
}

pub fn write_f64s<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect())
}

/// Side of the square grid holding `t` tokens, if `t` is a perfect square.
pub fn grid_side(t: usize) -> Option<usize> {
    let n = (t as f64).sqrt().round() as usize;
    (n * n == t).then_some(n)
}

pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Swish / SiLU: `x·σ(x)`.
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}
