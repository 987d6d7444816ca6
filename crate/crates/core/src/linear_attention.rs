//! Plain linear attention and the quadratic softmax baseline.
//!
//! Causal linear attention with a feature map `φ`:
//!
//! ```text
//! O_t = φ(Q_t) Σ_{i≤t} φ(K_i)ᵀ V_i / φ(Q_t) Σ_{i≤t} φ(K_i)ᵀ
//! ```
//!
//! and its un-normalized form `S_t = S_{t-1} + K_tᵀ V_t`, `O_t = Q_t S_t`.

use num_traits::Float;

use crate::error::{DigError, Result};
use crate::tensor::Tensor;

/// Denominators below this magnitude are rejected.
pub const NORMALIZER_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FeatureMap {
    #[default]
    Identity,
    /// `elu(x) + 1`, strictly positive.
    EluPlusOne,
}

impl FeatureMap {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            FeatureMap::Identity => x.clone(),
            FeatureMap::EluPlusOne => x.map(|v| if v > 0.0 { v + 1.0 } else { v.exp() }),
        }
    }
}

/// Running `S = Σ φ(K_i)ᵀ V_i` and `z = Σ φ(K_i)ᵀ`.
#[derive(Clone, Debug)]
pub struct LinAttnState {
    pub s: Tensor,
    pub z: Tensor,
}

impl LinAttnState {
    pub fn new(dk: usize, dv: usize) -> Self {
        Self {
            s: Tensor::zeros(&[dk, dv]),
            z: Tensor::zeros(&[dk, 1]),
        }
    }

    pub fn push(&mut self, phi_k: &[f64], v: &[f64]) {
        let dv = v.len();
        let s = self.s.data_mut();
        for (i, &ki) in phi_k.iter().enumerate() {
            for (j, &vj) in v.iter().enumerate() {
                s[i * dv + j] += ki * vj;
            }
        }
        for (z, &ki) in self.z.data_mut().iter_mut().zip(phi_k) {
            *z += ki;
        }
    }

    /// `(φ(q) S / φ(q) z)`.
    pub fn read(&self, phi_q: &[f64], token: usize) -> Result<Vec<f64>> {
        let dv = self.s.cols();
        let den: f64 = phi_q.iter().zip(self.z.data()).map(|(a, b)| a * b).sum();
        if den.abs() < NORMALIZER_EPS {
            return Err(DigError::DegenerateNormalizer { token, value: den.abs() });
        }
        let mut out = vec![0.0; dv];
        for (i, &qi) in phi_q.iter().enumerate() {
            for (o, &s) in out.iter_mut().zip(self.s.row(i)) {
                *o += qi * s;
            }
        }
        Ok(out.into_iter().map(|x| x / den).collect())
    }
}

fn check_qkv(op: &'static str, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    for t in [q, k, v] {
        t.expect_rank(op, 2)?;
    }
    if q.shape() != k.shape() || v.rows() != q.rows() {
        return Err(DigError::shape(
            op,
            format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok(())
}

/// Normalized causal linear attention via the streaming recurrence.
pub fn lin_attn_normalized(q: &Tensor, k: &Tensor, v: &Tensor, phi: FeatureMap) -> Result<Tensor> {
    check_qkv("lin_attn_normalized", q, k, v)?;
    let (pq, pk) = (phi.apply(q), phi.apply(k));
    let mut state = LinAttnState::new(q.cols(), v.cols());
    let mut out = Vec::with_capacity(v.len());
    for t in 0..q.rows() {
        state.push(pk.row(t), v.row(t));
        out.extend(state.read(pq.row(t), t)?);
    }
    Tensor::new(v.shape(), out)
}

/// Normalized causal linear attention via the masked `φ(Q) φ(K)ᵀ` matrix.
pub fn lin_attn_normalized_batch(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    phi: FeatureMap,
) -> Result<Tensor> {
    check_qkv("lin_attn_normalized_batch", q, k, v)?;
    let (pq, pk) = (phi.apply(q), phi.apply(k));
    let l = q.rows();
    let mut a = pq.matmul(&pk.transpose2d()?)?;
    for t in 0..l {
        for i in t + 1..l {
            a.data_mut()[t * l + i] = 0.0;
        }
    }
    let num = a.matmul(v)?;
    let dv = v.cols();
    let mut out = num.into_data();
    for t in 0..l {
        let den: f64 = a.row(t).iter().sum();
        if den.abs() < NORMALIZER_EPS {
            return Err(DigError::DegenerateNormalizer { token: t, value: den.abs() });
        }
        for x in &mut out[t * dv..(t + 1) * dv] {
            *x /= den;
        }
    }
    Tensor::new(v.shape(), out)
}

/// `S_t = S_{t-1} + K_tᵀ V_t`, `O_t = Q_t S_t`.
pub fn lin_attn_simple(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_qkv("lin_attn_simple", q, k, v)?;
    let (dk, dv) = (q.cols(), v.cols());
    let mut s = vec![0.0; dk * dv];
    let mut out = Vec::with_capacity(v.len());
    for t in 0..q.rows() {
        let (kt, vt, qt) = (k.row(t), v.row(t), q.row(t));
        for i in 0..dk {
            for j in 0..dv {
                s[i * dv + j] += kt[i] * vt[j];
            }
        }
        for j in 0..dv {
            out.push((0..dk).map(|i| qt[i] * s[i * dv + j]).sum());
        }
    }
    Tensor::new(v.shape(), out)
}

/// Scaled dot-product attention, `softmax(Q Kᵀ / √d) V`.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    check_qkv("softmax_attention", q, k, v)?;
    let out = softmax_attention_raw(q.data(), k.data(), v.data(), q.rows(), q.cols(), v.cols(), causal);
    Tensor::new(v.shape(), out)
}

const QUERY_BLOCK: usize = 64;

/// Row-major softmax attention processed in blocks of query rows, so the
/// working set is `O(block · len)` rather than `O(len²)`.
pub fn softmax_attention_raw<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    len: usize,
    d: usize,
    dv: usize,
    causal: bool,
) -> Vec<F> {
    let scale = F::one() / F::from(d).unwrap().sqrt();
    let mut out = vec![F::zero(); len * dv];
    let mut scores = vec![F::zero(); QUERY_BLOCK * len];
    for start in (0..len).step_by(QUERY_BLOCK) {
        let end = (start + QUERY_BLOCK).min(len);
        for t in start..end {
            let qt = &q[t * d..(t + 1) * d];
            let row = &mut scores[(t - start) * len..(t - start + 1) * len];
            let visible = if causal { t + 1 } else { len };
            let mut max = F::neg_infinity();
            for (j, s) in row[..visible].iter_mut().enumerate() {
                let kj = &k[j * d..(j + 1) * d];
                let dot = qt.iter().zip(kj).fold(F::zero(), |a, (&x, &y)| a + x * y);
                *s = dot * scale;
                max = max.max(*s);
            }
            let mut total = F::zero();
            for s in &mut row[..visible] {
                *s = (*s - max).exp();
                total = total + *s;
            }
            let ot = &mut out[t * dv..(t + 1) * dv];
            for (j, &p) in row[..visible].iter().enumerate() {
                let w = p / total;
                for (o, &x) in ot.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                    *o = *o + w * x;
                }
            }
        }
    }
    out
}
