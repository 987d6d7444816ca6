//! Raw gated-linear-attention scan kernels over row-major slices.
//!
//! Single head. `q`, `k` are `[len × dk]`, `v` is `[len × dv]`, output is
//! `[len × dv]`. The recurrence is
//!
//! ```text
//! S_t = G_t ⊙ S_{t-1} + K_tᵀ V_t,   O_t = Q_t S_t,   S_0 = 0
//! ```
//!
//! with `G_t` either a full `dk × dv` matrix or the outer product
//! `α_tᵀ β_t`. Generic over the float type so the benchmark can run in `f32`.

use num_traits::Float;

/// Per-token gate supplied to the recurrent kernel.
#[derive(Clone, Copy, Debug)]
pub enum Gates<'a, F> {
    /// `[len × dk × dv]`, arbitrary entries.
    Full(&'a [F]),
    /// `G_t = α_tᵀ β_t` with `alpha: [len × dk]`, `beta: [len × dv]`.
    Outer { alpha: &'a [F], beta: &'a [F] },
}

pub fn recurrent_scan<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    gates: Gates<'_, F>,
    len: usize,
    dk: usize,
    dv: usize,
) -> Vec<F> {
    let mut state = vec![F::zero(); dk * dv];
    let mut out = vec![F::zero(); len * dv];
    for t in 0..len {
        step_state(&mut state, k, v, gates, t, dk, dv);
        let qt = &q[t * dk..(t + 1) * dk];
        let ot = &mut out[t * dv..(t + 1) * dv];
        for (i, &qi) in qt.iter().enumerate() {
            let srow = &state[i * dv..(i + 1) * dv];
            for (o, &s) in ot.iter_mut().zip(srow) {
                *o = *o + qi * s;
            }
        }
    }
    out
}

/// One recurrence step: `S ← G_t ⊙ S + K_tᵀ V_t`.
fn step_state<F: Float>(
    state: &mut [F],
    k: &[F],
    v: &[F],
    gates: Gates<'_, F>,
    t: usize,
    dk: usize,
    dv: usize,
) {
    let kt = &k[t * dk..(t + 1) * dk];
    let vt = &v[t * dv..(t + 1) * dv];
    for i in 0..dk {
        let srow = &mut state[i * dv..(i + 1) * dv];
        match gates {
            Gates::Full(g) => {
                let grow = &g[(t * dk + i) * dv..(t * dk + i + 1) * dv];
                for j in 0..dv {
                    srow[j] = grow[j] * srow[j] + kt[i] * vt[j];
                }
            }
            Gates::Outer { alpha, beta } => {
                let a = alpha[t * dk + i];
                let brow = &beta[t * dv..(t + 1) * dv];
                for j in 0..dv {
                    srow[j] = (a * brow[j]) * srow[j] + kt[i] * vt[j];
                }
            }
        }
    }
}

/// Multiply-accumulates of [`chunked_scan`] for one head under the nominal
/// partition into chunks of `chunk` tokens (last chunk may be shorter).
pub fn chunked_macs(len: usize, dk: usize, dv: usize, chunk: usize) -> u64 {
    let chunk = chunk.max(1);
    let mut total = 0u64;
    let mut start = 0;
    while start < len {
        let m = chunk.min(len - start) as u64;
        total += chunk_macs(m, dk as u64, dv as u64);
        start += chunk;
    }
    total
}

fn chunk_macs(m: u64, dk: u64, dv: u64) -> u64 {
    // causal scores + score·V over the lower triangle, then the inter-chunk
    // read-out and state update.
    m * (m + 1) / 2 * (dk + dv) + 2 * m * dk * dv
}

/// Multiply-accumulates of [`recurrent_scan`] with outer-product gates:
/// gate outer product, gated decay, `KᵀV` and the `Q S` read-out per token.
pub fn recurrent_macs(len: usize, dk: usize, dv: usize) -> u64 {
    4 * (len * dk * dv) as u64
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChunkStats {
    pub chunks: usize,
    pub macs: u64,
}

/// Chunk-parallel form of the outer-product-gated scan.
///
/// Inside a chunk starting at `c`, cumulative log-gates relative to the chunk
/// start (`Σ_{j=c+1..t} ln α_j`) are exponentiated once per token, so the
/// intra-chunk decay `∏_{j=s+1..t} G_j` factorizes into a scaled `QKᵀ` score
/// matrix and a scaled `V`. A chunk is closed early whenever a relative
/// log-gate would drop below `-ln(F::MAX)/4`, which bounds every scale factor
/// and also isolates exactly-zero gates at chunk starts.
#[allow(clippy::too_many_arguments)]
pub fn chunked_scan<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    alpha: &[F],
    beta: &[F],
    len: usize,
    dk: usize,
    dv: usize,
    chunk: usize,
) -> (Vec<F>, ChunkStats) {
    assert!(chunk >= 1, "chunk length must be positive");
    let limit = -(F::max_value().ln() / F::from(4.0).unwrap());
    let mut state = vec![F::zero(); dk * dv];
    let mut out = vec![F::zero(); len * dv];
    let mut stats = ChunkStats::default();

    // Per-chunk scratch, reused.
    let mut rel_a = vec![F::zero(); chunk * dk];
    let mut rel_b = vec![F::zero(); chunk * dv];
    let mut qs = vec![F::zero(); chunk * dk];
    let mut ks = vec![F::zero(); chunk * dk];
    let mut vs = vec![F::zero(); chunk * dv];
    let mut acc = vec![F::zero(); dv];
    let mut inter = vec![F::zero(); dv];

    let mut start = 0;
    while start < len {
        rel_a[..dk].fill(F::zero());
        rel_b[..dv].fill(F::zero());
        let mut m = 1;
        while start + m < len && m < chunk {
            let t = start + m;
            if !extend_rel(&mut rel_a, alpha, t, m, dk, limit)
                || !extend_rel(&mut rel_b, beta, t, m, dv, limit)
            {
                break;
            }
            m += 1;
        }

        let a0 = &alpha[start * dk..(start + 1) * dk];
        let b0 = &beta[start * dv..(start + 1) * dv];
        for s in 0..m {
            let t = start + s;
            for i in 0..dk {
                let r = rel_a[s * dk + i];
                qs[s * dk + i] = q[t * dk + i] * r.exp();
                ks[s * dk + i] = k[t * dk + i] * (-r).exp();
            }
            for j in 0..dv {
                vs[s * dv + j] = v[t * dv + j] * (-rel_b[s * dv + j]).exp();
            }
        }

        for t in 0..m {
            acc.fill(F::zero());
            let qt = &qs[t * dk..(t + 1) * dk];
            for s in 0..=t {
                let ksr = &ks[s * dk..(s + 1) * dk];
                let p = dot(qt, ksr);
                let vsr = &vs[s * dv..(s + 1) * dv];
                for (a, &x) in acc.iter_mut().zip(vsr) {
                    *a = *a + p * x;
                }
            }
            inter.fill(F::zero());
            for i in 0..dk {
                let c = qt[i] * a0[i];
                let srow = &state[i * dv..(i + 1) * dv];
                for (u, &s) in inter.iter_mut().zip(srow) {
                    *u = *u + c * s;
                }
            }
            let ot = &mut out[(start + t) * dv..(start + t + 1) * dv];
            for j in 0..dv {
                ot[j] = rel_b[t * dv + j].exp() * (acc[j] + b0[j] * inter[j]);
            }
        }

        // State hand-off to the next chunk.
        let e = m - 1;
        for j in 0..dv {
            acc[j] = b0[j] * rel_b[e * dv + j].exp();
        }
        for i in 0..dk {
            let decay_a = a0[i] * rel_a[e * dk + i].exp();
            let srow = &mut state[i * dv..(i + 1) * dv];
            for (x, &db) in srow.iter_mut().zip(&acc) {
                *x = (decay_a * db) * *x;
            }
        }
        // Scaled scratch is no longer needed; reuse it for the decayed K and V.
        for s in 0..m {
            let t = start + s;
            for i in 0..dk {
                ks[s * dk + i] = k[t * dk + i] * (rel_a[e * dk + i] - rel_a[s * dk + i]).exp();
            }
            for j in 0..dv {
                vs[s * dv + j] = v[t * dv + j] * (rel_b[e * dv + j] - rel_b[s * dv + j]).exp();
            }
        }
        for s in 0..m {
            let vsr = &vs[s * dv..(s + 1) * dv];
            for i in 0..dk {
                let kh = ks[s * dk + i];
                let srow = &mut state[i * dv..(i + 1) * dv];
                for (x, &vh) in srow.iter_mut().zip(vsr) {
                    *x = *x + kh * vh;
                }
            }
        }

        stats.chunks += 1;
        stats.macs += chunk_macs(m as u64, dk as u64, dv as u64);
        start += m;
    }
    (out, stats)
}

/// Write `rel[m] = rel[m-1] + ln gate[t]`; false if any entry leaves the
/// representable range (or is NaN).
fn extend_rel<F: Float>(rel: &mut [F], gate: &[F], t: usize, m: usize, d: usize, limit: F) -> bool {
    for i in 0..d {
        let r = rel[(m - 1) * d + i] + gate[t * d + i].ln();
        if !(r >= limit) {
            return false;
        }
        rel[m * d + i] = r;
    }
    true
}

fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

/// Gradients of a scalar loss with respect to every scan input.
#[derive(Clone, Debug)]
pub struct ScanGrads<F> {
    pub dq: Vec<F>,
    pub dk: Vec<F>,
    pub dv: Vec<F>,
    pub dalpha: Vec<F>,
    pub dbeta: Vec<F>,
}

/// Reverse-mode pass of the outer-product-gated recurrence.
///
/// States are checkpointed every `checkpoint` tokens on a forward sweep and
/// recomputed segment by segment on the way back, so memory is
/// `O((len/checkpoint + checkpoint)·dk·dv)`.
#[allow(clippy::too_many_arguments)]
pub fn recurrent_scan_backward<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    alpha: &[F],
    beta: &[F],
    dout: &[F],
    len: usize,
    dk: usize,
    dv: usize,
    checkpoint: usize,
) -> ScanGrads<F> {
    let checkpoint = checkpoint.max(1);
    let gates = Gates::Outer { alpha, beta };
    let sz = dk * dv;

    // checkpoints[c] = S_{c·checkpoint - 1} (state before segment c), zero for c = 0.
    let segments = len.div_ceil(checkpoint);
    let mut checkpoints = Vec::with_capacity(segments);
    let mut state = vec![F::zero(); sz];
    for c in 0..segments {
        checkpoints.push(state.clone());
        for t in c * checkpoint..((c + 1) * checkpoint).min(len) {
            step_state(&mut state, k, v, gates, t, dk, dv);
        }
    }

    let mut g = ScanGrads {
        dq: vec![F::zero(); len * dk],
        dk: vec![F::zero(); len * dk],
        dv: vec![F::zero(); len * dv],
        dalpha: vec![F::zero(); len * dk],
        dbeta: vec![F::zero(); len * dv],
    };
    let mut ds = vec![F::zero(); sz];
    let mut seg_states: Vec<F> = Vec::with_capacity((checkpoint + 1) * sz);

    for c in (0..segments).rev() {
        let lo = c * checkpoint;
        let hi = ((c + 1) * checkpoint).min(len);
        // seg_states[r] = S_{lo + r - 1}, r = 0..=hi-lo
        seg_states.clear();
        seg_states.extend_from_slice(&checkpoints[c]);
        let mut s = checkpoints[c].clone();
        for t in lo..hi {
            step_state(&mut s, k, v, gates, t, dk, dv);
            seg_states.extend_from_slice(&s);
        }

        for t in (lo..hi).rev() {
            let r = t - lo;
            let s_t = &seg_states[(r + 1) * sz..(r + 2) * sz];
            let s_prev = &seg_states[r * sz..(r + 1) * sz];
            let qt = &q[t * dk..(t + 1) * dk];
            let kt = &k[t * dk..(t + 1) * dk];
            let vt = &v[t * dv..(t + 1) * dv];
            let at = &alpha[t * dk..(t + 1) * dk];
            let bt = &beta[t * dv..(t + 1) * dv];
            let dot_ = &dout[t * dv..(t + 1) * dv];

            for i in 0..dk {
                let srow = &s_t[i * dv..(i + 1) * dv];
                g.dq[t * dk + i] = dot(srow, dot_);
                let dsrow = &mut ds[i * dv..(i + 1) * dv];
                for j in 0..dv {
                    dsrow[j] = dsrow[j] + qt[i] * dot_[j];
                }
            }
            for i in 0..dk {
                let dsrow = &ds[i * dv..(i + 1) * dv];
                let sprow = &s_prev[i * dv..(i + 1) * dv];
                let mut dki = F::zero();
                let mut dai = F::zero();
                for j in 0..dv {
                    dki = dki + dsrow[j] * vt[j];
                    let dgij = dsrow[j] * sprow[j];
                    dai = dai + dgij * bt[j];
                    g.dv[t * dv + j] = g.dv[t * dv + j] + kt[i] * dsrow[j];
                    g.dbeta[t * dv + j] = g.dbeta[t * dv + j] + dgij * at[i];
                }
                g.dk[t * dk + i] = dki;
                g.dalpha[t * dk + i] = dai;
            }
            for i in 0..dk {
                for j in 0..dv {
                    ds[i * dv + j] = ds[i * dv + j] * at[i] * bt[j];
                }
            }
        }
    }
    g
}
