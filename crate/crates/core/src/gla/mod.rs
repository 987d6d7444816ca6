//! Gated linear attention cell.
//!
//! ```text
//! Q = X W_Q,  K = X W_K,  V = X W_V
//! α = σ(X W_α + b_α)^{1/τ},  β = σ(X W_β + b_β)^{1/τ},  G_t = α_tᵀ β_t
//! S_t = G_t ⊙ S_{t-1} + K_tᵀ V_t,  O_t = Q_t S_t
//! Y = (Swish(X W_r + b_r) ⊙ LN(O)) W_O
//! ```
//!
//! Heads split `d_k` and `d_v` into equal contiguous slices and scan
//! independently; their outputs are concatenated before the norm.

pub mod kernel;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{DigError, Result};
use crate::params::{bind_const, join, Linear, Tree};
use crate::tensor::{sigmoid, Tensor};

pub const DEFAULT_TAU: f64 = 16.0;

/// How the scan is evaluated. Both give the same output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    Recurrent,
    Chunked(usize),
}

impl ScanMode {
    pub fn parse(name: &str, chunk: usize) -> Result<Self> {
        match name {
            "recurrent" => Ok(ScanMode::Recurrent),
            "chunked" => Ok(ScanMode::Chunked(ChunkSpec::new(chunk)?.m)),
            other => Err(DigError::Unknown {
                what: "scan mode",
                name: other.to_string(),
            }),
        }
    }
}

impl Default for ScanMode {
    fn default() -> Self {
        ScanMode::Chunked(64)
    }
}

impl fmt::Display for ScanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScanMode::Recurrent => write!(f, "recurrent"),
            ScanMode::Chunked(m) => write!(f, "chunked({m})"),
        }
    }
}

/// Chunk length `M ≥ 1`. Chunks longer than the sequence are clamped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkSpec {
    pub m: usize,
}

impl ChunkSpec {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(DigError::Config("chunk length must be >= 1".into()));
        }
        Ok(Self { m })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlaConfig {
    pub d: usize,
    pub dk: usize,
    pub dv: usize,
    pub heads: usize,
    pub tau: f64,
}

impl GlaConfig {
    pub fn new(d: usize, dk: usize, dv: usize, heads: usize, tau: f64) -> Result<Self> {
        let cfg = Self {
            d,
            dk,
            dv,
            heads,
            tau,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `d/64` heads (at least one), `d_k = d/8`, `d_v = d/4`, `τ = 16`.
    pub fn standard(d: usize) -> Result<Self> {
        Self::new(d, (d / 8).max(1), (d / 4).max(1), default_heads(d), DEFAULT_TAU)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.dk == 0 || self.dv == 0 {
            return Err(DigError::Config(format!("zero width in {self:?}")));
        }
        if !(self.tau > 0.0) {
            return Err(DigError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.heads == 0 || !self.dk.is_multiple_of(self.heads) || !self.dv.is_multiple_of(self.heads) {
            return Err(DigError::Config(format!(
                "{} heads do not split dk={} and dv={}",
                self.heads, self.dk, self.dv
            )));
        }
        Ok(())
    }
}

pub fn default_heads(d: usize) -> usize {
    (d / 64).max(1)
}

#[derive(Clone, Debug)]
pub struct GlaParams<P> {
    pub q: Linear<P>,
    pub k: Linear<P>,
    pub v: Linear<P>,
    pub alpha: Linear<P>,
    pub beta: Linear<P>,
    pub r: Linear<P>,
    pub o: Linear<P>,
}

impl GlaParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &GlaConfig, rng: &mut R) -> Self {
        let (d, dk, dv) = (cfg.d, cfg.dk, cfg.dv);
        Self {
            q: Linear::init(d, dk, false, rng),
            k: Linear::init(d, dk, false, rng),
            v: Linear::init(d, dv, false, rng),
            alpha: Linear::init(d, dk, true, rng),
            beta: Linear::init(d, dv, true, rng),
            r: Linear::init(d, dv, true, rng),
            o: Linear::init(dv, d, false, rng),
        }
    }
}

impl<P> Tree<P> for GlaParams<P> {
    type Mapped<Q> = GlaParams<Q>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> GlaParams<Q> {
        GlaParams {
            q: self.q.map_with(&join(prefix, "q"), f),
            k: self.k.map_with(&join(prefix, "k"), f),
            v: self.v.map_with(&join(prefix, "v"), f),
            alpha: self.alpha.map_with(&join(prefix, "alpha"), f),
            beta: self.beta.map_with(&join(prefix, "beta"), f),
            r: self.r.map_with(&join(prefix, "r"), f),
            o: self.o.map_with(&join(prefix, "o"), f),
        }
    }

    fn visit_with(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        self.q.visit_with(&join(prefix, "q"), f);
        self.k.visit_with(&join(prefix, "k"), f);
        self.v.visit_with(&join(prefix, "v"), f);
        self.alpha.visit_with(&join(prefix, "alpha"), f);
        self.beta.visit_with(&join(prefix, "beta"), f);
        self.r.visit_with(&join(prefix, "r"), f);
        self.o.visit_with(&join(prefix, "o"), f);
    }

    fn visit_mut_with(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.q.visit_mut_with(&join(prefix, "q"), f);
        self.k.visit_mut_with(&join(prefix, "k"), f);
        self.v.visit_mut_with(&join(prefix, "v"), f);
        self.alpha.visit_mut_with(&join(prefix, "alpha"), f);
        self.beta.visit_mut_with(&join(prefix, "beta"), f);
        self.r.visit_mut_with(&join(prefix, "r"), f);
        self.o.visit_mut_with(&join(prefix, "o"), f);
    }
}

#[derive(Clone, Debug)]
pub struct GateValues {
    /// `[L × d_k]`
    pub alpha: Tensor,
    /// `[L × d_v]`
    pub beta: Tensor,
    /// `[L × d_k × d_v]`, `G_t = α_tᵀ β_t`.
    pub g: Tensor,
}

pub fn gla_gates(x: &Tensor, p: &GlaParams<Tensor>, tau: f64) -> Result<GateValues> {
    let inv = 1.0 / tau;
    let alpha = p.alpha.apply(x)?.map(|z| sigmoid(z).powf(inv));
    let beta = p.beta.apply(x)?.map(|z| sigmoid(z).powf(inv));
    let g = outer_gates(&alpha, &beta)?;
    Ok(GateValues { alpha, beta, g })
}

/// `G_t = α_tᵀ β_t` for every row.
pub fn outer_gates(alpha: &Tensor, beta: &Tensor) -> Result<Tensor> {
    alpha.expect_rank("outer_gates", 2)?;
    beta.expect_rank("outer_gates", 2)?;
    let (l, dk, dv) = (alpha.rows(), alpha.cols(), beta.cols());
    if beta.rows() != l {
        return Err(DigError::shape(
            "outer_gates",
            format!("alpha {:?} beta {:?}", alpha.shape(), beta.shape()),
        ));
    }
    let g = Tensor::from_fn(&[l, dk, dv], |idx| {
        let (t, rest) = (idx / (dk * dv), idx % (dk * dv));
        alpha.data()[t * dk + rest / dv] * beta.data()[t * dv + rest % dv]
    });
    Ok(g)
}

fn check_qkv(op: &'static str, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    for t in [q, k, v] {
        t.expect_rank(op, 2)?;
    }
    let (l, dk, dv) = (q.rows(), q.cols(), v.cols());
    if k.shape() != q.shape() || v.rows() != l {
        return Err(DigError::shape(
            op,
            format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok((l, dk, dv))
}

fn finite_or_err(op: &str, out: Vec<f64>, dv: usize) -> Result<Tensor> {
    if let Some(i) = out.iter().position(|x| !x.is_finite()) {
        return Err(DigError::Numeric(format!(
            "{op}: non-finite output at token {}",
            i / dv
        )));
    }
    Tensor::new(&[out.len() / dv, dv], out)
}

/// Single-head recurrent scan with arbitrary gates `G: [L × d_k × d_v]`.
pub fn gla_scan(q: &Tensor, k: &Tensor, v: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (l, dk, dv) = check_qkv("gla_scan", q, k, v)?;
    if g.shape() != [l, dk, dv] {
        return Err(DigError::shape(
            "gla_scan",
            format!("gate {:?}, expected [{l}, {dk}, {dv}]", g.shape()),
        ));
    }
    let out = kernel::recurrent_scan(
        q.data(),
        k.data(),
        v.data(),
        kernel::Gates::Full(g.data()),
        l,
        dk,
        dv,
    );
    finite_or_err("gla_scan", out, dv)
}

/// Single-head chunk-parallel scan. The gate is taken in factored form
/// `G_t = α_tᵀ β_t`, which the chunked algorithm requires.
pub fn gla_scan_chunked(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
    spec: ChunkSpec,
) -> Result<Tensor> {
    let (l, dk, dv) = check_qkv("gla_scan_chunked", q, k, v)?;
    ChunkSpec::new(spec.m)?;
    if alpha.shape() != [l, dk] || beta.shape() != [l, dv] {
        return Err(DigError::shape(
            "gla_scan_chunked",
            format!("alpha {:?} beta {:?}", alpha.shape(), beta.shape()),
        ));
    }
    let (out, _) = kernel::chunked_scan(
        q.data(),
        k.data(),
        v.data(),
        alpha.data(),
        beta.data(),
        l,
        dk,
        dv,
        spec.m,
    );
    finite_or_err("gla_scan_chunked", out, dv)
}

/// `Y = (Swish(X W_r + b_r) ⊙ LN(O)) W_O`.
pub fn gla_output(o: &Tensor, x: &Tensor, p: &GlaParams<Tensor>) -> Result<Tensor> {
    let g = Graph::new();
    let bound = bind_const(&g, p);
    let (ov, xv) = (g.constant(o.clone()), g.constant(x.clone()));
    let y = gla_output_graph(&g, ov, xv, &bound)?;
    Ok((*g.value(y)).clone())
}

pub fn gla_output_graph(g: &Graph, o: Var, x: Var, p: &GlaParams<Var>) -> Result<Var> {
    let r = g.silu(p.r.forward(g, x)?);
    let gated = g.mul(r, g.layer_norm(o))?;
    p.o.forward(g, gated)
}

/// Full multi-head cell on a tape.
pub fn gla_forward_graph(
    g: &Graph,
    x: Var,
    p: &GlaParams<Var>,
    cfg: &GlaConfig,
    mode: ScanMode,
) -> Result<Var> {
    let q = p.q.forward(g, x)?;
    let k = p.k.forward(g, x)?;
    let v = p.v.forward(g, x)?;
    let inv = 1.0 / cfg.tau;
    let alpha = g.powf(g.sigmoid(p.alpha.forward(g, x)?), inv);
    let beta = g.powf(g.sigmoid(p.beta.forward(g, x)?), inv);
    let o = g.gla_scan(q, k, v, alpha, beta, cfg.heads, mode)?;
    gla_output_graph(g, o, x, p)
}

pub fn gla_forward(
    x: &Tensor,
    p: &GlaParams<Tensor>,
    cfg: &GlaConfig,
    mode: ScanMode,
) -> Result<Tensor> {
    let g = Graph::new();
    let bound = bind_const(&g, p);
    let xv = g.constant(x.clone());
    let y = gla_forward_graph(&g, xv, &bound, cfg, mode)?;
    Ok((*g.value(y)).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::params::grad_check_tree;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// `O_t = Q_t Σ_{i≤t} (∏_{j=i+1..t} G_j) ⊙ (K_iᵀ V_i)`, evaluated directly.
    fn unrolled(q: &Tensor, k: &Tensor, v: &Tensor, g: &Tensor) -> Tensor {
        let (l, dk, dv) = (q.rows(), q.cols(), v.cols());
        Tensor::from_fn(&[l, dv], |idx| {
            let (t, b) = (idx / dv, idx % dv);
            let mut o = 0.0;
            for i in 0..=t {
                for a in 0..dk {
                    let mut decay = 1.0;
                    for j in i + 1..=t {
                        decay *= g.at(&[j, a, b]);
                    }
                    o += q.at(&[t, a]) * decay * k.at(&[i, a]) * v.at(&[i, b]);
                }
            }
            o
        })
    }

    fn random_qkv(l: usize, dk: usize, dv: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor) {
        (
            Tensor::randn(&[l, dk], 1.0, rng),
            Tensor::randn(&[l, dk], 1.0, rng),
            Tensor::randn(&[l, dv], 1.0, rng),
        )
    }

    fn small_params(cfg: &GlaConfig, seed: u64) -> GlaParams<Tensor> {
        let mut rng = rng(seed);
        let mut p = GlaParams::init(cfg, &mut rng);
        for lin in [&mut p.alpha, &mut p.beta, &mut p.r] {
            lin.bias = Some(Tensor::randn(&[1, lin.fan_out()], 0.5, &mut rng));
        }
        p
    }

    #[test]
    fn zero_weights_give_quarter_gates() {
        let cfg = GlaConfig::new(4, 2, 3, 1, 1.0).unwrap();
        let mut p = GlaParams::init(&cfg, &mut rng(0));
        p.alpha = Linear::zeros(4, 2, true);
        p.beta = Linear::zeros(4, 3, true);
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng(1));
        let gates = gla_gates(&x, &p, 1.0).unwrap();
        assert_eq!(gates.g.shape(), &[5, 2, 3]);
        assert!(gates.g.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn saturated_bias_gives_gates_near_one() {
        let cfg = GlaConfig::new(4, 2, 2, 1, 1.0).unwrap();
        let mut p = GlaParams::init(&cfg, &mut rng(0));
        p.alpha = Linear::zeros(4, 2, true);
        p.beta = Linear::zeros(4, 2, true);
        p.alpha.bias = Some(Tensor::full(&[1, 2], 30.0));
        p.beta.bias = Some(Tensor::full(&[1, 2], 30.0));
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng(1));
        let gates = gla_gates(&x, &p, 1.0).unwrap();
        assert!(gates.g.data().iter().all(|&v| v > 1.0 - 1e-9 && v < 1.0));
    }

    #[test]
    fn doubling_tau_takes_square_root_of_gates() {
        let cfg = GlaConfig::new(4, 2, 3, 1, 1.0).unwrap();
        let p = small_params(&cfg, 3);
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng(4));
        let g1 = gla_gates(&x, &p, 1.0).unwrap().g;
        let g2 = gla_gates(&x, &p, 2.0).unwrap().g;
        assert!(g2.max_abs_diff(&g1.map(f64::sqrt)).unwrap() < 1e-14);
    }

    #[test]
    fn single_token_ignores_gate() {
        let (q, k, v) = random_qkv(1, 3, 2, &mut rng(5));
        let g = Tensor::randn(&[1, 3, 2], 1.0, &mut rng(6));
        let o = gla_scan(&q, &k, &v, &g).unwrap();
        let expected = q.matmul(&k.transpose2d().unwrap().matmul(&v).unwrap()).unwrap();
        assert!(o.max_abs_diff(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn zero_gate_has_no_memory() {
        let (q, k, v) = random_qkv(4, 3, 2, &mut rng(7));
        let o = gla_scan(&q, &k, &v, &Tensor::zeros(&[4, 3, 2])).unwrap();
        for t in 0..4 {
            for b in 0..2 {
                let expected: f64 = (0..3).map(|a| q.at(&[t, a]) * k.at(&[t, a]) * v.at(&[t, b])).sum();
                assert!((o.at(&[t, b]) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn recurrent_matches_unrolled_product() {
        let mut r = rng(8);
        let (q, k, v) = random_qkv(5, 3, 3, &mut r);
        let g = Tensor::rand_uniform(&[5, 3, 3], 0.0, 1.0, &mut r);
        let o = gla_scan(&q, &k, &v, &g).unwrap();
        assert!(o.max_abs_diff(&unrolled(&q, &k, &v, &g)).unwrap() < 1e-12);
    }

    #[test]
    fn nan_input_is_numeric_error() {
        let (mut q, k, v) = random_qkv(3, 2, 2, &mut rng(9));
        q.data_mut()[2] = f64::NAN;
        let g = Tensor::ones(&[3, 2, 2]);
        assert!(matches!(gla_scan(&q, &k, &v, &g), Err(DigError::Numeric(_))));
    }

    #[test]
    fn chunk_of_zero_is_config_error() {
        let (q, k, v) = random_qkv(3, 2, 2, &mut rng(10));
        let a = Tensor::full(&[3, 2], 0.5);
        let b = Tensor::full(&[3, 2], 0.5);
        let r = gla_scan_chunked(&q, &k, &v, &a, &b, ChunkSpec { m: 0 });
        assert!(matches!(r, Err(DigError::Config(_))));
        assert!(ScanMode::parse("chunked", 0).is_err());
        assert!(ScanMode::parse("sideways", 4).is_err());
    }

    fn chunk_vs_recurrent(l: usize, dk: usize, dv: usize, m: usize, seed: u64) -> f64 {
        let mut r = rng(seed);
        let (q, k, v) = random_qkv(l, dk, dv, &mut r);
        let a = Tensor::rand_uniform(&[l, dk], 0.05, 1.0, &mut r);
        let b = Tensor::rand_uniform(&[l, dv], 0.05, 1.0, &mut r);
        let g = outer_gates(&a, &b).unwrap();
        let rec = gla_scan(&q, &k, &v, &g).unwrap();
        let chk = gla_scan_chunked(&q, &k, &v, &a, &b, ChunkSpec::new(m).unwrap()).unwrap();
        rec.max_abs_diff(&chk).unwrap()
    }

    #[test]
    fn chunked_edge_lengths() {
        assert!(chunk_vs_recurrent(16, 4, 4, 16, 11) < 1e-10);
        assert!(chunk_vs_recurrent(16, 4, 4, 1, 12) < 1e-10);
        assert!(chunk_vs_recurrent(16, 4, 4, 4, 13) < 1e-10);
        assert!(chunk_vs_recurrent(10, 3, 5, 3, 14) < 1e-10);
        assert!(chunk_vs_recurrent(7, 2, 2, 100, 15) < 1e-10);
    }

    #[test]
    fn chunked_survives_tiny_and_zero_gates() {
        let mut r = rng(16);
        let (q, k, v) = random_qkv(32, 3, 2, &mut r);
        let mut a = Tensor::rand_uniform(&[32, 3], 1e-80, 1e-60, &mut r);
        a.data_mut()[20] = 0.0;
        let b = Tensor::rand_uniform(&[32, 2], 0.5, 1.0, &mut r);
        let g = outer_gates(&a, &b).unwrap();
        let rec = gla_scan(&q, &k, &v, &g).unwrap();
        let chk = gla_scan_chunked(&q, &k, &v, &a, &b, ChunkSpec::new(16).unwrap()).unwrap();
        assert!(rec.max_abs_diff(&chk).unwrap() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn chunked_equals_recurrent(
            l in 1usize..=64,
            dk in 1usize..=32,
            dv in 1usize..=32,
            mi in 0usize..4,
            seed in any::<u64>(),
        ) {
            let m = [1, 2, 4, l][mi];
            prop_assert!(chunk_vs_recurrent(l, dk, dv, m, seed) < 1e-9);
        }

        #[test]
        fn larger_tau_moves_gates_toward_one(seed in any::<u64>(), tau in 0.5f64..8.0, extra in 0.1f64..8.0) {
            let cfg = GlaConfig::new(4, 2, 2, 1, tau).unwrap();
            let p = small_params(&cfg, seed);
            let x = Tensor::randn(&[5, 4], 2.0, &mut rng(seed ^ 1));
            let lo = gla_gates(&x, &p, tau).unwrap().g;
            let hi = gla_gates(&x, &p, tau + extra).unwrap().g;
            for (a, b) in lo.data().iter().zip(hi.data()) {
                prop_assert!(b >= a && *b < 1.0 && *a > 0.0);
            }
        }
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let cfg = GlaConfig::new(4, 2, 2, 1, 1.0).unwrap();
        let mut p = small_params(&cfg, 17);
        p.o = Linear::zeros(2, 4, false);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng(18));
        let o = Tensor::randn(&[3, 2], 1.0, &mut rng(19));
        assert_eq!(gla_output(&o, &x, &p).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn unit_gate_reduces_output_to_normed_projection() {
        // Swish(b) = 1 solved by bisection.
        let (mut lo, mut hi) = (0.0f64, 3.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if crate::tensor::swish(mid) < 1.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        let b = 0.5 * (lo + hi);
        assert!((b - 1.2785).abs() < 1e-4);
        let cfg = GlaConfig::new(4, 2, 3, 1, 1.0).unwrap();
        let mut p = small_params(&cfg, 20);
        p.r = Linear::zeros(4, 3, true);
        p.r.bias = Some(Tensor::full(&[1, 3], b));
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng(21));
        let o = Tensor::randn(&[3, 3], 1.0, &mut rng(22));
        let y = gla_output(&o, &x, &p).unwrap();
        let expected = o.layer_norm().matmul(&p.o.weight).unwrap();
        assert!(y.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let cfg = GlaConfig::new(8, 4, 4, 2, DEFAULT_TAU).unwrap();
        let p = GlaParams::init(&cfg, &mut rng(23));
        let y = gla_forward(&Tensor::zeros(&[6, 8]), &p, &cfg, ScanMode::Recurrent).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn forward_modes_agree() {
        let cfg = GlaConfig::new(8, 4, 6, 2, 2.0).unwrap();
        let p = small_params(&cfg, 24);
        let x = Tensor::randn(&[10, 8], 1.0, &mut rng(25));
        let a = gla_forward(&x, &p, &cfg, ScanMode::Recurrent).unwrap();
        let b = gla_forward(&x, &p, &cfg, ScanMode::Chunked(3)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn forward_is_causal() {
        let cfg = GlaConfig::new(8, 4, 4, 2, 2.0).unwrap();
        let p = small_params(&cfg, 26);
        let x = Tensor::randn(&[10, 8], 1.0, &mut rng(27));
        let mut x2 = x.clone();
        for j in 0..8 {
            x2.data_mut()[7 * 8 + j] += 3.0;
        }
        let a = gla_forward(&x, &p, &cfg, ScanMode::Recurrent).unwrap();
        let b = gla_forward(&x2, &p, &cfg, ScanMode::Recurrent).unwrap();
        assert_eq!(&a.data()[..7 * 8], &b.data()[..7 * 8]);
        assert_ne!(&a.data()[7 * 8..8 * 8], &b.data()[7 * 8..8 * 8]);
    }

    #[test]
    fn scan_gradient_matches_finite_differences() {
        let mut r = rng(28);
        let (l, dk, dv) = (9, 4, 6);
        let (q, k, v) = random_qkv(l, dk, dv, &mut r);
        let a = Tensor::rand_uniform(&[l, dk], 0.3, 1.0, &mut r);
        let b = Tensor::rand_uniform(&[l, dv], 0.3, 1.0, &mut r);
        let w = Tensor::randn(&[l, dv], 1.0, &mut r);
        let inputs = [q, k, v, a, b];
        for which in 0..5 {
            let inputs = inputs.clone();
            let w = w.clone();
            let x = inputs[which].clone();
            let report = grad_check(
                move |g, xv| {
                    let vars: Vec<Var> = (0..5)
                        .map(|i| if i == which { xv } else { g.constant(inputs[i].clone()) })
                        .collect();
                    let o = g.gla_scan(vars[0], vars[1], vars[2], vars[3], vars[4], 2, ScanMode::Chunked(4))?;
                    let wv = g.constant(w.clone());
                    Ok(g.sum(g.mul(o, wv)?))
                },
                &x,
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "input {which}: {}", report.max_rel_err);
        }
    }

    #[test]
    fn full_cell_gradients_for_every_parameter() {
        let cfg = GlaConfig::new(6, 4, 4, 2, 2.0).unwrap();
        let p = small_params(&cfg, 29);
        let x = Tensor::randn(&[5, 6], 1.0, &mut rng(30));
        let w = Tensor::randn(&[5, 6], 1.0, &mut rng(31));
        let report = grad_check_tree(
            &p,
            |g, bound| {
                let y = gla_forward_graph(g, g.constant(x.clone()), bound, &cfg, ScanMode::Recurrent)?;
                Ok(g.sum(g.mul(y, g.constant(w.clone()))?))
            },
            1e-6,
        )
        .unwrap();
        assert_eq!(report.len(), 10);
        for (name, rel, zero) in report {
            assert!(rel < 1e-4 && !zero, "{name}: {rel}");
        }
    }
}
