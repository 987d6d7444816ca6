//! Patch, position, timestep and label embeddings.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{DigError, Result};
use crate::params::Linear;
use crate::tensor::{grid_side, Tensor};

const MAX_PERIOD: f64 = 10_000.0;

/// Sin/cos table for one axis: `dim` columns, `ceil(dim/2)` sines followed
/// by `floor(dim/2)` cosines over geometric frequencies.
fn axis_embedding(positions: &[f64], dim: usize) -> Vec<Vec<f64>> {
    let n_sin = dim.div_ceil(2);
    let omega: Vec<f64> = (0..n_sin)
        .map(|i| MAX_PERIOD.powf(-(i as f64) / n_sin as f64))
        .collect();
    positions
        .iter()
        .map(|&p| {
            let mut row: Vec<f64> = omega.iter().map(|w| (p * w).sin()).collect();
            row.extend(omega.iter().take(dim / 2).map(|w| (p * w).cos()));
            row
        })
        .collect()
}

/// Fixed 2-D sin/cos positional embedding for a row-major `√T × √T` grid:
/// the first `D/2` columns encode the row, the rest the column.
pub fn pos_embed_frequency(tokens: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(DigError::Config(format!(
            "positional embedding width must be even, got {d}"
        )));
    }
    let n = grid_side(tokens).ok_or_else(|| {
        DigError::Config(format!("token count {tokens} is not a perfect square"))
    })?;
    let coords: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let axis = axis_embedding(&coords, d / 2);
    let mut data = Vec::with_capacity(tokens * d);
    for r in 0..n {
        for c in 0..n {
            data.extend_from_slice(&axis[r]);
            data.extend_from_slice(&axis[c]);
        }
    }
    Tensor::new(&[tokens, d], data)
}

/// Sinusoidal features of a timestep: `[cos(t ω_i), sin(t ω_i)]` with
/// `ω_i = 10000^{-i/(dim/2)}`, zero-padded when `dim` is odd.
pub fn timestep_frequencies(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut row = vec![0.0; dim];
    for i in 0..half {
        let arg = t * (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp();
        row[i] = arg.cos();
        row[half + i] = arg.sin();
    }
    Tensor::new(&[1, dim], row).expect("row shape")
}

/// `Linear(SiLU(Linear(freq(t))))`, `[1 × D]`.
pub fn embed_timestep_graph(
    g: &Graph,
    t: usize,
    steps: usize,
    freq_dim: usize,
    mlp: (&Linear<Var>, &Linear<Var>),
) -> Result<Var> {
    if t >= steps {
        return Err(DigError::OutOfRange {
            what: "timestep",
            index: t,
            bound: steps,
        });
    }
    let f = g.constant(timestep_frequencies(t as f64, freq_dim));
    let h = g.silu(mlp.0.forward(g, f)?);
    mlp.1.forward(g, h)
}

/// Row `y` of the label table, `[1 × D]`.
pub fn embed_label_graph(g: &Graph, y: usize, table: Var) -> Result<Var> {
    let shape = g.shape(table);
    let (classes, d) = (shape[0], shape[1]);
    if y >= classes {
        return Err(DigError::OutOfRange {
            what: "label",
            index: y,
            bound: classes,
        });
    }
    g.gather(table, &[1, d], Rc::new((y * d..(y + 1) * d).collect()))
}

/// Flat index map from a `[C × I × I]` latent to `[T × P²C]` patch rows,
/// features ordered (patch row, patch column, channel).
pub fn patch_index(c: usize, i: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || !i.is_multiple_of(p) {
        return Err(DigError::Config(format!(
            "image size {i} is not divisible by patch size {p}"
        )));
    }
    let n = i / p;
    let mut index = Vec::with_capacity(c * i * i);
    for pr in 0..n {
        for pc in 0..n {
            for dr in 0..p {
                for dc in 0..p {
                    for ch in 0..c {
                        index.push(ch * i * i + (pr * p + dr) * i + pc * p + dc);
                    }
                }
            }
        }
    }
    Ok(index)
}

/// Patch rows of a latent, `[T × P²C]`.
pub fn patchify_graph(g: &Graph, x: Var, p: usize) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(DigError::shape("patchify", format!("expected [C, I, I], got {shape:?}")));
    }
    let (c, i) = (shape[0], shape[1]);
    let index = patch_index(c, i, p)?;
    let n = i / p;
    g.gather(x, &[n * n, p * p * c], Rc::new(index))
}

/// Inverse of [`patchify_graph`] for `[T × P²C]` rows.
pub fn unpatchify_graph(g: &Graph, rows: Var, c: usize, i: usize, p: usize) -> Result<Var> {
    let index = patch_index(c, i, p)?;
    let mut inverse = vec![0; index.len()];
    for (k, &src) in index.iter().enumerate() {
        inverse[src] = k;
    }
    g.gather(rows, &[c, i, i], Rc::new(inverse))
}

/// `[T × P²C] rows → [C × I × I]` for channels `first..first+c` of a
/// `[T × P²·total]` head output.
pub fn unpatchify_channels(
    g: &Graph,
    rows: Var,
    first: usize,
    c: usize,
    total: usize,
    i: usize,
    p: usize,
) -> Result<Var> {
    let n = i / p;
    let width = p * p * total;
    let mut index = Vec::with_capacity(n * n * p * p * c);
    for t in 0..n * n {
        for q in 0..p * p {
            for ch in 0..c {
                index.push(t * width + q * total + first + ch);
            }
        }
    }
    let picked = g.gather(rows, &[n * n, p * p * c], Rc::new(index))?;
    unpatchify_graph(g, picked, c, i, p)
}

/// Tensor-level patchify with projection and positional embedding.
pub fn patchify(z: &Tensor, w: &Tensor, pos: &Tensor, p: usize) -> Result<Tensor> {
    let g = Graph::new();
    let rows = patchify_graph(&g, g.constant(z.clone()), p)?;
    let proj = g.matmul(rows, g.constant(w.clone()))?;
    let out = g.add(proj, g.constant(pos.clone()))?;
    Ok((*g.value(out)).clone())
}

/// Tensor-level inverse of an unprojected patchify.
pub fn unpatchify(rows: &Tensor, c: usize, i: usize, p: usize) -> Result<Tensor> {
    let g = Graph::new();
    let out = unpatchify_graph(&g, g.constant(rows.clone()), c, i, p)?;
    Ok((*g.value(out)).clone())
}
