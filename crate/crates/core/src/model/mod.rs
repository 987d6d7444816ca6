//! Backbone assembly: patch embedding, conditioning, the block stack
//! (plain or U-shaped) and the zero-initialized output head.

pub mod config;
pub mod embed;
pub mod flops;

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::block::{dig_block_forward_graph, modulate, BlockConfig, DiGBlockParams};
use crate::error::Result;
use crate::gla::ScanMode;
use crate::params::{bind_const, join, Linear, Tree};
use crate::srem::{OpCounter, ReorientSchedule};
use crate::tensor::{grid_side, Tensor};

pub use config::{ModelConfig, ReferenceDit, UShape, Variant};
pub use embed::{
    embed_label_graph, embed_timestep_graph, patchify, patchify_graph, pos_embed_frequency,
    timestep_frequencies, unpatchify, unpatchify_channels, unpatchify_graph,
};
pub use flops::{dit_macs, flops_estimate, flops_estimate_with, FlopReport};

/// One run of consecutive blocks at a fixed resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub level: usize,
    pub width: usize,
    pub tokens: usize,
    pub depth: usize,
    /// Global index of the stage's first block.
    pub first_layer: usize,
}

impl ModelConfig {
    /// Stages in execution order: encoder levels `0..L`, then decoder
    /// levels `L-2` down to `0`.
    pub fn stages(&self) -> Vec<Stage> {
        let t0 = self.tokens();
        let levels: Vec<usize> = match &self.ushape {
            None => vec![0],
            Some(u) => {
                let l = u.widths.len();
                (0..l).chain((0..l - 1).rev()).collect()
            }
        };
        let depths: Vec<usize> = match &self.ushape {
            None => vec![self.layers],
            Some(u) => u.depths.clone(),
        };
        let mut first = 0;
        levels
            .into_iter()
            .zip(depths)
            .map(|(level, depth)| {
                let s = Stage {
                    level,
                    width: self.width(level),
                    tokens: t0 >> (2 * level),
                    depth,
                    first_layer: first,
                };
                first += depth;
                s
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams<P> {
    pub patch: Linear<P>,
    pub t_mlp1: Linear<P>,
    pub t_mlp2: Linear<P>,
    /// `[num_classes × D]`.
    pub labels: P,
    /// Every block in execution order.
    pub blocks: Vec<DiGBlockParams<P>>,
    /// Patch merge from level `i` to `i+1`, `4·w_i → w_{i+1}`.
    pub down: Vec<Linear<P>>,
    /// Patch expansion from level `i+1` to `i`, `w_{i+1} → 4·w_i`.
    pub up: Vec<Linear<P>>,
    pub final_adaln: Linear<P>,
    pub head: Linear<P>,
}

impl ModelParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let p2c = cfg.patch * cfg.patch * cfg.channels;
        let patch = Linear::init(p2c, d, true, rng);
        let t_mlp1 = Linear::init(cfg.freq_dim, d, true, rng);
        let t_mlp2 = Linear::init(d, d, true, rng);
        let labels = Tensor::randn(&[cfg.num_classes, d], 0.02, rng);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for stage in cfg.stages() {
            let bc = cfg.block_config(stage.width)?;
            for _ in 0..stage.depth {
                blocks.push(DiGBlockParams::init(&bc, rng));
            }
        }
        let mut down = Vec::new();
        let mut up = Vec::new();
        for level in 0..cfg.levels() - 1 {
            let (w, w_next) = (cfg.width(level), cfg.width(level + 1));
            down.push(Linear::init(4 * w, w_next, true, rng));
            up.push(Linear::init(w_next, 4 * w, true, rng));
        }
        Ok(Self {
            patch,
            t_mlp1,
            t_mlp2,
            labels,
            blocks,
            down,
            up,
            final_adaln: Linear::zeros(d, 2 * d, true),
            head: Linear::zeros(d, 2 * p2c, true),
        })
    }
}

impl<P> Tree<P> for ModelParams<P> {
    type Mapped<Q> = ModelParams<Q>;

    fn map_with<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> ModelParams<Q> {
        ModelParams {
            patch: self.patch.map_with(&join(prefix, "patch"), f),
            t_mlp1: self.t_mlp1.map_with(&join(prefix, "t_mlp1"), f),
            t_mlp2: self.t_mlp2.map_with(&join(prefix, "t_mlp2"), f),
            labels: f(&join(prefix, "labels"), &self.labels),
            blocks: self.blocks.map_with(&join(prefix, "blocks"), f),
            down: self.down.map_with(&join(prefix, "down"), f),
            up: self.up.map_with(&join(prefix, "up"), f),
            final_adaln: self.final_adaln.map_with(&join(prefix, "final_adaln"), f),
            head: self.head.map_with(&join(prefix, "head"), f),
        }
    }

    fn visit_with(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        self.patch.visit_with(&join(prefix, "patch"), f);
        self.t_mlp1.visit_with(&join(prefix, "t_mlp1"), f);
        self.t_mlp2.visit_with(&join(prefix, "t_mlp2"), f);
        f(&join(prefix, "labels"), &self.labels);
        self.blocks.visit_with(&join(prefix, "blocks"), f);
        self.down.visit_with(&join(prefix, "down"), f);
        self.up.visit_with(&join(prefix, "up"), f);
        self.final_adaln.visit_with(&join(prefix, "final_adaln"), f);
        self.head.visit_with(&join(prefix, "head"), f);
    }

    fn visit_mut_with(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.patch.visit_mut_with(&join(prefix, "patch"), f);
        self.t_mlp1.visit_mut_with(&join(prefix, "t_mlp1"), f);
        self.t_mlp2.visit_mut_with(&join(prefix, "t_mlp2"), f);
        f(&join(prefix, "labels"), &mut self.labels);
        self.blocks.visit_mut_with(&join(prefix, "blocks"), f);
        self.down.visit_mut_with(&join(prefix, "down"), f);
        self.up.visit_mut_with(&join(prefix, "up"), f);
        self.final_adaln.visit_mut_with(&join(prefix, "final_adaln"), f);
        self.head.visit_mut_with(&join(prefix, "head"), f);
    }
}

/// Gather from `[T × w]` row-major grid tokens to `[T/4 × 4w]`, each row
/// holding a 2×2 neighbourhood ordered (row, column, channel).
pub fn merge_index(tokens: usize, w: usize) -> Result<Vec<usize>> {
    let side = grid_side(tokens)
        .filter(|s| s % 2 == 0)
        .ok_or_else(|| crate::error::DigError::shape("merge", format!("cannot merge {tokens} tokens")))?;
    let half = side / 2;
    let mut index = Vec::with_capacity(tokens * w);
    for r in 0..half {
        for c in 0..half {
            for dr in 0..2 {
                for dc in 0..2 {
                    let src = (2 * r + dr) * side + 2 * c + dc;
                    index.extend((0..w).map(|ch| src * w + ch));
                }
            }
        }
    }
    Ok(index)
}

fn merge(g: &Graph, z: Var, lin: &Linear<Var>) -> Result<Var> {
    let shape = g.shape(z);
    let (t, w) = (shape[0], shape[1]);
    let grouped = g.gather(z, &[t / 4, 4 * w], Rc::new(merge_index(t, w)?))?;
    lin.forward(g, grouped)
}

fn expand(g: &Graph, z: Var, lin: &Linear<Var>) -> Result<Var> {
    let wide = lin.forward(g, z)?;
    let shape = g.shape(wide);
    let (t, w) = (4 * shape[0], shape[1] / 4);
    let index = merge_index(t, w)?;
    let mut inverse = vec![0; index.len()];
    for (k, &src) in index.iter().enumerate() {
        inverse[src] = k;
    }
    g.gather(wide, &[t, w], Rc::new(inverse))
}

/// Conditioning vector `t + y`, `[1 × D]`.
pub fn condition_graph(
    g: &Graph,
    t: usize,
    y: usize,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let te = embed_timestep_graph(g, t, cfg.steps, cfg.freq_dim, (&p.t_mlp1, &p.t_mlp2))?;
    let ye = embed_label_graph(g, y, p.labels)?;
    g.add(te, ye)
}

/// Runs the block stack on embedded tokens, returning `[T × D]` in
/// row-major grid order.
pub fn backbone_graph(
    g: &Graph,
    tokens: Var,
    cond: Var,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    mode: ScanMode,
    ops: &mut OpCounter,
) -> Result<Var> {
    let shortcuts = cfg.ushape.as_ref().is_some_and(|u| u.shortcuts);
    let block_cfgs: Vec<BlockConfig> = (0..cfg.levels())
        .map(|l| cfg.block_config(cfg.width(l)))
        .collect::<Result<_>>()?;
    let mut z = tokens;
    let mut skips: Vec<Var> = Vec::new();
    let mut prev: Option<Stage> = None;
    for stage in cfg.stages() {
        if let Some(prev) = prev {
            if stage.level > prev.level {
                skips.push(z);
                z = merge(g, z, &p.down[prev.level])?;
            } else {
                z = expand(g, z, &p.up[stage.level])?;
                let skip = skips.pop().expect("encoder stage precedes decoder");
                if shortcuts {
                    z = g.add(z, skip)?;
                }
            }
        }
        let bc = &block_cfgs[stage.level];
        for layer in stage.first_layer..stage.first_layer + stage.depth {
            z = dig_block_forward_graph(g, z, cond, layer, &p.blocks[layer], bc, mode, ops)?;
        }
        if bc.reorient && stage.depth > 0 {
            let restore = ReorientSchedule::new(cfg.layers, stage.tokens)?
                .restore_range(stage.first_layer, stage.depth);
            if restore.iter().enumerate().any(|(i, &j)| i != j) {
                z = g.permute_rows(z, &restore)?;
            }
        }
        prev = Some(stage);
    }
    Ok(z)
}

/// Noise prediction and raw covariance output, each `[C × I × I]`.
#[allow(clippy::too_many_arguments)]
pub fn model_forward_graph(
    g: &Graph,
    x: Var,
    t: usize,
    y: usize,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    mode: ScanMode,
    ops: &mut OpCounter,
) -> Result<(Var, Var)> {
    let d = cfg.hidden;
    let rows = patchify_graph(g, x, cfg.patch)?;
    let pos = g.constant(pos_embed_frequency(cfg.tokens(), d)?);
    let tokens = g.add(p.patch.forward(g, rows)?, pos)?;
    let cond = condition_graph(g, t, y, p, cfg)?;
    let z = backbone_graph(g, tokens, cond, p, cfg, mode, ops)?;

    let m = p.final_adaln.forward(g, g.silu(cond))?;
    let h = modulate(g, z, g.slice_cols(m, 0, d)?, g.slice_cols(m, d, d)?)?;
    let out = p.head.forward(g, h)?;
    let (c, i, pp) = (cfg.channels, cfg.image, cfg.patch);
    let noise = unpatchify_channels(g, out, 0, c, 2 * c, i, pp)?;
    let cov = unpatchify_channels(g, out, c, c, 2 * c, i, pp)?;
    Ok((noise, cov))
}

pub fn model_forward(
    x: &Tensor,
    t: usize,
    y: usize,
    p: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    mode: ScanMode,
) -> Result<(Tensor, Tensor)> {
    let g = Graph::new();
    let bound = bind_const(&g, p);
    let (n, c) = model_forward_graph(
        &g,
        g.constant(x.clone()),
        t,
        y,
        &bound,
        cfg,
        mode,
        &mut OpCounter::default(),
    )?;
    Ok(((*g.value(n)).clone(), (*g.value(c)).clone()))
}
