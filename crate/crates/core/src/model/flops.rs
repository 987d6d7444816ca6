//! Analytic multiply-accumulate counts.
//!
//! Counts match what the tape records for a forward pass: matmuls,
//! depthwise convolution and scan work. Elementwise ops, norms and
//! gathers are free. Gflops are reported as 10⁹ multiply-accumulates.

use serde::Serialize;

use crate::block::block_macs;
use crate::error::Result;
use crate::gla::ScanMode;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    pub name: String,
    pub macs: u64,
    pub gflops: f64,
    pub blocks: u64,
    pub embed: u64,
    pub resample: u64,
    pub head: u64,
    pub reference_gflops: Option<f64>,
    /// `gflops / reference_gflops`.
    pub ratio: Option<f64>,
}

/// Softmax-attention transformer with adaLN-Zero blocks and the same
/// embeddings and head.
pub fn dit_macs(
    layers: usize,
    hidden: usize,
    patch: usize,
    image: usize,
    channels: usize,
    freq_dim: usize,
) -> u64 {
    let (d, p, c) = (hidden as u64, patch as u64, channels as u64);
    let side = (image / patch) as u64;
    let t = side * side;
    let block = 12 * d * d * t + 2 * t * t * d + 6 * d * d;
    let extras = freq_dim as u64 * d + d * d + 2 * d * d + t * p * p * c * d + t * d * p * p * 2 * c;
    layers as u64 * block + extras
}

pub fn flops_estimate(cfg: &ModelConfig) -> Result<FlopReport> {
    flops_estimate_with(cfg, ScanMode::Chunked(cfg.chunk))
}

pub fn flops_estimate_with(cfg: &ModelConfig, mode: ScanMode) -> Result<FlopReport> {
    cfg.validate()?;
    let d = cfg.hidden as u64;
    let t0 = cfg.tokens() as u64;
    let p2c = (cfg.patch * cfg.patch * cfg.channels) as u64;

    let mut blocks = 0;
    for stage in cfg.stages() {
        let bc = cfg.block_config(stage.width)?;
        blocks += stage.depth as u64 * block_macs(&bc, stage.tokens, mode);
    }
    let mut resample = 0;
    for level in 0..cfg.levels() - 1 {
        let t = t0 >> (2 * (level + 1));
        let (w, w_next) = (cfg.width(level) as u64, cfg.width(level + 1) as u64);
        resample += 2 * t * 4 * w * w_next;
    }
    let embed = cfg.freq_dim as u64 * d + d * d + t0 * p2c * d;
    let head = 2 * d * d + t0 * d * 2 * p2c;
    let macs = blocks + resample + embed + head;
    let gflops = macs as f64 / 1e9;
    let reference_gflops = cfg.reference_dit.map(|r| {
        dit_macs(r.layers, r.hidden, r.patch, cfg.image, cfg.channels, cfg.freq_dim) as f64 / 1e9
    });
    Ok(FlopReport {
        name: cfg.name.clone(),
        macs,
        gflops,
        blocks,
        embed,
        resample,
        head,
        reference_gflops,
        ratio: reference_gflops.map(|r| gflops / r),
    })
}
