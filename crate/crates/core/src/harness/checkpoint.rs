//! Checkpoint files: `u64` LE header length, JSON header (run config,
//! counters, tensor names and shapes), then every tensor as LE `f64` in
//! header order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DigError, Result};
use crate::harness::train::{RunConfig, TrainState};
use crate::harness::AdamW;
use crate::model::ModelParams;
use crate::params::{named, Tree};
use crate::tensor::{read_f64s, write_f64s, Tensor};

const FORMAT: &str = "dig-checkpoint";
const VERSION: u32 = 1;
const GROUPS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: RunConfig,
    step: u64,
    adam_step: u64,
    tensors: Vec<Entry>,
}

pub fn write_checkpoint<W: Write>(w: &mut W, run: &RunConfig, state: &TrainState) -> Result<()> {
    let trees = [&state.params, &state.ema, &state.opt.m, &state.opt.v];
    let mut entries = Vec::new();
    let mut blobs = Vec::new();
    for (group, tree) in GROUPS.iter().zip(trees) {
        for (name, t) in named(tree) {
            entries.push(Entry {
                name: format!("{group}.{name}"),
                shape: t.shape().to_vec(),
            });
            blobs.push(t);
        }
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: run.clone(),
        step: state.step,
        adam_step: state.opt.step,
        tensors: entries,
    };
    let bytes = serde_json::to_vec(&header).map_err(|e| DigError::Format(e.to_string()))?;
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(&bytes)?;
    for t in blobs {
        write_f64s(w, t.data())?;
    }
    Ok(())
}

fn fill(tree: &mut ModelParams<Tensor>, group: &str, table: &mut HashMap<String, Tensor>) -> Result<()> {
    let mut failure = None;
    tree.visit_mut_with("", &mut |name, slot| {
        let key = format!("{group}.{name}");
        match table.remove(&key) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                failure.get_or_insert(DigError::shape(
                    "checkpoint",
                    format!("{key}: stored {:?}, model {:?}", t.shape(), slot.shape()),
                ));
            }
            None => {
                failure.get_or_insert(DigError::MissingParam(key));
            }
        }
    });
    failure.map_or(Ok(()), Err)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(RunConfig, TrainState)> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut bytes = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut bytes)?;
    let header: Header = serde_json::from_slice(&bytes).map_err(|e| DigError::Format(e.to_string()))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(DigError::Format(format!(
            "unsupported checkpoint {} v{}",
            header.format, header.version
        )));
    }
    let mut table = HashMap::new();
    for e in header.tensors {
        let data = read_f64s(r, e.shape.iter().product())?;
        table.insert(e.name, Tensor::new(&e.shape, data)?);
    }
    let run = header.config;
    run.model.validate()?;
    let mut state = TrainState::new(&run, &mut ChaCha8Rng::seed_from_u64(0))?;
    fill(&mut state.params, "params", &mut table)?;
    fill(&mut state.ema, "ema", &mut table)?;
    let mut opt = AdamW::new(run.train.adamw(), &state.params);
    fill(&mut opt.m, "adam_m", &mut table)?;
    fill(&mut opt.v, "adam_v", &mut table)?;
    opt.step = header.adam_step;
    state.opt = opt;
    state.step = header.step;
    if let Some(extra) = table.keys().next() {
        return Err(DigError::Format(format!("unexpected tensor {extra}")));
    }
    Ok((run, state))
}

pub fn save_checkpoint(path: &Path, run: &RunConfig, state: &TrainState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, run, state)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, TrainState)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
