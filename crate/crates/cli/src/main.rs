use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dig_bench::strategies::ordering_holds;
use dig_bench::{
    flops_table, scan_strategy_bench, scaling_run, write_flops_csv, write_scaling_csv,
    write_strategy_csv, ScalingConfig,
};
use dig_core::check;
use dig_core::harness::{cycle_labels, load_checkpoint, sample, save_checkpoint, train, StepMetrics};
use dig_core::model::flops_estimate_with;
use dig_core::{ModelConfig, ModelParams, RunConfig, ScanMode, Tensor, TrainState};
use serde_json::json;

mod image;

/// Diffusion gated linear attention: training, sampling and benchmarks.
#[derive(Parser, Debug)]
#[command(name = "dig", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a toy dataset; writes metrics and a checkpoint.
    Train,
    /// Draw samples from a checkpoint (EMA weights) or a fresh model.
    Sample,
    /// Time softmax vs chunked GLA and the scan strategies.
    Bench,
    /// Analytic Gflops and ratio to the reference DiT.
    Flops,
    /// Run the invariant checks.
    Check,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Recurrent,
    Chunked,
}

#[derive(Args, Debug)]
struct Common {
    /// Run config TOML, or a checkpoint for `sample`.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// train: optimizer steps. bench: number of sequence lengths (256·2^i).
    /// check: toy training steps (0 skips training).
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Chunk length for chunked scans.
    #[arg(long, global = true)]
    chunk: Option<usize>,
}

const DEFAULT_PRESET: &str = "toy-s";

impl Common {
    fn out_dir(&self, default: &str) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    /// Run config from `--config` (or the toy preset) with flag overrides.
    fn run_config(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::preset(DEFAULT_PRESET)?,
        };
        self.apply(&mut run);
        run.validate()?;
        Ok(run)
    }

    fn apply(&self, run: &mut RunConfig) {
        if let Some(seed) = self.seed {
            run.train.seed = seed;
        }
        if let Some(steps) = self.steps {
            run.train.steps = steps;
        }
        if let Some(mode) = self.mode {
            run.train.mode = match mode {
                Mode::Recurrent => "recurrent".into(),
                Mode::Chunked => "chunked".into(),
            };
        }
        if let Some(chunk) = self.chunk {
            run.model.chunk = chunk;
        }
    }
}

fn emit(out: &mut impl Write, value: &serde_json::Value) -> Result<()> {
    writeln!(out, "{value}")?;
    Ok(())
}

fn is_checkpoint(path: &Path) -> bool {
    let mut head = [0u8; 64];
    let Ok(mut f) = File::open(path) else { return false };
    let n = io::Read::read(&mut f, &mut head).unwrap_or(0);
    String::from_utf8_lossy(&head[..n]).contains("dig-checkpoint")
}

fn cmd_train(c: &Common) -> Result<()> {
    let run = c.run_config()?;
    let dir = c.out_dir("runs/train")?;
    fs::write(dir.join("config.toml"), run.to_toml_string()?)?;
    let (data, _) = run.datasets()?;
    let mut state = TrainState::seeded(&run)?;

    let mut jsonl = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let mut csv = csv::Writer::from_path(dir.join("metrics.csv"))?;
    let stdout = io::stdout();
    let mut console = stdout.lock();
    train(&run, &data, &mut state, run.train.steps, |m: &StepMetrics| {
        let line = serde_json::to_value(m).map_err(|e| dig_core::DigError::Format(e.to_string()))?;
        let text = format!("{line}\n");
        jsonl.write_all(text.as_bytes())?;
        console.write_all(text.as_bytes())?;
        csv.serialize(m).map_err(|e| dig_core::DigError::Format(e.to_string()))?;
        Ok(())
    })?;
    jsonl.flush()?;
    csv.flush()?;
    let ckpt = dir.join("checkpoint.bin");
    save_checkpoint(&ckpt, &run, &state)?;
    emit(
        &mut console,
        &json!({"event": "done", "steps": state.step, "checkpoint": ckpt.display().to_string()}),
    )
}

fn cmd_sample(c: &Common) -> Result<()> {
    let (mut run, params): (RunConfig, ModelParams<Tensor>) = match &c.config {
        Some(path) if is_checkpoint(path) => {
            let (run, state) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            (run, state.ema)
        }
        _ => {
            let run = c.run_config()?;
            let state = TrainState::seeded(&run)?;
            (run, state.ema)
        }
    };
    c.apply(&mut run);
    run.validate()?;
    let seed = c.seed.unwrap_or(run.train.seed);
    let labels = cycle_labels(run.train.sample_count, run.model.num_classes);
    let samples = sample(&run, &params, &labels, seed)?;

    let dir = c.out_dir("runs/sample")?;
    let mut blob = BufWriter::new(File::create(dir.join("samples.bin"))?);
    blob.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in &samples {
        s.write_to(&mut blob)?;
    }
    blob.flush()?;
    image::write_pgm_grid(&dir.join("samples.pgm"), &samples)?;

    let mut csv = csv::Writer::from_path(dir.join("samples.csv"))?;
    csv.write_record(["index", "label", "mean", "std"])?;
    let stdout = io::stdout();
    let mut console = stdout.lock();
    for (i, (s, y)) in samples.iter().zip(&labels).enumerate() {
        let mean = s.mean();
        let std = (s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
        csv.write_record([i.to_string(), y.to_string(), format!("{mean:.9}"), format!("{std:.9}")])?;
        emit(&mut console, &json!({"index": i, "label": y, "mean": mean, "std": std}))?;
    }
    csv.flush()?;
    emit(&mut console, &json!({"event": "done", "samples": samples.len(), "seed": seed}))
}

fn cmd_bench(c: &Common) -> Result<()> {
    let points = c.steps.unwrap_or(7);
    if points == 0 {
        bail!("--steps must be at least 1 for bench");
    }
    let cfg = ScalingConfig {
        m: c.chunk.unwrap_or(64),
        t_list: (0..points).map(|i| 256 << i).collect(),
        seed: c.seed.unwrap_or(0),
        ..ScalingConfig::default()
    };
    let dir = c.out_dir("runs/bench")?;
    let rep = scaling_run(&cfg)?;
    write_scaling_csv(File::create(dir.join("scaling.csv"))?, &rep.rows)?;
    let strat = scan_strategy_bench("xl-toy", 2, 5, cfg.seed)?;
    write_strategy_csv(File::create(dir.join("strategies.csv"))?, &strat)?;
    let flops = flops_table(&ModelConfig::PRESETS)?;
    write_flops_csv(File::create(dir.join("flops.csv"))?, &flops)?;

    let mut summary = rep.summary_json();
    summary["strategy_ordering_holds"] = json!(ordering_holds(&strat));
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    let stdout = io::stdout();
    let mut console = stdout.lock();
    for r in &rep.rows {
        emit(&mut console, &serde_json::to_value(r)?)?;
    }
    for r in &strat {
        emit(&mut console, &serde_json::to_value(r)?)?;
    }
    emit(&mut console, &summary)
}

fn cmd_flops(c: &Common) -> Result<()> {
    let configs: Vec<ModelConfig> = match &c.config {
        Some(path) => vec![RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?.model],
        None => ModelConfig::PRESETS
            .iter()
            .map(|n| ModelConfig::preset(n))
            .collect::<dig_core::Result<_>>()?,
    };
    let stdout = io::stdout();
    let mut console = stdout.lock();
    let mut reports = Vec::new();
    for mut cfg in configs {
        if let Some(chunk) = c.chunk {
            cfg.chunk = chunk;
        }
        let mode = match c.mode {
            Some(Mode::Recurrent) => ScanMode::Recurrent,
            _ => ScanMode::Chunked(cfg.chunk),
        };
        let r = flops_estimate_with(&cfg, mode)?;
        emit(
            &mut console,
            &json!({
                "name": r.name,
                "mode": mode.to_string(),
                "gflops": r.gflops,
                "reference_gflops": r.reference_gflops,
                "ratio_vs_dit": r.ratio,
                "macs": r.macs,
            }),
        )?;
        reports.push(r);
    }
    if c.out.is_some() {
        let dir = c.out_dir("runs/flops")?;
        write_flops_csv(File::create(dir.join("flops.csv"))?, &reports)?;
    }
    Ok(())
}

fn cmd_check(c: &Common) -> Result<bool> {
    let seed = c.seed.unwrap_or(0);
    let mut outcomes = check::run_all(seed);
    if let Some(steps) = c.steps.filter(|&s| s > 0) {
        let run = c.run_config()?;
        outcomes.push(check::toy_training(&run, steps));
    }
    let stdout = io::stdout();
    let mut console = stdout.lock();
    for o in &outcomes {
        emit(&mut console, &serde_json::to_value(o)?)?;
    }
    if c.out.is_some() {
        let dir = c.out_dir("runs/check")?;
        let mut csv = csv::Writer::from_path(dir.join("check.csv"))?;
        for o in &outcomes {
            csv.serialize(o)?;
        }
        csv.flush()?;
    }
    let passed = outcomes.iter().all(|o| o.passed);
    emit(&mut console, &json!({"event": "done", "passed": passed, "checks": outcomes.len()}))?;
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train => cmd_train(&cli.common).map(|_| true),
        Command::Sample => cmd_sample(&cli.common).map(|_| true),
        Command::Bench => cmd_bench(&cli.common).map(|_| true),
        Command::Flops => cmd_flops(&cli.common).map(|_| true),
        Command::Check => cmd_check(&cli.common),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
