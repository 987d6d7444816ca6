//! Training loop, evaluation and EMA sampling.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::diffusion::{loss_simple_graph, loss_vb_graph, p_sample_loop, q_sample, NoiseSchedule};
use crate::error::{DigError, Result};
use crate::gla::ScanMode;
use crate::harness::data::{make_toy_dataset, Dataset, DatasetKind};
use crate::harness::optim::{ema_update, global_norm, AdamW, AdamWConfig};
use crate::model::{model_forward, model_forward_graph, ModelConfig, ModelParams};
use crate::params::{bind, grads_of};
use crate::srem::OpCounter;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    pub samples: usize,
    pub held_out: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub lambda_vb: f64,
    pub seed: u64,
    /// `recurrent` or `chunked`; chunk length comes from the model config.
    pub mode: String,
    pub sample_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::GaussianMixture,
            samples: 4096,
            held_out: 512,
            batch: 32,
            steps: 2000,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            ema_decay: 0.9999,
            lambda_vb: 1.0,
            seed: 0,
            mode: "chunked".into(),
            sample_count: 256,
        }
    }
}

impl TrainConfig {
    /// Settings for desk-scale toy runs.
    pub fn toy() -> Self {
        Self {
            ema_decay: 0.995,
            ..Self::default()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Model configuration plus a `[train]` table, read from one TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let model = ModelConfig::preset(name)?;
        let train = if name.starts_with("toy") {
            TrainConfig::toy()
        } else {
            TrainConfig::default()
        };
        Ok(Self { model, train })
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let run: Self = toml::from_str(s).map_err(|e| DigError::Format(e.to_string()))?;
        run.validate()?;
        Ok(run)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DigError::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch == 0 || t.samples == 0 || t.held_out == 0 {
            return Err(DigError::Config("batch, samples and held_out must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.ema_decay) || !(t.lr > 0.0) {
            return Err(DigError::Config("need lr > 0 and ema_decay in [0, 1)".into()));
        }
        self.mode()?;
        NoiseSchedule::linear(self.model.steps)?;
        Ok(())
    }

    pub fn mode(&self) -> Result<ScanMode> {
        ScanMode::parse(&self.train.mode, self.model.chunk)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.model.steps)
    }

    /// Training set and a disjoint held-out set drawn with another seed.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (m, t) = (&self.model, &self.train);
        let make = |n, seed| make_toy_dataset(t.dataset, n, m.channels, m.image, m.num_classes, seed);
        Ok((make(t.samples, t.seed)?, make(t.held_out, t.seed ^ 0x005e_ed0f_da7a)?))
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub params: ModelParams<Tensor>,
    pub ema: ModelParams<Tensor>,
    pub opt: AdamW<ModelParams<Tensor>>,
}

impl TrainState {
    pub fn new<R: Rng + ?Sized>(run: &RunConfig, rng: &mut R) -> Result<Self> {
        let params = ModelParams::init(&run.model, rng)?;
        Ok(Self {
            step: 0,
            ema: params.clone(),
            opt: AdamW::new(run.train.adamw(), &params),
            params,
        })
    }

    /// Fresh state seeded from the run's seed.
    pub fn seeded(run: &RunConfig) -> Result<Self> {
        Self::new(run, &mut ChaCha8Rng::seed_from_u64(run.train.seed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_simple: f64,
    pub loss_vb: f64,
    pub grad_norm: f64,
    pub wallclock_ms: f64,
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One optimizer step on a random batch. Returns `(loss_simple,
/// loss_vb, grad_norm)` averaged over the batch.
pub fn train_step(
    run: &RunConfig,
    data: &Dataset,
    state: &mut TrainState,
    schedule: &NoiseSchedule,
    mode: ScanMode,
) -> Result<(f64, f64, f64)> {
    let (cfg, tc) = (&run.model, &run.train);
    let mut rng = step_rng(tc.seed, state.step + 1);
    let g = Graph::new();
    let bound = bind(&g, &state.params);
    let mut ops = OpCounter::default();
    let mut simple = Vec::with_capacity(tc.batch);
    let mut vb = Vec::with_capacity(tc.batch);
    for _ in 0..tc.batch {
        let i = rng.gen_range(0..data.len());
        let (x0, y) = (&data.images[i], data.labels[i]);
        let t = rng.gen_range(1..=schedule.steps());
        let eps = Tensor::randn(x0.shape(), 1.0, &mut rng);
        let xt = q_sample(x0, t, &eps, schedule)?;
        let (pred, cov) = model_forward_graph(&g, g.constant(xt.clone()), t - 1, y, &bound, cfg, mode, &mut ops)?;
        simple.push(loss_simple_graph(&g, pred, &eps)?);
        vb.push(loss_vb_graph(&g, x0, &xt, t, pred, cov, schedule).map_err(|e| match e {
            DigError::Numeric(m) => DigError::Numeric(format!("{m} at step {}", state.step)),
            other => other,
        })?);
    }
    let mean_of = |terms: &[crate::autograd::Var]| -> Result<crate::autograd::Var> {
        let mut acc = terms[0];
        for &v in &terms[1..] {
            acc = g.add(acc, v)?;
        }
        Ok(g.scale(acc, 1.0 / terms.len() as f64))
    };
    let (ls, lv) = (mean_of(&simple)?, mean_of(&vb)?);
    let loss = g.add(ls, g.scale(lv, tc.lambda_vb))?;
    let (ls, lv) = (g.value(ls).item(), g.value(lv).item());
    if !(ls.is_finite() && lv.is_finite()) {
        return Err(DigError::Numeric(format!("non-finite loss at step {}", state.step)));
    }
    let grads = grads_of(&bound, &g.backward(loss)?);
    let norm = global_norm(&grads);
    if !norm.is_finite() {
        return Err(DigError::Numeric(format!("non-finite gradient at step {}", state.step)));
    }
    state.opt.update(&mut state.params, &grads)?;
    ema_update(&mut state.ema, &state.params, tc.ema_decay)?;
    state.step += 1;
    Ok((ls, lv, norm))
}

/// Runs `steps` optimizer steps, reporting each to `on_step`.
pub fn train(
    run: &RunConfig,
    data: &Dataset,
    state: &mut TrainState,
    steps: usize,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<()> {
    run.validate()?;
    let schedule = run.schedule()?;
    let mode = run.mode()?;
    let start = Instant::now();
    for _ in 0..steps {
        let (loss_simple, loss_vb, grad_norm) = train_step(run, data, state, &schedule, mode)?;
        on_step(&StepMetrics {
            step: state.step,
            loss_simple,
            loss_vb,
            grad_norm,
            wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        })?;
    }
    Ok(())
}

/// Mean `L_simple` over `pairs` fixed `(image, t, ε)` draws from `data`.
pub fn eval_loss_simple(
    run: &RunConfig,
    params: &ModelParams<Tensor>,
    data: &Dataset,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    let schedule = run.schedule()?;
    let mode = run.mode()?;
    let mut rng = step_rng(seed, 0);
    let mut total = 0.0;
    for _ in 0..pairs {
        let i = rng.gen_range(0..data.len());
        let t = rng.gen_range(1..=schedule.steps());
        let eps = Tensor::randn(data.images[i].shape(), 1.0, &mut rng);
        let xt = q_sample(&data.images[i], t, &eps, &schedule)?;
        let (pred, _) = model_forward(&xt, t - 1, data.labels[i], params, &run.model, mode)?;
        total += pred.sub(&eps)?.data().iter().map(|d| d * d).sum::<f64>() / eps.len() as f64;
    }
    Ok(total / pairs as f64)
}

/// Ancestral samples, one per label, each on its own random stream.
pub fn sample(run: &RunConfig, params: &ModelParams<Tensor>, labels: &[usize], seed: u64) -> Result<Vec<Tensor>> {
    let schedule = run.schedule()?;
    let mode = run.mode()?;
    let cfg = &run.model;
    let shape = [cfg.channels, cfg.image, cfg.image];
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let mut rng = step_rng(seed, i as u64);
            p_sample_loop(|x, t| model_forward(x, t, y, params, cfg, mode), &shape, &schedule, &mut rng)
        })
        .collect()
}

/// Balanced labels `0, 1, …, classes−1, 0, …` of length `n`.
pub fn cycle_labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes.max(1)).collect()
}
