//! Training and evaluation driver for toy datasets.

pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use data::{make_toy_dataset, Dataset, DatasetKind};
pub use metrics::{energy_distance, projected_energy_distance, Pca2};
pub use optim::{ema_update, global_norm, AdamW, AdamWConfig};
pub use train::{
    cycle_labels, eval_loss_simple, sample, train, train_step, RunConfig, StepMetrics, TrainConfig,
    TrainState,
};
