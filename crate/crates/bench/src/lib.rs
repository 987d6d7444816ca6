//! Efficiency harness: softmax vs chunked GLA scaling, scan-strategy
//! timing and analytic FLOP tables.

pub mod kernels;
pub mod memory;
pub mod report;
pub mod scaling;
pub mod strategies;
pub mod timing;

pub use kernels::{precheck, BenchInputs, PrecheckReport};
pub use memory::{gla_chunked_bytes, softmax_bytes};
pub use report::{flops_table, write_flops_csv, write_scaling_csv, write_strategy_csv};
pub use scaling::{fit_slope, scaling_run, Method, ScalingConfig, ScalingReport, ScalingRow};
pub use strategies::{scan_strategy_bench, StrategyRow};
pub use timing::{time_it, Timing};
