//! Configuration, training, evaluation, timing and experiment drivers.

pub mod bench;
pub mod config;
pub mod evaluate;
pub mod reproduce;
pub mod train;

pub use bench::{
    benchmark_all, benchmark_scaling, BenchOptions, BenchTarget, BenchmarkReport, ScalingCurve,
};
pub use config::{DatasetSpec, Preset, RunConfig, CONFIG_FORMAT_VERSION};
pub use evaluate::{evaluate, rank_eval_users, seed_likes};
pub use reproduce::{
    reproduce, run_model, run_seed, ModelRun, ReproduceOptions, ReproduceOutput, EXPERIMENTS,
};
pub use train::{train, TrainOutcome, TrajectoryPoint};
