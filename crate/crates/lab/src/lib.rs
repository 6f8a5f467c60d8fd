//! Training harness, experiment drivers and the `stp` command line.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod optim;
pub mod train;

pub use config::{parse_config, parse_config_str, TrainConfig};
pub use train::{train_run, LabError, RunRecord, TrainedRun};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
