//! Data loading, checkpoints and experiment orchestration.

pub mod checkpoint;
pub mod data;
pub mod experiment;

pub use data::{load_mnist_idx, synth_dataset, Dataset, SynthSpec};
pub use experiment::{
    evaluate, measure_deviation, train, ExperimentConfig, ExperimentReport, SweepRow,
};
