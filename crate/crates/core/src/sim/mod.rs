//! K-node training simulator: configuration, supersteps, evaluation,
//! metrics log and checkpoints.

mod checkpoint;
mod cluster;
mod config;
mod log;
mod sampler;

use std::sync::Arc;

pub use cluster::{Cluster, StepOutcome};
pub use config::{DatasetKind, ExperimentConfig, LrKind, NormChoice, REQUIRED_KEYS};
pub use log::{MetricRow, MetricsLog, Summary, CSV_HEADER};
pub use sampler::Sampler;

use crate::data::Dataset;
use crate::error::Result;
use crate::scalar::{Precision, Scalar};

/// Outcome of a complete run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: MetricsLog,
    pub summary: Summary,
}

/// Trains to completion (or divergence) at the configured precision.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    let dataset = Arc::new(config.load_dataset()?);
    run_experiment_on(config, dataset)
}

/// As [`run_experiment`] with a preloaded dataset.
pub fn run_experiment_on(config: &ExperimentConfig, dataset: Arc<Dataset>) -> Result<RunOutput> {
    match config.precision {
        Precision::F32 => run_typed::<f32>(config, dataset),
        Precision::F64 => run_typed::<f64>(config, dataset),
    }
}

fn run_typed<T: Scalar>(config: &ExperimentConfig, dataset: Arc<Dataset>) -> Result<RunOutput> {
    let mut cluster = Cluster::<T>::new(config, dataset)?;
    cluster.run_to_end()?;
    let summary = cluster.summary()?;
    Ok(RunOutput { log: cluster.log().clone(), summary })
}

/// Closed-form synchronization traffic for BSP and FedAvg runs.
pub fn expected_values_sent(algo: crate::sync::Algo, k: usize, m: usize, steps: usize, iter_local: usize) -> Option<u64> {
    use crate::sync::Algo;
    match algo {
        Algo::Bsp => Some((k * m * steps) as u64),
        Algo::Fedavg => Some((k * m * steps.div_ceil(iter_local.max(1))) as u64),
        _ => None,
    }
}
