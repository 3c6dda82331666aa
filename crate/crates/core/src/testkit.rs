//! Oracles and harnesses: trajectory traces and their comparison, a
//! brute-force top-k selector, and scalar-loop normalization references.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::layers::NORM_EPS;
use crate::nn::{grad_check, Arch, Model, ModelSpec, NormKind, Tensor};
use crate::par::Exec;
use crate::scalar::Scalar;
use crate::sim::{Cluster, ExperimentConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub hash: u64,
    pub snapshot: Option<Vec<f64>>,
}

/// Parameter hashes per step, with a full snapshot every `every` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTrace {
    pub every: usize,
    pub entries: Vec<TraceEntry>,
}

/// FNV-1a over the IEEE bit patterns.
pub fn hash_params<T: Scalar>(w: &[T]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in w {
        for b in v.as_f64().to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

impl TrajectoryTrace {
    pub fn new(every: usize) -> Self {
        TrajectoryTrace { every: every.max(1), entries: Vec::new() }
    }

    pub fn record<T: Scalar>(&mut self, step: usize, w: &[T]) {
        let snapshot = step.is_multiple_of(self.every).then(|| w.iter().map(|v| v.as_f64()).collect());
        self.entries.push(TraceEntry { step, hash: hash_params(w), snapshot });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceComparison {
    /// Max over shared snapshots of `||a - b||_inf / (1 + ||a||_inf)`.
    pub max_deviation: f64,
    /// First snapshot step whose deviation exceeds the tolerance.
    pub first_divergent_step: Option<usize>,
    pub snapshots: usize,
}

pub fn compare_trajectories(a: &TrajectoryTrace, b: &TrajectoryTrace, rel_tol: f64) -> Result<TraceComparison> {
    if a.entries.len() != b.entries.len() {
        return Err(Error::Shape(format!("traces of {} and {} steps", a.entries.len(), b.entries.len())));
    }
    let mut out = TraceComparison { max_deviation: 0.0, first_divergent_step: None, snapshots: 0 };
    for (ea, eb) in a.entries.iter().zip(&b.entries) {
        if ea.step != eb.step {
            return Err(Error::Shape(format!("trace steps {} and {} do not line up", ea.step, eb.step)));
        }
        let (Some(wa), Some(wb)) = (&ea.snapshot, &eb.snapshot) else { continue };
        if wa.len() != wb.len() {
            return Err(Error::Layout(format!("snapshots of {} and {} values", wa.len(), wb.len())));
        }
        let diff = wa.iter().zip(wb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = 1.0 + wa.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let dev = diff / scale;
        if dev.is_nan() || dev > rel_tol {
            out.first_divergent_step.get_or_insert(ea.step);
        }
        out.max_deviation = out.max_deviation.max(if dev.is_nan() { f64::INFINITY } else { dev });
        out.snapshots += 1;
    }
    Ok(out)
}

/// Runs `steps` supersteps sequentially and traces node 0's weights after
/// each one (step 0 is the initial state).
pub fn trace_run<T: Scalar>(cfg: &ExperimentConfig, dataset: Arc<Dataset>, steps: usize, every: usize) -> Result<TrajectoryTrace> {
    let cfg = ExperimentConfig { exec: Exec::Sequential, ..cfg.clone() };
    let mut cluster = Cluster::<T>::new(&cfg, dataset)?;
    let mut trace = TrajectoryTrace::new(every);
    trace.record(0, cluster.nodes()[0].w());
    for _ in 0..steps {
        if cluster.done() {
            return Err(Error::Config(format!("run ended at step {} before {steps} supersteps", cluster.step())));
        }
        cluster.superstep()?;
        trace.record(cluster.step(), cluster.nodes()[0].w());
    }
    Ok(trace)
}

/// Trajectory comparison of two configs over `steps` supersteps at 64 bits,
/// snapshotting every step.
pub fn trajectory_deviation(a: &ExperimentConfig, b: &ExperimentConfig, steps: usize, rel_tol: f64) -> Result<TraceComparison> {
    let ds = Arc::new(a.load_dataset()?);
    let ta = trace_run::<f64>(a, ds.clone(), steps, 1)?;
    let tb = trace_run::<f64>(b, ds, steps, 1)?;
    compare_trajectories(&ta, &tb, rel_tol)
}

/// Gradient check of a freshly initialized model (hidden width 12, four
/// classes) on a seeded batch of eight uniform inputs.
pub fn grad_check_arch(arch: Arch, norm: NormKind, eps: f64, seed: u64) -> Result<f64> {
    let input = match arch {
        Arch::SmallConv => vec![1, 8, 8],
        _ => vec![12],
    };
    let mut spec = ModelSpec::new(arch, norm, input, 4);
    spec.hidden = 12;
    let model = Model::<f64>::new(spec.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let n = 8;
    let data: Vec<f64> = (0..n * spec.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut shape = vec![n];
    shape.extend(&spec.input_shape);
    let labels: Vec<u32> = (0..n as u32).map(|i| i % 4).collect();
    grad_check(&model, &Tensor::new(shape, data)?, &labels, eps)
}

/// The top-k selection rule by full sort: `max(1, ceil((1-s) M))` entries
/// of largest magnitude, ties to the lower index, returned ascending.
pub fn brute_force_topk(v: &[f64], s: f64) -> Vec<u32> {
    if v.is_empty() {
        return Vec::new();
    }
    let exact = (1.0 - s) * v.len() as f64;
    // Products like (1 - 0.996) * 1000 land a hair above an integer.
    let k = if (exact - exact.round()).abs() < 1e-9 { exact.round() } else { exact.ceil() };
    let k = (k as usize).clamp(1, v.len());
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut picked: Vec<u32> = order[..k].iter().map(|&i| i as u32).collect();
    picked.sort_unstable();
    picked
}

fn normalize_group(x: &[f64], out: &mut [f64], idx: &[(usize, usize)], gamma: &[f64], beta: &[f64]) {
    let n = idx.len() as f64;
    let mut mean = 0.0;
    for &(i, _) in idx {
        mean += x[i];
    }
    mean /= n;
    let mut var = 0.0;
    for &(i, _) in idx {
        var += (x[i] - mean) * (x[i] - mean);
    }
    var /= n;
    for &(i, c) in idx {
        out[i] = gamma[c] * (x[i] - mean) / (var + NORM_EPS).sqrt() + beta[c];
    }
}

/// Train-mode batch normalization of `[batch, channels, spatial]` data by
/// explicit loops.
pub fn naive_batch_norm(x: &[f64], batch: usize, channels: usize, spatial: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        let mut idx = Vec::new();
        for n in 0..batch {
            for p in 0..spatial {
                idx.push(((n * channels + c) * spatial + p, c));
            }
        }
        normalize_group(x, &mut out, &idx, gamma, beta);
    }
    out
}

/// Group normalization over groups of `size` adjacent channels, per sample.
pub fn naive_group_norm(x: &[f64], batch: usize, channels: usize, spatial: usize, size: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        for g in 0..channels / size {
            let mut idx = Vec::new();
            for c in g * size..(g + 1) * size {
                for p in 0..spatial {
                    idx.push(((n * channels + c) * spatial + p, c));
                }
            }
            normalize_group(x, &mut out, &idx, gamma, beta);
        }
    }
    out
}
