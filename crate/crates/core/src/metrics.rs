//! Diagnostics: accuracy loss between partitions, minibatch moment
//! divergence, residual and local update deltas, communication savings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::scalar::Scalar;

/// Rows per evaluation forward pass.
pub const EVAL_CHUNK: usize = 256;

/// Coordinates with `|w| <` this are skipped by the delta metrics.
pub const DELTA_ZERO_GUARD: f64 = 1e-12;

/// Eval-mode top-1 accuracy of `model` on the given samples.
pub fn accuracy<T: Scalar>(model: &Model<T>, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut scratch = model.clone();
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, y) = dataset.batch::<T>(chunk);
        // Overflowing activations give no valid prediction.
        let logits = match scratch.forward(&x, crate::nn::Mode::Eval) {
            Ok((logits, _)) => logits,
            Err(crate::error::Error::NonFinite(_)) => continue,
            Err(e) => return Err(e),
        };
        correct += logits.argmax_rows().iter().zip(&y).filter(|(p, &t)| **p == t as usize).count();
    }
    Ok(correct as f64 / indices.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyLossReport {
    pub source: usize,
    pub target: usize,
    pub local_acc: f64,
    pub remote_acc: f64,
    pub al: f64,
    pub samples: usize,
}

/// Seeded subset of `size` indices (all of them if fewer), in ascending order.
pub fn sample_subset(indices: &[usize], size: usize, seed: u64) -> Vec<usize> {
    if size >= indices.len() {
        return indices.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, indices.len(), size).into_iter().map(|i| indices[i]).collect();
    picked.sort_unstable();
    picked
}

/// `local_acc` minus the model's accuracy on a seeded subset of the remote
/// partition's training samples.
#[allow(clippy::too_many_arguments)]
pub fn accuracy_loss<T: Scalar>(
    model: &Model<T>,
    source: usize,
    target: usize,
    local_acc: f64,
    dataset: &Dataset,
    remote: &[usize],
    subset_size: usize,
    seed: u64,
) -> Result<AccuracyLossReport> {
    let subset = sample_subset(remote, subset_size, seed);
    let remote_acc = accuracy(model, dataset, &subset)?;
    Ok(AccuracyLossReport { source, target, local_acc, remote_acc, al: local_acc - remote_acc, samples: subset.len() })
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / ||(a + b) / 2||`; `None` when the denominator is zero.
pub fn moment_divergence(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("moment vectors of length {} and {}", a.len(), b.len())));
    }
    let num = l2(a.iter().zip(b).map(|(x, y)| x - y));
    let den = l2(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)));
    Ok((den > 0.0).then(|| num / den))
}

/// Divergence of each channel taken as a scalar.
pub fn per_channel_divergence(a: &[f64], b: &[f64]) -> Result<Vec<Option<f64>>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("moment vectors of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| {
        let den = (0.5 * (x + y)).abs();
        (den > 0.0).then(|| (x - y).abs() / den)
    }).collect())
}

/// Mean of the defined per-channel divergences.
pub fn mean_channel_divergence(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    let vals: Vec<f64> = per_channel_divergence(a, b)?.into_iter().flatten().collect();
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

/// Mean of `|v_i / w_i|` over coordinates with non-negligible `w_i`.
pub fn residual_update_delta<T: Scalar>(v: &[T], w: &[T]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (&v, &w) in v.iter().zip(w) {
        let w = w.as_f64();
        if w.abs() >= DELTA_ZERO_GUARD {
            sum += (v.as_f64() / w).abs();
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

/// Mean over nodes and coordinates of `|(w_k - avg)_i / avg_i|`.
pub fn local_update_delta<T: Scalar>(ws: &[&[T]], avg: &[T]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for w in ws {
        for (&x, &a) in w.iter().zip(avg) {
            let a = a.as_f64();
            if a.abs() >= DELTA_ZERO_GUARD {
                sum += ((x.as_f64() - a) / a).abs();
                n += 1;
            }
        }
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

/// BSP values sent over the algorithm's; infinite when it sent nothing.
pub fn comm_savings(values_sent: u64, bsp_values_sent: u64) -> f64 {
    if values_sent == 0 { f64::INFINITY } else { bsp_values_sent as f64 / values_sent as f64 }
}

/// Averages two nodes' per-channel minibatch means over fixed windows and
/// reports their divergence when a window closes.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentWindow {
    pub window: usize,
    pub joint: bool,
    sums: [Vec<f64>; 2],
    count: usize,
}

impl MomentWindow {
    pub fn new(window: usize, joint: bool) -> Self {
        MomentWindow { window: window.max(1), joint, sums: [Vec::new(), Vec::new()], count: 0 }
    }

    /// Adds one minibatch per node; `Some` once the window is full, holding
    /// `None` inside when the divergence is undefined.
    pub fn push(&mut self, a: &[f64], b: &[f64]) -> Result<Option<Option<f64>>> {
        for (sum, m) in self.sums.iter_mut().zip([a, b]) {
            if sum.is_empty() {
                sum.resize(m.len(), 0.0);
            }
            sum.iter_mut().zip(m).for_each(|(s, x)| *s += x);
        }
        self.count += 1;
        if self.count < self.window {
            return Ok(None);
        }
        let n = self.count as f64;
        let ma: Vec<f64> = self.sums[0].iter().map(|s| s / n).collect();
        let mb: Vec<f64> = self.sums[1].iter().map(|s| s / n).collect();
        self.sums = [Vec::new(), Vec::new()];
        self.count = 0;
        let d = if self.joint { moment_divergence(&ma, &mb)? } else { mean_channel_divergence(&ma, &mb)? };
        Ok(Some(d))
    }

    pub(crate) fn state(&self) -> (&[f64], &[f64], usize) {
        (&self.sums[0], &self.sums[1], self.count)
    }

    pub(crate) fn restore(&mut self, a: Vec<f64>, b: Vec<f64>, count: usize) {
        self.sums = [a, b];
        self.count = count;
    }
}
