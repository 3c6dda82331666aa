use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{Model, Mode};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose +/- eps probes crossed a ReLU or pooling kink.
    pub skipped: usize,
}

/// Compares the analytic gradient against central differences over a random
/// sample of coordinates.
///
/// Error per coordinate is `|a - cd| / max(|a|, |cd|, 1e-12)`. Probes whose
/// perturbation switches a piecewise-linear branch are skipped; the finite
/// difference is meaningless there. `corrupt` edits the analytic gradient
/// before comparison so tests can plant faults.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_with(
    model: &Model<f64>,
    batch: &Tensor<f64>,
    labels: &[u32],
    weight_decay: f64,
    eps: f64,
    samples: usize,
    seed: u64,
    corrupt: impl Fn(&mut [f64]),
) -> Result<GradCheckReport> {
    let mut scratch = model.clone();
    let (_, cache) = scratch.forward(batch, Mode::Train)?;
    let base_sig = cache.kink_signature();
    let mut analytic = model.backward(&cache, labels, weight_decay)?.into_vec();
    corrupt(&mut analytic);

    let m = model.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, m, samples.min(m));
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    let mut probe = model.clone();
    for j in picks.iter() {
        let orig = probe.params.as_slice()[j];
        probe.params.as_mut_slice()[j] = orig + eps;
        let (up, sig_up) = probe.loss_and_signature(batch, labels, weight_decay)?;
        probe.params.as_mut_slice()[j] = orig - eps;
        let (down, sig_down) = probe.loss_and_signature(batch, labels, weight_decay)?;
        probe.params.as_mut_slice()[j] = orig;
        if sig_up != base_sig || sig_down != base_sig {
            report.skipped += 1;
            continue;
        }
        let cd = (up - down) / (2.0 * eps);
        let a = analytic[j];
        let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-12);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

/// Maximum relative error over 200 sampled coordinates.
pub fn grad_check(model: &Model<f64>, batch: &Tensor<f64>, labels: &[u32], eps: f64) -> Result<f64> {
    grad_check_with(model, batch, labels, 0.0, eps, 200, 7, |_| {}).map(|r| r.max_rel_error)
}
