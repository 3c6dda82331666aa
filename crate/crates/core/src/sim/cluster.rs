use std::collections::BTreeMap;
use std::sync::Arc;

use super::config::ExperimentConfig;
use super::log::{MetricsLog, Summary};
use super::sampler::Sampler;
use crate::data::{make_partition_plan, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{self, MomentWindow};
use crate::nn::{LrSchedule, Mode, Model, RunningStats};
use crate::par;
use crate::scalar::Scalar;
use crate::sync::{self, Algo, CommLedger, NodeState, SyncConfig};

/// A node's data stream and running training statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) struct NodeAux {
    pub sampler: Sampler,
    pub epoch_correct: u64,
    pub epoch_seen: u64,
    pub epoch_loss: f64,
    pub event_correct: u64,
    pub event_seen: u64,
}

impl NodeAux {
    fn record(&mut self, s: &BatchStats) {
        self.epoch_correct += s.correct as u64;
        self.epoch_seen += s.seen as u64;
        self.epoch_loss += s.loss * s.seen as f64;
        self.event_correct += s.correct as u64;
        self.event_seen += s.seen as u64;
    }
}

#[derive(Debug, Clone, Default)]
struct BatchStats {
    loss: f64,
    correct: usize,
    seen: usize,
    norm_means: Option<Vec<f64>>,
}

struct LocalOut<T> {
    grad: Vec<T>,
    stats: BatchStats,
}

/// Forward and backward on one minibatch. `None` when the loss or gradient
/// is not finite; running statistics are then left untouched.
fn local_gradient<T: Scalar>(
    node: &mut NodeState<T>,
    dataset: &Dataset,
    indices: &[usize],
    keep_means: bool,
) -> Result<Option<LocalOut<T>>> {
    let (x, y) = dataset.batch::<T>(indices);
    let saved: Vec<RunningStats<T>> = node.model.running.clone();
    let (logits, cache) = match node.model.forward(&x, Mode::Train) {
        Ok(v) => v,
        Err(Error::NonFinite(_)) => {
            node.model.running = saved;
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let loss = cache.cross_entropy(&y);
    let grad = match node.model.backward(&cache, &y, node.opt.weight_decay) {
        Ok(g) => g,
        Err(Error::NonFinite(_)) => {
            node.model.running = saved;
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    if !loss.is_finite() || !grad.is_finite() {
        node.model.running = saved;
        return Ok(None);
    }
    let correct = logits.argmax_rows().iter().zip(&y).filter(|(p, &t)| **p == t as usize).count();
    let norm_means = if keep_means { cache.norm_input_means.first().cloned() } else { None };
    Ok(Some(LocalOut { grad: grad.into_vec(), stats: BatchStats { loss, correct, seen: y.len(), norm_means } }))
}

/// What a superstep did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Trained,
    /// A non-finite loss skipped the update.
    Skipped,
    /// The divergence sentinel fired; the cluster keeps its last good state.
    Diverged,
    Finished,
}

/// K simulated nodes training one model under a synchronization algorithm.
#[derive(Debug, Clone)]
pub struct Cluster<T> {
    pub(crate) cfg: ExperimentConfig,
    pub(crate) dataset: Arc<Dataset>,
    pub(crate) partitions: Vec<Vec<usize>>,
    pub(crate) nodes: Vec<NodeState<T>>,
    pub(crate) aux: Vec<NodeAux>,
    pub(crate) sync: SyncConfig,
    pub(crate) schedule: LrSchedule,
    pub(crate) gaia_base: Vec<T>,
    pub(crate) step: usize,
    pub(crate) total_steps: usize,
    pub(crate) steps_per_epoch: usize,
    pub(crate) epoch_len: usize,
    pub(crate) streak: usize,
    pub(crate) diverged: bool,
    pub(crate) last_eval_step: Option<usize>,
    pub(crate) moments: Option<MomentWindow>,
    pub(crate) travel_ledger: CommLedger,
    pub(crate) log: MetricsLog,
    pub(crate) per_node_val: Vec<f64>,
    pub(crate) final_val: Option<f64>,
}

impl<T: Scalar> Cluster<T> {
    pub fn new(cfg: &ExperimentConfig, dataset: Arc<Dataset>) -> Result<Self> {
        cfg.validate()?;
        let plan = make_partition_plan(&dataset, cfg.k, cfg.skew_fraction, cfg.data_seed)?;
        let partitions = plan.partitions();
        if let Some(p) = partitions.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!("partition {p} received no training samples")));
        }
        let epoch_len = partitions.iter().map(Vec::len).max().unwrap_or(0);
        let steps_per_epoch = epoch_len.div_ceil(cfg.batch_size);
        let mut total_steps = cfg.epochs * steps_per_epoch;
        if let Some(max) = cfg.max_steps {
            total_steps = total_steps.min(max);
        }
        let model = Model::<T>::new(cfg.model_spec(&dataset), cfg.init_seed)?;
        let gaia_base = model.params.as_slice().to_vec();
        let schedule = cfg.lr_schedule_for(total_steps);
        let nodes = (0..cfg.k)
            .map(|k| NodeState::new(k, model.clone(), cfg.momentum, cfg.eta0, cfg.weight_decay, cfg.sampling_seed))
            .collect();
        let aux = vec![NodeAux::default(); cfg.k];
        let has_norm_slot = model.layers().iter().any(|l| matches!(l, crate::nn::layers::Layer::Norm { .. }));
        let moments = (cfg.k >= 2 && has_norm_slot).then(|| MomentWindow::new(cfg.moment_window, cfg.moment_joint));
        Ok(Cluster {
            cfg: cfg.clone(),
            dataset,
            partitions,
            nodes,
            aux,
            sync: cfg.sync_config(),
            schedule,
            gaia_base,
            step: 0,
            total_steps,
            steps_per_epoch,
            epoch_len,
            streak: 0,
            diverged: false,
            last_eval_step: None,
            moments,
            travel_ledger: CommLedger::default(),
            log: MetricsLog::new(),
            per_node_val: Vec::new(),
            final_val: None,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn partitions(&self) -> &[Vec<usize>] {
        &self.partitions
    }

    pub fn nodes(&self) -> &[NodeState<T>] {
        &self.nodes
    }

    pub fn sync_config(&self) -> &SyncConfig {
        &self.sync
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn num_params(&self) -> usize {
        self.nodes[0].num_params()
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn done(&self) -> bool {
        self.diverged || self.step >= self.total_steps
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn log_mut(&mut self) -> &mut MetricsLog {
        &mut self.log
    }

    /// 1-based epoch that the most recent step belongs to.
    pub fn epoch(&self) -> usize {
        self.step.div_ceil(self.steps_per_epoch).max(1)
    }

    /// Summed synchronization ledger over nodes.
    pub fn sync_ledger(&self) -> CommLedger {
        let mut total = CommLedger::default();
        self.nodes.iter().for_each(|n| total.add(&n.ledger));
        total
    }

    pub fn travel_ledger(&self) -> CommLedger {
        self.travel_ledger
    }

    pub fn add_travel(&mut self, values: u64) {
        self.travel_ledger.values_sent += values;
        self.travel_ledger.values_received += values;
        self.travel_ledger.rounds += 1;
    }

    /// Replaces the tuned knob; takes effect at the next superstep.
    pub fn set_theta(&mut self, theta: f64) {
        self.sync.set_theta(theta);
    }

    /// Mean train-mode minibatch accuracy per node since the last call.
    pub fn take_event_accuracy(&mut self) -> Vec<f64> {
        self.aux
            .iter_mut()
            .map(|w| {
                let acc = if w.event_seen == 0 { 0.0 } else { w.event_correct as f64 / w.event_seen as f64 };
                w.event_correct = 0;
                w.event_seen = 0;
                acc
            })
            .collect()
    }

    fn lr_for(&self, step: usize) -> f64 {
        self.schedule.lr_at(step / self.steps_per_epoch, step)
    }

    fn keeps_means(&self, k: usize) -> bool {
        self.moments.is_some() && k < 2
    }

    /// Runs one global step: every node consumes one minibatch (FedAvg: one
    /// round of `Iter_Local` minibatches), then the selected algorithm
    /// synchronizes. Epoch-end metrics and evaluation follow when due.
    pub fn superstep(&mut self) -> Result<StepOutcome> {
        if self.diverged {
            return Ok(StepOutcome::Diverged);
        }
        if self.step >= self.total_steps {
            return Ok(StepOutcome::Finished);
        }
        let before = self.step;
        let trained = match self.sync.algo {
            Algo::Fedavg => self.fedavg_round()?,
            _ => self.single_step()?,
        };
        if trained {
            self.streak = 0;
        } else {
            self.streak += 1;
            self.log.record(self.epoch(), self.step, None, "nonfinite_loss", self.streak as f64);
            if self.streak >= self.cfg.divergence_patience {
                self.diverged = true;
                self.log.record(self.epoch(), self.step, None, "diverged", 1.0);
                return Ok(StepOutcome::Diverged);
            }
        }
        let spe = self.steps_per_epoch;
        if self.step / spe > before / spe || self.step == self.total_steps {
            self.end_of_epoch()?;
        }
        Ok(if trained { StepOutcome::Trained } else { StepOutcome::Skipped })
    }

    fn single_step(&mut self) -> Result<bool> {
        let lr = self.lr_for(self.step);
        let (dataset, parts, epoch_len, b) = (&*self.dataset, &self.partitions, self.epoch_len, self.cfg.batch_size);
        let keep: Vec<bool> = (0..self.nodes.len()).map(|k| self.keeps_means(k)).collect();
        let mut pairs: Vec<(&mut NodeState<T>, &mut NodeAux)> = self.nodes.iter_mut().zip(self.aux.iter_mut()).collect();
        let outs = par::map_mut(self.cfg.exec, &mut pairs, |k, (node, aux)| {
            let idx = aux.sampler.next_batch(&parts[k], epoch_len, b, &mut node.rng);
            node.opt.eta = lr;
            local_gradient(node, dataset, &idx, keep[k])
        });
        self.step += 1;
        let outs: Vec<Option<LocalOut<T>>> = outs.into_iter().collect::<Result<_>>()?;
        if outs.iter().any(Option::is_none) {
            return Ok(false);
        }
        let outs: Vec<LocalOut<T>> = outs.into_iter().map(Option::unwrap).collect();
        for (a, o) in self.aux.iter_mut().zip(&outs) {
            a.record(&o.stats);
        }
        self.push_moments(outs.iter().map(|o| &o.stats))?;
        let epoch1 = (self.step - 1) / self.steps_per_epoch + 1;
        let sync = &self.sync;
        let nodes = &mut self.nodes;
        let result = match sync.algo {
            Algo::Bsp => {
                let grads: Vec<Vec<T>> = outs.into_iter().map(|o| o.grad).collect();
                sync::bsp_round(nodes, &grads, sync.bsp_aggregation)
            }
            Algo::Gaia => (|| {
                for (n, o) in nodes.iter_mut().zip(&outs) {
                    sync::gaia_local_update(n, &o.grad)?;
                }
                let t = sync::gaia_threshold(sync.t0, lr, self.schedule.eta0(), sync.t_min);
                let sends: Vec<_> = nodes.iter_mut().map(|n| sync::gaia_step(n, t)).collect();
                sync::gaia_apply(nodes, &mut self.gaia_base, &sends);
                Ok(())
            })(),
            Algo::Dgc => (|| {
                for (n, o) in nodes.iter_mut().zip(&outs) {
                    sync::dgc_local_update(n, &o.grad, sync.clip_norm)?;
                }
                let s = sync.fixed_sparsity.unwrap_or_else(|| sync::dgc_sparsity(epoch1, sync.e_warm));
                let sends: Vec<_> = nodes.iter_mut().map(|n| sync::dgc_step(n, s)).collect();
                sync::dgc_apply(nodes, &sends);
                Ok(())
            })(),
            Algo::Fedavg => unreachable!("fedavg runs in rounds"),
        };
        match result {
            Ok(()) => Ok(true),
            Err(Error::NonFinite(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }

    fn fedavg_round(&mut self) -> Result<bool> {
        let n = self.sync.iter_local.min(self.total_steps - self.step);
        let lrs: Vec<f64> = (0..n).map(|i| self.lr_for(self.step + i)).collect();
        let snapshot = self.nodes.clone();
        let (dataset, parts, epoch_len, b) = (&*self.dataset, &self.partitions, self.epoch_len, self.cfg.batch_size);
        let keep: Vec<bool> = (0..self.nodes.len()).map(|k| self.keeps_means(k)).collect();
        let mut pairs: Vec<(&mut NodeState<T>, &mut NodeAux)> = self.nodes.iter_mut().zip(self.aux.iter_mut()).collect();
        let outs = par::map_mut(self.cfg.exec, &mut pairs, |k, (node, aux)| -> Result<Option<Vec<BatchStats>>> {
            let mut stats = Vec::with_capacity(n);
            for &lr in &lrs {
                let idx = aux.sampler.next_batch(&parts[k], epoch_len, b, &mut node.rng);
                node.opt.eta = lr;
                let Some(out) = local_gradient(node, dataset, &idx, keep[k])? else { return Ok(None) };
                match sync::fedavg_local_step(node, &out.grad) {
                    Ok(()) => {}
                    Err(Error::NonFinite(_)) => return Ok(None),
                    Err(e) => return Err(e),
                }
                stats.push(out.stats);
            }
            Ok(Some(stats))
        });
        self.step += n;
        let outs: Vec<Option<Vec<BatchStats>>> = outs.into_iter().collect::<Result<_>>()?;
        if outs.iter().any(Option::is_none) {
            for (node, s) in self.nodes.iter_mut().zip(snapshot) {
                let rng = node.rng.clone();
                *node = s;
                node.rng = rng;
            }
            return Ok(false);
        }
        let outs: Vec<Vec<BatchStats>> = outs.into_iter().map(Option::unwrap).collect();
        for (a, stats) in self.aux.iter_mut().zip(&outs) {
            stats.iter().for_each(|s| a.record(s));
        }
        for i in 0..n {
            self.push_moments(outs.iter().map(|o| &o[i]))?;
        }
        let locals: Vec<Vec<T>> = self.nodes.iter().map(|n| n.w().to_vec()).collect();
        let weights: Option<Vec<f64>> =
            self.sync.fedavg_weighted.then(|| self.partitions.iter().map(|p| p.len() as f64).collect());
        sync::fedavg_average(&mut self.nodes, weights.as_deref())?;
        let refs: Vec<&[T]> = locals.iter().map(Vec::as_slice).collect();
        let delta = metrics::local_update_delta(&refs, self.nodes[0].w());
        self.log.record(self.epoch(), self.step, None, "local_delta", delta);
        Ok(true)
    }

    fn push_moments<'a>(&mut self, mut stats: impl Iterator<Item = &'a BatchStats>) -> Result<()> {
        let Some(window) = self.moments.as_mut() else { return Ok(()) };
        let (Some(a), Some(b)) = (stats.next(), stats.next()) else { return Ok(()) };
        if let (Some(ma), Some(mb)) = (&a.norm_means, &b.norm_means) {
            if let Some(d) = window.push(ma, mb)? {
                let epoch = self.step.div_ceil(self.steps_per_epoch).max(1);
                self.log.push(epoch, self.step, None, "moment_div.layer0", d);
            }
        }
        Ok(())
    }

    fn end_of_epoch(&mut self) -> Result<()> {
        let (epoch, step) = (self.epoch(), self.step);
        for k in 0..self.aux.len() {
            let w = &mut self.aux[k];
            if w.epoch_seen > 0 {
                let acc = w.epoch_correct as f64 / w.epoch_seen as f64;
                let loss = w.epoch_loss / w.epoch_seen as f64;
                self.log.record(epoch, step, Some(k), "train_acc", acc);
                self.log.record(epoch, step, Some(k), "train_loss", loss);
            }
            let w = &mut self.aux[k];
            w.epoch_correct = 0;
            w.epoch_seen = 0;
            w.epoch_loss = 0.0;
        }
        if matches!(self.sync.algo, Algo::Gaia | Algo::Dgc) {
            let deltas: Vec<f64> =
                self.nodes.iter().map(|n| metrics::residual_update_delta(&n.v, n.w())).collect();
            let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
            self.log.record(epoch, step, None, "residual_delta", mean);
        }
        for (k, n) in self.nodes.iter().enumerate() {
            self.log.record(epoch, step, Some(k), "comm_values_sent", n.ledger.values_sent as f64);
        }
        let total = self.sync_ledger().values_sent + self.travel_ledger.values_sent;
        self.log.record(epoch, step, None, "comm_values_sent", total as f64);
        let final_step = step == self.total_steps;
        if epoch % self.cfg.eval_every_epochs == 0 || final_step {
            self.evaluate()?;
        }
        Ok(())
    }

    /// Model used for cluster-level evaluation: node 0's weights with
    /// running statistics averaged over nodes.
    pub fn global_model(&self) -> Model<T> {
        let mut model = self.nodes[0].model.clone();
        let k = T::of_usize(self.nodes.len());
        for (slot, rs) in model.running.iter_mut().enumerate() {
            for c in 0..rs.mean.len() {
                let (m, v) = self.nodes.iter().fold((T::zero(), T::zero()), |(m, v), n| {
                    let r = &n.model.running[slot];
                    (m + r.mean[c], v + r.var[c])
                });
                rs.mean[c] = m / k;
                rs.var[c] = v / k;
            }
        }
        model
    }

    /// Validation accuracy now: the global model, or for Gaia the mean over
    /// per-node models (each also logged).
    pub fn evaluate(&mut self) -> Result<f64> {
        let (epoch, step) = (self.epoch(), self.step);
        let ds = &*self.dataset;
        let val = ds.val_indices();
        let acc = if self.sync.algo == Algo::Gaia {
            let accs = par::map(self.cfg.exec, &self.nodes, |_, n| metrics::accuracy(&n.model, ds, val));
            let accs: Vec<f64> = accs.into_iter().collect::<Result<_>>()?;
            for (k, &a) in accs.iter().enumerate() {
                self.log.record(epoch, step, Some(k), "val_acc", a);
            }
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            self.per_node_val = accs;
            mean
        } else {
            let a = metrics::accuracy(&self.global_model(), ds, val)?;
            self.per_node_val = vec![a; self.nodes.len()];
            a
        };
        self.log.record(epoch, step, None, "val_acc", acc);
        self.last_eval_step = Some(step);
        self.final_val = Some(acc);
        Ok(acc)
    }

    /// Runs supersteps until the budget is spent or training diverges.
    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.done() {
            self.superstep()?;
        }
        Ok(())
    }

    /// Runs until `step >= target` (or the run ends).
    pub fn run_until(&mut self, target: usize) -> Result<()> {
        while !self.done() && self.step < target {
            self.superstep()?;
        }
        Ok(())
    }

    pub fn summary(&mut self) -> Result<Summary> {
        if self.last_eval_step != Some(self.step) {
            self.evaluate()?;
        }
        let sync = self.sync_ledger().values_sent;
        let travel = self.travel_ledger.values_sent;
        let mut seeds = BTreeMap::new();
        seeds.insert("data".to_string(), self.cfg.data_seed);
        seeds.insert("init".to_string(), self.cfg.init_seed);
        seeds.insert("sampling".to_string(), self.cfg.sampling_seed);
        Ok(Summary {
            tag: self.cfg.tag.clone(),
            algo: self.cfg.algo.name().to_string(),
            model_id: self.nodes[0].model.spec().id(),
            k: self.cfg.k,
            skew_fraction: self.cfg.skew_fraction,
            final_val_acc: self.final_val.unwrap_or(0.0),
            per_node_val_acc: self.per_node_val.clone(),
            total_values_sent: sync + travel,
            sync_values_sent: sync,
            travel_values_sent: travel,
            comm_savings: None,
            steps: self.step,
            epochs_completed: self.step / self.steps_per_epoch,
            diverged: self.diverged,
            seeds,
        })
    }
}
