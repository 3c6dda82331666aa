//! Communication controller: periodic model traveling to estimate the
//! accuracy loss from skew, a hinge-plus-cost objective, and grid tuners for
//! the synchronization algorithm's knob.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, AccuracyLossReport};
use crate::par;
use crate::scalar::{Precision, Scalar};
use crate::sim::{Cluster, ExperimentConfig, MetricsLog, Summary};
use crate::sync::Algo;

/// Below this temperature annealing takes greedy steps.
const TEMP_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunerKind {
    #[default]
    HillClimb,
    StochasticHillClimb,
    SimulatedAnnealing,
}

impl std::str::FromStr for TunerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hill_climb" => Ok(TunerKind::HillClimb),
            "stochastic_hill_climb" => Ok(TunerKind::StochasticHillClimb),
            "simulated_annealing" => Ok(TunerKind::SimulatedAnnealing),
            other => Err(Error::Config(format!("unknown tuner {other:?}"))),
        }
    }
}

/// How per-pair accuracy losses combine into one event value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlAggregate {
    #[default]
    Max,
    Mean,
}

/// Which samples the traveling model is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlData {
    /// Seeded subsets of each partition's training samples.
    #[default]
    Train,
    /// Held-out samples drawn to match each partition's label mix.
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub lambda_al: f64,
    pub lambda_c: f64,
    pub sigma_al: f64,
    /// Minibatches between travel and tuning events.
    pub travel_period: usize,
    pub tuner: TunerKind,
    /// Candidate knob values ordered from conservative to aggressive. Empty
    /// selects the algorithm's default grid.
    pub theta_grid: Vec<f64>,
    pub subset_size: usize,
    pub aggregate: AlAggregate,
    pub al_data: AlData,
    pub temperature: f64,
    /// Geometric temperature decay per event.
    pub cooling: f64,
    /// Memoized neighbors older than this many events may be probed again.
    pub stale_after: usize,
    pub seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            lambda_al: 50.0,
            lambda_c: 1.0,
            sigma_al: 0.05,
            travel_period: 500,
            tuner: TunerKind::HillClimb,
            theta_grid: Vec::new(),
            subset_size: 512,
            aggregate: AlAggregate::Max,
            al_data: AlData::Train,
            temperature: 1.0,
            cooling: 0.9,
            stale_after: 5,
            seed: 7,
        }
    }
}

impl ControllerConfig {
    pub fn default_grid(algo: Algo) -> Option<Vec<f64>> {
        match algo {
            Algo::Bsp => None,
            Algo::Gaia => Some(vec![0.02, 0.05, 0.10, 0.20, 0.30, 0.40]),
            Algo::Fedavg => Some(vec![5.0, 10.0, 20.0, 50.0, 200.0]),
            // A longer warm-up keeps sparsity low for longer.
            Algo::Dgc => Some(vec![8.0, 4.0, 3.0, 2.0, 1.0]),
        }
    }

    /// The grid in use for `algo`, validated.
    pub fn grid_for(&self, algo: Algo) -> Result<Vec<f64>> {
        let grid = if self.theta_grid.is_empty() {
            Self::default_grid(algo).ok_or_else(|| Error::Config(format!("{} has no tunable knob", algo.name())))?
        } else {
            self.theta_grid.clone()
        };
        let ascending = algo != Algo::Dgc;
        let ordered = grid.windows(2).all(|w| if ascending { w[0] < w[1] } else { w[0] > w[1] });
        if !ordered {
            let dir = if ascending { "increasing" } else { "decreasing" };
            return Err(Error::Config(format!("{} theta grid must be strictly {dir} (conservative first)", algo.name())));
        }
        let valid = |t: f64| match algo {
            Algo::Gaia => (0.0..=1.0).contains(&t),
            _ => t >= 1.0 && t.fract() == 0.0,
        };
        if let Some(t) = grid.iter().find(|t| !valid(**t)) {
            return Err(Error::Config(format!("theta {t} is out of range for {}", algo.name())));
        }
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_al > 0.0 && self.sigma_al < 1.0) {
            return Err(Error::Config(format!("sigma_al must be in (0, 1), got {}", self.sigma_al)));
        }
        if !(self.lambda_al >= 0.0 && self.lambda_al.is_finite() && self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return Err(Error::Config("objective weights must be finite and non-negative".into()));
        }
        if self.travel_period == 0 || self.subset_size == 0 {
            return Err(Error::Config("travel_period and subset_size must be positive".into()));
        }
        if !(self.temperature >= 0.0) || !(self.cooling > 0.0 && self.cooling <= 1.0) {
            return Err(Error::Config("temperature must be >= 0 and cooling in (0, 1]".into()));
        }
        Ok(())
    }
}

/// `lambda_al * max(0, al - sigma_al) + lambda_c * c / cm`.
pub fn objective(al: f64, c: f64, cm: f64, cfg: &ControllerConfig) -> Result<f64> {
    if !(cm > 0.0) {
        return Err(Error::Config(format!("model size must be positive, got {cm}")));
    }
    Ok(cfg.lambda_al * (al - cfg.sigma_al).max(0.0) + cfg.lambda_c * c / cm)
}

/// One event's readings for the knob currently in effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub al: f64,
    /// Synchronization values sent per node per minibatch since the last
    /// event.
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoEntry {
    pub al: f64,
    pub c: f64,
    pub objective: f64,
    pub event: usize,
}

/// A change of the resting grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptedMove {
    pub event: usize,
    pub from: usize,
    pub to: usize,
    pub objective: f64,
}

/// Grid tuner. The tuner rests at an anchor; an unmeasured neighbor is
/// probed for one period and adopted only if it scores better, otherwise the
/// anchor is restored.
#[derive(Debug, Clone)]
pub struct TunerState {
    kind: TunerKind,
    grid_len: usize,
    current: usize,
    anchor: usize,
    memo: BTreeMap<usize, MemoEntry>,
    last_objective: Option<f64>,
    temperature: f64,
    accepted: Vec<AcceptedMove>,
    events: usize,
    rng: ChaCha8Rng,
}

impl TunerState {
    /// Starts at the middle of the grid.
    pub fn new(cfg: &ControllerConfig, grid_len: usize) -> Result<Self> {
        if grid_len == 0 {
            return Err(Error::Config("theta grid is empty".into()));
        }
        let mid = (grid_len - 1) / 2;
        Ok(TunerState {
            kind: cfg.tuner,
            grid_len,
            current: mid,
            anchor: mid,
            memo: BTreeMap::new(),
            last_objective: None,
            temperature: cfg.temperature,
            accepted: Vec::new(),
            events: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn memo(&self) -> &BTreeMap<usize, MemoEntry> {
        &self.memo
    }

    pub fn last_objective(&self) -> Option<f64> {
        self.last_objective
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn accepted_moves(&self) -> &[AcceptedMove] {
        &self.accepted
    }

    /// Stores a measurement for grid point `idx` without moving, e.g. to warm
    /// start from an earlier run.
    pub fn remember(&mut self, idx: usize, m: Measurement, cm: f64, cfg: &ControllerConfig) -> Result<f64> {
        if idx >= self.grid_len {
            return Err(Error::Config(format!("grid index {idx} out of range")));
        }
        let obj = objective(m.al, m.c, cm, cfg)?;
        self.memo.insert(idx, MemoEntry { al: m.al, c: m.c, objective: obj, event: self.events });
        Ok(obj)
    }

    /// Records the measurement for the current grid point and returns the
    /// index to use until the next event.
    pub fn tune_step(&mut self, m: Measurement, cm: f64, cfg: &ControllerConfig) -> Result<usize> {
        let obj = self.remember(self.current, m, cm, cfg)?;
        self.last_objective = Some(obj);
        let greedy = match self.kind {
            TunerKind::HillClimb => true,
            TunerKind::StochasticHillClimb => false,
            TunerKind::SimulatedAnnealing => self.temperature <= TEMP_FLOOR,
        };
        if self.current != self.anchor && !self.resolve_probe(obj, greedy) {
            self.current = self.anchor;
        } else {
            self.current = match self.kind {
                _ if greedy => self.hill_climb(m, cfg),
                TunerKind::StochasticHillClimb => self.stochastic(cfg),
                _ => self.anneal(cfg),
            };
        }
        if self.kind == TunerKind::SimulatedAnnealing {
            self.temperature *= cfg.cooling;
        }
        self.events += 1;
        Ok(self.current)
    }

    fn guard_ok(&self, obj: f64) -> bool {
        self.accepted.last().is_none_or(|a| obj < a.objective)
    }

    fn accept(&mut self, to: usize, obj: f64) {
        self.accepted.push(AcceptedMove { event: self.events, from: self.anchor, to, objective: obj });
        self.anchor = to;
    }

    /// Decides whether the probed point replaces the anchor.
    fn resolve_probe(&mut self, obj: f64, greedy: bool) -> bool {
        let base = self.memo.get(&self.anchor).map(|e| e.objective);
        let take = match base {
            None => self.guard_ok(obj),
            Some(b) if self.kind == TunerKind::SimulatedAnnealing && !greedy => {
                let p = (-(obj - b) / self.temperature).exp().min(1.0);
                self.rng.random::<f64>() < p
            }
            Some(b) => obj < b && self.guard_ok(obj),
        };
        if take {
            self.accept(self.current, obj);
        }
        take
    }

    fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut n = Vec::with_capacity(2);
        if i > 0 {
            n.push(i - 1);
        }
        if i + 1 < self.grid_len {
            n.push(i + 1);
        }
        n
    }

    fn fresh(&self, i: usize, cfg: &ControllerConfig) -> Option<f64> {
        self.memo.get(&i).filter(|e| self.events - e.event < cfg.stale_after).map(|e| e.objective)
    }

    fn hill_climb(&mut self, m: Measurement, cfg: &ControllerConfig) -> usize {
        let here = self.memo[&self.current].objective;
        let best = self
            .neighbors(self.current)
            .into_iter()
            .filter_map(|n| self.fresh(n, cfg).map(|o| (n, o)))
            .filter(|&(_, o)| o < here && self.guard_ok(o))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((n, o)) = best {
            self.accept(n, o);
            return n;
        }
        // With the accuracy hinge active only a more conservative point can
        // help; otherwise only a cheaper one.
        let preferred = if m.al > cfg.sigma_al { self.current.checked_sub(1) } else { Some(self.current + 1) };
        match preferred {
            Some(p) if p < self.grid_len && self.fresh(p, cfg).is_none() => p,
            _ => self.current,
        }
    }

    fn stochastic(&mut self, cfg: &ControllerConfig) -> usize {
        let here = self.memo[&self.current].objective;
        let ns = self.neighbors(self.current);
        let improving: Vec<(usize, f64)> = ns
            .iter()
            .filter_map(|&n| self.fresh(n, cfg).map(|o| (n, o)))
            .filter(|&(_, o)| o < here && self.guard_ok(o))
            .collect();
        if !improving.is_empty() {
            let (n, o) = improving[self.rng.random_range(0..improving.len())];
            self.accept(n, o);
            return n;
        }
        let unknown: Vec<usize> = ns.into_iter().filter(|&n| self.fresh(n, cfg).is_none()).collect();
        if unknown.is_empty() {
            self.current
        } else {
            unknown[self.rng.random_range(0..unknown.len())]
        }
    }

    fn anneal(&mut self, cfg: &ControllerConfig) -> usize {
        let ns = self.neighbors(self.current);
        if ns.is_empty() {
            return self.current;
        }
        let n = ns[self.rng.random_range(0..ns.len())];
        let Some(o) = self.fresh(n, cfg) else {
            return n;
        };
        let here = self.memo[&self.current].objective;
        let p = (-(o - here) / self.temperature).exp().min(1.0);
        if self.rng.random::<f64>() < p {
            self.accept(n, o);
            n
        } else {
            self.current
        }
    }
}

fn mix_seed(seed: u64, event: usize, a: usize, b: usize) -> u64 {
    let mut x = seed ^ (event as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= ((a as u64) << 32 | b as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^ (x >> 31)
}

/// Validation indices drawn to follow the label mix of `partition`.
fn label_matched_val(dataset: &Dataset, partition: &[usize], size: usize, seed: u64) -> Vec<usize> {
    let labels = dataset.labels();
    let mut counts = vec![0usize; dataset.num_classes()];
    for &i in partition {
        counts[labels[i] as usize] += 1;
    }
    let mut by_class = vec![Vec::new(); dataset.num_classes()];
    for &i in dataset.val_indices() {
        by_class[labels[i] as usize].push(i);
    }
    let mut out = Vec::new();
    for (c, pool) in by_class.iter().enumerate() {
        let want = (size as f64 * counts[c] as f64 / partition.len().max(1) as f64).round() as usize;
        out.extend(metrics::sample_subset(pool, want, seed ^ c as u64));
    }
    out.sort_unstable();
    out
}

/// Evaluates node k's model on partition `(k + r) mod K`, with `r` rotating
/// through `1..K` from a seeded offset. Returns one report per node (none
/// when K = 1).
pub fn model_travel<T: Scalar>(cluster: &Cluster<T>, ctl: &ControllerConfig, event: usize) -> Result<Vec<AccuracyLossReport>> {
    let k = cluster.nodes().len();
    if k < 2 {
        return Ok(Vec::new());
    }
    let r = 1 + (ctl.seed as usize % (k - 1) + event) % (k - 1);
    let ds = &**cluster.dataset();
    let parts = cluster.partitions();
    let pool = |p: usize, seed: u64| match ctl.al_data {
        AlData::Train => metrics::sample_subset(&parts[p], ctl.subset_size, seed),
        AlData::Validation => label_matched_val(ds, &parts[p], ctl.subset_size, seed),
    };
    let reports = par::map_range(cluster.config().exec, k, |src| {
        let dst = (src + r) % k;
        let model = &cluster.nodes()[src].model;
        let local = pool(src, mix_seed(ctl.seed, event, src, src));
        let remote = pool(dst, mix_seed(ctl.seed, event, src, dst));
        let local_acc = metrics::accuracy(model, ds, &local)?;
        let remote_acc = metrics::accuracy(model, ds, &remote)?;
        Ok(AccuracyLossReport { source: src, target: dst, local_acc, remote_acc, al: local_acc - remote_acc, samples: remote.len() })
    });
    reports.into_iter().collect()
}

pub fn aggregate_al(reports: &[AccuracyLossReport], how: AlAggregate) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    match how {
        AlAggregate::Max => reports.iter().map(|r| r.al).fold(f64::NEG_INFINITY, f64::max),
        AlAggregate::Mean => reports.iter().map(|r| r.al).sum::<f64>() / reports.len() as f64,
    }
}

/// One travel-and-tune event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TravelEvent {
    pub step: usize,
    pub theta: f64,
    pub next_theta: f64,
    pub al: f64,
    pub c: f64,
    pub objective: f64,
    pub reports: Vec<AccuracyLossReport>,
}

#[derive(Debug, Clone)]
pub struct ScoutOutput {
    pub log: MetricsLog,
    pub summary: Summary,
    pub events: Vec<TravelEvent>,
    pub accepted: Vec<AcceptedMove>,
    pub grid: Vec<f64>,
}

/// Trains with travel and tuning events every `travel_period` minibatches.
pub fn skewscout_run(cfg: &ExperimentConfig, ctl: &ControllerConfig) -> Result<ScoutOutput> {
    let dataset = Arc::new(cfg.load_dataset()?);
    skewscout_run_on(cfg, ctl, dataset)
}

pub fn skewscout_run_on(cfg: &ExperimentConfig, ctl: &ControllerConfig, dataset: Arc<Dataset>) -> Result<ScoutOutput> {
    match cfg.precision {
        Precision::F32 => scout_typed::<f32>(cfg, ctl, dataset),
        Precision::F64 => scout_typed::<f64>(cfg, ctl, dataset),
    }
}

fn scout_typed<T: Scalar>(cfg: &ExperimentConfig, ctl: &ControllerConfig, dataset: Arc<Dataset>) -> Result<ScoutOutput> {
    ctl.validate()?;
    let grid = ctl.grid_for(cfg.algo)?;
    let mut cluster = Cluster::<T>::new(cfg, dataset)?;
    let mut tuner = TunerState::new(ctl, grid.len())?;
    let k = cluster.nodes().len();
    let m = cluster.num_params();
    cluster.set_theta(grid[tuner.current()]);
    cluster.log_mut().record(0, 0, None, "theta", grid[tuner.current()]);

    let mut events = Vec::new();
    let (mut last_sent, mut last_step) = (cluster.sync_ledger().values_sent, 0);
    while !cluster.done() {
        let before = cluster.step();
        cluster.superstep()?;
        let step = cluster.step();
        if cluster.done() || step / ctl.travel_period == before / ctl.travel_period {
            continue;
        }
        let reports = model_travel(&cluster, ctl, events.len())?;
        cluster.add_travel((reports.len() * m) as u64);
        let al = aggregate_al(&reports, ctl.aggregate);
        let sent = cluster.sync_ledger().values_sent;
        let c = (sent - last_sent) as f64 / (k * (step - last_step)) as f64;
        (last_sent, last_step) = (sent, step);

        let theta = grid[tuner.current()];
        let next = tuner.tune_step(Measurement { al, c }, m as f64, ctl)?;
        let obj = tuner.last_objective().unwrap_or(f64::NAN);
        cluster.set_theta(grid[next]);

        let epoch = cluster.epoch();
        let travel = cluster.travel_ledger().values_sent as f64;
        let log = cluster.log_mut();
        for r in &reports {
            log.record(epoch, step, Some(r.source), "accuracy_loss", r.al);
        }
        log.record(epoch, step, None, "accuracy_loss", al);
        log.record(epoch, step, None, "objective", obj);
        log.record(epoch, step, None, "theta", grid[next]);
        log.record(epoch, step, None, "travel_values_sent", travel);
        events.push(TravelEvent { step, theta, next_theta: grid[next], al, c, objective: obj, reports });
    }
    let summary = cluster.summary()?;
    Ok(ScoutOutput { log: cluster.log().clone(), summary, events, accepted: tuner.accepted_moves().to_vec(), grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctl() -> ControllerConfig {
        ControllerConfig::default()
    }

    #[test]
    fn objective_examples() {
        let c = ctl();
        assert!((objective(0.10, 0.2, 1.0, &c).unwrap() - 2.7).abs() < 1e-12);
        assert_eq!(objective(0.03, 0.2, 1.0, &c).unwrap(), 0.2);
        assert_eq!(objective(0.05, 0.2, 1.0, &c).unwrap(), 0.2);
        assert!(objective(0.1, 1.0, 0.0, &c).is_err());
    }

    proptest! {
        #[test]
        fn objective_is_monotone(al in -1.0f64..1.0, d_al in 0.0f64..1.0, c in 0.0f64..10.0, d_c in 0.0f64..10.0, cm in 0.1f64..100.0) {
            let cfg = ctl();
            let base = objective(al, c, cm, &cfg).unwrap();
            prop_assert!(objective(al + d_al, c, cm, &cfg).unwrap() >= base);
            prop_assert!(objective(al, c + d_c, cm, &cfg).unwrap() >= base);
        }
    }

    fn cost(o: f64) -> Measurement {
        Measurement { al: 0.0, c: o }
    }

    #[test]
    fn hill_climb_stays_without_strict_improvement() {
        let cfg = ctl();
        let mut t = TunerState::new(&cfg, 5).unwrap();
        assert_eq!(t.current(), 2);
        t.remember(1, cost(3.0), 1.0, &cfg).unwrap();
        t.remember(3, cost(2.9), 1.0, &cfg).unwrap();
        assert_eq!(t.tune_step(cost(2.7), 1.0, &cfg).unwrap(), 2);
        assert!(t.accepted_moves().is_empty());
    }

    #[test]
    fn high_accuracy_loss_moves_to_the_conservative_neighbor() {
        let cfg = ctl();
        let mut t = TunerState::new(&cfg, 6).unwrap();
        let start = t.current();
        // Aggressive point loses accuracy: probe the conservative neighbor.
        let probe = t.tune_step(Measurement { al: 0.4, c: 0.1 }, 1.0, &cfg).unwrap();
        assert_eq!(probe, start - 1);
        // It measures lower, so it is adopted.
        let next = t.tune_step(Measurement { al: 0.06, c: 0.2 }, 1.0, &cfg).unwrap();
        assert_eq!(t.anchor(), start - 1);
        assert_eq!(t.accepted_moves().len(), 1);
        assert!(next <= start - 1);
    }

    #[test]
    fn low_accuracy_loss_probes_the_cheaper_neighbor() {
        let cfg = ctl();
        let mut t = TunerState::new(&cfg, 6).unwrap();
        let start = t.current();
        assert_eq!(t.tune_step(cost(0.5), 1.0, &cfg).unwrap(), start + 1);
        // A worse probe reverts to the anchor.
        assert_eq!(t.tune_step(cost(0.9), 1.0, &cfg).unwrap(), start);
        assert!(t.accepted_moves().is_empty());
    }

    #[test]
    fn memo_keeps_one_entry_per_point() {
        let cfg = ctl();
        let mut t = TunerState::new(&cfg, 3).unwrap();
        for i in 0..20 {
            t.tune_step(cost(1.0 / (i + 1) as f64), 1.0, &cfg).unwrap();
        }
        assert!(t.memo().len() <= 3);
    }

    fn landscape(idx: usize, event: usize, seed: u64) -> Measurement {
        let x = mix_seed(seed, event, idx, 0);
        let al = (x % 1000) as f64 / 2000.0;
        let c = ((x >> 16) % 1000) as f64 / 500.0 / (1 + idx) as f64;
        Measurement { al, c }
    }

    #[test]
    fn cold_annealing_matches_hill_climb() {
        let hot = ControllerConfig { tuner: TunerKind::SimulatedAnnealing, temperature: 0.0, ..ctl() };
        let hill = ctl();
        let mut a = TunerState::new(&hot, 6).unwrap();
        let mut b = TunerState::new(&hill, 6).unwrap();
        for e in 0..60 {
            let ia = a.tune_step(landscape(a.current(), e, 3), 1.0, &hot).unwrap();
            let ib = b.tune_step(landscape(b.current(), e, 3), 1.0, &hill).unwrap();
            assert_eq!(ia, ib);
        }
        assert_eq!(a.accepted_moves(), b.accepted_moves());
    }

    #[test]
    fn annealing_cools_geometrically() {
        let cfg = ControllerConfig { tuner: TunerKind::SimulatedAnnealing, temperature: 2.0, ..ctl() };
        let mut t = TunerState::new(&cfg, 4).unwrap();
        for e in 0..3 {
            t.tune_step(landscape(t.current(), e, 1), 1.0, &cfg).unwrap();
        }
        assert!((t.temperature() - 2.0 * 0.9f64.powi(3)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn hill_climb_accepted_objectives_strictly_decrease(seed in any::<u64>(), len in 1usize..8, stale in 1usize..6) {
            let cfg = ControllerConfig { stale_after: stale, ..ctl() };
            let mut t = TunerState::new(&cfg, len).unwrap();
            for e in 0..80 {
                let i = t.tune_step(landscape(t.current(), e, seed), 1.0, &cfg).unwrap();
                prop_assert!(i < len);
            }
            let objs: Vec<f64> = t.accepted_moves().iter().map(|m| m.objective).collect();
            prop_assert!(objs.windows(2).all(|w| w[1] < w[0]), "{objs:?}");
        }

        #[test]
        fn stochastic_moves_stay_on_the_grid(seed in any::<u64>(), len in 1usize..8) {
            let cfg = ControllerConfig { tuner: TunerKind::StochasticHillClimb, seed, ..ctl() };
            let mut t = TunerState::new(&cfg, len).unwrap();
            for e in 0..40 {
                let i = t.tune_step(landscape(t.current(), e, seed), 1.0, &cfg).unwrap();
                prop_assert!(i < len && i.abs_diff(t.anchor()) <= 1);
            }
        }
    }

    #[test]
    fn grids_are_validated() {
        let c = ctl();
        assert_eq!(c.grid_for(Algo::Gaia).unwrap().len(), 6);
        assert!(c.grid_for(Algo::Bsp).is_err());
        assert!(c.grid_for(Algo::Dgc).unwrap().windows(2).all(|w| w[0] > w[1]));
        let bad = ControllerConfig { theta_grid: vec![0.2, 0.1], ..ctl() };
        assert!(bad.grid_for(Algo::Gaia).is_err());
        let bad = ControllerConfig { theta_grid: vec![2.5, 4.0], ..ctl() };
        assert!(bad.grid_for(Algo::Fedavg).is_err());
        assert!(ControllerConfig { sigma_al: 1.0, ..ctl() }.validate().is_err());
    }

    fn small_run(k: usize, skew: f64) -> ExperimentConfig {
        ExperimentConfig {
            synth_samples: 600,
            synth_dim: 8,
            synth_classes: 4,
            k,
            skew_fraction: skew,
            algo: Algo::Gaia,
            epochs: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn two_nodes_travel_both_ways() {
        let cfg = small_run(2, 1.0);
        let ds = Arc::new(cfg.load_dataset().unwrap());
        let cluster = Cluster::<f32>::new(&cfg, ds).unwrap();
        let ctl = ControllerConfig { subset_size: 64, ..ctl() };
        let r = model_travel(&cluster, &ctl, 0).unwrap();
        let pairs: Vec<(usize, usize)> = r.iter().map(|r| (r.source, r.target)).collect();
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn rotation_visits_every_remote_partition() {
        let cfg = small_run(4, 0.5);
        let ds = Arc::new(cfg.load_dataset().unwrap());
        let cluster = Cluster::<f32>::new(&cfg, ds).unwrap();
        let ctl = ControllerConfig { subset_size: 16, ..ctl() };
        let mut seen = std::collections::BTreeSet::new();
        for e in 0..3 {
            for r in model_travel(&cluster, &ctl, e).unwrap() {
                seen.insert((r.source, r.target));
            }
        }
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn travel_ledger_counts_every_transfer() {
        let cfg = small_run(3, 0.5);
        let ctl = ControllerConfig { travel_period: 4, subset_size: 32, ..ctl() };
        let out = skewscout_run(&cfg, &ctl).unwrap();
        let m = out.log.rows().len();
        assert!(m > 0);
        let params = {
            let ds = Arc::new(cfg.load_dataset().unwrap());
            Cluster::<f32>::new(&cfg, ds).unwrap().num_params()
        };
        assert!(!out.events.is_empty());
        assert_eq!(out.summary.travel_values_sent, (out.events.len() * 3 * params) as u64);
        assert_eq!(out.log.series("theta", None).len(), out.events.len() + 1);
        assert_eq!(out.summary.total_values_sent, out.summary.sync_values_sent + out.summary.travel_values_sent);
    }

    #[test]
    fn validation_subsets_follow_the_label_mix() {
        let cfg = small_run(4, 1.0);
        let ds = cfg.load_dataset().unwrap();
        let parts = {
            let ds = Arc::new(ds.clone());
            Cluster::<f32>::new(&cfg, ds).unwrap().partitions().to_vec()
        };
        let sub = label_matched_val(&ds, &parts[0], 40, 1);
        let own: std::collections::BTreeSet<u32> = parts[0].iter().map(|&i| ds.labels()[i]).collect();
        assert!(!sub.is_empty());
        assert!(sub.iter().all(|&i| own.contains(&ds.labels()[i]) && ds.val_indices().contains(&i)));
    }
}
