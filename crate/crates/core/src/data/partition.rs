use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};

/// Assignment of every training sample to one of `k` partitions.
///
/// Label `c` has home partition `c mod k`. A fraction `skew_fraction` of each
/// label's training samples goes to its home; the rest is shuffled and dealt
/// round-robin over all partitions starting at the home partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub k: usize,
    pub skew_fraction: f64,
    pub seed: u64,
    /// Partition id per dataset sample; `None` for validation samples.
    pub assignment: Vec<Option<u32>>,
    /// Home labels of each partition.
    pub label_groups: Vec<Vec<u32>>,
}

pub fn make_partition_plan(dataset: &Dataset, k: usize, skew_fraction: f64, seed: u64) -> Result<PartitionPlan> {
    let classes = dataset.num_classes();
    if k == 0 {
        return Err(Error::Config("need at least one partition".into()));
    }
    if !(0.0..=1.0).contains(&skew_fraction) {
        return Err(Error::Config(format!("skew fraction {skew_fraction} outside [0, 1]")));
    }
    if skew_fraction > 0.0 && k > classes {
        return Err(Error::Config(format!("{k} partitions exceed {classes} labels with a nonzero skew fraction")));
    }
    let mut by_label = vec![Vec::new(); classes];
    for &i in dataset.train_indices() {
        by_label[dataset.labels()[i] as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![None; dataset.len()];
    let mut label_groups = vec![Vec::new(); k];
    for (label, idx) in by_label.iter_mut().enumerate() {
        let home = label % k;
        label_groups[home].push(label as u32);
        idx.shuffle(&mut rng);
        let homed = (skew_fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..homed] {
            assignment[i] = Some(home as u32);
        }
        for (j, &i) in idx[homed..].iter().enumerate() {
            assignment[i] = Some(((home + j) % k) as u32);
        }
    }
    Ok(PartitionPlan { k, skew_fraction, seed, assignment, label_groups })
}

impl PartitionPlan {
    /// Sample indices of each partition, ascending.
    pub fn partitions(&self) -> Vec<Vec<usize>> {
        let mut parts = vec![Vec::new(); self.k];
        for (i, a) in self.assignment.iter().enumerate() {
            if let Some(p) = a {
                parts[*p as usize].push(i);
            }
        }
        parts
    }

    pub fn to_json(&self) -> PlanJson {
        let mut runs: Vec<(i64, usize)> = Vec::new();
        for a in &self.assignment {
            let id = a.map_or(-1, |p| p as i64);
            match runs.last_mut() {
                Some((last, n)) if *last == id => *n += 1,
                _ => runs.push((id, 1)),
            }
        }
        PlanJson {
            k: self.k,
            skew_fraction: self.skew_fraction,
            seed: self.seed,
            label_groups: self.label_groups.clone(),
            assignment_runs: runs,
        }
    }

    pub fn from_json(json: &PlanJson) -> Result<Self> {
        let mut assignment = Vec::new();
        for &(id, n) in &json.assignment_runs {
            let a = match id {
                -1 => None,
                p if p >= 0 && (p as usize) < json.k => Some(p as u32),
                p => return Err(Error::Format(format!("partition id {p} out of range"))),
            };
            assignment.extend(std::iter::repeat_n(a, n));
        }
        Ok(PartitionPlan {
            k: json.k,
            skew_fraction: json.skew_fraction,
            seed: json.seed,
            assignment,
            label_groups: json.label_groups.clone(),
        })
    }
}

/// Serialized plan; `assignment_runs` is `(partition id or -1, run length)`
/// over sample indices, -1 marking validation samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct PlanJson {
    #[serde(rename = "K")]
    pub k: usize,
    pub skew_fraction: f64,
    pub seed: u64,
    pub label_groups: Vec<Vec<u32>>,
    pub assignment_runs: Vec<(i64, usize)>,
}

/// `shares[k][c]`: fraction of label `c`'s training samples held by
/// partition `k`. Columns sum to 1 for labels present in the train split.
pub fn skew_report(plan: &PartitionPlan, dataset: &Dataset) -> Vec<Vec<f64>> {
    let classes = dataset.num_classes();
    let mut counts = vec![vec![0usize; classes]; plan.k];
    let mut totals = vec![0usize; classes];
    for (i, a) in plan.assignment.iter().enumerate() {
        if let Some(p) = a {
            let y = dataset.labels()[i] as usize;
            counts[*p as usize][y] += 1;
            totals[y] += 1;
        }
    }
    counts
        .iter()
        .map(|row| {
            row.iter()
                .zip(&totals)
                .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
                .collect()
        })
        .collect()
}

/// Aligned text table of [`skew_report`] shares.
pub fn format_skew_table(shares: &[Vec<f64>]) -> String {
    let classes = shares.first().map_or(0, Vec::len);
    let mut out = String::from("partition");
    for c in 0..classes {
        out.push_str(&format!(" {:>7}", format!("y{c}")));
    }
    out.push('\n');
    for (k, row) in shares.iter().enumerate() {
        out.push_str(&format!("{k:>9}"));
        for v in row {
            out.push_str(&format!(" {v:>7.4}"));
        }
        out.push('\n');
    }
    out
}
