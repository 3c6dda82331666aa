use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: usize,
    /// `None` for cluster-wide values.
    pub node: Option<usize>,
    pub metric: String,
    /// `None` marks an undefined value.
    pub value: Option<f64>,
}

/// Append-only metric record with non-decreasing `(epoch, step)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<MetricRow>,
}

pub const CSV_HEADER: &str = "epoch,step,node,metric,value";

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, epoch: usize, step: usize, node: Option<usize>, metric: impl Into<String>, value: Option<f64>) {
        if let Some(last) = self.rows.last() {
            assert!((last.epoch, last.step) <= (epoch, step), "metrics must be appended in order");
        }
        self.rows.push(MetricRow { epoch, step, node, metric: metric.into(), value });
    }

    pub fn record(&mut self, epoch: usize, step: usize, node: Option<usize>, metric: &str, value: f64) {
        self.push(epoch, step, node, metric, Some(value));
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Values of a cluster-wide (`node = None`) or per-node metric, in order.
    pub fn series(&self, metric: &str, node: Option<usize>) -> Vec<f64> {
        self.rows.iter().filter(|r| r.metric == metric && r.node == node).filter_map(|r| r.value).collect()
    }

    pub fn last(&self, metric: &str, node: Option<usize>) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.metric == metric && r.node == node).and_then(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(32 * self.rows.len() + 32);
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let node = r.node.map(|n| n.to_string()).unwrap_or_default();
            let value = r.value.map(|v| format!("{v}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.step, node, r.metric, value);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Format(format!("metrics CSV must start with `{CSV_HEADER}`")));
        }
        let mut log = MetricsLog::new();
        for (n, line) in lines.enumerate() {
            let bad = || Error::Format(format!("metrics CSV line {}: {line:?}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let node = if f[2].is_empty() { None } else { Some(f[2].parse().map_err(|_| bad())?) };
            let value = if f[4].is_empty() { None } else { Some(f[4].parse().map_err(|_| bad())?) };
            log.rows.push(MetricRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                step: f[1].parse().map_err(|_| bad())?,
                node,
                metric: f[3].to_string(),
                value,
            });
        }
        Ok(log)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// End-of-run record written next to the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tag: Option<String>,
    pub algo: String,
    pub model_id: String,
    pub k: usize,
    pub skew_fraction: f64,
    pub final_val_acc: f64,
    pub per_node_val_acc: Vec<f64>,
    /// Synchronization plus model-traveling traffic.
    pub total_values_sent: u64,
    pub sync_values_sent: u64,
    pub travel_values_sent: u64,
    pub comm_savings: Option<f64>,
    pub steps: usize,
    pub epochs_completed: usize,
    pub diverged: bool,
    pub seeds: BTreeMap<String, u64>,
}

impl Summary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut log = MetricsLog::new();
        log.record(1, 10, Some(0), "train_acc", 0.5);
        log.push(1, 10, None, "moment_div.layer0", None);
        log.record(2, 20, None, "val_acc", 0.1 + 0.2);
        let csv = log.to_csv();
        assert!(csv.starts_with("epoch,step,node,metric,value\n1,10,0,train_acc,0.5\n1,10,,moment_div.layer0,\n"));
        assert_eq!(MetricsLog::from_csv(&csv).unwrap(), log);
        assert_eq!(log.series("val_acc", None), vec![0.1 + 0.2]);
    }

    #[test]
    #[should_panic]
    fn rows_are_ordered() {
        let mut log = MetricsLog::new();
        log.record(2, 5, None, "a", 1.0);
        log.record(1, 6, None, "a", 1.0);
    }
}
