use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{glyph_dataset, load_csv, load_idx, stratified_split, synth_dataset, Dataset, LoadOptions};
use crate::error::{Error, Result};
use crate::nn::{Arch, LrSchedule, ModelSpec, NormKind};
use crate::par::Exec;
use crate::scalar::Precision;
use crate::sync::{Aggregation, Algo, SyncConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Synth,
    Glyphs,
    Idx,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormChoice {
    #[default]
    None,
    Batch,
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrKind {
    #[default]
    Constant,
    Step,
    Polynomial,
}

/// One experiment. Every field is a flat JSON key; all but `skew_fraction`
/// have defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Free-form label carried into the summary.
    pub tag: Option<String>,

    pub dataset: DatasetKind,
    pub synth_classes: usize,
    pub synth_samples: usize,
    pub synth_dim: usize,
    pub synth_separation: f64,
    /// Pixel noise of the glyph generator.
    pub synth_noise: f64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub csv_path: Option<PathBuf>,
    pub num_classes: Option<usize>,
    pub val_fraction: f64,
    pub standardize: bool,

    pub arch: Arch,
    pub norm: NormChoice,
    /// Channels per group for group normalization.
    pub group_size: usize,
    pub hidden: usize,

    pub k: usize,
    pub skew_fraction: f64,

    pub algo: Algo,
    pub bsp_aggregation: Aggregation,
    pub t0: f64,
    pub t_min: f64,
    pub iter_local: usize,
    pub fedavg_weighted: bool,
    pub e_warm: usize,
    pub clip_norm: Option<f64>,
    pub fixed_sparsity: Option<f64>,

    pub lr_schedule: LrKind,
    pub eta0: f64,
    /// `(epoch, divisor)` pairs for the step schedule.
    pub lr_drops: Vec<(usize, f64)>,
    pub lr_power: f64,
    /// Defaults to the run's total step count.
    pub lr_max_iter: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many supersteps (minibatches per node) if smaller
    /// than the epoch budget.
    pub max_steps: Option<usize>,

    pub data_seed: u64,
    pub init_seed: u64,
    pub sampling_seed: u64,

    pub precision: Precision,
    pub exec: Exec,

    pub eval_every_epochs: usize,
    pub divergence_patience: usize,
    pub moment_window: usize,
    /// Vector-norm moment divergence instead of the per-channel mean.
    pub moment_joint: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            tag: None,
            dataset: DatasetKind::Synth,
            synth_classes: 10,
            synth_samples: 5000,
            synth_dim: 64,
            synth_separation: 3.0,
            synth_noise: 0.5,
            idx_images: None,
            idx_labels: None,
            csv_path: None,
            num_classes: None,
            val_fraction: 0.1,
            standardize: false,
            arch: Arch::LogReg,
            norm: NormChoice::None,
            group_size: 2,
            hidden: 128,
            k: 5,
            skew_fraction: 0.0,
            algo: Algo::Bsp,
            bsp_aggregation: Aggregation::Sum,
            t0: 0.10,
            t_min: 0.01,
            iter_local: 20,
            fedavg_weighted: false,
            e_warm: 4,
            clip_norm: Some(5.0),
            fixed_sparsity: None,
            lr_schedule: LrKind::Constant,
            eta0: 0.05,
            lr_drops: Vec::new(),
            lr_power: 1.0,
            lr_max_iter: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 10,
            max_steps: None,
            data_seed: 1,
            init_seed: 2,
            sampling_seed: 3,
            precision: Precision::F32,
            exec: Exec::Parallel,
            eval_every_epochs: 1,
            divergence_patience: 10,
            moment_window: 100,
            moment_joint: false,
        }
    }
}

const VAL_SPLIT_SALT: u64 = 0x5eed_5a17;

/// Keys that must appear in every config file.
pub const REQUIRED_KEYS: &[&str] = &["skew_fraction"];

impl ExperimentConfig {
    /// Parses flat JSON; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value.as_object().ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        for key in REQUIRED_KEYS {
            if !obj.contains_key(*key) {
                return Err(Error::Config(format!("missing required key `{key}`")));
            }
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(value)
            .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies one `key=value` override, the value parsed as JSON (bare
    /// words are taken as strings).
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let obj = value.as_object_mut().expect("config is an object");
        if !obj.contains_key(key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        obj.insert(key.to_string(), parsed);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(value)
            .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.skew_fraction) {
            return Err(Error::Config(format!("skew_fraction {} outside [0, 1]", self.skew_fraction)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.eval_every_epochs == 0 || self.divergence_patience == 0 {
            return Err(Error::Config("eval_every_epochs and divergence_patience must be positive".into()));
        }
        match self.dataset {
            DatasetKind::Idx if self.idx_images.is_none() || self.idx_labels.is_none() => {
                return Err(Error::Config("idx dataset needs idx_images and idx_labels".into()))
            }
            DatasetKind::Csv if self.csv_path.is_none() => {
                return Err(Error::Config("csv dataset needs csv_path".into()))
            }
            _ => {}
        }
        self.sync_config().validate()?;
        self.lr_schedule_for(1).validate()
    }

    pub fn sync_config(&self) -> SyncConfig {
        SyncConfig {
            algo: self.algo,
            bsp_aggregation: self.bsp_aggregation,
            t0: self.t0,
            t_min: self.t_min,
            iter_local: self.iter_local,
            fedavg_weighted: self.fedavg_weighted,
            e_warm: self.e_warm,
            clip_norm: self.clip_norm,
            fixed_sparsity: self.fixed_sparsity,
        }
    }

    pub fn set_sync_config(&mut self, s: &SyncConfig) {
        self.algo = s.algo;
        self.bsp_aggregation = s.bsp_aggregation;
        self.t0 = s.t0;
        self.t_min = s.t_min;
        self.iter_local = s.iter_local;
        self.fedavg_weighted = s.fedavg_weighted;
        self.e_warm = s.e_warm;
        self.clip_norm = s.clip_norm;
        self.fixed_sparsity = s.fixed_sparsity;
    }

    pub fn norm_kind(&self) -> NormKind {
        match self.norm {
            NormChoice::None => NormKind::None,
            NormChoice::Batch => NormKind::Batch,
            NormChoice::Group => NormKind::Group { size: self.group_size },
        }
    }

    /// Schedule for a run of `total_steps` supersteps.
    pub fn lr_schedule_for(&self, total_steps: usize) -> LrSchedule {
        match self.lr_schedule {
            LrKind::Constant => LrSchedule::Constant { eta0: self.eta0 },
            LrKind::Step => LrSchedule::Step { eta0: self.eta0, drops: self.lr_drops.clone() },
            LrKind::Polynomial => LrSchedule::Polynomial {
                eta0: self.eta0,
                power: self.lr_power,
                max_iter: self.lr_max_iter.unwrap_or(total_steps).max(1),
            },
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let opts = LoadOptions {
            num_classes: self.num_classes,
            val_fraction: self.val_fraction,
            split_seed: self.data_seed,
            standardize: self.standardize,
        };
        let mut ds = match self.dataset {
            DatasetKind::Synth => {
                synth_dataset(self.synth_classes, self.synth_samples, self.synth_dim, self.synth_separation, self.data_seed)?
            }
            DatasetKind::Glyphs => {
                let side = (self.synth_dim as f64).sqrt().round() as usize;
                if side * side != self.synth_dim {
                    return Err(Error::Config(format!("glyph data needs a square synth_dim, got {}", self.synth_dim)));
                }
                glyph_dataset(self.synth_classes, self.synth_samples, side, self.synth_noise, self.val_fraction, self.data_seed)?
            }
            DatasetKind::Idx => {
                load_idx(self.idx_images.as_deref().unwrap(), self.idx_labels.as_deref().unwrap(), &opts)?
            }
            DatasetKind::Csv => load_csv(self.csv_path.as_deref().unwrap(), &opts)?,
        };
        if self.dataset == DatasetKind::Synth && self.val_fraction != 0.1 {
            let val = stratified_split(ds.labels(), ds.num_classes(), self.val_fraction, self.data_seed ^ VAL_SPLIT_SALT);
            ds = Dataset::new(ds.features().to_vec(), ds.sample_shape().to_vec(), ds.labels().to_vec(), ds.num_classes(), val)?;
        }
        if matches!(self.dataset, DatasetKind::Synth | DatasetKind::Glyphs) && self.standardize {
            ds.standardize();
        }
        Ok(ds)
    }

    pub fn model_spec(&self, dataset: &Dataset) -> ModelSpec {
        let mut spec = ModelSpec::new(self.arch, self.norm_kind(), dataset.sample_shape().to_vec(), dataset.num_classes());
        spec.hidden = self.hidden;
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"skew_fraction": 0.5}"#).unwrap();
        assert_eq!(cfg.skew_fraction, 0.5);
        assert_eq!(cfg.k, 5);
        let echoed = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn missing_skew_fraction_is_named() {
        let err = ExperimentConfig::from_json(r#"{"k": 2}"#).unwrap_err().to_string();
        assert!(err.contains("skew_fraction"), "{err}");
    }

    #[test]
    fn bad_type_reports_path() {
        let err = ExperimentConfig::from_json(r#"{"skew_fraction": 0.0, "batch_size": "big"}"#).unwrap_err().to_string();
        assert!(err.contains("batch_size"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"skew_fraction": 0.0, "bacth_size": 3}"#).unwrap_err().to_string();
        assert!(err.contains("bacth_size"), "{err}");
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.with_override("t0", "0.2").unwrap().t0, 0.2);
        assert_eq!(cfg.with_override("algo", "gaia").unwrap().algo, Algo::Gaia);
        assert!(cfg.with_override("nope", "1").is_err());
        let fed = cfg.with_override("algo", "fedavg").unwrap();
        assert!(fed.with_override("iter_local", "0").unwrap_err().to_string().contains("Iter_Local"));
    }
}
