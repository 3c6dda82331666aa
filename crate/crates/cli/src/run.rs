use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;
use skewsim::data::{format_skew_table, make_partition_plan, skew_report, Dataset};
use skewsim::metrics::comm_savings;
use skewsim::scout::{skewscout_run_on, ControllerConfig};
use skewsim::sim::{Cluster, ExperimentConfig, MetricsLog, Summary};
use skewsim::{Precision, Scalar};

use crate::{ConfigArgs, RunArgs, TuneArgs};

pub const CONFIG_FILE: &str = "config.json";
pub const CONTROLLER_FILE: &str = "controller.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.sksm";
pub const EVENTS_FILE: &str = "events.json";
pub const PLAN_FILE: &str = "partition.json";
pub const SKEW_FILE: &str = "skew_report.txt";

fn split_kv(arg: &str) -> Result<(&str, &str)> {
    arg.split_once('=').filter(|(k, _)| !k.is_empty()).ok_or_else(|| anyhow!("expected KEY=VALUE, got `{arg}`"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// The config after defaults, `--set` overrides and seed flags.
fn effective_config(a: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    for kv in &a.set {
        let (k, v) = split_kv(kv)?;
        cfg = cfg.with_override(k, v)?;
    }
    cfg.data_seed = a.data_seed.unwrap_or(cfg.data_seed);
    cfg.init_seed = a.init_seed.unwrap_or(cfg.init_seed);
    cfg.sampling_seed = a.sampling_seed.unwrap_or(cfg.sampling_seed);
    cfg.validate()?;
    Ok(cfg)
}

/// Cartesian product of `key=v1,v2` expansions, in flag order.
fn grid_points(grid: &[String]) -> Result<Vec<Vec<(String, String)>>> {
    let mut points = vec![Vec::new()];
    for g in grid {
        let (key, values) = split_kv(g)?;
        let values: Vec<&str> = values.split(',').filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            bail!("grid key `{key}` has no values");
        }
        points = points
            .into_iter()
            .flat_map(|p: Vec<(String, String)>| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.to_string(), v.to_string()));
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

fn point_name(point: &[(String, String)]) -> String {
    let raw: Vec<String> = point.iter().map(|(k, v)| format!("{k}={v}")).collect();
    raw.join("_").chars().map(|c| if c.is_ascii_alphanumeric() || "._=-".contains(c) { c } else { '-' }).collect()
}

/// One (config, output dir) pair per grid point; no grid runs in `out`.
fn expand(a: &RunArgs) -> Result<Vec<(ExperimentConfig, PathBuf)>> {
    let base = effective_config(&a.config)?;
    if a.grid.is_empty() {
        return Ok(vec![(base, a.config.out.clone())]);
    }
    grid_points(&a.grid)?
        .into_iter()
        .map(|point| {
            let mut cfg = base.clone();
            for (k, v) in &point {
                cfg = cfg.with_override(k, v).with_context(|| format!("grid point {}", point_name(&point)))?;
            }
            let name = point_name(&point);
            cfg.tag = Some(match &base.tag {
                Some(t) => format!("{t}/{name}"),
                None => name.clone(),
            });
            Ok((cfg, a.config.out.join(name)))
        })
        .collect()
}

fn load_baseline(path: Option<&Path>) -> Result<Option<Summary>> {
    path.map(|p| Summary::load(p).with_context(|| format!("reading baseline ledger {}", p.display()))).transpose()
}

/// Writes the log and summary and reports whether the run diverged.
fn finish(dir: &Path, log: &MetricsLog, mut summary: Summary, baseline: Option<&Summary>, quiet: bool) -> Result<bool> {
    if let Some(b) = baseline {
        summary.comm_savings = Some(comm_savings(summary.total_values_sent, b.total_values_sent));
    }
    log.write_csv(&dir.join(METRICS_FILE))?;
    write(&dir.join(SUMMARY_FILE), &(summary.to_json() + "\n"))?;
    if !quiet {
        let savings = summary.comm_savings.map(|s| format!(" comm_savings={s:.2}x")).unwrap_or_default();
        println!(
            "{}: final_val_acc={:.4} total_values_sent={}{savings}{}",
            dir.display(),
            summary.final_val_acc,
            summary.total_values_sent,
            if summary.diverged { " DIVERGED" } else { "" }
        );
    }
    Ok(summary.diverged)
}

fn train_typed<T: Scalar>(cfg: &ExperimentConfig, ds: Arc<Dataset>, dir: &Path) -> Result<(MetricsLog, Summary)> {
    let mut cluster = Cluster::<T>::new(cfg, ds)?;
    if let Err(e) = cluster.run_to_end() {
        // Keep what was logged before the failure.
        cluster.log().write_csv(&dir.join(METRICS_FILE))?;
        return Err(e.into());
    }
    let summary = cluster.summary()?;
    cluster.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    Ok((cluster.log().clone(), summary))
}

pub fn partition(a: &ConfigArgs) -> Result<()> {
    let cfg = effective_config(a)?;
    create_dir(&a.out)?;
    write(&a.out.join(CONFIG_FILE), &(cfg.to_json() + "\n"))?;
    let ds = cfg.load_dataset()?;
    let plan = make_partition_plan(&ds, cfg.k, cfg.skew_fraction, cfg.data_seed)?;
    let json = serde_json::to_string_pretty(&plan.to_json())?;
    write(&a.out.join(PLAN_FILE), &(json + "\n"))?;
    let table = format_skew_table(&skew_report(&plan, &ds));
    write(&a.out.join(SKEW_FILE), &table)?;
    if !a.quiet {
        print!("{table}");
    }
    Ok(())
}

pub fn train(a: &RunArgs) -> Result<bool> {
    let baseline = load_baseline(a.baseline_ledger.as_deref())?;
    let mut diverged = false;
    for (cfg, dir) in expand(a)? {
        create_dir(&dir)?;
        write(&dir.join(CONFIG_FILE), &(cfg.to_json() + "\n"))?;
        let ds = Arc::new(cfg.load_dataset()?);
        let (log, summary) = match cfg.precision {
            Precision::F32 => train_typed::<f32>(&cfg, ds, &dir)?,
            Precision::F64 => train_typed::<f64>(&cfg, ds, &dir)?,
        };
        diverged |= finish(&dir, &log, summary, baseline.as_ref(), a.config.quiet)?;
    }
    Ok(diverged)
}

fn controller_config(a: &TuneArgs) -> Result<ControllerConfig> {
    let mut ctl = match &a.controller {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de).map_err(|e| anyhow!("{}: at `{}`: {}", p.display(), e.path(), e.inner()))?
        }
        None => ControllerConfig::default(),
    };
    ctl.lambda_al = a.lambda_al.unwrap_or(ctl.lambda_al);
    ctl.lambda_c = a.lambda_c.unwrap_or(ctl.lambda_c);
    ctl.sigma_al = a.sigma_al.unwrap_or(ctl.sigma_al);
    ctl.travel_period = a.travel_period.unwrap_or(ctl.travel_period);
    if let Some(t) = &a.tuner {
        ctl.tuner = t.parse()?;
    }
    if let Some(g) = &a.theta_grid {
        ctl.theta_grid = g.clone();
    }
    ctl.validate()?;
    Ok(ctl)
}

pub fn tune(a: &TuneArgs) -> Result<bool> {
    let ctl = controller_config(a)?;
    let baseline = load_baseline(a.run.baseline_ledger.as_deref())?;
    let mut diverged = false;
    for (cfg, dir) in expand(&a.run)? {
        ctl.grid_for(cfg.algo)?;
        create_dir(&dir)?;
        write(&dir.join(CONFIG_FILE), &(cfg.to_json() + "\n"))?;
        write(&dir.join(CONTROLLER_FILE), &(serde_json::to_string_pretty(&ctl)? + "\n"))?;
        let ds = Arc::new(cfg.load_dataset()?);
        let out = skewscout_run_on(&cfg, &ctl, ds)?;
        let events = json!({ "grid": out.grid, "events": out.events, "accepted": out.accepted });
        write(&dir.join(EVENTS_FILE), &(serde_json::to_string_pretty(&events)? + "\n"))?;
        diverged |= finish(&dir, &out.log, out.summary, baseline.as_ref(), a.run.config.quiet)?;
    }
    Ok(diverged)
}
