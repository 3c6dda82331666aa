use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use skewsim::metrics::comm_savings;
use skewsim::sim::Summary;

use crate::run::SUMMARY_FILE;
use crate::ReportArgs;

pub const HEADER: [&str; 10] =
    ["tag", "algo", "k", "skew_fraction", "final_val_acc", "acc_delta", "comm_savings", "total_values_sent", "diverged", "model"];

fn summary_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(SUMMARY_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load(p: &Path) -> Result<(PathBuf, Summary)> {
    let path = summary_path(p);
    let s = Summary::load(&path).with_context(|| format!("reading summary {}", path.display()))?;
    Ok((path, s))
}

/// Tag of a run: its own, else the directory holding the summary.
fn label(path: &Path, s: &Summary) -> String {
    s.tag.clone().unwrap_or_else(|| {
        let stem = if path.file_name().is_some_and(|f| f == SUMMARY_FILE) { path.parent() } else { Some(path) };
        stem.and_then(|p| p.file_stem()).map_or_else(|| path.display().to_string(), |f| f.to_string_lossy().into_owned())
    })
}

/// Accuracy difference in points, always signed (`-3.1%`, `+0.4%`).
pub fn format_delta(acc: f64, baseline: f64) -> String {
    let d = (acc - baseline) * 100.0;
    // Keep rounding from printing "-0.0%".
    let d = if d.abs() < 0.05 { 0.0 } else { d };
    format!("{d:+.1}%")
}

pub fn rows(inputs: &[(PathBuf, Summary)], baseline: &(PathBuf, Summary)) -> (Vec<Vec<String>>, Vec<String>) {
    let (base_path, base) = baseline;
    let mut warnings = Vec::new();
    let rows = inputs
        .iter()
        .map(|(path, s)| {
            let is_base = path == base_path;
            let model = if s.model_id == base.model_id {
                s.model_id.clone()
            } else {
                warnings.push(format!("{}: model {} differs from baseline model {}", path.display(), s.model_id, base.model_id));
                format!("{} MISMATCH", s.model_id)
            };
            let (delta, savings) = if is_base {
                (String::new(), String::new())
            } else {
                (format_delta(s.final_val_acc, base.final_val_acc), format!("{:.2}x", comm_savings(s.total_values_sent, base.total_values_sent)))
            };
            vec![
                label(path, s),
                s.algo.clone(),
                s.k.to_string(),
                s.skew_fraction.to_string(),
                format!("{:.4}", s.final_val_acc),
                delta,
                savings,
                s.total_values_sent.to_string(),
                s.diverged.to_string(),
                model,
            ]
        })
        .collect();
    (rows, warnings)
}

pub fn aligned(rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = HEADER.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(HEADER.to_vec());
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

pub fn to_csv(rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let inputs: Vec<(PathBuf, Summary)> = a.inputs.iter().map(|p| load(p)).collect::<Result<_>>()?;
    let baseline = match &a.baseline {
        Some(p) => load(p)?,
        None => inputs[0].clone(),
    };
    let (rows, warnings) = rows(&inputs, &baseline);
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let text = aligned(&rows);
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("report.txt"), &text).with_context(|| format!("writing {}", dir.display()))?;
        fs::write(dir.join("report.csv"), to_csv(&rows)?).with_context(|| format!("writing {}", dir.display()))?;
    }
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deltas_are_signed_points() {
        assert_eq!(format_delta(0.62, 0.93), "-31.0%");
        assert_eq!(format_delta(0.93, 0.93), "+0.0%");
        assert_eq!(format_delta(0.9301, 0.93), "+0.0%");
        assert_eq!(format_delta(0.95, 0.93), "+2.0%");
    }
}
