//! IDX (MNIST-style) and CSV readers.
//!
//! IDX headers are big-endian: a magic word whose low byte is the number of
//! dimensions and whose third byte is the element type (0x08 = u8), then one
//! u32 per dimension.

use std::path::Path;

use super::dataset::{stratified_split, Dataset};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    /// Declared class count; labels at or above it are rejected. Inferred as
    /// `max label + 1` when absent.
    pub num_classes: Option<usize>,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub standardize: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { num_classes: None, val_fraction: 0.1, split_seed: 0, standardize: false }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::UnexpectedEof(what.to_string()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file into `(pixels scaled to [0,1], [rows, cols])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<f32>, usize, Vec<usize>)> {
    let magic = be_u32(bytes, 0, "IDX images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("bad IDX images magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "IDX images")? as usize;
    let rows = be_u32(bytes, 8, "IDX images")? as usize;
    let cols = be_u32(bytes, 12, "IDX images")? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(Error::UnexpectedEof("IDX images".into()));
    }
    Ok((body[..need].iter().map(|&p| p as f32 / 255.0).collect(), n, vec![rows, cols]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    let magic = be_u32(bytes, 0, "IDX labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!("bad IDX labels magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "IDX labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::UnexpectedEof("IDX labels".into()));
    }
    Ok(body[..n].iter().map(|&b| b as u32).collect())
}

fn finish(
    features: Vec<f32>,
    shape: Vec<usize>,
    labels: Vec<u32>,
    opts: &LoadOptions,
) -> Result<Dataset> {
    let inferred = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let classes = opts.num_classes.unwrap_or(inferred);
    if inferred > classes {
        return Err(Error::Format(format!("label {} exceeds declared class count {classes}", inferred - 1)));
    }
    let val = stratified_split(&labels, classes, opts.val_fraction, opts.split_seed);
    let mut ds = Dataset::new(features, shape, labels, classes, val)?;
    if opts.standardize {
        ds.standardize();
    }
    Ok(ds)
}

/// Loads an IDX image/label pair as single-channel `[1, rows, cols]` samples.
pub fn load_idx(images: &Path, labels: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let (pixels, n, dims) = parse_idx_images(&read_file(images)?)?;
    let labels = parse_idx_labels(&read_file(labels)?)?;
    if labels.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
    }
    finish(pixels, vec![1, dims[0], dims[1]], labels, opts)
}

/// Encodes u8 images as an IDX file.
pub fn encode_idx_images(pixels: &[u8], n: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads a CSV with header `label,f0,f1,...`.
pub fn load_csv(path: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(Error::Format("CSV header must be `label,f0,f1,...`".into()));
    }
    let d = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let parse_err = |field: &str| Error::Format(format!("row {}: cannot parse `{field}`", line + 2));
        let y = rec.get(0).unwrap_or("");
        labels.push(y.trim().parse::<u32>().map_err(|_| parse_err(y))?);
        for f in rec.iter().skip(1) {
            features.push(f.trim().parse::<f32>().map_err(|_| parse_err(f))?);
        }
    }
    finish(features, vec![d], labels, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn handcrafted_pair_loads() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..16).map(|i| (i * 17) as u8).collect();
        let img = write(dir.path(), "img", &encode_idx_images(&pixels, 4, 2, 2));
        let lab = write(dir.path(), "lab", &encode_idx_labels(&[0, 1, 2, 1]));
        let opts = LoadOptions { val_fraction: 0.0, ..Default::default() };
        let ds = load_idx(&img, &lab, &opts).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.sample_shape(), &[1, 2, 2]);
        assert_eq!(ds.sample(3)[3], 1.0);
        assert_eq!(ds.sample(0)[0], 0.0);
    }

    #[test]
    fn truncated_file_reports_eof() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = encode_idx_images(&[0; 16], 4, 2, 2);
        bytes.truncate(20);
        let img = write(dir.path(), "img", &bytes);
        let lab = write(dir.path(), "lab", &encode_idx_labels(&[0, 1, 0, 1]));
        let err = load_idx(&img, &lab, &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("unexpected EOF"), "{err}");
    }

    #[test]
    fn label_beyond_declared_classes_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &encode_idx_images(&[0; 8], 2, 2, 2));
        let lab = write(dir.path(), "lab", &encode_idx_labels(&[0, 5]));
        let opts = LoadOptions { num_classes: Some(3), ..Default::default() };
        assert!(load_idx(&img, &lab, &opts).is_err());
    }

    #[test]
    fn bad_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "img", &encode_idx_labels(&[0, 1]));
        let lab = write(dir.path(), "lab", &encode_idx_labels(&[0, 1]));
        assert!(matches!(load_idx(&img, &lab, &LoadOptions::default()), Err(Error::Format(_))));
        let img = write(dir.path(), "img2", &encode_idx_images(&[0; 12], 3, 2, 2));
        assert!(load_idx(&img, &lab, &LoadOptions::default()).is_err());
    }

    #[test]
    fn csv_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", b"label,f0,f1\n0,1.5,2\n1,0,-1\n");
        let ds = load_csv(&p, &LoadOptions { val_fraction: 0.0, ..Default::default() }).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample(1), &[0.0, -1.0]);
        let bad = write(dir.path(), "e.csv", b"y,f0\n0,1\n");
        assert!(load_csv(&bad, &LoadOptions::default()).is_err());
    }
}
