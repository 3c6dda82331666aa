use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Immutable labelled sample store with a train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    sample_shape: Vec<usize>,
    labels: Vec<u32>,
    num_classes: usize,
    train: Vec<usize>,
    val: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset; `val` indices are held out and `train` is the rest.
    pub fn new(
        features: Vec<f32>,
        sample_shape: Vec<usize>,
        labels: Vec<u32>,
        num_classes: usize,
        val: Vec<usize>,
    ) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if d == 0 || features.len() != d * labels.len() {
            return Err(Error::Shape(format!(
                "{} feature values for {} samples of shape {sample_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= num_classes) {
            return Err(Error::Format(format!("label {bad} out of range for {num_classes} classes")));
        }
        let mut is_val = vec![false; labels.len()];
        for &i in &val {
            if i >= labels.len() || std::mem::replace(&mut is_val[i], true) {
                return Err(Error::Format(format!("invalid or repeated validation index {i}")));
            }
        }
        let train = (0..labels.len()).filter(|&i| !is_val[i]).collect();
        Ok(Dataset { features, sample_shape, labels, num_classes, train, val })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn feature_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let d = self.feature_len();
        &self.features[i * d..(i + 1) * d]
    }

    /// Replaces the sample shape (e.g. 64 features viewed as 1x8x8).
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.feature_len() {
            return Err(Error::Shape(format!("cannot view {:?} as {shape:?}", self.sample_shape)));
        }
        self.sample_shape = shape;
        Ok(self)
    }

    /// Gathers samples into a `[n, ...sample_shape]` tensor and their labels.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<u32>) {
        let d = self.feature_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("consistent batch"), labels)
    }

    /// Standardizes every feature with the train split's global mean and
    /// standard deviation.
    pub fn standardize(&mut self) {
        let d = self.feature_len();
        let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
        for &i in &self.train {
            for &v in &self.features[i * d..(i + 1) * d] {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
                n += 1;
            }
        }
        if n == 0 {
            return;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).max(1e-12).sqrt();
        for v in &mut self.features {
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }
}

/// Per class, holds out `round(fraction * count)` randomly chosen samples.
pub fn stratified_split(labels: &[u32], num_classes: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y as usize].push(i);
    }
    let mut val = Vec::new();
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
        let k = (fraction * idx.len() as f64).round() as usize;
        val.extend_from_slice(&idx[..k]);
    }
    val.sort_unstable();
    val
}

/// Gaussian blobs with unit covariance. Class means sit on a randomly
/// rotated regular simplex, every pair exactly `separation` apart (when
/// `dim >= classes`). Labels cycle through the classes; 10% of each class is
/// held out for validation.
pub fn synth_dataset(classes: usize, samples: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || samples < classes || dim == 0 {
        return Err(Error::Config(format!(
            "synthetic data needs classes >= 2, samples >= classes, dim >= 1 (got {classes}, {samples}, {dim})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Gram-Schmidt on Gaussian vectors; beyond `dim` directions fall back to
    // random unit vectors.
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if c < dim {
            for d in &dirs {
                let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        dirs.push(v);
    }
    let scale = separation / std::f64::consts::SQRT_2;
    let mut features = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        labels.push(c as u32);
        for d in &dirs[c] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push((scale * d + noise) as f32);
        }
    }
    let val = stratified_split(&labels, classes, 0.1, seed.wrapping_add(SPLIT_SEED_OFFSET));
    Dataset::new(features, vec![dim], labels, classes, val)
}

const SPLIT_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_stratified() {
        let a = synth_dataset(10, 1000, 16, 6.0, 3).unwrap();
        let b = synth_dataset(10, 1000, 16, 6.0, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.val_indices().len(), 100);
        let mut per_class = [0; 10];
        for &i in a.val_indices() {
            per_class[a.labels()[i] as usize] += 1;
        }
        assert!(per_class.iter().all(|&c| c == 10));
        assert_ne!(a, synth_dataset(10, 1000, 16, 6.0, 4).unwrap());
    }

    #[test]
    fn class_means_are_separated() {
        let ds = synth_dataset(3, 30_000, 8, 6.0, 1).unwrap();
        let mut means = vec![vec![0.0f64; 8]; 3];
        for i in 0..ds.len() {
            let c = ds.labels()[i] as usize;
            for (m, &v) in means[c].iter_mut().zip(ds.sample(i)) {
                *m += v as f64 / 10_000.0;
            }
        }
        for a in 0..3 {
            for b in a + 1..3 {
                let d: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!((d - 6.0).abs() < 0.15, "distance {d}");
            }
        }
    }

    #[test]
    fn rejects_bad_labels_and_shapes() {
        assert!(Dataset::new(vec![0.0; 4], vec![2], vec![0, 2], 2, vec![]).is_err());
        assert!(Dataset::new(vec![0.0; 3], vec![2], vec![0, 1], 2, vec![]).is_err());
    }
}
