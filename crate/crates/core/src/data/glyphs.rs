use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dataset::{stratified_split, Dataset};
use crate::error::{Error, Result};

const STROKES: usize = 3;
const STROKE_WIDTH: f64 = 0.6;

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Random stroke images on a `side x side` grid. Each class has a template
/// of a few soft line segments; samples shift it by up to one pixel, scale
/// its contrast and add Gaussian pixel noise. Values are non-negative in
/// expectation, like scanned digits.
pub fn glyph_dataset(classes: usize, samples: usize, side: usize, noise: f64, val_fraction: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || samples < classes || side < 4 {
        return Err(Error::Config(format!(
            "glyph data needs classes >= 2, samples >= classes, side >= 4 (got {classes}, {samples}, {side})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hi = (side - 2) as f64;
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let strokes: Vec<((f64, f64), (f64, f64))> = (0..STROKES)
                .map(|_| ((rng.random_range(1.0..hi), rng.random_range(1.0..hi)), (rng.random_range(1.0..hi), rng.random_range(1.0..hi))))
                .collect();
            let mut t = vec![0.0; side * side];
            for y in 0..side {
                for x in 0..side {
                    let p = (x as f64, y as f64);
                    let d = strokes.iter().map(|&(a, b)| segment_distance(p, a, b)).fold(f64::INFINITY, f64::min);
                    t[y * side + x] = (-d * d / (2.0 * STROKE_WIDTH * STROKE_WIDTH)).exp();
                }
            }
            t
        })
        .collect();
    let mut features = Vec::with_capacity(samples * side * side);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        labels.push(c as u32);
        let dx = rng.random_range(-1i64..=1);
        let dy = rng.random_range(-1i64..=1);
        let contrast: f64 = rng.random_range(0.8..1.2);
        for y in 0..side as i64 {
            for x in 0..side as i64 {
                let (sx, sy) = (x - dx, y - dy);
                let base = if (0..side as i64).contains(&sx) && (0..side as i64).contains(&sy) {
                    templates[c][sy as usize * side + sx as usize]
                } else {
                    0.0
                };
                let n: f64 = StandardNormal.sample(&mut rng);
                features.push((contrast * base + noise * n) as f32);
            }
        }
    }
    let val = stratified_split(&labels, classes, val_fraction, seed ^ 0x61f5_0b5e);
    Dataset::new(features, vec![1, side, side], labels, classes, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let a = glyph_dataset(4, 40, 8, 0.3, 0.2, 9).unwrap();
        let b = glyph_dataset(4, 40, 8, 0.3, 0.2, 9).unwrap();
        assert_eq!(a.features(), b.features());
        assert_eq!(a.sample_shape(), &[1, 8, 8]);
        assert_eq!(a.val_indices().len(), 8);
    }

    #[test]
    fn noiseless_samples_stay_in_unit_range() {
        let d = glyph_dataset(3, 30, 8, 0.0, 0.1, 1).unwrap();
        assert!(d.features().iter().all(|&v| (0.0..=1.2).contains(&v)));
        assert!(d.features().iter().any(|&v| v > 0.5));
    }
}
