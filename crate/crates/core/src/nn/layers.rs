//! Layer kernels over batched, per-sample contiguous activations.
//!
//! Activations are stored as `[batch, channels, spatial]` flattened; dense
//! layers see `spatial == 1`. Every kernel accumulates in a fixed sequential
//! order so repeated runs are bit-identical.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub const NORM_EPS: f64 = 1e-5;
pub const RUNNING_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NormKind {
    None,
    Batch,
    /// Per-sample statistics over groups of `size` adjacent channels.
    Group { size: usize },
}

impl NormKind {
    pub fn has_affine(self) -> bool {
        !matches!(self, NormKind::None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense { inputs: usize, outputs: usize, weight: usize, bias: Option<usize> },
    /// 3x3 convolution, stride 1, zero padding 1.
    Conv3x3 { cin: usize, cout: usize, height: usize, width: usize, weight: usize, bias: Option<usize> },
    Norm {
        kind: NormKind,
        channels: usize,
        spatial: usize,
        /// Offsets of gamma and beta when `kind` has an affine transform.
        affine: Option<(usize, usize)>,
        /// Index into the model's running statistics (batch kind only).
        running: Option<usize>,
    },
    Relu,
    /// 2x2 max pooling, stride 2.
    MaxPool2 { channels: usize, height: usize, width: usize },
}

impl Layer {
    pub fn output_len(&self, input_len: usize) -> usize {
        match *self {
            Layer::Dense { outputs, .. } => outputs,
            Layer::Conv3x3 { cout, height, width, .. } => cout * height * width,
            Layer::MaxPool2 { channels, height, width } => channels * (height / 2) * (width / 2),
            Layer::Norm { .. } | Layer::Relu => input_len,
        }
    }
}

pub fn dense_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    inputs: usize,
    outputs: usize,
    w: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * outputs];
    for n in 0..batch {
        let xr = &x[n * inputs..(n + 1) * inputs];
        let yr = &mut out[n * outputs..(n + 1) * outputs];
        for o in 0..outputs {
            let wr = &w[o * inputs..(o + 1) * inputs];
            let mut acc = b.map_or(T::zero(), |b| b[o]);
            for i in 0..inputs {
                acc = acc + wr[i] * xr[i];
            }
            yr[o] = acc;
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    batch: usize,
    inputs: usize,
    outputs: usize,
    w: &[T],
    dw: &mut [T],
    mut db: Option<&mut [T]>,
) -> Vec<T> {
    let mut dx = vec![T::zero(); batch * inputs];
    for n in 0..batch {
        let xr = &x[n * inputs..(n + 1) * inputs];
        let dyr = &dy[n * outputs..(n + 1) * outputs];
        let dxr = &mut dx[n * inputs..(n + 1) * inputs];
        for o in 0..outputs {
            let g = dyr[o];
            if let Some(db) = db.as_deref_mut() {
                db[o] = db[o] + g;
            }
            let wr = &w[o * inputs..(o + 1) * inputs];
            let dwr = &mut dw[o * inputs..(o + 1) * inputs];
            for i in 0..inputs {
                dwr[i] = dwr[i] + g * xr[i];
                dxr[i] = dxr[i] + g * wr[i];
            }
        }
    }
    dx
}

fn im2col<T: Scalar>(x: &[T], cin: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        row[y * w + xx] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], cin: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let idx = c * hw + sy as usize * w + sx as usize;
                        dx[idx] = dx[idx] + row[y * w + xx];
                    }
                }
            }
        }
    }
}

/// Returns `(output, im2col buffers)`; the buffers are kept for backward.
pub fn conv_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let k = cin * 9;
    let mut cols = vec![T::zero(); batch * k * hw];
    let mut out = vec![T::zero(); batch * cout * hw];
    for n in 0..batch {
        let col = &mut cols[n * k * hw..(n + 1) * k * hw];
        im2col(&x[n * cin * hw..(n + 1) * cin * hw], cin, h, w, col);
        let y = &mut out[n * cout * hw..(n + 1) * cout * hw];
        for co in 0..cout {
            let yr = &mut y[co * hw..(co + 1) * hw];
            let b0 = bias.map_or(T::zero(), |b| b[co]);
            yr.iter_mut().for_each(|v| *v = b0);
            let wr = &weight[co * k..(co + 1) * k];
            for (kk, &wv) in wr.iter().enumerate() {
                let cr = &col[kk * hw..(kk + 1) * hw];
                for p in 0..hw {
                    yr[p] = yr[p] + wv * cr[p];
                }
            }
        }
    }
    (out, cols)
}

#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    cols: &[T],
    dy: &[T],
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    weight: &[T],
    dw: &mut [T],
    mut db: Option<&mut [T]>,
    need_dx: bool,
) -> Vec<T> {
    let hw = h * w;
    let k = cin * 9;
    let mut dx = vec![T::zero(); if need_dx { batch * cin * hw } else { 0 }];
    let mut dcols = vec![T::zero(); if need_dx { k * hw } else { 0 }];
    for n in 0..batch {
        let col = &cols[n * k * hw..(n + 1) * k * hw];
        let dyn_ = &dy[n * cout * hw..(n + 1) * cout * hw];
        if need_dx {
            dcols.iter_mut().for_each(|v| *v = T::zero());
        }
        for co in 0..cout {
            let dyr = &dyn_[co * hw..(co + 1) * hw];
            if let Some(db) = db.as_deref_mut() {
                db[co] = db[co] + dyr.iter().fold(T::zero(), |a, &v| a + v);
            }
            let wr = &weight[co * k..(co + 1) * k];
            let dwr = &mut dw[co * k..(co + 1) * k];
            for kk in 0..k {
                let cr = &col[kk * hw..(kk + 1) * hw];
                let mut acc = T::zero();
                for p in 0..hw {
                    acc = acc + dyr[p] * cr[p];
                }
                dwr[kk] = dwr[kk] + acc;
                if need_dx {
                    let wv = wr[kk];
                    let dc = &mut dcols[kk * hw..(kk + 1) * hw];
                    for p in 0..hw {
                        dc[p] = dc[p] + wv * dyr[p];
                    }
                }
            }
        }
        if need_dx {
            col2im_add(&dcols, cin, h, w, &mut dx[n * cin * hw..(n + 1) * cin * hw]);
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    /// One entry per statistics group: per channel (batch) or per
    /// sample-and-group (group). Empty for `NormKind::None`.
    pub inv_std: Vec<T>,
}

/// Per-channel mean of `x` over batch and spatial positions.
pub fn channel_means<T: Scalar>(x: &[T], batch: usize, channels: usize, spatial: usize) -> Vec<f64> {
    let mut m = vec![0.0f64; channels];
    for n in 0..batch {
        for (c, mc) in m.iter_mut().enumerate() {
            let base = (n * channels + c) * spatial;
            *mc += x[base..base + spatial].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    let count = (batch * spatial).max(1) as f64;
    m.iter_mut().for_each(|v| *v /= count);
    m
}

/// Visits the flat indices belonging to one statistics group.
fn for_group(
    kind: NormKind,
    group: usize,
    batch: usize,
    channels: usize,
    spatial: usize,
    mut f: impl FnMut(usize, usize),
) {
    match kind {
        NormKind::Batch => {
            let c = group;
            for n in 0..batch {
                let base = (n * channels + c) * spatial;
                for i in base..base + spatial {
                    f(i, c);
                }
            }
        }
        NormKind::Group { size } => {
            let groups = channels / size;
            let n = group / groups;
            let g = group % groups;
            for c in g * size..(g + 1) * size {
                let base = (n * channels + c) * spatial;
                for i in base..base + spatial {
                    f(i, c);
                }
            }
        }
        NormKind::None => {}
    }
}

fn group_count(kind: NormKind, batch: usize, channels: usize) -> usize {
    match kind {
        NormKind::Batch => channels,
        NormKind::Group { size } => batch * (channels / size),
        NormKind::None => 0,
    }
}

pub struct NormForward<T> {
    pub out: Vec<T>,
    pub cache: NormCache<T>,
    /// Per-channel batch mean and (biased) variance, batch kind only.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

#[allow(clippy::too_many_arguments)]
pub fn norm_forward_train<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    kind: NormKind,
    gamma: &[T],
    beta: &[T],
) -> NormForward<T> {
    if kind == NormKind::None {
        return NormForward {
            out: x.to_vec(),
            cache: NormCache { xhat: Vec::new(), inv_std: Vec::new() },
            batch_stats: None,
        };
    }
    let eps = T::from_f64_lossy(NORM_EPS);
    let groups = group_count(kind, batch, channels);
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); groups];
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for g in 0..groups {
        let mut sum = T::zero();
        let mut count = 0usize;
        for_group(kind, g, batch, channels, spatial, |i, _| {
            sum = sum + x[i];
            count += 1;
        });
        let cnt = T::of_usize(count);
        let mean = sum / cnt;
        let mut sq = T::zero();
        for_group(kind, g, batch, channels, spatial, |i, _| {
            let d = x[i] - mean;
            sq = sq + d * d;
        });
        let var = sq / cnt;
        let is = T::one() / (var + eps).sqrt();
        inv_std[g] = is;
        for_group(kind, g, batch, channels, spatial, |i, c| {
            let xh = (x[i] - mean) * is;
            xhat[i] = xh;
            out[i] = gamma[c] * xh + beta[c];
        });
        if kind == NormKind::Batch {
            means.push(mean);
            vars.push(var);
        }
    }
    NormForward {
        out,
        cache: NormCache { xhat, inv_std },
        batch_stats: (kind == NormKind::Batch).then_some((means, vars)),
    }
}

/// Eval-mode batch normalization with running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_eval<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    gamma: &[T],
    beta: &[T],
    stats: &RunningStats<T>,
) -> Vec<T> {
    let eps = T::from_f64_lossy(NORM_EPS);
    let mut out = vec![T::zero(); x.len()];
    for c in 0..channels {
        let is = T::one() / (stats.var[c] + eps).sqrt();
        let m = stats.mean[c];
        for n in 0..batch {
            let base = (n * channels + c) * spatial;
            for i in base..base + spatial {
                out[i] = gamma[c] * (x[i] - m) * is + beta[c];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn norm_backward<T: Scalar>(
    dy: &[T],
    cache: &NormCache<T>,
    batch: usize,
    channels: usize,
    spatial: usize,
    kind: NormKind,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    if kind == NormKind::None {
        return dy.to_vec();
    }
    let mut dx = vec![T::zero(); dy.len()];
    // Affine gradients accumulate per channel in flat index order.
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * spatial;
            for i in base..base + spatial {
                dgamma[c] = dgamma[c] + dy[i] * cache.xhat[i];
                dbeta[c] = dbeta[c] + dy[i];
            }
        }
    }
    let groups = group_count(kind, batch, channels);
    for g in 0..groups {
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        let mut count = 0usize;
        for_group(kind, g, batch, channels, spatial, |i, c| {
            let d = dy[i] * gamma[c];
            sum_d = sum_d + d;
            sum_dx = sum_dx + d * cache.xhat[i];
            count += 1;
        });
        let cnt = T::of_usize(count);
        let scale = cache.inv_std[g] / cnt;
        for_group(kind, g, batch, channels, spatial, |i, c| {
            let d = dy[i] * gamma[c];
            dx[i] = scale * (cnt * d - sum_d - cache.xhat[i] * sum_dx);
        });
    }
    dx
}

pub fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Gradient through ReLU given its input.
pub fn relu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter().zip(dy).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect()
}

/// Returns pooled output and the flat input index of each maximum.
pub fn pool_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(batch * channels * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + (2 * y) * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best as u32);
                }
            }
        }
    }
    (out, arg)
}

pub fn pool_backward<T: Scalar>(dy: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i as usize] = dx[i as usize] + g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_norm_output_is_standardized() {
        // Two channels with mean 3 and variance 4 over batch x spatial.
        let batch = 4;
        let spatial = 2;
        let vals = [1.0, 5.0, 1.0, 5.0, 1.0, 5.0, 1.0, 5.0];
        let mut x = vec![0.0f64; batch * 2 * spatial];
        for n in 0..batch {
            for c in 0..2 {
                for s in 0..spatial {
                    x[(n * 2 + c) * spatial + s] = vals[n * spatial + s];
                }
            }
        }
        let out = norm_forward_train(&x, batch, 2, spatial, NormKind::Batch, &[1.0, 1.0], &[0.0, 0.0]);
        let means = channel_means(&out.out, batch, 2, spatial);
        let (bm, bv) = out.batch_stats.unwrap();
        assert_eq!(bm, vec![3.0, 3.0]);
        assert_eq!(bv, vec![4.0, 4.0]);
        for c in 0..2 {
            assert!(means[c].abs() < 1e-5);
            let mut var = 0.0;
            for n in 0..batch {
                for s in 0..spatial {
                    var += out.out[(n * 2 + c) * spatial + s].powi(2);
                }
            }
            var /= (batch * spatial) as f64;
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn pool_picks_maximum() {
        let x = [1.0f32, 4.0, 3.0, 2.0];
        let (out, arg) = pool_forward(&x, 1, 1, 2, 2);
        assert_eq!(out, vec![4.0]);
        assert_eq!(arg, vec![1]);
        assert_eq!(pool_backward(&[2.0f32], &arg, 4), vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let (out, _) = conv_forward(&x, 1, 1, 1, 3, 3, &w, Some(&[0.5]));
        let expect: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
        assert_eq!(out, expect);
    }
}
