use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{self, Layer, NormCache, NormKind, RunningStats, RUNNING_MOMENTUM};
use super::params::{ParamLayout, ParamVector};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Single dense layer.
    LogReg,
    /// Two hidden dense layers with a norm slot after each.
    Mlp,
    /// conv(16) - norm - relu - pool - conv(32) - norm - relu - pool - dense.
    SmallConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub norm: NormKind,
    /// Per-sample input shape: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_hidden() -> usize {
    128
}

pub const CONV1_CHANNELS: usize = 16;
pub const CONV2_CHANNELS: usize = 32;

impl ModelSpec {
    pub fn new(arch: Arch, norm: NormKind, input_shape: Vec<usize>, num_classes: usize) -> Self {
        ModelSpec { arch, norm, input_shape, num_classes, hidden: default_hidden() }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Architecture id stored in checkpoints.
    pub fn id(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Ok(serde_json::from_str(id)?)
    }

    fn image_dims(&self) -> Result<(usize, usize, usize)> {
        match self.input_shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            &[d] => {
                let side = (d as f64).sqrt().round() as usize;
                if side * side == d {
                    Ok((1, side, side))
                } else {
                    Err(Error::Config(format!("smallconv needs a square input, got {d} features")))
                }
            }
            other => Err(Error::Config(format!("unsupported input shape {other:?}"))),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if let NormKind::Group { size } = self.norm {
            let channels: &[usize] = match self.arch {
                Arch::LogReg => &[],
                Arch::Mlp => &[self.hidden],
                Arch::SmallConv => &[CONV1_CHANNELS, CONV2_CHANNELS],
            };
            if size == 0 || channels.iter().any(|c| c % size != 0) {
                return Err(Error::Config(format!(
                    "group size {size} must divide channel counts {channels:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Minibatch statistics; batch-norm running statistics are updated.
    Train,
    /// Running statistics for batch norm.
    Eval,
}

#[derive(Debug, Clone)]
enum LayerCache<T> {
    Dense { input: Vec<T> },
    Conv { cols: Vec<T> },
    Norm(NormCache<T>),
    Relu { input: Vec<T> },
    Pool { argmax: Vec<u32>, input_len: usize },
}

/// Everything backward needs from a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache<T> {
    batch: usize,
    layers: Vec<LayerCache<T>>,
    probs: Vec<T>,
    /// Per norm slot, per-channel minibatch mean of the slot's input.
    pub norm_input_means: Vec<Vec<f64>>,
}

impl<T: Scalar> ActivationCache<T> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Hash of every piecewise-linear branch taken (ReLU signs, pooling
    /// winners). Two passes with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for layer in &self.layers {
            match layer {
                LayerCache::Relu { input } => input.iter().for_each(|v| mix((*v > T::zero()) as u64)),
                LayerCache::Pool { argmax, .. } => argmax.iter().for_each(|&i| mix(i as u64)),
                _ => {}
            }
        }
        h
    }

    /// Mean softmax cross-entropy of the cached batch.
    pub fn cross_entropy(&self, labels: &[u32]) -> f64 {
        let classes = self.probs.len() / self.batch.max(1);
        let mut total = 0.0;
        for (n, &y) in labels.iter().enumerate() {
            total -= self.probs[n * classes + y as usize].as_f64().max(1e-300).ln();
        }
        total / self.batch.max(1) as f64
    }
}

/// A network: architecture, flat parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    layers: Vec<Layer>,
    pub params: ParamVector<T>,
    pub running: Vec<RunningStats<T>>,
}

impl<T: Scalar> Model<T> {
    /// Builds the architecture with He-normal weights, zero biases, unit gamma.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = model.layers.clone();
        for layer in &layers {
            match *layer {
                Layer::Dense { inputs, outputs, weight, .. } => {
                    model.init_normal(weight, inputs * outputs, inputs, &mut rng)
                }
                Layer::Conv3x3 { cin, cout, weight, .. } => {
                    model.init_normal(weight, cin * 9 * cout, cin * 9, &mut rng)
                }
                Layer::Norm { channels, affine: Some((g, _)), .. } => {
                    model.params.as_mut_slice()[g..g + channels].iter_mut().for_each(|v| *v = T::one())
                }
                _ => {}
            }
        }
        Ok(model)
    }

    fn init_normal(&mut self, offset: usize, len: usize, fan_in: usize, rng: &mut ChaCha8Rng) {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        for v in &mut self.params.as_mut_slice()[offset..offset + len] {
            *v = T::from_f64_lossy(normal.sample(rng));
        }
    }

    /// Builds the architecture with every parameter set to zero.
    pub fn zeroed(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut b = ParamLayout::builder();
        let mut layers = Vec::new();
        let mut running = Vec::new();
        let norm = spec.norm;
        let classes = spec.num_classes;
        let push_norm = |b: &mut super::params::LayoutBuilder,
                         layers: &mut Vec<Layer>,
                         running: &mut Vec<RunningStats<T>>,
                         channels: usize,
                         spatial: usize| {
            let id = layers.len();
            let affine = norm
                .has_affine()
                .then(|| (b.push(id, "gamma", vec![channels]), b.push(id, "beta", vec![channels])));
            let slot = (norm == NormKind::Batch).then(|| {
                running.push(RunningStats::new(channels));
                running.len() - 1
            });
            layers.push(Layer::Norm { kind: norm, channels, spatial, affine, running: slot });
        };
        // A bias directly ahead of a normalizing layer is redundant with beta.
        let pre_norm_bias = norm == NormKind::None;
        let dense = |b: &mut super::params::LayoutBuilder,
                     layers: &mut Vec<Layer>,
                     i: usize,
                     o: usize,
                     with_bias: bool| {
            let id = layers.len();
            let weight = b.push(id, "weight", vec![o, i]);
            let bias = with_bias.then(|| b.push(id, "bias", vec![o]));
            layers.push(Layer::Dense { inputs: i, outputs: o, weight, bias });
        };
        match spec.arch {
            Arch::LogReg => dense(&mut b, &mut layers, spec.input_len(), classes, true),
            Arch::Mlp => {
                let h = spec.hidden;
                dense(&mut b, &mut layers, spec.input_len(), h, pre_norm_bias);
                push_norm(&mut b, &mut layers, &mut running, h, 1);
                layers.push(Layer::Relu);
                dense(&mut b, &mut layers, h, h, pre_norm_bias);
                push_norm(&mut b, &mut layers, &mut running, h, 1);
                layers.push(Layer::Relu);
                dense(&mut b, &mut layers, h, classes, true);
            }
            Arch::SmallConv => {
                let (c, h, w) = spec.image_dims()?;
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::Config(format!("smallconv input {h}x{w} must be divisible by 4")));
                }
                let conv = |b: &mut super::params::LayoutBuilder,
                                layers: &mut Vec<Layer>,
                                running: &mut Vec<RunningStats<T>>,
                                cin: usize,
                                cout: usize,
                                height: usize,
                                width: usize| {
                    let id = layers.len();
                    let weight = b.push(id, "weight", vec![cout, cin, 3, 3]);
                    let bias = pre_norm_bias.then(|| b.push(id, "bias", vec![cout]));
                    layers.push(Layer::Conv3x3 { cin, cout, height, width, weight, bias });
                    push_norm(b, layers, running, cout, height * width);
                    layers.push(Layer::Relu);
                    layers.push(Layer::MaxPool2 { channels: cout, height, width });
                };
                conv(&mut b, &mut layers, &mut running, c, CONV1_CHANNELS, h, w);
                conv(&mut b, &mut layers, &mut running, CONV1_CHANNELS, CONV2_CHANNELS, h / 2, w / 2);
                dense(&mut b, &mut layers, CONV2_CHANNELS * (h / 4) * (w / 4), classes, true);
            }
        }
        let layout = Arc::new(b.build());
        Ok(Model { spec, layers, params: ParamVector::zeros(layout), running })
    }

    /// A layerless model holding `len` free parameters; used to exercise
    /// synchronization arithmetic on hand-picked vectors.
    #[cfg(test)]
    pub(crate) fn flat(values: &[T]) -> Self {
        let mut b = ParamLayout::builder();
        b.push(0, "weight", vec![values.len()]);
        let layout = Arc::new(b.build());
        let spec = ModelSpec::new(Arch::LogReg, NormKind::None, vec![values.len()], 2);
        Model { spec, layers: Vec::new(), params: ParamVector::from_vec(layout, values.to_vec()).unwrap(), running: Vec::new() }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        self.params.layout()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<usize> {
        let n = batch.rows();
        if batch.row_len() != self.spec.input_len() || n == 0 {
            return Err(Error::Shape(format!(
                "batch {:?} does not match model input {:?}",
                batch.shape(),
                self.spec.input_shape
            )));
        }
        Ok(n)
    }

    /// Forward pass. Train mode normalizes with minibatch statistics and
    /// folds them into the running estimates; eval mode reads them.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ActivationCache<T>)> {
        let n = self.check_input(batch)?;
        let mut act = batch.data().to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut norm_means = Vec::new();
        let p = self.params.as_slice();
        let mom = T::from_f64_lossy(RUNNING_MOMENTUM);
        for layer in &self.layers {
            act = match *layer {
                Layer::Dense { inputs, outputs, weight, bias } => {
                    let out = layers::dense_forward(
                        &act,
                        n,
                        inputs,
                        outputs,
                        &p[weight..weight + inputs * outputs],
                        bias.map(|b| &p[b..b + outputs]),
                    );
                    caches.push(LayerCache::Dense { input: act });
                    out
                }
                Layer::Conv3x3 { cin, cout, height, width, weight, bias } => {
                    let (out, cols) = layers::conv_forward(
                        &act,
                        n,
                        cin,
                        cout,
                        height,
                        width,
                        &p[weight..weight + cout * cin * 9],
                        bias.map(|b| &p[b..b + cout]),
                    );
                    caches.push(LayerCache::Conv { cols });
                    out
                }
                Layer::Norm { kind, channels, spatial, affine, running } => {
                    let (gamma, beta) = match affine {
                        Some((g, b)) => (&p[g..g + channels], &p[b..b + channels]),
                        None => (&[][..], &[][..]),
                    };
                    match (mode, running) {
                        (Mode::Eval, Some(slot)) => {
                            caches.push(LayerCache::Norm(NormCache { xhat: Vec::new(), inv_std: Vec::new() }));
                            layers::batch_norm_eval(&act, n, channels, spatial, gamma, beta, &self.running[slot])
                        }
                        _ => {
                            if mode == Mode::Train {
                                norm_means.push(layers::channel_means(&act, n, channels, spatial));
                            }
                            let f = layers::norm_forward_train(&act, n, channels, spatial, kind, gamma, beta);
                            if let (Mode::Train, Some(slot), Some((bm, bv))) = (mode, running, f.batch_stats) {
                                let rs = &mut self.running[slot];
                                for c in 0..channels {
                                    rs.mean[c] = mom * rs.mean[c] + (T::one() - mom) * bm[c];
                                    rs.var[c] = mom * rs.var[c] + (T::one() - mom) * bv[c];
                                }
                            }
                            caches.push(LayerCache::Norm(f.cache));
                            f.out
                        }
                    }
                }
                Layer::Relu => {
                    let out = layers::relu_forward(&act);
                    caches.push(LayerCache::Relu { input: act });
                    out
                }
                Layer::MaxPool2 { channels, height, width } => {
                    let (out, argmax) = layers::pool_forward(&act, n, channels, height, width);
                    caches.push(LayerCache::Pool { argmax, input_len: act.len() });
                    out
                }
            };
        }
        if !act.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("forward activations".into()));
        }
        let logits = Tensor::new(vec![n, self.spec.num_classes], act)?;
        let probs = softmax_rows(&logits);
        Ok((logits, ActivationCache { batch: n, layers: caches, probs, norm_input_means: norm_means }))
    }

    /// Eval-mode logits without keeping backward state.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut scratch = self.clone();
        // Eval mode never mutates running statistics.
        scratch.forward(batch, Mode::Eval).map(|(logits, _)| logits)
    }

    /// Gradient of mean softmax cross-entropy plus `weight_decay * ||w||^2 / 2`
    /// over decaying segments.
    pub fn backward(&self, cache: &ActivationCache<T>, labels: &[u32], weight_decay: f64) -> Result<ParamVector<T>> {
        let n = cache.batch;
        let classes = self.spec.num_classes;
        if labels.len() != n || cache.layers.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "cache holds {n} samples, got {} labels",
                labels.len()
            )));
        }
        let inv_n = T::one() / T::of_usize(n);
        let mut delta = cache.probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            if y as usize >= classes {
                return Err(Error::Shape(format!("label {y} out of range for {classes} classes")));
            }
            delta[i * classes + y as usize] = delta[i * classes + y as usize] - T::one();
        }
        delta.iter_mut().for_each(|v| *v = *v * inv_n);

        let mut grad = ParamVector::zeros(self.layout().clone());
        let p = self.params.as_slice();
        let g = grad.as_mut_slice();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let need_dx = idx > 0;
            delta = match (layer, &cache.layers[idx]) {
                (&Layer::Dense { inputs, outputs, weight, bias }, LayerCache::Dense { input }) => {
                    let (gw, gb) = split_opt(g, weight, inputs * outputs, bias, outputs);
                    layers::dense_backward(input, &delta, n, inputs, outputs, &p[weight..weight + inputs * outputs], gw, gb)
                }
                (&Layer::Conv3x3 { cin, cout, height, width, weight, bias }, LayerCache::Conv { cols }) => {
                    let (gw, gb) = split_opt(g, weight, cout * cin * 9, bias, cout);
                    layers::conv_backward(
                        cols,
                        &delta,
                        n,
                        cin,
                        cout,
                        height,
                        width,
                        &p[weight..weight + cout * cin * 9],
                        gw,
                        gb,
                        need_dx,
                    )
                }
                (&Layer::Norm { kind, channels, spatial, affine, .. }, LayerCache::Norm(nc)) => {
                    if kind != NormKind::None && nc.xhat.is_empty() {
                        return Err(Error::Shape("backward needs a train-mode cache".into()));
                    }
                    match affine {
                        Some((go, bo)) => {
                            let (gg, gbeta) = split_two(g, go, channels, bo, channels);
                            layers::norm_backward(&delta, nc, n, channels, spatial, kind, &p[go..go + channels], gg, gbeta)
                        }
                        None => delta,
                    }
                }
                (Layer::Relu, LayerCache::Relu { input }) => layers::relu_backward(input, &delta),
                (Layer::MaxPool2 { .. }, LayerCache::Pool { argmax, input_len }) => {
                    layers::pool_backward(&delta, argmax, *input_len)
                }
                _ => return Err(Error::Shape("activation cache does not match model".into())),
            };
        }
        if weight_decay != 0.0 {
            let wd = T::from_f64_lossy(weight_decay);
            for seg in self.layout().segments().iter().filter(|s| s.decays()) {
                for j in seg.range() {
                    g[j] = g[j] + wd * p[j];
                }
            }
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(grad)
    }

    /// Train-mode objective value (cross-entropy plus decay), leaving running
    /// statistics untouched.
    pub fn loss(&self, batch: &Tensor<T>, labels: &[u32], weight_decay: f64) -> Result<f64> {
        self.loss_and_signature(batch, labels, weight_decay).map(|(l, _)| l)
    }

    /// [`Model::loss`] plus the pass's [`ActivationCache::kink_signature`].
    pub fn loss_and_signature(&self, batch: &Tensor<T>, labels: &[u32], weight_decay: f64) -> Result<(f64, u64)> {
        let mut scratch = self.clone();
        let (_, cache) = scratch.forward(batch, Mode::Train)?;
        let mut loss = cache.cross_entropy(labels);
        if weight_decay != 0.0 {
            let p = self.params.as_slice();
            let sq: f64 = self
                .layout()
                .segments()
                .iter()
                .filter(|s| s.decays())
                .flat_map(|s| p[s.range()].iter())
                .map(|v| v.as_f64() * v.as_f64())
                .sum();
            loss += 0.5 * weight_decay * sq;
        }
        Ok((loss, cache.kink_signature()))
    }

    /// Copies parameters and running statistics into a model of another
    /// precision with the same spec.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect::<Vec<U>>();
        Model {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            params: ParamVector::from_vec(self.layout().clone(), conv(self.params.as_slice()))
                .expect("same layout"),
            running: self
                .running
                .iter()
                .map(|r| RunningStats { mean: conv(&r.mean), var: conv(&r.var) })
                .collect(),
        }
    }
}

fn split_opt<T>(g: &mut [T], a: usize, alen: usize, b: Option<usize>, blen: usize) -> (&mut [T], Option<&mut [T]>) {
    match b {
        Some(b) => {
            let (x, y) = split_two(g, a, alen, b, blen);
            (x, Some(y))
        }
        None => (&mut g[a..a + alen], None),
    }
}

fn split_two<T>(g: &mut [T], a: usize, alen: usize, b: usize, blen: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a + alen <= b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a..a + alen], &mut hi[..blen])
}

pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.data().len());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    out
}
