//! Minimal convolutional networks with reverse-mode gradients.
//!
//! The layer vocabulary covers exactly what the classifiers need: strided
//! convolutions with Keras-style `same` zero padding, inverted dropout,
//! layer normalization over the channel axis, ReLU and Swish, valid-padding
//! max pooling, global average pooling, dense layers, and a softmax +
//! cross-entropy head trained with Adam.
//!
//! Activations flow through the network as `(batch, channels, height, width)`
//! tensors; global average pooling collapses the spatial axes to `1 x 1` and
//! dense layers keep that shape, so every layer sees the same tensor rank.
//!
//! Dropout masks are the only randomness at run time and are drawn from an
//! explicit seed per forward call, which keeps training reproducible and lets
//! finite-difference tests pin the masks.

mod checkpoint;
mod train;

pub use checkpoint::{load_network, save_network};
pub use train::{evaluate_batches, train, train_models, EpochStats, TrainConfig, TrainHistory};

use crate::error::{Error, Result};
use crate::float::{fl, Float};
use crate::seed;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Swish,
}

/// One layer of a network description.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Square convolution with `same` zero padding (output spatial size is
    /// `ceil(input / stride)`, extra padding goes to the bottom and right).
    Conv { kernel: usize, channels: usize, stride: usize },
    /// Inverted dropout: surviving activations are scaled by `1/(1-rate)`
    /// during training, inference is the identity.
    Dropout { rate: f64 },
    /// Layer normalization over the channel axis at every spatial position,
    /// with learned per-channel scale and shift. Epsilon is 1e-3.
    LayerNorm,
    Act(Activation),
    /// Valid-padding max pooling.
    MaxPool { size: usize, stride: usize },
    /// Collapses the spatial axes by averaging; the network head requires
    /// exactly one of these.
    GlobalAvgPool,
    /// Fully connected layer (only after global average pooling).
    Dense { units: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    CrossEntropy,
}

/// Complete description of a classifier network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// Softmax classes produced by the implicit output dense layer.
    pub outputs: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub loss: LossKind,
}

impl NetworkSpec {
    /// Device-state classifier tuned on noiseless data: three 5x5 stride-2
    /// conv blocks (conv, dropout, layer norm, ReLU) with 23/7/18 channels.
    pub fn noiseless_dse() -> NetworkSpec {
        let mut layers = Vec::new();
        for (ch, rate) in [(23usize, 0.12), (7, 0.28), (18, 0.30)] {
            layers.push(LayerSpec::Conv { kernel: 5, channels: ch, stride: 2 });
            layers.push(LayerSpec::Dropout { rate });
            layers.push(LayerSpec::LayerNorm);
            layers.push(LayerSpec::Act(Activation::Relu));
        }
        layers.push(LayerSpec::GlobalAvgPool);
        NetworkSpec {
            name: "dse-noiseless".into(),
            layers,
            outputs: crate::sim::STATE_COUNT,
            optimizer: OptimizerKind::Adam,
            learning_rate: 3.45e-3,
            loss: LossKind::CrossEntropy,
        }
    }

    /// Device-state classifier tuned on noisy data: four 7x7 conv/dropout/ReLU
    /// blocks (22 s1, 22 s2, 35 s1, 35 s2), no layer norm.
    pub fn noisy_dse() -> NetworkSpec {
        let mut layers = Vec::new();
        for (ch, stride, rate) in [(22usize, 1usize, 0.66), (22, 2, 0.66), (35, 1, 0.19), (35, 2, 0.19)] {
            layers.push(LayerSpec::Conv { kernel: 7, channels: ch, stride });
            layers.push(LayerSpec::Dropout { rate });
            layers.push(LayerSpec::Act(Activation::Relu));
        }
        layers.push(LayerSpec::GlobalAvgPool);
        NetworkSpec {
            name: "dse-noisy".into(),
            layers,
            outputs: crate::sim::STATE_COUNT,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1.21e-3,
            loss: LossKind::CrossEntropy,
        }
    }

    /// Data-quality classifier: 7x7x184 and 3x3x249 Swish conv blocks with
    /// layer norm, 2x2 max pool, global average pool, dense 161, dropout 0.6,
    /// three classes.
    pub fn dqc() -> NetworkSpec {
        let layers = vec![
            LayerSpec::Conv { kernel: 7, channels: 184, stride: 1 },
            LayerSpec::Dropout { rate: 0.05 },
            LayerSpec::LayerNorm,
            LayerSpec::Act(Activation::Swish),
            LayerSpec::Conv { kernel: 3, channels: 249, stride: 1 },
            LayerSpec::LayerNorm,
            LayerSpec::Act(Activation::Swish),
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { units: 161 },
            LayerSpec::Dropout { rate: 0.6 },
        ];
        NetworkSpec {
            name: "dqc".into(),
            layers,
            outputs: 3,
            optimizer: OptimizerKind::Adam,
            learning_rate: 2.65e-4,
            loss: LossKind::CrossEntropy,
        }
    }
}

/// Keras `same` padding: total padding to reach `ceil(in/stride)` outputs,
/// split with the extra pixel at the end.
fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize, usize) {
    let out = input.div_ceil(stride);
    let needed = ((out - 1) * stride + kernel).saturating_sub(input);
    let before = needed / 2;
    (out, before, needed - before)
}

/// Shape-resolved layer. Parameter tensors live in `Network::params`; nodes
/// hold indices into that vector.
#[derive(Clone, Debug)]
enum Node {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
        pad: (usize, usize, usize, usize),
        w: usize,
        b: usize,
    },
    Dropout {
        rate: f64,
    },
    LayerNorm {
        channels: usize,
        gamma: usize,
        beta: usize,
    },
    Act(Activation),
    MaxPool {
        size: usize,
        stride: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    GlobalAvgPool {
        in_hw: (usize, usize),
    },
    Dense {
        n_in: usize,
        n_out: usize,
        w: usize,
        b: usize,
    },
}

/// A buildable network with parameters and Adam state.
#[derive(Clone, Debug)]
pub struct Network<F> {
    pub spec: NetworkSpec,
    pub input_hw: (usize, usize),
    nodes: Vec<Node>,
    params: Vec<ArrayD<F>>,
    names: Vec<String>,
    adam_m: Vec<ArrayD<F>>,
    adam_v: Vec<ArrayD<F>>,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-7;
const LAYER_NORM_EPS: f64 = 1e-3;

impl<F: Float> Network<F> {
    /// Builds and He-initializes a network for the given input size. Every
    /// shape is validated here so training can assume consistency.
    pub fn build(spec: &NetworkSpec, input_hw: (usize, usize), init_seed: u64) -> Result<Network<F>> {
        let err = |layer: usize, reason: String| Error::NetworkSpec { layer, reason };
        if spec.outputs < 2 {
            return Err(err(0, "a classifier needs at least two outputs".into()));
        }
        if !(spec.learning_rate > 0.0) {
            return Err(err(0, "learning rate must be positive".into()));
        }
        if input_hw.0 == 0 || input_hw.1 == 0 {
            return Err(err(0, "input size must be positive".into()));
        }

        let mut nodes = Vec::new();
        let mut params: Vec<ArrayD<F>> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        let mut rng = seed::rng(init_seed);

        let he_uniform = |shape: &[usize], fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let limit = (6.0 / fan_in as f64).sqrt();
            ArrayD::from_shape_fn(IxDyn(shape), |_| fl::<F>(rng.random_range(-limit..limit)))
        };

        let mut channels = 1usize;
        let mut hw = input_hw;
        let mut pooled = false;

        for (li, layer) in spec.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { kernel, channels: out_ch, stride } => {
                    if pooled {
                        return Err(err(li, "convolution after global pooling".into()));
                    }
                    if kernel == 0 || out_ch == 0 || stride == 0 {
                        return Err(err(li, "conv kernel, channels, and stride must be positive".into()));
                    }
                    let (oh, pt, pb) = same_padding(hw.0, kernel, stride);
                    let (ow, pl, pr) = same_padding(hw.1, kernel, stride);
                    let fan_in = channels * kernel * kernel;
                    let w = params.len();
                    params.push(he_uniform(&[out_ch, channels, kernel, kernel], fan_in, &mut rng));
                    names.push(format!("node{li:02}.conv.w"));
                    let b = params.len();
                    params.push(ArrayD::zeros(IxDyn(&[out_ch])));
                    names.push(format!("node{li:02}.conv.b"));
                    nodes.push(Node::Conv {
                        in_ch: channels,
                        out_ch,
                        kernel,
                        stride,
                        in_hw: hw,
                        out_hw: (oh, ow),
                        pad: (pt, pb, pl, pr),
                        w,
                        b,
                    });
                    channels = out_ch;
                    hw = (oh, ow);
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(err(li, format!("dropout rate {rate} outside [0, 1)")));
                    }
                    nodes.push(Node::Dropout { rate });
                }
                LayerSpec::LayerNorm => {
                    let gamma = params.len();
                    params.push(ArrayD::from_elem(IxDyn(&[channels]), F::one()));
                    names.push(format!("node{li:02}.ln.gamma"));
                    let beta = params.len();
                    params.push(ArrayD::zeros(IxDyn(&[channels])));
                    names.push(format!("node{li:02}.ln.beta"));
                    nodes.push(Node::LayerNorm { channels, gamma, beta });
                }
                LayerSpec::Act(a) => nodes.push(Node::Act(a)),
                LayerSpec::MaxPool { size, stride } => {
                    if pooled {
                        return Err(err(li, "max pool after global pooling".into()));
                    }
                    if size == 0 || stride == 0 {
                        return Err(err(li, "pool size and stride must be positive".into()));
                    }
                    if size > hw.0 || size > hw.1 {
                        return Err(err(li, format!("pool size {size} exceeds spatial size {hw:?}")));
                    }
                    let oh = (hw.0 - size) / stride + 1;
                    let ow = (hw.1 - size) / stride + 1;
                    nodes.push(Node::MaxPool { size, stride, in_hw: hw, out_hw: (oh, ow) });
                    hw = (oh, ow);
                }
                LayerSpec::GlobalAvgPool => {
                    if pooled {
                        return Err(err(li, "second global pooling layer".into()));
                    }
                    nodes.push(Node::GlobalAvgPool { in_hw: hw });
                    hw = (1, 1);
                    pooled = true;
                }
                LayerSpec::Dense { units } => {
                    if !pooled {
                        return Err(err(li, "dense layer before global pooling".into()));
                    }
                    if units == 0 {
                        return Err(err(li, "dense units must be positive".into()));
                    }
                    let n_in = channels;
                    let w = params.len();
                    params.push(he_uniform(&[n_in, units], n_in, &mut rng));
                    names.push(format!("node{li:02}.dense.w"));
                    let b = params.len();
                    params.push(ArrayD::zeros(IxDyn(&[units])));
                    names.push(format!("node{li:02}.dense.b"));
                    nodes.push(Node::Dense { n_in, n_out: units, w, b });
                    channels = units;
                }
            }
        }

        if !pooled {
            return Err(err(spec.layers.len(), "network needs a global pooling layer before the output head".into()));
        }

        // implicit output dense layer feeding the softmax
        let n_in = channels;
        let w = params.len();
        params.push(he_uniform(&[n_in, spec.outputs], n_in, &mut rng));
        names.push("head.dense.w".into());
        let b = params.len();
        params.push(ArrayD::zeros(IxDyn(&[spec.outputs])));
        names.push("head.dense.b".into());
        nodes.push(Node::Dense { n_in, n_out: spec.outputs, w, b });

        let adam_m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        let adam_v = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Ok(Network {
            spec: spec.clone(),
            input_hw,
            nodes,
            params,
            names,
            adam_m,
            adam_v,
            step: 0,
        })
    }

    /// Total number of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Direct access to the parameter tensors (used by tests and training).
    pub fn params(&self) -> &[ArrayD<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Vec<ArrayD<F>> {
        &mut self.params
    }

    pub fn tensor_names(&self) -> &[String] {
        &self.names
    }

    pub fn optimizer_step(&self) -> u64 {
        self.step
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 1 || (h, w) != self.input_hw {
            return Err(Error::ShapeMismatch(format!(
                "network expects (n, 1, {}, {}), got {:?}",
                self.input_hw.0,
                self.input_hw.1,
                x.dim()
            )));
        }
        Ok(())
    }

    /// Forward pass. `dropout_seed` enables training-mode dropout with masks
    /// drawn from that seed; `None` runs inference. Returns softmax
    /// probabilities and the cache needed for [`Network::backward`].
    pub fn forward(&self, x: &Array4<F>, dropout_seed: Option<u64>) -> Result<(Array2<F>, Cache<F>)> {
        self.check_input(x)?;
        let mut rng = dropout_seed.map(seed::rng);
        let mut act = x.clone();
        let mut caches = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (next, cache) = self.node_forward(node, act, &mut rng)?;
            act = next;
            caches.push(cache);
        }
        let (n, c, _, _) = act.dim();
        let logits = act.into_shape_with_order((n, c)).unwrap();
        let probs = softmax(&logits);
        Ok((probs, Cache { nodes: caches }))
    }

    /// Inference-mode class probabilities.
    pub fn predict(&self, x: &Array4<F>) -> Result<Array2<F>> {
        Ok(self.forward(x, None)?.0)
    }

    /// Mean cross-entropy of predicted probabilities against target rows.
    pub fn loss(probs: &Array2<F>, targets: &Array2<F>) -> F {
        assert_eq!(probs.dim(), targets.dim());
        let n = probs.nrows();
        let tiny = fl::<F>(1e-12);
        let mut acc = F::zero();
        for (p, t) in probs.iter().zip(targets.iter()) {
            if *t > F::zero() {
                // not `p.max(tiny)`: IEEE max would silently replace a NaN
                // probability and hide a diverged run from the caller
                let clamped = if *p < tiny { tiny } else { *p };
                acc -= *t * clamped.ln();
            }
        }
        acc / F::from_usize(n).unwrap()
    }

    /// Reverse pass for the fused softmax + cross-entropy head. Returns
    /// gradients aligned with [`Network::params`].
    pub fn backward(
        &self,
        x: &Array4<F>,
        cache: &Cache<F>,
        probs: &Array2<F>,
        targets: &Array2<F>,
    ) -> Result<Vec<ArrayD<F>>> {
        self.check_input(x)?;
        if probs.dim() != targets.dim() {
            return Err(Error::ShapeMismatch(format!(
                "probs {:?} vs targets {:?}",
                probs.dim(),
                targets.dim()
            )));
        }
        let mut grads: Vec<ArrayD<F>> = self.params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        let n = probs.nrows();
        let scale = F::one() / F::from_usize(n).unwrap();
        let d_logits = (probs - targets).mapv(|g| g * scale);
        let (rows, classes) = d_logits.dim();
        let mut d_act = d_logits
            .into_shape_with_order((rows, classes, 1, 1))
            .unwrap();
        for (node, cache) in self.nodes.iter().zip(cache.nodes.iter()).rev() {
            d_act = self.node_backward(node, cache, d_act, &mut grads);
        }
        Ok(grads)
    }

    /// One Adam update with bias correction.
    pub fn adam_step(&mut self, grads: &[ArrayD<F>]) {
        assert_eq!(grads.len(), self.params.len(), "gradient/parameter mismatch");
        self.step += 1;
        let t = self.step as i32;
        let b1 = fl::<F>(ADAM_BETA1);
        let b2 = fl::<F>(ADAM_BETA2);
        let eps = fl::<F>(ADAM_EPS);
        let lr = fl::<F>(self.spec.learning_rate);
        let c1 = F::one() - fl::<F>(ADAM_BETA1.powi(t));
        let c2 = F::one() - fl::<F>(ADAM_BETA2.powi(t));
        for ((p, g), (m, v)) in self
            .params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.adam_m.iter_mut().zip(self.adam_v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    fn node_forward(
        &self,
        node: &Node,
        x: Array4<F>,
        rng: &mut Option<rand_chacha::ChaCha8Rng>,
    ) -> Result<(Array4<F>, NodeCache<F>)> {
        match node {
            Node::Conv { in_ch, out_ch, kernel, stride, in_hw, out_hw, pad, w, b } => {
                let (n, c, h, wd) = x.dim();
                if c != *in_ch || (h, wd) != *in_hw {
                    return Err(Error::ShapeMismatch(format!(
                        "conv expected ({in_ch}, {in_hw:?}), got ({c}, ({h}, {wd}))"
                    )));
                }
                let cols = im2col(&x, *kernel, *stride, *pad, *out_hw);
                let k = in_ch * kernel * kernel;
                let w_mat = self.params[*w]
                    .view()
                    .into_shape_with_order((*out_ch, k))
                    .unwrap();
                let mut out_mat = cols.dot(&w_mat.t());
                let bias = self.params[*b].view().into_shape_with_order(*out_ch).unwrap();
                for mut row in out_mat.rows_mut() {
                    row += &bias;
                }
                let out = rows_to_nchw(&out_mat, n, *out_ch, *out_hw);
                Ok((out, NodeCache::Conv { cols }))
            }
            Node::Dropout { rate } => {
                if let Some(rng) = rng.as_mut() {
                    if *rate > 0.0 {
                        let keep = 1.0 - rate;
                        let scale = fl::<F>(1.0 / keep);
                        let mask = Array4::from_shape_fn(x.dim(), |_| {
                            if rng.random_range(0.0..1.0) < keep {
                                scale
                            } else {
                                F::zero()
                            }
                        });
                        let out = &x * &mask;
                        return Ok((out, NodeCache::Dropout { mask: Some(mask) }));
                    }
                }
                Ok((x, NodeCache::Dropout { mask: None }))
            }
            Node::LayerNorm { channels, gamma, beta, .. } => {
                let (n, c, h, w_) = x.dim();
                debug_assert_eq!(c, *channels);
                let eps = fl::<F>(LAYER_NORM_EPS);
                let cn = F::from_usize(c).unwrap();
                let mut xhat = Array4::zeros(x.dim());
                let mut invstd = Array3::zeros((n, h, w_));
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w_ {
                            let mut mean = F::zero();
                            for ci in 0..c {
                                mean += x[[ni, ci, hi, wi]];
                            }
                            mean /= cn;
                            let mut var = F::zero();
                            for ci in 0..c {
                                let d = x[[ni, ci, hi, wi]] - mean;
                                var += d * d;
                            }
                            var /= cn;
                            let inv = (var + eps).sqrt().recip();
                            invstd[[ni, hi, wi]] = inv;
                            for ci in 0..c {
                                xhat[[ni, ci, hi, wi]] = (x[[ni, ci, hi, wi]] - mean) * inv;
                            }
                        }
                    }
                }
                let g = self.params[*gamma].view().into_shape_with_order(c).unwrap();
                let bt = self.params[*beta].view().into_shape_with_order(c).unwrap();
                let mut out = xhat.clone();
                for ci in 0..c {
                    let mut lane = out.index_axis_mut(Axis(1), ci);
                    lane.mapv_inplace(|v| v * g[ci] + bt[ci]);
                }
                Ok((out, NodeCache::LayerNorm { xhat, invstd }))
            }
            Node::Act(a) => {
                let out = match a {
                    Activation::Relu => x.mapv(|v| v.max(F::zero())),
                    Activation::Swish => x.mapv(|v| v * sigmoid(v)),
                };
                Ok((out, NodeCache::Act { x }))
            }
            Node::MaxPool { size, stride, in_hw, out_hw } => {
                let (n, c, h, w_) = x.dim();
                debug_assert_eq!((h, w_), *in_hw);
                let (oh, ow) = *out_hw;
                let mut out = Array4::zeros((n, c, oh, ow));
                let mut arg: Array4<u32> = Array4::zeros((n, c, oh, ow));
                for ni in 0..n {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let y0 = oy * stride;
                                let x0 = ox * stride;
                                let mut best = x[[ni, ci, y0, x0]];
                                let mut best_idx = (y0 * w_ + x0) as u32;
                                for ky in 0..*size {
                                    for kx in 0..*size {
                                        let v = x[[ni, ci, y0 + ky, x0 + kx]];
                                        if v > best {
                                            best = v;
                                            best_idx = ((y0 + ky) * w_ + x0 + kx) as u32;
                                        }
                                    }
                                }
                                out[[ni, ci, oy, ox]] = best;
                                arg[[ni, ci, oy, ox]] = best_idx;
                            }
                        }
                    }
                }
                Ok((out, NodeCache::MaxPool { arg, in_hw: *in_hw }))
            }
            Node::GlobalAvgPool { in_hw } => {
                let (n, c, h, w_) = x.dim();
                let area = F::from_usize(h * w_).unwrap();
                let mut out = Array4::zeros((n, c, 1, 1));
                for ni in 0..n {
                    for ci in 0..c {
                        let mut acc = F::zero();
                        for hi in 0..h {
                            for wi in 0..w_ {
                                acc += x[[ni, ci, hi, wi]];
                            }
                        }
                        out[[ni, ci, 0, 0]] = acc / area;
                    }
                }
                Ok((out, NodeCache::GlobalAvgPool { in_hw: *in_hw }))
            }
            Node::Dense { n_in, n_out, w, b } => {
                let (n, c, h, w_) = x.dim();
                let flat = c * h * w_;
                if flat != *n_in {
                    return Err(Error::ShapeMismatch(format!(
                        "dense expected {n_in} features, got {flat}"
                    )));
                }
                let x2 = x.into_shape_with_order((n, flat)).unwrap();
                let w_mat = self.params[*w]
                    .view()
                    .into_shape_with_order((*n_in, *n_out))
                    .unwrap();
                let mut out = x2.dot(&w_mat);
                let bias = self.params[*b].view().into_shape_with_order(*n_out).unwrap();
                for mut row in out.rows_mut() {
                    row += &bias;
                }
                let out4 = out.into_shape_with_order((n, *n_out, 1, 1)).unwrap();
                Ok((out4, NodeCache::Dense { x2 }))
            }
        }
    }

    fn node_backward(
        &self,
        node: &Node,
        cache: &NodeCache<F>,
        d_out: Array4<F>,
        grads: &mut [ArrayD<F>],
    ) -> Array4<F> {
        match (node, cache) {
            (
                Node::Conv { in_ch, out_ch, kernel, stride, in_hw, out_hw, pad, w, b },
                NodeCache::Conv { cols },
            ) => {
                let (n, _, _, _) = d_out.dim();
                let d_mat = nchw_to_rows(&d_out);
                let k = in_ch * kernel * kernel;
                // bias gradient: column sums
                let db = d_mat.sum_axis(Axis(0));
                grads[*b]
                    .view_mut()
                    .into_shape_with_order(*out_ch)
                    .unwrap()
                    .assign(&db);
                // weight gradient: (out_ch, k) = d_mat^T . cols
                let dw = d_mat.t().dot(cols);
                grads[*w]
                    .view_mut()
                    .into_shape_with_order((*out_ch, k))
                    .unwrap()
                    .assign(&dw);
                // input gradient
                let w_mat = self.params[*w]
                    .view()
                    .into_shape_with_order((*out_ch, k))
                    .unwrap();
                let d_cols = d_mat.dot(&w_mat);
                col2im(&d_cols, n, *in_ch, *in_hw, *kernel, *stride, *pad, *out_hw)
            }
            (Node::Dropout { .. }, NodeCache::Dropout { mask }) => match mask {
                Some(m) => &d_out * m,
                None => d_out,
            },
            (Node::LayerNorm { gamma, beta, .. }, NodeCache::LayerNorm { xhat, invstd }) => {
                let (n, c, h, w_) = d_out.dim();
                let g = self.params[*gamma].view().into_shape_with_order(c).unwrap();
                let cn = F::from_usize(c).unwrap();
                let mut dgamma = Array1::<F>::zeros(c);
                let mut dbeta = Array1::<F>::zeros(c);
                let mut dx = Array4::zeros(d_out.dim());
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w_ {
                            let mut sum_dxhat = F::zero();
                            let mut sum_dxhat_xhat = F::zero();
                            for ci in 0..c {
                                let dy = d_out[[ni, ci, hi, wi]];
                                let xh = xhat[[ni, ci, hi, wi]];
                                dgamma[ci] += dy * xh;
                                dbeta[ci] += dy;
                                let dxh = dy * g[ci];
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xh;
                            }
                            let inv = invstd[[ni, hi, wi]];
                            for ci in 0..c {
                                let dy = d_out[[ni, ci, hi, wi]];
                                let xh = xhat[[ni, ci, hi, wi]];
                                let dxh = dy * g[ci];
                                dx[[ni, ci, hi, wi]] =
                                    inv / cn * (cn * dxh - sum_dxhat - xh * sum_dxhat_xhat);
                            }
                        }
                    }
                }
                grads[*gamma]
                    .view_mut()
                    .into_shape_with_order(c)
                    .unwrap()
                    .assign(&dgamma);
                grads[*beta]
                    .view_mut()
                    .into_shape_with_order(c)
                    .unwrap()
                    .assign(&dbeta);
                dx
            }
            (Node::Act(a), NodeCache::Act { x }) => match a {
                Activation::Relu => {
                    let mut dx = d_out;
                    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| {
                        if xv <= F::zero() {
                            *d = F::zero();
                        }
                    });
                    dx
                }
                Activation::Swish => {
                    let mut dx = d_out;
                    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| {
                        let s = sigmoid(xv);
                        *d = *d * (s * (F::one() + xv * (F::one() - s)));
                    });
                    dx
                }
            },
            (Node::MaxPool { .. }, NodeCache::MaxPool { arg, in_hw }) => {
                let (n, c, oh, ow) = d_out.dim();
                let mut dx = Array4::zeros((n, c, in_hw.0, in_hw.1));
                for ni in 0..n {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let flat = arg[[ni, ci, oy, ox]] as usize;
                                let (iy, ix) = (flat / in_hw.1, flat % in_hw.1);
                                dx[[ni, ci, iy, ix]] += d_out[[ni, ci, oy, ox]];
                            }
                        }
                    }
                }
                dx
            }
            (Node::GlobalAvgPool { .. }, NodeCache::GlobalAvgPool { in_hw }) => {
                let (n, c, _, _) = d_out.dim();
                let area = F::from_usize(in_hw.0 * in_hw.1).unwrap();
                let mut dx = Array4::zeros((n, c, in_hw.0, in_hw.1));
                for ni in 0..n {
                    for ci in 0..c {
                        let d = d_out[[ni, ci, 0, 0]] / area;
                        for hi in 0..in_hw.0 {
                            for wi in 0..in_hw.1 {
                                dx[[ni, ci, hi, wi]] = d;
                            }
                        }
                    }
                }
                dx
            }
            (Node::Dense { n_in, n_out, w, b }, NodeCache::Dense { x2 }) => {
                let (n, _, _, _) = d_out.dim();
                let d2 = d_out.into_shape_with_order((n, *n_out)).unwrap();
                let db = d2.sum_axis(Axis(0));
                grads[*b]
                    .view_mut()
                    .into_shape_with_order(*n_out)
                    .unwrap()
                    .assign(&db);
                let dw = x2.t().dot(&d2);
                grads[*w]
                    .view_mut()
                    .into_shape_with_order((*n_in, *n_out))
                    .unwrap()
                    .assign(&dw);
                let w_mat = self.params[*w]
                    .view()
                    .into_shape_with_order((*n_in, *n_out))
                    .unwrap();
                let dx2 = d2.dot(&w_mat.t());
                dx2.into_shape_with_order((n, *n_in, 1, 1)).unwrap()
            }
            _ => unreachable!("cache does not match node"),
        }
    }
}

fn sigmoid<F: Float>(x: F) -> F {
    (F::one() + (-x).exp()).recip()
}

/// Numerically stable row softmax.
pub fn softmax<F: Float>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Forward caches per node.
pub struct Cache<F> {
    nodes: Vec<NodeCache<F>>,
}

enum NodeCache<F> {
    Conv { cols: Array2<F> },
    Dropout { mask: Option<Array4<F>> },
    LayerNorm { xhat: Array4<F>, invstd: Array3<F> },
    Act { x: Array4<F> },
    MaxPool { arg: Array4<u32>, in_hw: (usize, usize) },
    GlobalAvgPool { in_hw: (usize, usize) },
    Dense { x2: Array2<F> },
}

/// Gathers convolution patches into a `(n*oh*ow, c*k*k)` matrix, reading the
/// input through zero padding.
fn im2col<F: Float>(
    x: &Array4<F>,
    kernel: usize,
    stride: usize,
    pad: (usize, usize, usize, usize),
    out_hw: (usize, usize),
) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let (pt, _pb, pl, _pr) = pad;
    let (oh, ow) = out_hw;
    let k2 = kernel * kernel;
    let mut cols = Array2::zeros((n * oh * ow, c * k2));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                let y0 = (oy * stride) as isize - pt as isize;
                let x0 = (ox * stride) as isize - pl as isize;
                for ci in 0..c {
                    let base = ci * k2;
                    for ky in 0..kernel {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = x0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, base + ky * kernel + kx]] =
                                x[[ni, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back onto the (unpadded) input.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Float>(
    d_cols: &Array2<F>,
    n: usize,
    c: usize,
    in_hw: (usize, usize),
    kernel: usize,
    stride: usize,
    pad: (usize, usize, usize, usize),
    out_hw: (usize, usize),
) -> Array4<F> {
    let (h, w) = in_hw;
    let (pt, _pb, pl, _pr) = pad;
    let (oh, ow) = out_hw;
    let k2 = kernel * kernel;
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                let y0 = (oy * stride) as isize - pt as isize;
                let x0 = (ox * stride) as isize - pl as isize;
                for ci in 0..c {
                    let base = ci * k2;
                    for ky in 0..kernel {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = x0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[[ni, ci, iy as usize, ix as usize]] +=
                                d_cols[[row, base + ky * kernel + kx]];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `(n*oh*ow, c)` matrix back to `(n, c, oh, ow)`.
fn rows_to_nchw<F: Float>(mat: &Array2<F>, n: usize, c: usize, out_hw: (usize, usize)) -> Array4<F> {
    let (oh, ow) = out_hw;
    let mut out = Array4::zeros((n, c, oh, ow));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                for ci in 0..c {
                    out[[ni, ci, oy, ox]] = mat[[row, ci]];
                }
            }
        }
    }
    out
}

/// `(n, c, oh, ow)` to the `(n*oh*ow, c)` layout used by the GEMM.
fn nchw_to_rows<F: Float>(x: &Array4<F>) -> Array2<F> {
    let (n, c, oh, ow) = x.dim();
    let mut out = Array2::zeros((n * oh * ow, c));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                for ci in 0..c {
                    out[[row, ci]] = x[[ni, ci, oy, ox]];
                }
            }
        }
    }
    out
}
