//! 1D-CNN classifiers with exact reverse-mode gradients.
//!
//! Two fixed architectures are provided. `Plain` stacks three
//! conv(k=3) → max-pool(3) → ReLU blocks growing the channels 1 → 10 → 50 →
//! 100, then a 100-unit hidden layer and a C-way output layer. `Residual` is
//! the same network plus a skip path from the raw input: a single-channel
//! conv(k=7), adaptively average-pooled to the trunk's temporal length and
//! added to every trunk channel just before flattening.
//!
//! `Custom` topologies use the same machinery and exist for reduced models
//! in gradient checks and toy experiments.

mod layers;
mod train;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

pub use layers::{Activation, Conv1d, Dense};
pub use train::{train, Adam, TrainConfig, TrainReport};

pub const CONV_CHANNELS: [usize; 3] = [10, 50, 100];
pub const CONV_KERNEL: usize = 3;
pub const POOL_SIZE: usize = 3;
pub const FC_HIDDEN: usize = 100;
pub const RESIDUAL_KERNEL: usize = 7;

const PARAMS_FORMAT: &str = "pertcard-model";
const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize },
    MaxPool { size: usize },
    Relu,
    Dense { outputs: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Plain,
    Residual,
    Custom {
        layers: Vec<LayerSpec>,
        residual_kernel: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub input_length: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn plain(input_length: usize, num_classes: usize) -> Self {
        ModelConfig {
            architecture: Architecture::Plain,
            input_length,
            num_classes,
        }
    }

    pub fn residual(input_length: usize, num_classes: usize) -> Self {
        ModelConfig {
            architecture: Architecture::Residual,
            input_length,
            num_classes,
        }
    }

    pub fn custom(
        layers: Vec<LayerSpec>,
        residual_kernel: Option<usize>,
        input_length: usize,
        num_classes: usize,
    ) -> Self {
        ModelConfig {
            architecture: Architecture::Custom {
                layers,
                residual_kernel,
            },
            input_length,
            num_classes,
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        match &self.architecture {
            Architecture::Plain | Architecture::Residual => {
                let mut specs = Vec::new();
                for &out_channels in &CONV_CHANNELS {
                    specs.push(LayerSpec::Conv {
                        out_channels,
                        kernel: CONV_KERNEL,
                    });
                    specs.push(LayerSpec::MaxPool { size: POOL_SIZE });
                    specs.push(LayerSpec::Relu);
                }
                specs.push(LayerSpec::Dense { outputs: FC_HIDDEN });
                specs.push(LayerSpec::Relu);
                specs.push(LayerSpec::Dense {
                    outputs: self.num_classes,
                });
                specs
            }
            Architecture::Custom { layers, .. } => layers.clone(),
        }
    }

    pub fn residual_kernel(&self) -> Option<usize> {
        match &self.architecture {
            Architecture::Plain => None,
            Architecture::Residual => Some(RESIDUAL_KERNEL),
            Architecture::Custom {
                residual_kernel, ..
            } => *residual_kernel,
        }
    }

    /// Shape `(channels, length)` after each layer, starting with the input.
    pub fn shape_chain(&self) -> Result<Vec<(usize, usize)>> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        let mut shape = (1, self.input_length);
        if shape.1 == 0 {
            return Err(Error::Config("input_length must be at least 1".into()));
        }
        let mut chain = vec![shape];
        let mut flattened = false;
        for (stage, spec) in self.layer_specs().iter().enumerate() {
            let stage = stage + 1;
            shape = match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                } => {
                    if flattened {
                        return Err(Error::Config(format!(
                            "stage {stage} (conv): convolution after a dense layer"
                        )));
                    }
                    if kernel == 0 || out_channels == 0 {
                        return Err(Error::Config(format!(
                            "stage {stage} (conv): kernel and channels must be positive"
                        )));
                    }
                    if shape.1 < kernel {
                        return Err(Error::Config(format!(
                            "stage {stage} (conv k={kernel}): input length {} is shorter than the kernel",
                            shape.1
                        )));
                    }
                    (out_channels, shape.1 - kernel + 1)
                }
                LayerSpec::MaxPool { size } => {
                    if flattened {
                        return Err(Error::Config(format!(
                            "stage {stage} (max-pool): pooling after a dense layer"
                        )));
                    }
                    if size == 0 || shape.1 / size == 0 {
                        return Err(Error::Config(format!(
                            "stage {stage} (max-pool {size}): input length {} collapses below 1",
                            shape.1
                        )));
                    }
                    (shape.0, shape.1 / size)
                }
                LayerSpec::Relu => shape,
                LayerSpec::Dense { outputs } => {
                    if outputs == 0 {
                        return Err(Error::Config(format!(
                            "stage {stage} (dense): zero outputs"
                        )));
                    }
                    flattened = true;
                    (outputs, 1)
                }
            };
            chain.push(shape);
        }
        let (c, l) = *chain.last().expect("chain starts with the input");
        if c * l != self.num_classes {
            return Err(Error::Config(format!(
                "network emits {} values but there are {} classes",
                c * l,
                self.num_classes
            )));
        }
        if let Some(k) = self.residual_kernel() {
            if k == 0 || self.input_length < k {
                return Err(Error::Config(format!(
                    "residual conv k={k}: input length {} is shorter than the kernel",
                    self.input_length
                )));
            }
        }
        Ok(chain)
    }

    /// Number of values entering the first dense layer.
    pub fn flattened_len(&self) -> Result<usize> {
        let chain = self.shape_chain()?;
        let join = self.join_index();
        let (c, l) = chain[join];
        Ok(c * l)
    }

    /// Index of the first dense layer (the point where the residual joins).
    fn join_index(&self) -> usize {
        let specs = self.layer_specs();
        specs
            .iter()
            .position(|s| matches!(s, LayerSpec::Dense { .. }))
            .unwrap_or(specs.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    Conv(Conv1d),
    MaxPool { size: usize },
    Relu,
    Dense(Dense),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub seed: u64,
    /// Original label value for each class index.
    pub label_map: Vec<f64>,
    pub layers: Vec<Layer>,
    /// Single-channel skip convolution (residual architecture only).
    pub residual: Option<Conv1d>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub label: usize,
}

/// Anything that maps a series to class logits and can differentiate a
/// single logit w.r.t. the input.
pub trait Classifier: Sync {
    fn input_length(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn logit_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>>;

    fn predict(&self, x: &[f64]) -> Result<PredictionOutput> {
        let logits = self.logits(x)?;
        let probs = softmax(&logits);
        let label = argmax(&logits);
        Ok(PredictionOutput {
            probs,
            logits,
            label,
        })
    }

    fn predict_label(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_length() {
            return Err(Error::argument(format!(
                "series has length {}, model expects {}",
                x.len(),
                self.input_length()
            )));
        }
        Ok(())
    }
}

/// Index of the largest value; ties break to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[label]`, computed as log-sum-exp minus the logit.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Everything the backward pass needs from a forward pass.
pub(crate) struct Trace {
    /// Input to each layer; `inputs[i]` feeds `layers[i]`. At the join
    /// index this is the trunk output *after* the residual add.
    inputs: Vec<Activation>,
    pool_argmax: Vec<Option<Vec<usize>>>,
    residual_pre_pool: Option<Vec<f64>>,
    output: Vec<f64>,
}

/// Parameter gradients in [`ModelParams::tensors`] order.
pub type Gradients = Vec<Vec<f64>>;

/// Weight and bias gradient buffers starting at `slot`.
fn tensor_pair(grads: Option<&mut Gradients>, slot: Option<usize>) -> Option<(&mut [f64], &mut [f64])> {
    let (g, s) = (grads?, slot?);
    let (a, b) = g.split_at_mut(s + 1);
    Some((a[s].as_mut_slice(), b[0].as_mut_slice()))
}

pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(cfg)?;
    params.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |w: &mut [f64], fan_in: usize| {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in w {
            *v = normal.sample(&mut rng);
        }
    };
    for layer in &mut params.layers {
        match layer {
            Layer::Conv(c) => fill(&mut c.weight, c.in_channels * c.kernel),
            Layer::Dense(d) => fill(&mut d.weight, d.inputs),
            _ => {}
        }
    }
    if let Some(r) = &mut params.residual {
        fill(&mut r.weight, r.kernel);
    }
    Ok(params)
}

impl ModelParams {
    /// All weights and biases zero.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        let chain = cfg.shape_chain()?;
        let layers = cfg
            .layer_specs()
            .iter()
            .zip(&chain)
            .map(|(spec, &(c_in, l_in))| match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                } => Layer::Conv(Conv1d::zeros(c_in, out_channels, kernel)),
                LayerSpec::MaxPool { size } => Layer::MaxPool { size },
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Dense { outputs } => Layer::Dense(Dense::zeros(c_in * l_in, outputs)),
            })
            .collect();
        let residual = cfg.residual_kernel().map(|k| Conv1d::zeros(1, 1, k));
        Ok(ModelParams {
            config: cfg.clone(),
            seed: 0,
            label_map: (0..cfg.num_classes).map(|c| c as f64).collect(),
            layers,
            residual,
        })
    }

    /// Weight and bias tensors in a fixed order: each parametrised layer's
    /// weight then bias, then the residual conv's weight and bias.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => out.extend([&c.weight, &c.bias]),
                Layer::Dense(d) => out.extend([&d.weight, &d.bias]),
                _ => {}
            }
        }
        if let Some(r) = &self.residual {
            out.extend([&r.weight, &r.bias]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::Dense(d) => {
                    out.push(&mut d.weight);
                    out.push(&mut d.bias);
                }
                _ => {}
            }
        }
        if let Some(r) = &mut self.residual {
            out.push(&mut r.weight);
            out.push(&mut r.bias);
        }
        out
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.tensors().iter().map(|t| vec![0.0; t.len()]).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn join_index(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::Dense(_)))
            .unwrap_or(self.layers.len())
    }

    pub(crate) fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let join = self.join_index();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pool_argmax = Vec::with_capacity(self.layers.len());
        let mut residual_pre_pool = None;
        let mut act = Activation::from_series(x);

        for (i, layer) in self.layers.iter().enumerate() {
            if i == join {
                if let Some(res) = &self.residual {
                    let r = res.forward(&Activation::from_series(x)).data;
                    let pooled = layers::adaptive_avg_pool(&r, act.len);
                    for ch in 0..act.channels {
                        for (v, p) in act.data[ch * act.len..(ch + 1) * act.len]
                            .iter_mut()
                            .zip(&pooled)
                        {
                            *v += p;
                        }
                    }
                    residual_pre_pool = Some(r);
                }
            }
            let (next, argmax) = match layer {
                Layer::Conv(c) => (c.forward(&act), None),
                Layer::MaxPool { size } => {
                    let (y, idx) = layers::max_pool_forward(&act, *size);
                    (y, Some(idx))
                }
                Layer::Relu => (layers::relu_forward(&act), None),
                Layer::Dense(d) => {
                    let y = d.forward(&act.data);
                    (
                        Activation {
                            channels: y.len(),
                            len: 1,
                            data: y,
                        },
                        None,
                    )
                }
            };
            inputs.push(act);
            pool_argmax.push(argmax);
            act = next;
        }
        Ok(Trace {
            inputs,
            pool_argmax,
            residual_pre_pool,
            output: act.data,
        })
    }

    /// Backpropagates `d_logits` through a recorded forward pass. Returns
    /// dL/dx and, when `grads` is given, accumulates parameter gradients.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        trace: &Trace,
        d_logits: &[f64],
        mut grads: Option<&mut Gradients>,
    ) -> Vec<f64> {
        let join = self.join_index();
        // Tensor slot of each layer in `tensors()` order.
        let mut slots = Vec::with_capacity(self.layers.len());
        let mut next_slot = 0;
        for layer in &self.layers {
            match layer {
                Layer::Conv(_) | Layer::Dense(_) => {
                    slots.push(Some(next_slot));
                    next_slot += 2;
                }
                _ => slots.push(None),
            }
        }
        let residual_slot = next_slot;

        let out = trace.output.len();
        let mut grad = Activation {
            channels: out,
            len: 1,
            data: d_logits.to_vec(),
        };
        let mut dx_residual = None;

        for i in (0..self.layers.len()).rev() {
            let input = &trace.inputs[i];
            grad = match &self.layers[i] {
                Layer::Conv(c) => c.backward(input, &grad, tensor_pair(grads.as_deref_mut(), slots[i])),
                Layer::Dense(d) => {
                    let dx = d.backward(&input.data, &grad.data, tensor_pair(grads.as_deref_mut(), slots[i]));
                    Activation {
                        channels: input.channels,
                        len: input.len,
                        data: dx,
                    }
                }
                Layer::MaxPool { .. } => layers::max_pool_backward(
                    (input.channels, input.len),
                    trace.pool_argmax[i].as_ref().expect("pool records argmax"),
                    &grad,
                ),
                Layer::Relu => Activation {
                    channels: input.channels,
                    len: input.len,
                    data: layers::relu_backward(&input.data, &grad.data),
                },
            };
            if i == join {
                dx_residual = self.residual_backward(x, trace, &grad, grads.as_deref_mut(), residual_slot);
            }
        }
        if join == self.layers.len() {
            dx_residual = self.residual_backward(x, trace, &grad, grads.as_deref_mut(), residual_slot);
        }

        let mut dx = grad.data;
        if let Some(r) = dx_residual {
            for (a, b) in dx.iter_mut().zip(r) {
                *a += b;
            }
        }
        dx
    }

    fn residual_backward(
        &self,
        x: &[f64],
        trace: &Trace,
        d_join: &Activation,
        grads: Option<&mut Gradients>,
        slot: usize,
    ) -> Option<Vec<f64>> {
        let res = self.residual.as_ref()?;
        let pre_pool = trace.residual_pre_pool.as_ref()?;
        let mut d_pooled = vec![0.0; d_join.len];
        for ch in 0..d_join.channels {
            for (d, g) in d_pooled
                .iter_mut()
                .zip(&d_join.data[ch * d_join.len..(ch + 1) * d_join.len])
            {
                *d += g;
            }
        }
        let d_r = Activation::from_series(&layers::adaptive_avg_pool_backward(pre_pool.len(), &d_pooled));
        let pg = tensor_pair(grads, Some(slot));
        Some(res.backward(&Activation::from_series(x), &d_r, pg).data)
    }

    /// Softmax cross-entropy loss of one sample; adds its parameter
    /// gradient into `grads`.
    pub fn loss_and_gradient(&self, x: &[f64], label: usize, grads: &mut Gradients) -> Result<f64> {
        let trace = self.forward_trace(x)?;
        let loss = cross_entropy(&trace.output, label);
        let mut d = softmax(&trace.output);
        d[label] -= 1.0;
        self.backward(x, &trace, &d, Some(grads));
        Ok(loss)
    }

    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        Ok(cross_entropy(&self.logits(x)?, label))
    }

    pub fn forward(&self, x: &[f64]) -> Result<PredictionOutput> {
        self.predict(x)
    }

    /// Gradient of the pre-softmax logit of `target_class` w.r.t. the input.
    pub fn grad_input(&self, x: &[f64], target_class: usize) -> Result<Vec<f64>> {
        if target_class >= self.config.num_classes {
            return Err(Error::argument(format!(
                "target class {target_class} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let trace = self.forward_trace(x)?;
        let mut d = vec![0.0; trace.output.len()];
        d[target_class] = 1.0;
        Ok(self.backward(x, &trace, &d, None))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ParamsFile {
            format: PARAMS_FORMAT.into(),
            version: PARAMS_VERSION,
            params: self.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ParamsFile =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("parameter file: {e}")))?;
        if doc.format != PARAMS_FORMAT {
            return Err(Error::Format(format!(
                "expected format {PARAMS_FORMAT:?}, found {:?}",
                doc.format
            )));
        }
        if doc.version != PARAMS_VERSION {
            return Err(Error::Format(format!(
                "unsupported parameter file version {}",
                doc.version
            )));
        }
        doc.params.validate()?;
        Ok(doc.params)
    }

    /// Checks that every tensor has exactly the shape the config implies.
    pub fn validate(&self) -> Result<()> {
        let expected = ModelParams::zeros(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        if self.layers.len() != expected.layers.len() {
            return Err(Error::Format(format!(
                "expected {} layers, found {}",
                expected.layers.len(),
                self.layers.len()
            )));
        }
        for (i, (got, want)) in self.layers.iter().zip(&expected.layers).enumerate() {
            let ok = match (got, want) {
                (Layer::Conv(a), Layer::Conv(b)) => {
                    (a.in_channels, a.out_channels, a.kernel) == (b.in_channels, b.out_channels, b.kernel)
                        && a.weight.len() == b.weight.len()
                        && a.bias.len() == b.bias.len()
                }
                (Layer::Dense(a), Layer::Dense(b)) => {
                    (a.inputs, a.outputs) == (b.inputs, b.outputs)
                        && a.weight.len() == b.weight.len()
                        && a.bias.len() == b.bias.len()
                }
                (Layer::MaxPool { size: a }, Layer::MaxPool { size: b }) => a == b,
                (Layer::Relu, Layer::Relu) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Format(format!("layer {i} does not match the configured shape")));
            }
        }
        match (&self.residual, &expected.residual) {
            (None, None) => {}
            (Some(a), Some(b)) if a.kernel == b.kernel && a.weight.len() == b.weight.len() && a.bias.len() == 1 => {}
            _ => return Err(Error::Format("residual branch does not match the configuration".into())),
        }
        if self.label_map.len() != self.config.num_classes {
            return Err(Error::Format(format!(
                "label map has {} entries for {} classes",
                self.label_map.len(),
                self.config.num_classes
            )));
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Format("parameters contain non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    params: ModelParams,
}

impl Classifier for ModelParams {
    fn input_length(&self) -> usize {
        self.config.input_length
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.output)
    }

    fn logit_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        self.grad_input(x, class)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPrediction {
    pub labels: Vec<usize>,
    pub accuracy: f64,
}

pub fn predict_batch<M: Classifier + ?Sized>(model: &M, ds: &Dataset) -> Result<BatchPrediction> {
    let labels = ds
        .samples
        .iter()
        .map(|s| model.predict_label(s))
        .collect::<Result<Vec<_>>>()?;
    let accuracy = crate::analysis::accuracy_qm(&labels, &ds.labels)?;
    Ok(BatchPrediction { labels, accuracy })
}
