//! Encoder, weight-tied decoder, classifier heads and the Gaussian prior.
//!
//! The default [`Architecture`] is the synthetic-experiment MLP:
//! encoder `FC-56, ReLU, FC-128, ReLU, FC-256, ReLU, BatchNorm`, decoder
//! `FC-128, ReLU, BatchNorm, FC-56, ReLU, FC-2, <final>` where every decoder
//! weight is the transpose of the matching encoder weight.

mod checkpoint;
mod forward;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Var};
use crate::error::{shape_err, Result};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use forward::{BnUpdate, Forward, Mode};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// All trainable tensors of a model, in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    /// Encoder hidden widths before the latent layer.
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub classifier_hidden: usize,
    pub classes: usize,
    pub decoder_final: Activation,
    pub tied: bool,
    /// 1 for a single classifier, 2 for the adversarial pair.
    pub heads: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden: vec![56, 128],
            latent: 256,
            classifier_hidden: 64,
            classes: 2,
            decoder_final: Activation::None,
            tied: true,
            heads: 1,
        }
    }
}

impl Architecture {
    /// Encoder widths including input and latent.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.latent);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths().contains(&0) || self.classifier_hidden == 0 || self.classes == 0 {
            return Err(shape_err("architecture widths must be positive"));
        }
        if !(1..=2).contains(&self.heads) {
            return Err(shape_err("heads must be 1 or 2"));
        }
        Ok(())
    }
}

/// `y = act(x Wᵀ + b)`, `W` stored `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl DenseLayer {
    fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let pre = self.pre_activation(fwd, x)?;
        activate(fwd, pre, self.activation)
    }

    fn pre_activation(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = fwd.param(self.weight)?;
        let b = fwd.param(self.bias)?;
        let h = fwd.tape().matmul_transposed(x, w)?;
        fwd.tape().add_row_bias(h, b)
    }
}

fn activate(fwd: &mut Forward<'_>, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => fwd.tape().relu(x),
        Activation::None => Ok(x),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormSlot {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub slot: NormSlot,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let gamma = fwd.param(self.gamma)?;
        let beta = fwd.param(self.beta)?;
        match fwd.mode() {
            Mode::Train => {
                let (y, stats) = fwd.tape().batchnorm_train(x, gamma, beta, BN_EPS)?;
                fwd.record_bn(self.slot, stats);
                Ok(y)
            }
            Mode::Eval => fwd.tape().batchnorm_eval(
                x,
                gamma,
                beta,
                self.running_mean.clone(),
                self.running_var.clone(),
                BN_EPS,
            ),
        }
    }

    /// Exponential running average; variance uses the unbiased estimate.
    fn update(&mut self, stats: &BatchStats) {
        let n = stats.rows as f64;
        let correction = if stats.rows > 1 { n / (n - 1.0) } else { 1.0 };
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub layers: Vec<DenseLayer>,
    pub norm: BatchNorm,
}

/// Decoder stages run from the latent back to the input. In the tied
/// configuration `weights[k]` *is* an encoder weight id, so the decoder has
/// no weight storage of its own.
#[derive(Clone, Debug, PartialEq)]
pub struct TiedDecoder {
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
    pub norm: BatchNorm,
    pub final_activation: Activation,
    pub tied: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub arch: Architecture,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: TiedDecoder,
    pub classifiers: Vec<Classifier>,
}

fn he_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(rows, cols, data).expect("sized")
}

impl ModelBundle {
    /// He-normal weights, zero biases, identity batchnorm.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = SeedStreams::new(seed).stream("init");
        let mut params = ParamStore::default();
        let widths = arch.widths();
        let depth = widths.len() - 1;

        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let (fan_in, out) = (widths[i], widths[i + 1]);
            let weight = params.add(format!("encoder.{i}.weight"), he_normal(&mut rng, out, fan_in, fan_in));
            let bias = params.add(format!("encoder.{i}.bias"), Tensor::zeros(1, out));
            layers.push(DenseLayer {
                weight,
                bias,
                activation: Activation::Relu,
            });
        }
        let enc_norm = BatchNorm {
            slot: NormSlot::Encoder,
            gamma: params.add("encoder.norm.gamma", Tensor::full(1, arch.latent, 1.0)),
            beta: params.add("encoder.norm.beta", Tensor::zeros(1, arch.latent)),
            running_mean: vec![0.0; arch.latent],
            running_var: vec![1.0; arch.latent],
        };

        // Stage k maps widths[depth-k] -> widths[depth-k-1].
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        for k in 0..depth {
            let enc = depth - 1 - k;
            let out = widths[enc];
            weights.push(if arch.tied {
                layers[enc].weight
            } else {
                // Own storage starting from the encoder's values, stored with
                // the encoder's shape and read as z · V.
                let copy = params.get(layers[enc].weight).clone();
                params.add(format!("decoder.{k}.weight"), copy)
            });
            biases.push(params.add(format!("decoder.{k}.bias"), Tensor::zeros(1, out)));
        }
        let dec_width = widths[depth - 1];
        let dec_norm = BatchNorm {
            slot: NormSlot::Decoder,
            gamma: params.add("decoder.norm.gamma", Tensor::full(1, dec_width, 1.0)),
            beta: params.add("decoder.norm.beta", Tensor::zeros(1, dec_width)),
            running_mean: vec![0.0; dec_width],
            running_var: vec![1.0; dec_width],
        };

        let mut classifiers = Vec::with_capacity(arch.heads);
        for h in 0..arch.heads {
            let mut dense = |name: &str, fan_in: usize, out: usize, activation| DenseLayer {
                weight: params.add(format!("classifier{h}.{name}.weight"), he_normal(&mut rng, out, fan_in, fan_in)),
                bias: params.add(format!("classifier{h}.{name}.bias"), Tensor::zeros(1, out)),
                activation,
            };
            let hidden = dense("hidden", arch.latent, arch.classifier_hidden, Activation::Relu);
            let output = dense("output", arch.classifier_hidden, arch.classes, Activation::None);
            classifiers.push(Classifier { hidden, output });
        }

        Ok(Self {
            decoder: TiedDecoder {
                weights,
                biases,
                norm: dec_norm,
                final_activation: arch.decoder_final,
                tied: arch.tied,
            },
            encoder: Encoder {
                layers,
                norm: enc_norm,
            },
            classifiers,
            params,
            arch,
        })
    }

    /// `z = G(x)`.
    pub fn encode(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        Ok(self.encode_with_tap(fwd, x)?.0)
    }

    /// Returns `(z, pre-activation of the last encoder layer)`; the second is
    /// the histogram tap.
    pub fn encode_with_tap(&self, fwd: &mut Forward<'_>, x: Var) -> Result<(Var, Var)> {
        let width = fwd.tape_ref().value(x).cols();
        if width != self.arch.input_dim {
            return Err(shape_err(format!("encode expects width {}, got {width}", self.arch.input_dim)));
        }
        let (last, init) = self.encoder.layers.split_last().expect("non-empty");
        let mut h = x;
        for layer in init {
            h = layer.forward(fwd, h)?;
        }
        let tap = last.pre_activation(fwd, h)?;
        let h = activate(fwd, tap, last.activation)?;
        Ok((self.encoder.norm.forward(fwd, h)?, tap))
    }

    /// `x̂ = D(z)` through the transposed encoder weights.
    pub fn decode(&self, fwd: &mut Forward<'_>, z: Var) -> Result<Var> {
        let width = fwd.tape_ref().value(z).cols();
        if width != self.arch.latent {
            return Err(shape_err(format!("decode expects width {}, got {width}", self.arch.latent)));
        }
        let stages = self.decoder.weights.len();
        let mut h = z;
        for k in 0..stages {
            let w = fwd.param(self.decoder.weights[k])?;
            let b = fwd.param(self.decoder.biases[k])?;
            let lin = fwd.tape().matmul(h, w)?;
            let lin = fwd.tape().add_row_bias(lin, b)?;
            h = if k + 1 == stages {
                activate(fwd, lin, self.decoder.final_activation)?
            } else {
                fwd.tape().relu(lin)?
            };
            if k == 0 {
                h = self.decoder.norm.forward(fwd, h)?;
            }
        }
        Ok(h)
    }

    pub fn classify(&self, fwd: &mut Forward<'_>, z: Var, head: usize) -> Result<Var> {
        Ok(self.classify_with_features(fwd, z, head)?.0)
    }

    /// Returns `(logits, penultimate activations)`.
    pub fn classify_with_features(&self, fwd: &mut Forward<'_>, z: Var, head: usize) -> Result<(Var, Var)> {
        let c = self
            .classifiers
            .get(head)
            .ok_or_else(|| shape_err(format!("no classifier head {head}")))?;
        let width = fwd.tape_ref().value(z).cols();
        if width != self.arch.latent {
            return Err(shape_err(format!("classify expects width {}, got {width}", self.arch.latent)));
        }
        let features = c.hidden.forward(fwd, z)?;
        Ok((c.output.forward(fwd, features)?, features))
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            match u.slot {
                NormSlot::Encoder => self.encoder.norm.update(&u.stats),
                NormSlot::Decoder => self.decoder.norm.update(&u.stats),
            }
        }
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.encoder.layers.iter().flat_map(|l| [l.weight, l.bias]).collect();
        ids.extend([self.encoder.norm.gamma, self.encoder.norm.beta]);
        ids
    }

    /// Parameters owned by the decoder (excludes tied weights).
    pub fn decoder_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if !self.decoder.tied {
            ids.extend(&self.decoder.weights);
        }
        ids.extend(&self.decoder.biases);
        ids.extend([self.decoder.norm.gamma, self.decoder.norm.beta]);
        ids
    }

    pub fn classifier_params(&self, head: usize) -> Vec<ParamId> {
        let c = &self.classifiers[head];
        vec![c.hidden.weight, c.hidden.bias, c.output.weight, c.output.bias]
    }

    pub fn all_classifier_params(&self) -> Vec<ParamId> {
        (0..self.classifiers.len()).flat_map(|h| self.classifier_params(h)).collect()
    }

    fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.params.get(id).len()).sum()
    }

    pub fn encoder_scalar_count(&self) -> usize {
        self.count(&self.encoder_params())
    }

    pub fn decoder_scalar_count(&self) -> usize {
        self.count(&self.decoder_params())
    }

    /// Decoder stage `k` as an `out x in` matrix (stage 0 reads the latent).
    pub fn decoder_weight_view(&self, stage: usize) -> Tensor {
        self.params.get(self.decoder.weights[stage]).transpose()
    }

    /// Encoder layer matching decoder stage `stage`.
    pub fn mirrored_encoder_weight(&self, stage: usize) -> &Tensor {
        let depth = self.encoder.layers.len();
        self.params.get(self.encoder.layers[depth - 1 - stage].weight)
    }

    /// Bitwise check that every decoder stage is the transpose of its
    /// mirrored encoder layer.
    pub fn tying_holds(&self) -> bool {
        (0..self.decoder.weights.len()).all(|k| {
            let view = self.decoder_weight_view(k);
            let enc_t = self.mirrored_encoder_weight(k).transpose();
            view.shape() == enc_t.shape()
                && view
                    .data()
                    .iter()
                    .zip(enc_t.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }

    /// Evaluation-mode forward pass of `x` through the encoder, returning
    /// latent codes as a plain tensor.
    pub fn encode_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = crate::autodiff::Tape::new();
        let mut fwd = Forward::new(&mut tape, &self.params, Mode::Eval).frozen();
        let xv = fwd.input(x.clone())?;
        let z = self.encode(&mut fwd, xv)?;
        Ok(fwd.tape_ref().value(z).clone())
    }

    pub fn encode_eval_with_tap(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = crate::autodiff::Tape::new();
        let mut fwd = Forward::new(&mut tape, &self.params, Mode::Eval).frozen();
        let xv = fwd.input(x.clone())?;
        let (z, tap) = self.encode_with_tap(&mut fwd, xv)?;
        Ok((fwd.tape_ref().value(z).clone(), fwd.tape_ref().value(tap).clone()))
    }

    pub fn reconstruct_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = crate::autodiff::Tape::new();
        let mut fwd = Forward::new(&mut tape, &self.params, Mode::Eval).frozen();
        let xv = fwd.input(x.clone())?;
        let z = self.encode(&mut fwd, xv)?;
        let r = self.decode(&mut fwd, z)?;
        Ok(fwd.tape_ref().value(r).clone())
    }

    pub fn logits_eval(&self, x: &Tensor, head: usize) -> Result<Tensor> {
        let mut tape = crate::autodiff::Tape::new();
        let mut fwd = Forward::new(&mut tape, &self.params, Mode::Eval).frozen();
        let xv = fwd.input(x.clone())?;
        let z = self.encode(&mut fwd, xv)?;
        let l = self.classify(&mut fwd, z, head)?;
        Ok(fwd.tape_ref().value(l).clone())
    }
}

/// Draws i.i.d. standard-normal latent batches from its own stream.
#[derive(Clone, Debug)]
pub struct PriorSampler {
    dim: usize,
    rng: ChaCha8Rng,
}

impl PriorSampler {
    pub fn new(dim: usize, rng: ChaCha8Rng) -> Self {
        Self { dim, rng }
    }

    pub fn from_seed(dim: usize, seed: u64) -> Self {
        Self::new(dim, SeedStreams::new(seed).stream("prior"))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// A fresh `m x dim` batch; every call advances the stream.
    pub fn sample(&mut self, m: usize) -> Result<Tensor> {
        if m == 0 {
            return Err(shape_err("prior batch must have at least one row"));
        }
        let data = (0..m * self.dim).map(|_| self.rng.sample(StandardNormal)).collect();
        Tensor::new(m, self.dim, data)
    }
}

/// One `m x dim` draw from a fresh sampler at `seed`.
pub fn sample_prior(m: usize, dim: usize, seed: u64) -> Result<Tensor> {
    PriorSampler::from_seed(dim, seed).sample(m)
}
