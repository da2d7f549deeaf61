//! The multi-view VAE: per-view encoders, posterior fusion, decoders and the
//! attention classifier.
//!
//! Views are EEG, speech 1 and speech 2. Each encoder produces a diagonal
//! Gaussian; the complete posterior fuses all three, the task-related posterior
//! fuses EEG with the attended speech only. Reconstructions and the classifier
//! read a single sample of the complete posterior.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::data::{Dataset, View};
use crate::error::{Error, Result};
use crate::gaussian::{
    self, component_for, enumerate_subsets, fuse_nodes, mixture_kl_bound_node, mixture_mean_node,
    sample_node, DiagonalGaussian, FusionMode, GaussianNode, MixtureNode, MixturePosterior,
    ViewSubset, LOG_VARIANCE_MAX, LOG_VARIANCE_MIN,
};
use crate::losses::{bce_node, recon_node, tmc_node, LossBreakdown, TmcConfig};
use crate::optim::{self, Parameter};
use crate::parallel::Execution;
use crate::tensor::Tensor;

/// One entry of an encoder layer list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    /// Fully connected layer; inputs of rank above 1 are flattened first.
    Affine { out: usize },
    /// Valid 2-D convolution over a `[channels, height, width]` input.
    Conv2d {
        channels: usize,
        kernel: [usize; 2],
        stride: usize,
    },
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub fusion: FusionMode,
    /// Per-sample EEG feature shape.
    pub eeg_shape: Vec<usize>,
    /// Per-sample shape of each speech view.
    pub speech_shape: Vec<usize>,
    pub eeg_encoder: Vec<LayerSpec>,
    pub speech_encoder: Vec<LayerSpec>,
    /// Width of the shared layer between an encoder trunk and its mean/log-variance heads.
    pub common_hidden: usize,
    /// Hidden widths of the classifier; exactly two, giving three affine layers.
    pub classifier_hidden: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub tmc: bool,
    pub infonce_denominator: bool,
    /// Use one encoder/decoder pair for both speech positions.
    pub share_speech_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(40, 60)
    }
}

impl ModelConfig {
    /// Small fully connected model for vector-valued features.
    pub fn desk(eeg_dim: usize, speech_dim: usize) -> Self {
        let trunk = vec![LayerSpec::Affine { out: 64 }, LayerSpec::Relu];
        ModelConfig {
            latent_dim: 128,
            fusion: FusionMode::Mopoe,
            eeg_shape: vec![eeg_dim],
            speech_shape: vec![speech_dim],
            eeg_encoder: trunk.clone(),
            speech_encoder: trunk,
            common_hidden: 64,
            classifier_hidden: vec![64, 64],
            alpha: 1.0,
            beta: 1.0,
            tau: 1.5,
            tmc: true,
            infonce_denominator: false,
            share_speech_encoder: false,
        }
    }

    /// Convolutional encoders for band-filtered EEG `[5, 10, 384]` (four conv layers)
    /// and log spectrograms `[1, 257, 248]` (five conv layers).
    pub fn conv_arch() -> Self {
        let conv = |channels, kh, kw| LayerSpec::Conv2d {
            channels,
            kernel: [kh, kw],
            stride: 2,
        };
        let eeg_encoder = vec![
            conv(16, 3, 8),
            LayerSpec::Relu,
            conv(32, 2, 8),
            LayerSpec::Relu,
            conv(32, 1, 8),
            LayerSpec::Relu,
            conv(32, 1, 8),
            LayerSpec::Relu,
        ];
        let mut speech_encoder = Vec::new();
        for channels in [8, 16, 32, 32, 32] {
            speech_encoder.push(conv(channels, 4, 4));
            speech_encoder.push(LayerSpec::Relu);
        }
        ModelConfig {
            eeg_shape: vec![5, 10, 384],
            speech_shape: vec![1, 257, 248],
            eeg_encoder,
            speech_encoder,
            common_hidden: 256,
            classifier_hidden: vec![64, 32],
            ..ModelConfig::desk(1, 1)
        }
    }

    /// The contrastive weight actually applied: `beta` with TMC on, zero otherwise.
    pub fn effective_beta(&self) -> f64 {
        if self.tmc {
            self.beta
        } else {
            0.0
        }
    }

    pub fn tmc_config(&self) -> TmcConfig {
        TmcConfig {
            tau: self.tau,
            infonce_denominator: self.infonce_denominator,
        }
    }

    pub fn view_shape(&self, view: View) -> &[usize] {
        match view {
            View::Eeg => &self.eeg_shape,
            View::Speech1 | View::Speech2 => &self.speech_shape,
        }
    }

    /// Name of the first field that changes the parameter layout or the forward
    /// computation, if any. Loss weights and the temperature are not compared.
    pub fn architecture_difference(&self, other: &ModelConfig) -> Option<&'static str> {
        let checks = [
            ("latent_dim", self.latent_dim == other.latent_dim),
            ("fusion", self.fusion == other.fusion),
            ("eeg_shape", self.eeg_shape == other.eeg_shape),
            ("speech_shape", self.speech_shape == other.speech_shape),
            ("eeg_encoder", self.eeg_encoder == other.eeg_encoder),
            ("speech_encoder", self.speech_encoder == other.speech_encoder),
            ("common_hidden", self.common_hidden == other.common_hidden),
            ("classifier_hidden", self.classifier_hidden == other.classifier_hidden),
            ("share_speech_encoder", self.share_speech_encoder == other.share_speech_encoder),
        ];
        checks.into_iter().find(|(_, same)| !same).map(|(name, _)| name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if self.common_hidden < 1 {
            return Err(Error::Config("common_hidden must be at least 1".into()));
        }
        if self.classifier_hidden.len() != 2 || self.classifier_hidden.contains(&0) {
            return Err(Error::Config(format!(
                "classifier_hidden must hold two positive widths, got {:?}",
                self.classifier_hidden
            )));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        trace_shapes(&self.eeg_shape, &self.eeg_encoder)?;
        trace_shapes(&self.speech_shape, &self.speech_encoder)?;
        Ok(())
    }
}

/// Per-sample shapes entering each layer, followed by the final output shape.
pub fn trace_shapes(input: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input.is_empty() || input.contains(&0) {
        return Err(Error::Config(format!("invalid input shape {input:?}")));
    }
    let mut shapes = vec![input.to_vec()];
    for (i, layer) in layers.iter().enumerate() {
        let cur = shapes.last().expect("non-empty");
        let next = match *layer {
            LayerSpec::Affine { out } if out > 0 => vec![out],
            LayerSpec::Affine { .. } => {
                return Err(Error::Config(format!("layer {i}: affine width must be positive")))
            }
            LayerSpec::Relu => cur.clone(),
            LayerSpec::Conv2d {
                channels,
                kernel: [kh, kw],
                stride,
            } => {
                let &[_, h, w] = cur.as_slice() else {
                    return Err(Error::Config(format!(
                        "layer {i}: conv2d needs a [channels, height, width] input, got {cur:?}"
                    )));
                };
                if channels == 0 || stride == 0 || kh == 0 || kw == 0 || kh > h || kw > w {
                    return Err(Error::Config(format!(
                        "layer {i}: conv2d {channels}ch kernel {kh}x{kw} stride {stride} does not fit {cur:?}"
                    )));
                }
                vec![channels, (h - kh) / stride + 1, (w - kw) / stride + 1]
            }
        };
        shapes.push(next);
    }
    Ok(shapes)
}

#[derive(Clone, Debug)]
enum Block {
    Affine {
        weight: usize,
        bias: usize,
    },
    Conv {
        kernels: usize,
        bias: usize,
        stride: usize,
    },
    ConvT {
        kernels: usize,
        bias: usize,
        stride: usize,
        padding: (usize, usize),
    },
    Relu,
    Reshape(Vec<usize>),
}

#[derive(Clone, Debug, Default)]
struct Network {
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
struct Encoder {
    trunk: Network,
    common: Block,
    mean: Block,
    log_variance: Block,
}

struct Builder {
    params: Vec<Parameter>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> Result<usize> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.params.push(Parameter::new(name, Tensor::new(shape, data)?));
        Ok(self.params.len() - 1)
    }

    fn affine(&mut self, name: &str, fan_in: usize, out: usize) -> Result<Block> {
        Ok(Block::Affine {
            weight: self.uniform(format!("{name}.weight"), vec![fan_in, out], fan_in)?,
            bias: self.uniform(format!("{name}.bias"), vec![1, out], fan_in)?,
        })
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: [usize; 2], stride: usize) -> Result<Block> {
        let fan_in = c_in * k[0] * k[1];
        Ok(Block::Conv {
            kernels: self.uniform(format!("{name}.weight"), vec![c_out, c_in, k[0], k[1]], fan_in)?,
            bias: self.uniform(format!("{name}.bias"), vec![c_out, 1], fan_in)?,
            stride,
        })
    }

    fn conv_t(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: [usize; 2],
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Block> {
        let fan_in = c_in * k[0] * k[1];
        Ok(Block::ConvT {
            kernels: self.uniform(format!("{name}.weight"), vec![c_in, c_out, k[0], k[1]], fan_in)?,
            bias: self.uniform(format!("{name}.bias"), vec![c_out, 1], fan_in)?,
            stride,
            padding,
        })
    }

    fn encoder(&mut self, name: &str, input: &[usize], layers: &[LayerSpec], config: &ModelConfig) -> Result<Encoder> {
        let shapes = trace_shapes(input, layers)?;
        let mut trunk = Network::default();
        for (i, layer) in layers.iter().enumerate() {
            let cur = &shapes[i];
            let block = match *layer {
                LayerSpec::Affine { out } => {
                    self.affine(&format!("{name}.trunk.{i}"), cur.iter().product(), out)?
                }
                LayerSpec::Conv2d {
                    channels,
                    kernel,
                    stride,
                } => self.conv(&format!("{name}.trunk.{i}"), cur[0], channels, kernel, stride)?,
                LayerSpec::Relu => Block::Relu,
            };
            trunk.blocks.push(block);
        }
        let flat: usize = shapes.last().expect("non-empty").iter().product();
        let h = config.common_hidden;
        let d = config.latent_dim;
        Ok(Encoder {
            trunk,
            common: self.affine(&format!("{name}.common"), flat, h)?,
            mean: self.affine(&format!("{name}.mean"), h, d)?,
            log_variance: self.affine(&format!("{name}.log_variance"), h, d)?,
        })
    }

    /// Mirrors an encoder trunk: the latent is mapped to the trunk's output shape and
    /// each weight layer is undone in reverse order, with a ReLU between layers.
    fn decoder(&mut self, name: &str, output: &[usize], layers: &[LayerSpec], latent: usize) -> Result<Network> {
        let shapes = trace_shapes(output, layers)?;
        let weighted: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| !matches!(l, LayerSpec::Relu))
            .map(|(i, _)| i)
            .collect();
        let mut net = Network::default();
        let top = shapes.last().expect("non-empty");
        net.blocks
            .push(self.affine(&format!("{name}.input"), latent, top.iter().product())?);
        if top.len() > 1 {
            net.blocks.push(Block::Reshape(top.clone()));
        }
        for (step, &i) in weighted.iter().rev().enumerate() {
            net.blocks.push(Block::Relu);
            let (before, after) = (&shapes[i], &shapes[i + 1]);
            let label = format!("{name}.layer.{step}");
            match layers[i] {
                LayerSpec::Affine { .. } => {
                    let fan_in = after.iter().product();
                    net.blocks.push(self.affine(&label, fan_in, before.iter().product())?);
                    if before.len() > 1 {
                        net.blocks.push(Block::Reshape(before.clone()));
                    }
                }
                LayerSpec::Conv2d { kernel, stride, .. } => {
                    let pad = |big: usize, small: usize, k: usize| big - ((small - 1) * stride + k);
                    let padding = (pad(before[1], after[1], kernel[0]), pad(before[2], after[2], kernel[1]));
                    net.blocks
                        .push(self.conv_t(&label, after[0], before[0], kernel, stride, padding)?);
                }
                LayerSpec::Relu => unreachable!("filtered above"),
            }
        }
        Ok(net)
    }
}

impl Block {
    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let batch = tape.shape(x)[0];
        match *self {
            Block::Affine { weight, bias } => {
                let flat: usize = tape.shape(x)[1..].iter().product();
                let x = if tape.value(x).rank() == 2 {
                    x
                } else {
                    tape.reshape(x, &[batch, flat])?
                };
                let y = tape.matmul(x, vars[weight])?;
                let ones = tape.constant(Tensor::from_parts_unchecked(vec![batch, 1], vec![1.0; batch]));
                let b = tape.matmul(ones, vars[bias])?;
                tape.add(y, b)
            }
            Block::Conv {
                kernels,
                bias,
                stride,
            } => {
                let y = tape.conv2d(x, vars[kernels], stride)?;
                add_channel_bias(tape, y, vars[bias])
            }
            Block::ConvT {
                kernels,
                bias,
                stride,
                padding,
            } => {
                let y = tape.conv_transpose2d_padded(x, vars[kernels], stride, padding)?;
                add_channel_bias(tape, y, vars[bias])
            }
            Block::Relu => Ok(tape.relu(x)),
            Block::Reshape(ref shape) => {
                let mut full = vec![batch];
                full.extend_from_slice(shape);
                tape.reshape(x, &full)
            }
        }
    }
}

/// Adds a `[O, 1]` bias to every position of a `[B, O, H, W]` feature map.
fn add_channel_bias(tape: &mut Tape, y: Var, bias: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let (b, o, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let ones_hw = tape.constant(Tensor::from_parts_unchecked(vec![1, hw], vec![1.0; hw]));
    let per_channel = tape.matmul(bias, ones_hw)?;
    let row = tape.reshape(per_channel, &[1, o * hw])?;
    let ones_b = tape.constant(Tensor::from_parts_unchecked(vec![b, 1], vec![1.0; b]));
    let full = tape.matmul(ones_b, row)?;
    let full = tape.reshape(full, &shape)?;
    tape.add(y, full)
}

impl Network {
    fn forward(&self, tape: &mut Tape, vars: &[Var], mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(tape, vars, x)?;
        }
        Ok(x)
    }
}

/// Everything recorded by one training forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    /// Tape handles of the model parameters, in parameter order.
    pub params: Vec<Var>,
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub single_view: [GaussianNode; 3],
    pub complete: MixtureNode,
    pub task_related: MixtureNode,
    pub z_complete: Var,
    pub z_task: Var,
    /// Reconstructions of EEG, speech 1 and speech 2.
    pub reconstructions: [Var; 3],
    /// `[B, 1]` probabilities that speech 1 is attended.
    pub prediction: Var,
    /// Present only when the contrastive term is active.
    pub tmc: Option<Var>,
}

/// Complete means, task-related means (when labeled) and probabilities of one chunk, flattened.
type ChunkEmbedding = (Vec<f64>, Option<Vec<f64>>, Vec<f64>);

/// Deterministic representations of a dataset, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    /// Means of the complete posterior.
    pub complete: Tensor,
    /// Means of the task-related posterior; only when labels were available.
    pub task_related: Option<Tensor>,
    /// Probability that speech 1 is attended.
    pub probabilities: Vec<f64>,
}

impl Embeddings {
    /// Label 0 (speech 1) when the probability is at least one half.
    pub fn predicted_labels(&self) -> Vec<u8> {
        self.probabilities
            .iter()
            .map(|&p| if p >= 0.5 { 0 } else { 1 })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct MultiViewVae {
    config: ModelConfig,
    params: Vec<Parameter>,
    encoders: [Encoder; 3],
    decoders: [Network; 3],
    classifier: Network,
}

impl MultiViewVae {
    /// Builds the model with parameters drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = config.latent_dim;
        let eeg = b.encoder("encoder.eeg", &config.eeg_shape, &config.eeg_encoder, &config)?;
        let s1 = b.encoder("encoder.speech1", &config.speech_shape, &config.speech_encoder, &config)?;
        let s2 = if config.share_speech_encoder {
            s1.clone()
        } else {
            b.encoder("encoder.speech2", &config.speech_shape, &config.speech_encoder, &config)?
        };
        let dec_eeg = b.decoder("decoder.eeg", &config.eeg_shape, &config.eeg_encoder, d)?;
        let dec_s1 = b.decoder("decoder.speech1", &config.speech_shape, &config.speech_encoder, d)?;
        let dec_s2 = if config.share_speech_encoder {
            dec_s1.clone()
        } else {
            b.decoder("decoder.speech2", &config.speech_shape, &config.speech_encoder, d)?
        };
        let [h1, h2] = [config.classifier_hidden[0], config.classifier_hidden[1]];
        let classifier = Network {
            blocks: vec![
                b.affine("classifier.0", d, h1)?,
                Block::Relu,
                b.affine("classifier.1", h1, h2)?,
                Block::Relu,
                b.affine("classifier.2", h2, 1)?,
            ],
        };
        Ok(MultiViewVae {
            config,
            params: b.params,
            encoders: [eeg, s1, s2],
            decoders: [dec_eeg, dec_s1, dec_s2],
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces every parameter value; names and shapes must match exactly.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                values.len(),
                self.params.len()
            )));
        }
        for (p, (name, v)) in self.params.iter().zip(&values) {
            if &p.name != name || p.value.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint tensor {name} {:?} does not match model parameter {} {:?}",
                    v.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for (p, (_, v)) in self.params.iter_mut().zip(values) {
            p.value = v;
            p.grad = None;
        }
        Ok(())
    }

    fn check_view(&self, view: View, shape: &[usize]) -> Result<()> {
        let expected = self.config.view_shape(view);
        if shape.len() != expected.len() + 1 || &shape[1..] != expected {
            return Err(Error::dim(format!(
                "{} features {shape:?} do not match configured [batch, {expected:?}]",
                view.name()
            )));
        }
        Ok(())
    }

    /// Records the encoder of `view` applied to `x` (`[B, ...view shape]`).
    pub fn encode_node(&self, tape: &mut Tape, params: &[Var], view: View, x: Var) -> Result<GaussianNode> {
        self.check_view(view, tape.shape(x))?;
        let enc = &self.encoders[view.index()];
        let h = enc.trunk.forward(tape, params, x)?;
        let h = enc.common.forward(tape, params, h)?;
        let h = tape.relu(h);
        let mean = enc.mean.forward(tape, params, h)?;
        let lv = enc.log_variance.forward(tape, params, h)?;
        let log_variance = tape.clamp(lv, LOG_VARIANCE_MIN, LOG_VARIANCE_MAX);
        Ok(GaussianNode { mean, log_variance })
    }

    /// Records the classifier on `z` (`[B, latent]`), returning `[B, 1]` probabilities.
    pub fn classify_node(&self, tape: &mut Tape, params: &[Var], z: Var) -> Result<Var> {
        let shape = tape.shape(z);
        if shape.len() != 2 || shape[1] != self.config.latent_dim {
            return Err(Error::dim(format!(
                "classifier input {shape:?} does not match latent dim {}",
                self.config.latent_dim
            )));
        }
        let logit = self.classifier.forward(tape, params, z)?;
        Ok(tape.sigmoid(logit))
    }

    pub fn decode_node(&self, tape: &mut Tape, params: &[Var], view: View, z: Var) -> Result<Var> {
        self.decoders[view.index()].forward(tape, params, z)
    }

    fn frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Single-view posteriors for a batch of features, one per row.
    pub fn encode_view(&self, view: View, features: &Tensor) -> Result<Vec<DiagonalGaussian>> {
        let mut tape = Tape::new();
        let params = self.frozen(&mut tape);
        let x = tape.constant(features.clone());
        let node = self.encode_node(&mut tape, &params, view, x)?;
        let (m, lv) = (tape.value(node.mean), tape.value(node.log_variance));
        (0..m.shape()[0])
            .map(|r| DiagonalGaussian::new(m.row(r).to_vec(), lv.row(r).to_vec()))
            .collect()
    }

    /// Complete posterior from the EEG, speech-1 and speech-2 posteriors.
    pub fn fuse_complete(&self, posteriors: &[DiagonalGaussian]) -> Result<MixturePosterior> {
        if posteriors.len() < 3 {
            return Err(Error::MissingView(format!(
                "complete posterior needs 3 views, got {}",
                posteriors.len()
            )));
        }
        gaussian::fuse(posteriors, &enumerate_subsets(3, self.config.fusion)?)
    }

    /// Task-related posterior from EEG and the attended speech selected by `label`.
    pub fn fuse_task_related(
        &self,
        eeg: &DiagonalGaussian,
        speech1: &DiagonalGaussian,
        speech2: &DiagonalGaussian,
        label: Option<u8>,
    ) -> Result<MixturePosterior> {
        let attended = match label {
            Some(0) => speech1,
            Some(1) => speech2,
            Some(other) => return Err(Error::Domain(format!("label {other} is not 0 or 1"))),
            None => return Err(Error::contract("task-related posterior needs the label")),
        };
        gaussian::fuse(
            &[eeg.clone(), attended.clone()],
            &enumerate_subsets(2, self.config.fusion)?,
        )
    }

    /// Probability that speech 1 is attended, for each row of `z`.
    pub fn classify(&self, z: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = self.frozen(&mut tape);
        let z = tape.constant(z.clone());
        let p = self.classify_node(&mut tape, &params, z)?;
        Ok(tape.value(p).data().to_vec())
    }

    /// Encodes every view and fuses; the task-related mixture needs `labels`.
    fn posteriors(
        &self,
        tape: &mut Tape,
        params: &[Var],
        batch: &Dataset,
        labels: Option<&[u8]>,
    ) -> Result<([GaussianNode; 3], MixtureNode, Option<MixtureNode>)> {
        let mut single = Vec::with_capacity(3);
        for view in View::ALL {
            let x = tape.constant(batch.view(view).clone());
            single.push(self.encode_node(tape, params, view, x)?);
        }
        let single: [GaussianNode; 3] = single.try_into().expect("three views");
        let complete = fuse_nodes(tape, &single, &enumerate_subsets(3, self.config.fusion)?)?;
        let task = match labels {
            Some(labels) => {
                let choice: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
                let (s1, s2) = (single[1], single[2]);
                let attended = match choice.first() {
                    Some(&c) if choice.iter().all(|&x| x == c) => single[1 + c],
                    _ => GaussianNode {
                        mean: tape.pick_rows(&choice, &[s1.mean, s2.mean])?,
                        log_variance: tape.pick_rows(&choice, &[s1.log_variance, s2.log_variance])?,
                    },
                };
                Some(fuse_nodes(
                    tape,
                    &[single[0], attended],
                    &enumerate_subsets(2, self.config.fusion)?,
                )?)
            }
            None => None,
        };
        Ok((single, complete, task))
    }

    /// One stochastic pass over a labeled batch, recording the full objective.
    ///
    /// Mixture components are drawn per row, with complete-posterior subsets
    /// enumerated relative to the attended position so that exchanging the two
    /// speech positions (and the label) maps each draw onto its mirror image.
    pub fn forward_train<R: Rng + ?Sized>(&self, batch: &Dataset, rng: &mut R) -> Result<ForwardPass> {
        let labels = batch.labels()?;
        let b = batch.len();
        let d = self.config.latent_dim;
        let mut tape = Tape::new();
        let params = optim::bind(&mut tape, &self.params);
        let (single, complete, task) = self.posteriors(&mut tape, &params, batch, Some(labels))?;
        let task = task.expect("labels supplied");

        let subsets = enumerate_subsets(3, self.config.fusion)?;
        let picks_c: Vec<usize> = labels
            .iter()
            .map(|&l| {
                let rel = subsets[component_for(rng.random::<f64>(), subsets.len())];
                let abs = relative_to_absolute(rel, l);
                subsets.iter().position(|&s| s == abs).expect("closed under swap")
            })
            .collect();
        let k_t = task.components.len();
        let picks_t: Vec<usize> = (0..b).map(|_| component_for(rng.random::<f64>(), k_t)).collect();
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
        let eps_c = Tensor::new(vec![b, d], normal(b * d))?;
        let eps_t = Tensor::new(vec![b, d], normal(b * d))?;
        let z_complete = sample_node(&mut tape, &complete, &picks_c, eps_c)?;
        let z_task = sample_node(&mut tape, &task, &picks_t, eps_t)?;

        let mut recon_vars = Vec::with_capacity(3);
        let mut recon_terms = Vec::with_capacity(3);
        for view in View::ALL {
            let xhat = self.decode_node(&mut tape, &params, view, z_complete)?;
            let x = tape.constant(batch.view(view).clone());
            recon_terms.push(recon_node(&mut tape, xhat, x)?);
            recon_vars.push(xhat);
        }
        let kl_rows = mixture_kl_bound_node(&mut tape, &complete)?;
        let kl = tape.mean(kl_rows, None)?;

        let prediction = self.classify_node(&mut tape, &params, z_complete)?;
        let targets: Vec<f64> = labels.iter().map(|&l| 1.0 - l as f64).collect();
        let bce = bce_node(&mut tape, prediction, &targets)?;

        let beta = self.config.effective_beta();
        let tmc = if beta > 0.0 {
            Some(tmc_node(&mut tape, z_complete, z_task, self.config.tmc_config())?)
        } else {
            None
        };

        let mut recon_sum = recon_terms[0];
        for &r in &recon_terms[1..] {
            recon_sum = tape.add(recon_sum, r)?;
        }
        let neg_elbo = tape.sub(kl, recon_sum)?;
        let weighted_bce = tape.scale(bce, self.config.alpha);
        let mut loss = tape.add(neg_elbo, weighted_bce)?;
        if let Some(t) = tmc {
            let weighted = tape.scale(t, beta);
            loss = tape.add(loss, weighted)?;
        }

        let item = |v: Var| tape.value(v).data()[0];
        let breakdown = LossBreakdown::new(
            recon_terms.iter().map(|&r| item(r)).collect(),
            item(kl),
            item(bce),
            tmc.map_or(0.0, item),
            self.config.alpha,
            beta,
        )?;
        Ok(ForwardPass {
            params,
            loss,
            breakdown,
            single_view: single,
            complete,
            task_related: task,
            z_complete,
            z_task,
            reconstructions: recon_vars.try_into().expect("three views"),
            prediction,
            tmc,
            tape,
        })
    }

    /// Backpropagates the pass and adds the gradients into the parameters.
    pub fn accumulate_gradients(&mut self, pass: &ForwardPass) -> Result<Gradients> {
        let grads = pass.tape.backward(pass.loss)?;
        optim::accumulate(&mut self.params, &pass.params, &grads);
        Ok(grads)
    }

    fn embed_chunk(&self, chunk: &Dataset) -> Result<ChunkEmbedding> {
        let mut tape = Tape::new();
        let params = self.frozen(&mut tape);
        let (_, complete, task) = self.posteriors(&mut tape, &params, chunk, chunk.labels.as_deref())?;
        let zc = mixture_mean_node(&mut tape, &complete)?;
        let p = self.classify_node(&mut tape, &params, zc)?;
        let zt = match task {
            Some(t) => {
                let zt = mixture_mean_node(&mut tape, &t)?;
                Some(tape.value(zt).data().to_vec())
            }
            None => None,
        };
        Ok((tape.value(zc).data().to_vec(), zt, tape.value(p).data().to_vec()))
    }

    /// Posterior-mean embeddings and classifier probabilities, computed in chunks.
    pub fn embed(&self, data: &Dataset, exec: Execution, chunk: usize) -> Result<Embeddings> {
        if data.is_empty() {
            return Err(Error::contract("cannot embed an empty dataset"));
        }
        let chunk = chunk.max(1);
        let starts: Vec<usize> = (0..data.len()).step_by(chunk).collect();
        let parts = exec.map(&starts, |&s| {
            data.range(s, (s + chunk).min(data.len()))
                .and_then(|c| self.embed_chunk(&c))
        });
        let d = self.config.latent_dim;
        let (mut zc, mut zt, mut probs) = (Vec::new(), Some(Vec::new()), Vec::new());
        for part in parts {
            let (c, t, p) = part?;
            zc.extend(c);
            match (&mut zt, t) {
                (Some(acc), Some(t)) => acc.extend(t),
                _ => zt = None,
            }
            probs.extend(p);
        }
        let n = data.len();
        Ok(Embeddings {
            complete: Tensor::new(vec![n, d], zc)?,
            task_related: zt.map(|t| Tensor::new(vec![n, d], t)).transpose()?,
            probabilities: probs,
        })
    }

    /// Attended-speech predictions from the complete posterior mean alone.
    pub fn predict(&self, data: &Dataset, exec: Execution) -> Result<Vec<u8>> {
        Ok(self.embed(&data.without_labels(), exec, 256)?.predicted_labels())
    }
}

/// Maps a subset over (EEG, attended, unattended) to one over (EEG, speech 1, speech 2).
fn relative_to_absolute(rel: ViewSubset, label: u8) -> ViewSubset {
    if label == 0 {
        return rel;
    }
    let m = rel.mask();
    let swapped = (m & 1) | ((m & 2) << 1) | ((m & 4) >> 1);
    ViewSubset::new(swapped).expect("non-empty stays non-empty")
}
