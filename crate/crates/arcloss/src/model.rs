//! The two CNN presets, declarative architecture specs, and checkpoints.
//!
//! A spec is an ordered layer list; building walks it once to audit every
//! intermediate shape (rejecting drift like a wrong global-average-pool
//! input size) and to derive parameter shapes, then initializes weights
//! He-style from the seed. Batch norm sits after each conv, before the
//! leaky ReLU.

use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::tape::{BnState, Mode, NodeId, Parameter, Tape};
use crate::tensor::Tensor;
use crate::util::{stream_rng, Stream};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    GaussianNoise { sigma: f64 },
    Conv { out_channels: usize, kernel: usize, padding: Padding },
    BatchNorm,
    LeakyRelu { alpha: f64 },
    MaxPool,
    Dropout { rate: f64 },
    GlobalAvgPool,
    Dense { out: usize },
}

/// Named presets mirrored by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    CifarNet,
    MnistNet,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar_net" => Ok(Preset::CifarNet),
            "mnist_net" => Ok(Preset::MnistNet),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Preset::CifarNet => write!(f, "cifar_net"),
            Preset::MnistNet => write!(f, "mnist_net"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    /// Input (channels, height, width).
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerKind>,
    /// Width of the global-average-pool output feeding the classifier.
    pub embed_dim: usize,
    pub num_classes: usize,
}

const LRELU_ALPHA: f64 = 0.1;
const NOISE_SIGMA: f64 = 0.15;
const DROP_RATE: f64 = 0.5;

fn conv_block(layers: &mut Vec<LayerKind>, out_channels: usize, kernel: usize, padding: Padding) {
    layers.push(LayerKind::Conv { out_channels, kernel, padding });
    layers.push(LayerKind::BatchNorm);
    layers.push(LayerKind::LeakyRelu { alpha: LRELU_ALPHA });
}

impl ArchitectureSpec {
    /// 32x32x3 net: three 128-wide 3x3 blocks, pool/drop, three 256-wide
    /// blocks, pool/drop, a 512 valid conv down to 6x6, two 1x1 convs, GAP,
    /// classifier. The last 1x1 conv width is the embedding dimension.
    pub fn cifar_net(embed_dim: usize, num_classes: usize) -> Self {
        let mut layers = vec![LayerKind::GaussianNoise { sigma: NOISE_SIGMA }];
        for _ in 0..3 {
            conv_block(&mut layers, 128, 3, Padding::Same);
        }
        layers.push(LayerKind::MaxPool);
        layers.push(LayerKind::Dropout { rate: DROP_RATE });
        for _ in 0..3 {
            conv_block(&mut layers, 256, 3, Padding::Same);
        }
        layers.push(LayerKind::MaxPool);
        layers.push(LayerKind::Dropout { rate: DROP_RATE });
        conv_block(&mut layers, 512, 3, Padding::Valid);
        conv_block(&mut layers, 256, 1, Padding::Same);
        conv_block(&mut layers, embed_dim, 1, Padding::Same);
        layers.push(LayerKind::GlobalAvgPool);
        layers.push(LayerKind::Dense { out: num_classes });
        ArchitectureSpec {
            name: "cifar_net".into(),
            input: (3, 32, 32),
            layers,
            embed_dim,
            num_classes,
        }
    }

    /// 28x28x1 net: two pooled 64-wide blocks, a 128 valid conv down to 5x5,
    /// one 1x1 conv at the embedding width, GAP, classifier.
    pub fn mnist_net(embed_dim: usize, num_classes: usize) -> Self {
        let mut layers = vec![LayerKind::GaussianNoise { sigma: NOISE_SIGMA }];
        conv_block(&mut layers, 64, 3, Padding::Same);
        layers.push(LayerKind::MaxPool);
        layers.push(LayerKind::Dropout { rate: DROP_RATE });
        conv_block(&mut layers, 64, 3, Padding::Same);
        layers.push(LayerKind::MaxPool);
        layers.push(LayerKind::Dropout { rate: DROP_RATE });
        conv_block(&mut layers, 128, 3, Padding::Valid);
        conv_block(&mut layers, embed_dim, 1, Padding::Same);
        layers.push(LayerKind::GlobalAvgPool);
        layers.push(LayerKind::Dense { out: num_classes });
        ArchitectureSpec {
            name: "mnist_net".into(),
            input: (1, 28, 28),
            layers,
            embed_dim,
            num_classes,
        }
    }

    pub fn preset(preset: Preset, embed_dim: usize, num_classes: usize) -> Self {
        match preset {
            Preset::CifarNet => Self::cifar_net(embed_dim, num_classes),
            Preset::MnistNet => Self::mnist_net(embed_dim, num_classes),
        }
    }

    /// Copy with noise and dropout disabled (for gradient checks and other
    /// deterministic train-mode runs).
    pub fn without_stochastic_layers(&self) -> Self {
        let mut out = self.clone();
        for layer in &mut out.layers {
            match layer {
                LayerKind::GaussianNoise { sigma } => *sigma = 0.0,
                LayerKind::Dropout { rate } => *rate = 0.0,
                _ => {}
            }
        }
        out
    }
}

/// Result of the static shape walk.
#[derive(Debug, Clone)]
pub struct ShapeAudit {
    /// Activation shape after every layer: Spatial(c, h, w) or Flat(d).
    pub activations: Vec<ActivationShape>,
    /// Spatial size entering the global average pool.
    pub gap_spatial: (usize, usize),
    /// Parameter tensor shapes in build order.
    pub param_shapes: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationShape {
    Spatial(usize, usize, usize),
    Flat(usize),
}

/// Walk the layer list, checking feasibility and the embedding contract.
pub fn audit(spec: &ArchitectureSpec) -> Result<ShapeAudit> {
    if spec.embed_dim == 0 {
        return Err(Error::Config("embed_dim must be >= 1".into()));
    }
    if spec.num_classes < 2 {
        return Err(Error::Config("num_classes must be >= 2".into()));
    }
    let (mut c, mut h, mut w) = spec.input;
    let mut flat: Option<usize> = None;
    let mut activations = Vec::with_capacity(spec.layers.len());
    let mut param_shapes = Vec::new();
    let mut gap_spatial = None;
    for (i, layer) in spec.layers.iter().enumerate() {
        if flat.is_some() && !matches!(layer, LayerKind::Dense { .. }) {
            return Err(Error::Config(format!(
                "layer {i}: only dense layers may follow global average pooling"
            )));
        }
        match layer {
            LayerKind::GaussianNoise { sigma } => {
                if *sigma < 0.0 {
                    return Err(Error::Config(format!("layer {i}: noise sigma {sigma} < 0")));
                }
            }
            LayerKind::Conv { out_channels, kernel, padding } => {
                if !matches!(kernel, 1 | 3) {
                    return Err(Error::Config(format!("layer {i}: conv kernel must be 1 or 3")));
                }
                if *padding == Padding::Valid && *kernel == 3 {
                    if h < 3 || w < 3 {
                        return Err(Error::Config(format!(
                            "layer {i}: {h}x{w} too small for valid 3x3 conv"
                        )));
                    }
                    h -= 2;
                    w -= 2;
                }
                param_shapes.push(vec![*out_channels, c, *kernel, *kernel]);
                param_shapes.push(vec![*out_channels]);
                c = *out_channels;
            }
            LayerKind::BatchNorm => {
                param_shapes.push(vec![c]);
                param_shapes.push(vec![c]);
            }
            LayerKind::LeakyRelu { alpha } => {
                if !(*alpha > 0.0 && *alpha < 1.0) {
                    return Err(Error::Config(format!("layer {i}: alpha {alpha} not in (0,1)")));
                }
            }
            LayerKind::MaxPool => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config(format!(
                        "layer {i}: maxpool needs even dims, got {h}x{w}"
                    )));
                }
                h /= 2;
                w /= 2;
            }
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Config(format!("layer {i}: dropout rate {rate}")));
                }
            }
            LayerKind::GlobalAvgPool => {
                gap_spatial = Some((h, w));
                flat = Some(c);
            }
            LayerKind::Dense { out } => {
                let d = flat.ok_or_else(|| {
                    Error::Config(format!("layer {i}: dense requires pooled (flat) input"))
                })?;
                param_shapes.push(vec![d, *out]);
                param_shapes.push(vec![*out]);
                flat = Some(*out);
            }
        }
        activations.push(match flat {
            Some(d) => ActivationShape::Flat(d),
            None => ActivationShape::Spatial(c, h, w),
        });
    }
    let gap_spatial =
        gap_spatial.ok_or_else(|| Error::Config("spec has no global average pool".into()))?;
    match flat {
        Some(d) if d == spec.num_classes => {}
        other => {
            return Err(Error::Config(format!(
                "network output {other:?} does not match num_classes {}",
                spec.num_classes
            )))
        }
    }
    // embedding contract: GAP input channels define the feature width
    let gap_channels = activations
        .iter()
        .zip(&spec.layers)
        .find_map(|(a, l)| match (l, a) {
            (LayerKind::GlobalAvgPool, ActivationShape::Flat(d)) => Some(*d),
            _ => None,
        })
        .unwrap();
    if gap_channels != spec.embed_dim {
        return Err(Error::Config(format!(
            "embed_dim {} does not match the {gap_channels}-channel conv feeding the pool",
            spec.embed_dim
        )));
    }
    // the named presets pin their pool geometry
    let expected_gap = match spec.name.as_str() {
        "cifar_net" => Some((6, 6)),
        "mnist_net" => Some((5, 5)),
        _ => None,
    };
    if let Some(want) = expected_gap {
        if gap_spatial != want {
            return Err(Error::Config(format!(
                "{} expects a {}x{} global average pool, audit found {}x{}",
                spec.name, want.0, want.1, gap_spatial.0, gap_spatial.1
            )));
        }
    }
    Ok(ShapeAudit { activations, gap_spatial, param_shapes })
}

/// Spec plus its parameters and batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ArchitectureSpec,
    pub params: Vec<Parameter>,
    pub bn_states: Vec<BnState>,
}

/// Both halves of a forward pass, as tape nodes.
pub struct ForwardPass {
    /// Penultimate features x_i (global-average-pool output, pre-normalization).
    pub features: NodeId,
    pub logits: NodeId,
    /// Activation tensor feeding the pool (used by Grad-CAM).
    pub conv_activations: NodeId,
}

impl Model {
    /// Seeded deterministic build: He fan-in normals for conv/dense weights,
    /// zero biases, unit-gamma batch norm.
    pub fn build(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        audit(&spec)?;
        let mut rng = stream_rng(seed, Stream::Init, 0, 0);
        let mut params = Vec::new();
        let mut bn_states = Vec::new();
        let (mut c, _, _) = spec.input;
        for layer in &spec.layers {
            match layer {
                LayerKind::Conv { out_channels, kernel, .. } => {
                    let fan_in = (c * kernel * kernel) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    params.push(Parameter::new(Tensor::randn(
                        &[*out_channels, c, *kernel, *kernel],
                        std,
                        &mut rng,
                    )));
                    params.push(Parameter::new(Tensor::zeros(&[*out_channels])));
                    c = *out_channels;
                }
                LayerKind::BatchNorm => {
                    params.push(Parameter::new(Tensor::filled(&[c], 1.0)));
                    params.push(Parameter::new(Tensor::zeros(&[c])));
                    bn_states.push(BnState::new(c));
                }
                LayerKind::Dense { out } => {
                    let std = (2.0 / c as f64).sqrt();
                    params.push(Parameter::new(Tensor::randn(&[c, *out], std, &mut rng)));
                    params.push(Parameter::new(Tensor::zeros(&[*out])));
                    c = *out;
                }
                _ => {}
            }
        }
        Ok(Model { spec, params, bn_states })
    }

    pub fn from_preset(preset: Preset, embed_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        Self::build(ArchitectureSpec::preset(preset, embed_dim, num_classes), seed)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Record one forward pass on `tape`. Train mode draws noise/dropout from
    /// `rng` and folds batch statistics into the running batch-norm state;
    /// eval mode leaves both untouched.
    pub fn forward_on<R: Rng>(
        &mut self,
        tape: &mut Tape,
        images: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let (_, c, h, w) = images.dims4()?;
        if (c, h, w) != self.spec.input {
            return Err(Error::Shape(format!(
                "input {:?} does not match {} input {:?}",
                (c, h, w),
                self.spec.name,
                self.spec.input
            )));
        }
        let mut cur = tape.input(images.clone())?;
        let mut features = None;
        let mut conv_activations = None;
        let mut p_cursor = 0usize;
        let mut bn_cursor = 0usize;
        for layer in &self.spec.layers {
            match layer {
                LayerKind::GaussianNoise { sigma } => {
                    cur = tape.gaussian_noise(cur, *sigma, mode, rng)?;
                }
                LayerKind::Conv { padding, .. } => {
                    let wid = tape.param(p_cursor, &self.params[p_cursor].value)?;
                    let bid = tape.param(p_cursor + 1, &self.params[p_cursor + 1].value)?;
                    p_cursor += 2;
                    cur = tape.conv2d(cur, wid, bid, *padding)?;
                }
                LayerKind::BatchNorm => {
                    let gid = tape.param(p_cursor, &self.params[p_cursor].value)?;
                    let bid = tape.param(p_cursor + 1, &self.params[p_cursor + 1].value)?;
                    p_cursor += 2;
                    cur = tape.batch_norm(cur, gid, bid, &mut self.bn_states[bn_cursor], mode)?;
                    bn_cursor += 1;
                }
                LayerKind::LeakyRelu { alpha } => {
                    cur = tape.leaky_relu(cur, *alpha)?;
                }
                LayerKind::MaxPool => {
                    cur = tape.maxpool2x2(cur)?;
                }
                LayerKind::Dropout { rate } => {
                    cur = tape.dropout(cur, *rate, mode, rng)?;
                }
                LayerKind::GlobalAvgPool => {
                    conv_activations = Some(cur);
                    cur = tape.global_avg_pool(cur)?;
                    features = Some(cur);
                }
                LayerKind::Dense { .. } => {
                    let wid = tape.param(p_cursor, &self.params[p_cursor].value)?;
                    let bid = tape.param(p_cursor + 1, &self.params[p_cursor + 1].value)?;
                    p_cursor += 2;
                    cur = tape.dense(cur, wid, bid)?;
                }
            }
        }
        Ok(ForwardPass {
            features: features.expect("audited spec always pools"),
            logits: cur,
            conv_activations: conv_activations.expect("audited spec always pools"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            params: self.params.iter().map(|p| p.value.clone()).collect(),
            bn: self.bn_states.clone(),
        };
        let out = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(out, &file)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let file: CheckpointFile = serde_json::from_reader(reader)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        let report = audit(&file.spec)?;
        if report.param_shapes.len() != file.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameter tensors, spec wants {}",
                file.params.len(),
                report.param_shapes.len()
            )));
        }
        for (got, want) in file.params.iter().zip(&report.param_shapes) {
            if &got.shape != want {
                return Err(Error::Data(format!(
                    "checkpoint parameter shape {:?} does not match spec shape {want:?}",
                    got.shape
                )));
            }
        }
        Ok(Model {
            spec: file.spec,
            params: file.params.into_iter().map(Parameter::new).collect(),
            bn_states: file.bn,
        })
    }
}

/// Versioned JSON container: spec + parameter tensors + running stats.
#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    spec: ArchitectureSpec,
    params: Vec<Tensor>,
    bn: Vec<BnState>,
}
