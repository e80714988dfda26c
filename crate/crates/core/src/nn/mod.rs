//! Layers, the squeeze-and-excitation residual block, model builders
//! (the custom SE-ResNet, ResNet50, VGG16), Kaiming initialization, transfer
//! freezing, and exact parameter accounting.

pub mod gradcheck;
pub mod ops;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, ParamId, ParamStore, Tape, Var};
use crate::tensor::{conv_out_extent, Scalar, Tensor, TensorError};

/// SE bottleneck reduction ratio used everywhere in the custom network.
pub const SE_REDUCTION: usize = 16;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Hidden width of the classification head's first linear layer.
pub const HEAD_WIDTH: usize = 128;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial extent {h}x{w} below minimum {min}")]
    SpatialTooSmall { h: usize, w: usize, min: usize },
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Custom,
    Resnet50,
    Vgg16,
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "custom" => Ok(Self::Custom),
            "resnet50" => Ok(Self::Resnet50),
            "vgg16" => Ok(Self::Vgg16),
            other => Err(format!("unknown model kind '{other}' (expected custom|resnet50|vgg16)")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Custom => "custom",
            Self::Resnet50 => "resnet50",
            Self::Vgg16 => "vgg16",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct BufId(pub usize);

#[derive(Debug, Clone)]
pub struct Buffer<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Layer graph node. Parameters live in the model's [`ParamStore`]; layers
/// hold ids plus hyperparameters.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d {
        name: String,
        weight: ParamId,
        bias: Option<ParamId>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm2d {
        name: String,
        gamma: ParamId,
        beta: ParamId,
        ch: usize,
        running_mean: BufId,
        running_var: BufId,
    },
    ReLU,
    MaxPool2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dropout {
        p: f64,
    },
    Dropout2d {
        p: f64,
    },
    Linear {
        name: String,
        weight: ParamId,
        bias: Option<ParamId>,
        in_f: usize,
        out_f: usize,
    },
    GlobalAvgPool,
    Flatten,
    /// Channel attention: gap -> bottleneck MLP -> sigmoid gate, spatially
    /// constant per channel. Weight layout `[in, out]`.
    Se {
        name: String,
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
        ch: usize,
        hidden: usize,
    },
    /// `relu(body(x) + skip(x))`; an empty skip is the identity.
    Residual {
        name: String,
        body: Vec<Layer>,
        skip: Vec<Layer>,
    },
    Sequential(Vec<Layer>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_classes: usize,
    pub base_channels: usize,
    pub head_dropout: f64,
    pub block_dropout: f64,
    /// Freeze everything except the final linear layer (ResNet50/VGG16 only).
    pub transfer_learning: bool,
}

impl ModelConfig {
    pub fn custom(base_channels: usize, num_classes: usize, head_dropout: f64, block_dropout: f64) -> Self {
        Self {
            kind: ModelKind::Custom,
            num_classes,
            base_channels,
            head_dropout,
            block_dropout,
            transfer_learning: false,
        }
    }
}

pub struct Model<T: Scalar> {
    pub root: Layer,
    pub params: ParamStore<T>,
    pub buffers: Vec<Buffer<T>>,
    pub config: ModelConfig,
}

struct Builder<'a, T: Scalar> {
    params: &'a mut ParamStore<T>,
    buffers: &'a mut Vec<Buffer<T>>,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Layer {
        let weight = self.params.register(
            format!("{name}.weight"),
            Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            true,
            true,
        );
        let bias = bias.then(|| {
            self.params
                .register(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true, false)
        });
        Layer::Conv2d { name: name.into(), weight, bias, in_ch, out_ch, kernel, stride, padding }
    }

    fn bn(&mut self, name: &str, ch: usize) -> Layer {
        let gamma = self
            .params
            .register(format!("{name}.weight"), Tensor::full(&[ch], T::one()), true, false);
        let beta = self
            .params
            .register(format!("{name}.bias"), Tensor::zeros(&[ch]), true, false);
        let running_mean = self.buffer(format!("{name}.running_mean"), Tensor::zeros(&[ch]));
        let running_var = self.buffer(format!("{name}.running_var"), Tensor::full(&[ch], T::one()));
        Layer::BatchNorm2d { name: name.into(), gamma, beta, ch, running_mean, running_var }
    }

    fn linear(&mut self, name: &str, in_f: usize, out_f: usize, bias: bool) -> Layer {
        let weight = self.params.register(
            format!("{name}.weight"),
            Tensor::zeros(&[in_f, out_f]),
            true,
            true,
        );
        let bias = bias.then(|| {
            self.params
                .register(format!("{name}.bias"), Tensor::zeros(&[out_f]), true, false)
        });
        Layer::Linear { name: name.into(), weight, bias, in_f, out_f }
    }

    fn se(&mut self, name: &str, ch: usize) -> Layer {
        let hidden = (ch / SE_REDUCTION).max(1);
        let w1 = self.params.register(
            format!("{name}.fc1.weight"),
            Tensor::zeros(&[ch, hidden]),
            true,
            true,
        );
        let b1 = self
            .params
            .register(format!("{name}.fc1.bias"), Tensor::zeros(&[hidden]), true, false);
        let w2 = self.params.register(
            format!("{name}.fc2.weight"),
            Tensor::zeros(&[hidden, ch]),
            true,
            true,
        );
        let b2 = self
            .params
            .register(format!("{name}.fc2.bias"), Tensor::zeros(&[ch]), true, false);
        Layer::Se { name: name.into(), w1, b1, w2, b2, ch, hidden }
    }

    fn buffer(&mut self, name: String, value: Tensor<T>) -> BufId {
        self.buffers.push(Buffer { name, value });
        BufId(self.buffers.len() - 1)
    }

    /// Two 3x3 convs with BN, ReLU and channel dropout on the residual path,
    /// an SE gate before the sum, and a projection skip whenever the stride or
    /// the channel count changes.
    fn residual_se_block(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        block_dropout: f64,
    ) -> Layer {
        let body = vec![
            self.conv(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, false),
            self.bn(&format!("{name}.bn1"), out_ch),
            Layer::ReLU,
            Layer::Dropout2d { p: block_dropout },
            self.conv(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false),
            self.bn(&format!("{name}.bn2"), out_ch),
            self.se(&format!("{name}.se"), out_ch),
        ];
        let skip = if stride != 1 || in_ch != out_ch {
            vec![
                self.conv(&format!("{name}.downsample.conv"), in_ch, out_ch, 1, stride, 0, false),
                self.bn(&format!("{name}.downsample.bn"), out_ch),
            ]
        } else {
            Vec::new()
        };
        Layer::Residual { name: name.into(), body, skip }
    }

    fn bottleneck(&mut self, name: &str, in_ch: usize, width: usize, stride: usize) -> Layer {
        let out_ch = width * 4;
        let body = vec![
            self.conv(&format!("{name}.conv1"), in_ch, width, 1, 1, 0, false),
            self.bn(&format!("{name}.bn1"), width),
            Layer::ReLU,
            self.conv(&format!("{name}.conv2"), width, width, 3, stride, 1, false),
            self.bn(&format!("{name}.bn2"), width),
            Layer::ReLU,
            self.conv(&format!("{name}.conv3"), width, out_ch, 1, 1, 0, false),
            self.bn(&format!("{name}.bn3"), out_ch),
        ];
        let skip = if stride != 1 || in_ch != out_ch {
            vec![
                self.conv(&format!("{name}.downsample.conv"), in_ch, out_ch, 1, stride, 0, false),
                self.bn(&format!("{name}.downsample.bn"), out_ch),
            ]
        } else {
            Vec::new()
        };
        Layer::Residual { name: name.into(), body, skip }
    }
}

/// Residual SE network: 3x3 stem at full resolution, four stages widening
/// C -> 2C -> 4C -> 4C with strides 1,2,2,2, global average pooling, and a
/// two-layer head.
pub fn build_custom_cnn<T: Scalar>(
    base_channels: usize,
    num_classes: usize,
    head_dropout: f64,
    block_dropout: f64,
) -> Result<Model<T>, NnError> {
    // tiny widths are allowed for test-scale graphs; the SE bottleneck
    // floors at width 1 below C = 16
    if base_channels == 0 {
        return Err(NnError::InvalidConfig("base_channels must be >= 1".into()));
    }
    if num_classes < 2 {
        return Err(NnError::InvalidConfig(format!("num_classes must be >= 2, got {num_classes}")));
    }
    let c = base_channels;
    let mut params = ParamStore::new();
    let mut buffers = Vec::new();
    let mut b = Builder { params: &mut params, buffers: &mut buffers };
    let root = Layer::Sequential(vec![
        b.conv("stem.conv", 3, c, 3, 1, 1, false),
        b.bn("stem.bn", c),
        Layer::ReLU,
        b.residual_se_block("stage1", c, c, 1, block_dropout),
        b.residual_se_block("stage2", c, 2 * c, 2, block_dropout),
        b.residual_se_block("stage3", 2 * c, 4 * c, 2, block_dropout),
        b.residual_se_block("stage4", 4 * c, 4 * c, 2, block_dropout),
        Layer::GlobalAvgPool,
        Layer::Dropout { p: head_dropout },
        b.linear("head.fc1", 4 * c, HEAD_WIDTH, true),
        Layer::ReLU,
        b.linear("head.fc2", HEAD_WIDTH, num_classes, true),
    ]);
    Ok(Model {
        root,
        params,
        buffers,
        config: ModelConfig::custom(base_channels, num_classes, head_dropout, block_dropout),
    })
}

/// Canonical ResNet50 graph (bottleneck blocks 3-4-6-3) with the final linear
/// layer sized to `num_classes`. Structural only; no pretrained weights.
pub fn build_resnet50<T: Scalar>(num_classes: usize) -> Result<Model<T>, NnError> {
    if num_classes < 2 {
        return Err(NnError::InvalidConfig(format!("num_classes must be >= 2, got {num_classes}")));
    }
    let mut params = ParamStore::new();
    let mut buffers = Vec::new();
    let mut b = Builder { params: &mut params, buffers: &mut buffers };
    let mut layers = vec![
        b.conv("stem.conv", 3, 64, 7, 2, 3, false),
        b.bn("stem.bn", 64),
        Layer::ReLU,
        Layer::MaxPool2d { kernel: 3, stride: 2, padding: 1 },
    ];
    let blocks_per_stage = [3usize, 4, 6, 3];
    let mut in_ch = 64;
    for (si, &nblocks) in blocks_per_stage.iter().enumerate() {
        let width = 64 << si;
        for bi in 0..nblocks {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            layers.push(b.bottleneck(&format!("layer{}.{bi}", si + 1), in_ch, width, stride));
            in_ch = width * 4;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(b.linear("fc", 2048, num_classes, true));
    Ok(Model {
        root: Layer::Sequential(layers),
        params,
        buffers,
        config: ModelConfig {
            kind: ModelKind::Resnet50,
            num_classes,
            base_channels: 64,
            head_dropout: 0.0,
            block_dropout: 0.0,
            transfer_learning: false,
        },
    })
}

/// Canonical VGG16 graph (13 convs + 3 fully connected) with the final linear
/// layer sized to `num_classes`. The classifier expects 224x224 inputs.
pub fn build_vgg16<T: Scalar>(num_classes: usize) -> Result<Model<T>, NnError> {
    if num_classes < 2 {
        return Err(NnError::InvalidConfig(format!("num_classes must be >= 2, got {num_classes}")));
    }
    let mut params = ParamStore::new();
    let mut buffers = Vec::new();
    let mut b = Builder { params: &mut params, buffers: &mut buffers };
    let plan: &[&[usize]] = &[&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
    let mut layers = Vec::new();
    let mut in_ch = 3;
    let mut conv_idx = 0;
    for stage in plan {
        for &out_ch in *stage {
            layers.push(b.conv(&format!("features.conv{conv_idx}"), in_ch, out_ch, 3, 1, 1, true));
            layers.push(Layer::ReLU);
            in_ch = out_ch;
            conv_idx += 1;
        }
        layers.push(Layer::MaxPool2d { kernel: 2, stride: 2, padding: 0 });
    }
    layers.push(Layer::Flatten);
    layers.push(b.linear("classifier.fc1", 512 * 7 * 7, 4096, true));
    layers.push(Layer::ReLU);
    layers.push(Layer::Dropout { p: 0.5 });
    layers.push(b.linear("classifier.fc2", 4096, 4096, true));
    layers.push(Layer::ReLU);
    layers.push(Layer::Dropout { p: 0.5 });
    layers.push(b.linear("classifier.fc3", 4096, num_classes, true));
    Ok(Model {
        root: Layer::Sequential(layers),
        params,
        buffers,
        config: ModelConfig {
            kind: ModelKind::Vgg16,
            num_classes,
            base_channels: 64,
            head_dropout: 0.5,
            block_dropout: 0.0,
            transfer_learning: false,
        },
    })
}

pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<Model<T>, NnError> {
    let mut model = match config.kind {
        ModelKind::Custom => build_custom_cnn(
            config.base_channels,
            config.num_classes,
            config.head_dropout,
            config.block_dropout,
        )?,
        ModelKind::Resnet50 => build_resnet50(config.num_classes)?,
        ModelKind::Vgg16 => build_vgg16(config.num_classes)?,
    };
    if config.transfer_learning {
        freeze_for_transfer(&mut model, config.head_dropout)?;
    }
    Ok(model)
}

fn visit<'a>(layer: &'a Layer, f: &mut impl FnMut(&'a Layer)) {
    f(layer);
    match layer {
        Layer::Sequential(children) => {
            for c in children {
                visit(c, f);
            }
        }
        Layer::Residual { body, skip, .. } => {
            for c in body.iter().chain(skip) {
                visit(c, f);
            }
        }
        _ => {}
    }
}

/// Freeze every parameter except the final linear layer. ResNet50 additionally
/// gains a dropout in front of that layer.
pub fn freeze_for_transfer<T: Scalar>(model: &mut Model<T>, head_dropout: f64) -> Result<(), NnError> {
    if model.config.kind == ModelKind::Custom {
        return Err(NnError::UnsupportedModel("transfer freezing applies to resnet50/vgg16 only".into()));
    }
    for (_, p) in model.params.iter_mut() {
        p.trainable = false;
    }
    let mut head_params = Vec::new();
    visit(&model.root, &mut |l| {
        if let Layer::Linear { weight, bias, .. } = l {
            head_params.clear();
            head_params.push(*weight);
            if let Some(b) = bias {
                head_params.push(*b);
            }
        }
    });
    for id in head_params {
        model.params.get_mut(id).trainable = true;
    }
    if model.config.kind == ModelKind::Resnet50 && head_dropout > 0.0 {
        if let Layer::Sequential(children) = &mut model.root {
            let already = children.iter().any(|l| matches!(l, Layer::Dropout { .. }));
            if !already {
                let at = children.len() - 1;
                children.insert(at, Layer::Dropout { p: head_dropout });
            }
        }
    }
    model.config.transfer_learning = true;
    model.config.head_dropout = head_dropout;
    Ok(())
}

/// (total, trainable) parameter element counts.
pub fn param_count<T: Scalar>(model: &Model<T>) -> (usize, usize) {
    (model.params.total_elements(), model.params.trainable_elements())
}

/// Model size in MB at 4 bytes per parameter, rounded to 2 decimals.
pub fn size_mb<T: Scalar>(model: &Model<T>) -> f64 {
    let (total, _) = param_count(model);
    (4.0 * total as f64 / (1 << 20) as f64 * 100.0).round() / 100.0
}

/// Kaiming-normal initialization: conv/linear weights ~ N(0, 2/fan_in),
/// biases zero, BN scale one and shift zero, running stats reset.
/// Deterministic per seed.
pub fn kaiming_init<T: Scalar>(model: &mut Model<T>, seed: u64) {
    enum Init {
        Normal(f64),
        Zero,
        One,
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs: Vec<(ParamId, Init)> = Vec::new();
    visit(&model.root, &mut |l| match l {
        Layer::Conv2d { weight, bias, in_ch, kernel, .. } => {
            let fan_in = in_ch * kernel * kernel;
            jobs.push((*weight, Init::Normal((2.0 / fan_in as f64).sqrt())));
            if let Some(b) = bias {
                jobs.push((*b, Init::Zero));
            }
        }
        Layer::Linear { weight, bias, in_f, .. } => {
            jobs.push((*weight, Init::Normal((2.0 / *in_f as f64).sqrt())));
            if let Some(b) = bias {
                jobs.push((*b, Init::Zero));
            }
        }
        Layer::Se { w1, b1, w2, b2, ch, hidden, .. } => {
            jobs.push((*w1, Init::Normal((2.0 / *ch as f64).sqrt())));
            jobs.push((*b1, Init::Zero));
            jobs.push((*w2, Init::Normal((2.0 / *hidden as f64).sqrt())));
            jobs.push((*b2, Init::Zero));
        }
        Layer::BatchNorm2d { gamma, beta, .. } => {
            jobs.push((*gamma, Init::One));
            jobs.push((*beta, Init::Zero));
        }
        _ => {}
    });
    for buf in &mut model.buffers {
        if buf.name.ends_with("running_mean") {
            buf.value = Tensor::zeros(buf.value.shape());
        } else if buf.name.ends_with("running_var") {
            buf.value = Tensor::full(buf.value.shape(), T::one());
        }
    }
    for (id, init) in jobs {
        let p = model.params.get_mut(id);
        p.value = match init {
            Init::Normal(s) => {
                let dist = Normal::new(0.0f64, s).unwrap();
                Tensor::from_fn(p.value.shape(), |_| T::from_f64(dist.sample(&mut rng)))
            }
            Init::Zero => Tensor::zeros(p.value.shape()),
            Init::One => Tensor::full(p.value.shape(), T::one()),
        };
        p.grad = Tensor::zeros(p.value.shape());
    }
}

impl<T: Scalar> Model<T> {
    pub fn min_spatial(&self) -> usize {
        match self.config.kind {
            ModelKind::Custom => 8,
            ModelKind::Resnet50 | ModelKind::Vgg16 => 32,
        }
    }

    /// Run the network, recording on `tape`. `mode` governs batch-norm
    /// statistics and dropout sampling; eval mode never consults `rng`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        input: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Var, NnError> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(NnError::ShapeMismatch(format!(
                "expected input [N,3,H,W], got {shape:?}"
            )));
        }
        let min = self.min_spatial();
        if shape[2] < min || shape[3] < min {
            return Err(NnError::SpatialTooSmall { h: shape[2], w: shape[3], min });
        }
        let Model { root, params, buffers, .. } = self;
        forward_layer(root, params, buffers, tape, input, mode, rng)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        out.extend(self.buffers.iter().map(|b| (b.name.clone(), b.value.clone())));
        out
    }

    /// Replace parameter/buffer values by name. Every model tensor must be
    /// present with a matching shape.
    pub fn load_named_tensors(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<(), NnError> {
        let lookup: std::collections::HashMap<&str, &Tensor<T>> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (_, p) in self.params.iter_mut() {
            let t = lookup.get(p.name.as_str()).ok_or_else(|| {
                NnError::InvalidConfig(format!("missing tensor '{}' in checkpoint", p.name))
            })?;
            if t.shape() != p.value.shape() {
                return Err(NnError::ShapeMismatch(format!(
                    "tensor '{}' has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = (*t).clone();
        }
        for b in &mut self.buffers {
            let t = lookup.get(b.name.as_str()).ok_or_else(|| {
                NnError::InvalidConfig(format!("missing tensor '{}' in checkpoint", b.name))
            })?;
            if t.shape() != b.value.shape() {
                return Err(NnError::ShapeMismatch(format!("buffer '{}' shape mismatch", b.name)));
            }
            b.value = (*t).clone();
        }
        Ok(())
    }
}

fn forward_layer<T: Scalar>(
    layer: &Layer,
    params: &ParamStore<T>,
    buffers: &mut [Buffer<T>],
    tape: &mut Tape<T>,
    x: Var,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Var, NnError> {
    match layer {
        Layer::Sequential(children) => {
            let mut cur = x;
            for c in children {
                cur = forward_layer(c, params, buffers, tape, cur, mode, rng)?;
            }
            Ok(cur)
        }
        Layer::Conv2d { weight, bias, stride, padding, out_ch, .. } => {
            let w = tape.param(params, *weight);
            let mut y = ops::conv2d_op(tape, x, w, *stride, *padding)?;
            if let Some(b) = bias {
                let bv = tape.param(params, *b);
                let bv = tape.reshape(bv, &[*out_ch, 1, 1]);
                y = tape.add(y, bv);
            }
            Ok(y)
        }
        Layer::BatchNorm2d { gamma, beta, running_mean, running_var, .. } => {
            let g = tape.param(params, *gamma);
            let b = tape.param(params, *beta);
            match mode {
                Mode::Train => {
                    let shape = tape.value(x).shape().to_vec();
                    let m = shape[0] * shape[2] * shape[3];
                    let (y, mean, var) = ops::batchnorm_train_op(tape, x, g, b, BN_EPS)?;
                    // running stats track the unbiased variance
                    let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
                    let mom = T::from_f64(BN_MOMENTUM);
                    let keep = T::one() - mom;
                    let rm = &mut buffers[running_mean.0].value;
                    *rm = Tensor::from_fn(rm.shape(), |i| keep * rm.data()[i] + mom * mean[i]);
                    let rv = &mut buffers[running_var.0].value;
                    *rv = Tensor::from_fn(rv.shape(), |i| {
                        keep * rv.data()[i] + mom * var[i] * T::from_f64(unbias)
                    });
                    Ok(y)
                }
                Mode::Eval => {
                    let rm = buffers[running_mean.0].value.clone();
                    let rv = buffers[running_var.0].value.clone();
                    Ok(ops::batchnorm_eval_op(tape, x, g, b, &rm, &rv, BN_EPS)?)
                }
            }
        }
        Layer::ReLU => Ok(tape.relu(x)),
        Layer::MaxPool2d { kernel, stride, padding } => {
            Ok(ops::maxpool2d_op(tape, x, *kernel, *stride, *padding)?)
        }
        Layer::Dropout { p } => Ok(match mode {
            Mode::Train => ops::dropout_op(tape, x, *p, false, rng),
            Mode::Eval => x,
        }),
        Layer::Dropout2d { p } => Ok(match mode {
            Mode::Train => ops::dropout_op(tape, x, *p, true, rng),
            Mode::Eval => x,
        }),
        Layer::Linear { weight, bias, in_f, .. } => {
            let shape = tape.value(x).shape().to_vec();
            if shape.len() != 2 || shape[1] != *in_f {
                return Err(NnError::ShapeMismatch(format!(
                    "linear expects [N,{in_f}], got {shape:?}"
                )));
            }
            let w = tape.param(params, *weight);
            let mut y = tape.matmul(x, w);
            if let Some(b) = bias {
                let bv = tape.param(params, *b);
                y = tape.add(y, bv);
            }
            Ok(y)
        }
        Layer::GlobalAvgPool => Ok(tape.mean_axes(x, &[2, 3], false)),
        Layer::Flatten => {
            let shape = tape.value(x).shape().to_vec();
            let n = shape[0];
            let rest: usize = shape[1..].iter().product();
            Ok(tape.reshape(x, &[n, rest]))
        }
        Layer::Se { w1, b1, w2, b2, ch, .. } => {
            let squeeze = tape.mean_axes(x, &[2, 3], false);
            let w1v = tape.param(params, *w1);
            let b1v = tape.param(params, *b1);
            let mut h = tape.matmul(squeeze, w1v);
            h = tape.add(h, b1v);
            h = tape.relu(h);
            let w2v = tape.param(params, *w2);
            let b2v = tape.param(params, *b2);
            let mut s = tape.matmul(h, w2v);
            s = tape.add(s, b2v);
            s = tape.sigmoid(s);
            let n = tape.value(x).shape()[0];
            let s = tape.reshape(s, &[n, *ch, 1, 1]);
            Ok(tape.mul(x, s))
        }
        Layer::Residual { body, skip, .. } => {
            let mut b = x;
            for l in body {
                b = forward_layer(l, params, buffers, tape, b, mode, rng)?;
            }
            let mut s = x;
            for l in skip {
                s = forward_layer(l, params, buffers, tape, s, mode, rng)?;
            }
            let sum = tape.add(b, s);
            Ok(tape.relu(sum))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub name: String,
    pub kind: String,
    pub output_shape: Vec<usize>,
    pub params: usize,
    pub trainable: bool,
}

fn layer_param_info<T: Scalar>(layer: &Layer, store: &ParamStore<T>) -> (usize, bool) {
    let mut count = 0usize;
    let mut trainable = false;
    let mut add = |id: &ParamId| {
        let p = store.get(*id);
        count += p.value.len();
        trainable |= p.trainable;
    };
    match layer {
        Layer::Conv2d { weight, bias, .. } | Layer::Linear { weight, bias, .. } => {
            add(weight);
            if let Some(b) = bias {
                add(b);
            }
        }
        Layer::BatchNorm2d { gamma, beta, .. } => {
            add(gamma);
            add(beta);
        }
        Layer::Se { w1, b1, w2, b2, .. } => {
            for id in [w1, b1, w2, b2] {
                add(id);
            }
        }
        _ => {}
    }
    (count, trainable)
}

fn infer_rows<T: Scalar>(
    layer: &Layer,
    store: &ParamStore<T>,
    shape: Vec<usize>,
    rows: &mut Vec<SummaryRow>,
) -> Result<Vec<usize>, NnError> {
    let push = |rows: &mut Vec<SummaryRow>, name: &str, kind: &str, shape: &[usize], p: (usize, bool)| {
        rows.push(SummaryRow {
            name: name.to_string(),
            kind: kind.to_string(),
            output_shape: shape.to_vec(),
            params: p.0,
            trainable: p.1,
        });
    };
    match layer {
        Layer::Sequential(children) => {
            let mut cur = shape;
            for c in children {
                cur = infer_rows(c, store, cur, rows)?;
            }
            Ok(cur)
        }
        Layer::Conv2d { name, out_ch, kernel, stride, padding, .. } => {
            let h = conv_out_extent(shape[2], *kernel, *stride, *padding)?;
            let w = conv_out_extent(shape[3], *kernel, *stride, *padding)?;
            let out = vec![shape[0], *out_ch, h, w];
            push(rows, name, "Conv2d", &out, layer_param_info(layer, store));
            Ok(out)
        }
        Layer::BatchNorm2d { name, .. } => {
            push(rows, name, "BatchNorm2d", &shape, layer_param_info(layer, store));
            Ok(shape)
        }
        Layer::ReLU => Ok(shape),
        Layer::MaxPool2d { kernel, stride, padding } => {
            let h = conv_out_extent(shape[2], *kernel, *stride, *padding)?;
            let w = conv_out_extent(shape[3], *kernel, *stride, *padding)?;
            Ok(vec![shape[0], shape[1], h, w])
        }
        Layer::Dropout { .. } | Layer::Dropout2d { .. } => Ok(shape),
        Layer::Linear { name, out_f, .. } => {
            let out = vec![shape[0], *out_f];
            push(rows, name, "Linear", &out, layer_param_info(layer, store));
            Ok(out)
        }
        Layer::GlobalAvgPool => Ok(vec![shape[0], shape[1]]),
        Layer::Flatten => Ok(vec![shape[0], shape[1..].iter().product()]),
        Layer::Se { name, .. } => {
            push(rows, name, "SE", &shape, layer_param_info(layer, store));
            Ok(shape)
        }
        Layer::Residual { name, body, skip, .. } => {
            let mut inner = Vec::new();
            let mut cur = shape.clone();
            for l in body {
                cur = infer_rows(l, store, cur, &mut inner)?;
            }
            let mut s = shape;
            for l in skip {
                s = infer_rows(l, store, s, &mut inner)?;
            }
            let total: usize = inner.iter().map(|r| r.params).sum();
            let trainable = inner.iter().any(|r| r.trainable);
            push(rows, name, "Residual", &cur, (total, trainable));
            Ok(cur)
        }
    }
}

/// Per-layer summary for a given input resolution (batch shown as 1).
pub fn summarize<T: Scalar>(model: &Model<T>, resolution: usize) -> Result<Vec<SummaryRow>, NnError> {
    let mut rows = Vec::new();
    infer_rows(&model.root, &model.params, vec![1, 3, resolution, resolution], &mut rows)?;
    Ok(rows)
}

/// Aligned plain-text architecture table with count and size totals.
pub fn render_summary<T: Scalar>(model: &Model<T>, resolution: usize) -> Result<String, NnError> {
    let rows = summarize(model, resolution)?;
    let (total, trainable) = param_count(model);
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:<12} {:<20} {:>12} {:>10}\n",
        "layer", "kind", "output shape", "params", "trainable"
    ));
    for r in &rows {
        let shape = format!("{:?}", r.output_shape);
        out.push_str(&format!(
            "{:<28} {:<12} {:<20} {:>12} {:>10}\n",
            r.name,
            r.kind,
            shape,
            r.params,
            if r.trainable { "yes" } else { "no" }
        ));
    }
    out.push_str(&format!(
        "total params: {total}\ntrainable params: {trainable}\nsize: {:.2} MB\n",
        size_mb(model)
    ));
    Ok(out)
}
