//! Network architecture descriptions.
//!
//! An [`ArchSpec`] is a flat, ordered list of named layers plus optional
//! stage grouping. Only `dense`, `conv2d`, `batchnorm` and the residual
//! blocks carry parameters; activations, pooling and flatten are shape-only.
//! Residual blocks are treated as single parametric units: probing, freezing
//! and removal all operate on whole blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initialization family for a layer's weight tensors. Biases are always
/// zero; batch-norm starts at gamma=1, beta=0, running mean 0 / variance 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitFamily {
    /// Uniform in [-b, b] with b = sqrt(6 / fan_in). Used ahead of ReLU.
    UniformHe,
    /// Uniform in [-b, b] with b = sqrt(6 / (fan_in + fan_out)).
    UniformGlorot,
    /// Every weight set to the given constant.
    Constant(f64),
}

impl InitFamily {
    pub fn bound(&self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            InitFamily::UniformHe => (6.0 / fan_in as f64).sqrt(),
            InitFamily::UniformGlorot => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            InitFamily::Constant(_) => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    BatchNorm {
        features: usize,
    },
    Flatten,
    ResBlockIdentity {
        channels: usize,
        bottleneck: bool,
        batchnorm: bool,
    },
    ResBlockDownsample {
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        bottleneck: bool,
        batchnorm: bool,
    },
}

impl LayerKind {
    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            LayerKind::Dense { .. }
                | LayerKind::Conv2d { .. }
                | LayerKind::BatchNorm { .. }
                | LayerKind::ResBlockIdentity { .. }
                | LayerKind::ResBlockDownsample { .. }
        )
    }
}

/// What a parameter tensor is, for initialization and update rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Sampled from the layer's init family with the given fans.
    Weight { fan_in: usize, fan_out: usize },
    /// Zero-initialized, learnable.
    Bias,
    /// One-initialized, learnable.
    Gamma,
    /// Zero-initialized, learnable.
    Beta,
    /// Zero-initialized buffer, updated by train-mode batch norm only.
    RunningMean,
    /// One-initialized buffer, updated by train-mode batch norm only.
    RunningVar,
}

impl TensorRole {
    pub fn is_learnable(&self) -> bool {
        !matches!(self, TensorRole::RunningMean | TensorRole::RunningVar)
    }
}

#[derive(Debug, Clone)]
pub struct TensorDef {
    pub name: &'static str,
    pub dims: Vec<usize>,
    pub role: TensorRole,
}

fn conv_def(name: &'static str, out_ch: usize, in_ch: usize, k: usize) -> TensorDef {
    TensorDef {
        name,
        dims: vec![out_ch, in_ch, k, k],
        role: TensorRole::Weight {
            fan_in: in_ch * k * k,
            fan_out: out_ch * k * k,
        },
    }
}

fn bias_def(name: &'static str, n: usize) -> TensorDef {
    TensorDef {
        name,
        dims: vec![n],
        role: TensorRole::Bias,
    }
}

fn bn_defs(prefix: &'static str, features: usize) -> Vec<TensorDef> {
    let (g, b, m, v) = match prefix {
        "bn1" => ("bn1.gamma", "bn1.beta", "bn1.running_mean", "bn1.running_var"),
        "bn2" => ("bn2.gamma", "bn2.beta", "bn2.running_mean", "bn2.running_var"),
        "bn3" => ("bn3.gamma", "bn3.beta", "bn3.running_mean", "bn3.running_var"),
        _ => ("gamma", "beta", "running_mean", "running_var"),
    };
    vec![
        TensorDef {
            name: g,
            dims: vec![features],
            role: TensorRole::Gamma,
        },
        TensorDef {
            name: b,
            dims: vec![features],
            role: TensorRole::Beta,
        },
        TensorDef {
            name: m,
            dims: vec![features],
            role: TensorRole::RunningMean,
        },
        TensorDef {
            name: v,
            dims: vec![features],
            role: TensorRole::RunningVar,
        },
    ]
}

impl LayerKind {
    /// The parameter tensors this layer owns, in a fixed order.
    pub fn tensor_defs(&self) -> Vec<TensorDef> {
        match *self {
            LayerKind::Dense {
                in_features,
                out_features,
            } => vec![
                TensorDef {
                    name: "weight",
                    dims: vec![out_features, in_features],
                    role: TensorRole::Weight {
                        fan_in: in_features,
                        fan_out: out_features,
                    },
                },
                bias_def("bias", out_features),
            ],
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![
                conv_def("weight", out_ch, in_ch, kernel),
                bias_def("bias", out_ch),
            ],
            LayerKind::BatchNorm { features } => bn_defs("", features),
            LayerKind::ResBlockIdentity {
                channels: c,
                bottleneck,
                batchnorm,
            } => {
                let mut defs = Vec::new();
                if bottleneck {
                    let c4 = (c / 4).max(1);
                    if batchnorm {
                        defs.extend(bn_defs("bn1", c));
                    }
                    defs.push(conv_def("conv1.weight", c4, c, 1));
                    defs.push(bias_def("conv1.bias", c4));
                    if batchnorm {
                        defs.extend(bn_defs("bn2", c4));
                    }
                    defs.push(conv_def("conv2.weight", c4, c4, 3));
                    defs.push(bias_def("conv2.bias", c4));
                    if batchnorm {
                        defs.extend(bn_defs("bn3", c4));
                    }
                    defs.push(conv_def("conv3.weight", c, c4, 1));
                    defs.push(bias_def("conv3.bias", c));
                } else {
                    if batchnorm {
                        defs.extend(bn_defs("bn1", c));
                    }
                    defs.push(conv_def("conv1.weight", c, c, 3));
                    defs.push(bias_def("conv1.bias", c));
                    if batchnorm {
                        defs.extend(bn_defs("bn2", c));
                    }
                    defs.push(conv_def("conv2.weight", c, c, 3));
                    defs.push(bias_def("conv2.bias", c));
                }
                defs
            }
            LayerKind::ResBlockDownsample {
                in_ch,
                out_ch,
                bottleneck,
                batchnorm,
                ..
            } => {
                let mut defs = Vec::new();
                if bottleneck {
                    let c4 = (out_ch / 4).max(1);
                    if batchnorm {
                        defs.extend(bn_defs("bn1", in_ch));
                    }
                    defs.push(conv_def("conv1.weight", c4, in_ch, 1));
                    defs.push(bias_def("conv1.bias", c4));
                    if batchnorm {
                        defs.extend(bn_defs("bn2", c4));
                    }
                    defs.push(conv_def("conv2.weight", c4, c4, 3));
                    defs.push(bias_def("conv2.bias", c4));
                    if batchnorm {
                        defs.extend(bn_defs("bn3", c4));
                    }
                    defs.push(conv_def("conv3.weight", out_ch, c4, 1));
                    defs.push(bias_def("conv3.bias", out_ch));
                } else {
                    if batchnorm {
                        defs.extend(bn_defs("bn1", in_ch));
                    }
                    defs.push(conv_def("conv1.weight", out_ch, in_ch, 3));
                    defs.push(bias_def("conv1.bias", out_ch));
                    if batchnorm {
                        defs.extend(bn_defs("bn2", out_ch));
                    }
                    defs.push(conv_def("conv2.weight", out_ch, out_ch, 3));
                    defs.push(bias_def("conv2.bias", out_ch));
                }
                defs.push(conv_def("proj.weight", out_ch, in_ch, 1));
                defs.push(bias_def("proj.bias", out_ch));
                defs
            }
            _ => Vec::new(),
        }
    }

    /// Count of learnable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.tensor_defs()
            .iter()
            .filter(|d| d.role.is_learnable())
            .map(|d| d.dims.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub init: InitFamily,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, init: InitFamily) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            init,
        }
    }
}

/// A named group of layers (residual stage, stem, classifier).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub layers: Vec<String>,
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Chw(c, h, w) => c * h * w,
            Shape::Flat(n) => n,
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Chw(c, h, w) => write!(f, "{}x{}x{}", c, h, w),
            Shape::Flat(n) => write!(f, "flat({})", n),
        }
    }
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = h + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    /// Input dims as [channels, height, width].
    pub input: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub stages: Vec<Stage>,
    /// True for the variant that downsamples with standalone conv layers so
    /// every residual block keeps an identity skip.
    pub identity_skips_only: bool,
}

impl ArchSpec {
    /// Infer per-layer input shapes, verifying adjacency, unique names and
    /// stage structure. Returns the input shape of each layer (the output of
    /// the last one must be `Flat(num_classes)`).
    pub fn validate(&self) -> Result<Vec<Shape>> {
        if self.num_classes == 0 {
            return Err(Error::InvalidArch("num_classes must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::InvalidArch(format!("duplicate layer name `{}`", l.name)));
            }
        }
        if !self.layers.iter().any(|l| l.kind.is_parametric()) {
            return Err(Error::InvalidArch("no parametric layers".into()));
        }

        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = Shape::Chw(self.input[0], self.input[1], self.input[2]);
        for l in &self.layers {
            shapes.push(cur);
            cur = self.layer_out_shape(l, cur)?;
        }
        if cur != Shape::Flat(self.num_classes) {
            return Err(Error::InvalidArch(format!(
                "network output is {} but num_classes is {}",
                cur, self.num_classes
            )));
        }
        self.validate_stages()?;
        Ok(shapes)
    }

    fn layer_out_shape(&self, l: &LayerSpec, cur: Shape) -> Result<Shape> {
        let mismatch = |detail: String| Error::ShapeMismatch {
            layer: l.name.clone(),
            detail,
        };
        Ok(match (&l.kind, cur) {
            (LayerKind::Flatten, s) => Shape::Flat(s.numel()),
            (LayerKind::Relu, s) => s,
            (
                LayerKind::Dense {
                    in_features,
                    out_features,
                },
                Shape::Flat(n),
            ) => {
                if n != *in_features {
                    return Err(mismatch(format!("expects flat({}) input, got {}", in_features, cur)));
                }
                Shape::Flat(*out_features)
            }
            (LayerKind::Dense { in_features, .. }, s) => {
                return Err(mismatch(format!("expects flat({}) input, got {}", in_features, s)));
            }
            (
                LayerKind::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                },
                Shape::Chw(c, h, w),
            ) => {
                if c != *in_ch {
                    return Err(mismatch(format!("expects {} channels, got {}", in_ch, c)));
                }
                let oh = conv_out(h, *kernel, *stride, *padding)
                    .ok_or_else(|| mismatch(format!("kernel {} too large for height {}", kernel, h)))?;
                let ow = conv_out(w, *kernel, *stride, *padding)
                    .ok_or_else(|| mismatch(format!("kernel {} too large for width {}", kernel, w)))?;
                Shape::Chw(*out_ch, oh, ow)
            }
            (LayerKind::MaxPool { kernel, stride }, Shape::Chw(c, h, w)) => {
                let oh = conv_out(h, *kernel, *stride, 0)
                    .ok_or_else(|| mismatch(format!("pool {} too large for height {}", kernel, h)))?;
                let ow = conv_out(w, *kernel, *stride, 0)
                    .ok_or_else(|| mismatch(format!("pool {} too large for width {}", kernel, w)))?;
                Shape::Chw(c, oh, ow)
            }
            (LayerKind::GlobalAvgPool, Shape::Chw(c, _, _)) => Shape::Flat(c),
            (LayerKind::BatchNorm { features }, Shape::Chw(c, h, w)) => {
                if c != *features {
                    return Err(mismatch(format!("normalizes {} features, got {} channels", features, c)));
                }
                Shape::Chw(c, h, w)
            }
            (LayerKind::BatchNorm { features }, Shape::Flat(n)) => {
                if n != *features {
                    return Err(mismatch(format!("normalizes {} features, got flat({})", features, n)));
                }
                Shape::Flat(n)
            }
            (LayerKind::ResBlockIdentity { channels, .. }, Shape::Chw(c, h, w)) => {
                if c != *channels {
                    return Err(mismatch(format!("expects {} channels, got {}", channels, c)));
                }
                Shape::Chw(c, h, w)
            }
            (
                LayerKind::ResBlockDownsample {
                    in_ch,
                    out_ch,
                    stride,
                    ..
                },
                Shape::Chw(c, h, w),
            ) => {
                if c != *in_ch {
                    return Err(mismatch(format!("expects {} channels, got {}", in_ch, c)));
                }
                let oh = conv_out(h, 3, *stride, 1)
                    .ok_or_else(|| mismatch(format!("input height {} too small", h)))?;
                let ow = conv_out(w, 3, *stride, 1)
                    .ok_or_else(|| mismatch(format!("input width {} too small", w)))?;
                Shape::Chw(*out_ch, oh, ow)
            }
            (kind, s) => {
                return Err(mismatch(format!("{:?} cannot take input {}", kind, s)));
            }
        })
    }

    fn validate_stages(&self) -> Result<()> {
        let by_name: std::collections::HashMap<&str, &LayerSpec> =
            self.layers.iter().map(|l| (l.name.as_str(), l)).collect();
        let mut past_first_residual_stage = false;
        for st in &self.stages {
            let mut blocks = Vec::new();
            for ln in &st.layers {
                let l = by_name
                    .get(ln.as_str())
                    .ok_or_else(|| Error::InvalidArch(format!("stage `{}` lists unknown layer `{}`", st.name, ln)))?;
                if matches!(
                    l.kind,
                    LayerKind::ResBlockIdentity { .. } | LayerKind::ResBlockDownsample { .. }
                ) {
                    blocks.push(*l);
                }
            }
            if blocks.is_empty() {
                continue;
            }
            for (i, b) in blocks.iter().enumerate() {
                let is_down = matches!(b.kind, LayerKind::ResBlockDownsample { .. });
                let expect_down = !self.identity_skips_only && past_first_residual_stage && i == 0;
                if is_down != expect_down {
                    return Err(Error::InvalidArch(format!(
                        "stage `{}` block `{}`: expected {} block",
                        st.name,
                        b.name,
                        if expect_down { "a downsampling" } else { "an identity" }
                    )));
                }
            }
            past_first_residual_stage = true;
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn parametric_layers(&self) -> Vec<&LayerSpec> {
        self.layers.iter().filter(|l| l.kind.is_parametric()).collect()
    }

    /// Count of parametric layers (residual blocks count as one).
    pub fn depth(&self) -> usize {
        self.parametric_layers().len()
    }

    /// Total learnable parameter count.
    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.kind.param_count()).sum()
    }

    /// Stable hash of the serialized architecture, used to pair checkpoints
    /// with the network that produced them.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("arch serializes");
        fnv1a(json.as_bytes())
    }

    /// Drop the selected layers, keeping the network shape-consistent. Only
    /// identity-skip residual blocks and equal-width dense layers may go.
    pub fn remove_layers(&self, selection: &[String]) -> Result<ArchSpec> {
        for name in selection {
            let l = self.layer(name)?;
            let removable = match l.kind {
                LayerKind::ResBlockIdentity { .. } => true,
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => in_features == out_features,
                _ => false,
            };
            if !removable {
                return Err(Error::InvalidArch(format!(
                    "layer `{}` ({:?}) cannot be removed without changing shapes",
                    name, l.kind
                )));
            }
        }
        let sel: std::collections::HashSet<&str> = selection.iter().map(|s| s.as_str()).collect();
        let mut out = self.clone();
        out.layers.retain(|l| !sel.contains(l.name.as_str()));
        for st in &mut out.stages {
            st.layers.retain(|n| !sel.contains(n.as_str()));
        }
        out.validate()?;
        Ok(out)
    }

    /// Names of identity-skip residual blocks grouped by stage, for the
    /// stochastic classifier and block-level ablations.
    pub fn identity_blocks_by_stage(&self) -> Vec<(String, Vec<String>)> {
        let mut out = Vec::new();
        for st in &self.stages {
            let blocks: Vec<String> = st
                .layers
                .iter()
                .filter(|n| {
                    self.layer(n)
                        .map(|l| matches!(l.kind, LayerKind::ResBlockIdentity { .. }))
                        .unwrap_or(false)
                })
                .cloned()
                .collect();
            if !blocks.is_empty() {
                out.push((st.name.clone(), blocks));
            }
        }
        out
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub mod presets {
    //! Ready-made architectures used by the CLI and the test suite.

    use super::*;

    /// `depth` hidden dense layers of width `hidden` with ReLU, then a final
    /// linear classifier. Hidden layers are named `layer1..layerN`.
    pub fn fcn(depth: usize, hidden: usize, input: [usize; 3], num_classes: usize) -> ArchSpec {
        let mut layers = vec![LayerSpec::new(
            "flatten",
            LayerKind::Flatten,
            InitFamily::Constant(0.0),
        )];
        let mut in_features = input.iter().product::<usize>();
        for i in 1..=depth {
            layers.push(LayerSpec::new(
                format!("layer{}", i),
                LayerKind::Dense {
                    in_features,
                    out_features: hidden,
                },
                InitFamily::UniformHe,
            ));
            layers.push(LayerSpec::new(
                format!("relu{}", i),
                LayerKind::Relu,
                InitFamily::Constant(0.0),
            ));
            in_features = hidden;
        }
        layers.push(LayerSpec::new(
            "final_linear",
            LayerKind::Dense {
                in_features,
                out_features: num_classes,
            },
            InitFamily::UniformGlorot,
        ));
        ArchSpec {
            name: format!("fcn-{}x{}", depth, hidden),
            input,
            num_classes,
            layers,
            stages: Vec::new(),
            identity_skips_only: false,
        }
    }

    fn stem(layers: &mut Vec<LayerSpec>, stages: &mut Vec<Stage>, in_ch: usize, ch: usize) {
        layers.push(LayerSpec::new(
            "stage0.conv",
            LayerKind::Conv2d {
                in_ch,
                out_ch: ch,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            InitFamily::UniformHe,
        ));
        layers.push(LayerSpec::new("stage0.relu", LayerKind::Relu, InitFamily::Constant(0.0)));
        stages.push(Stage {
            name: "stage0".into(),
            layers: vec!["stage0.conv".into()],
        });
    }

    fn head(layers: &mut Vec<LayerSpec>, stages: &mut Vec<Stage>, ch: usize, num_classes: usize) {
        layers.push(LayerSpec::new(
            "avgpool",
            LayerKind::GlobalAvgPool,
            InitFamily::Constant(0.0),
        ));
        layers.push(LayerSpec::new(
            "final_linear",
            LayerKind::Dense {
                in_features: ch,
                out_features: num_classes,
            },
            InitFamily::UniformGlorot,
        ));
        stages.push(Stage {
            name: "final_linear".into(),
            layers: vec!["final_linear".into()],
        });
    }

    /// Residual network with `blocks[s]` blocks in stage `s+1`. The channel
    /// width starts at `base_ch` and doubles per stage; the first block of
    /// every stage after the first downsamples with a projection skip.
    pub fn resnet(
        blocks: &[usize],
        base_ch: usize,
        input: [usize; 3],
        num_classes: usize,
        batchnorm: bool,
        bottleneck: bool,
    ) -> ArchSpec {
        let mut layers = Vec::new();
        let mut stages = Vec::new();
        stem(&mut layers, &mut stages, input[0], base_ch);
        let mut ch = base_ch;
        for (si, &nblocks) in blocks.iter().enumerate() {
            let stage_no = si + 1;
            let mut stage_layers = Vec::new();
            for b in 1..=nblocks {
                let name = format!("stage{}.resblk{}", stage_no, b);
                let kind = if si > 0 && b == 1 {
                    let k = LayerKind::ResBlockDownsample {
                        in_ch: ch,
                        out_ch: ch * 2,
                        stride: 2,
                        bottleneck,
                        batchnorm,
                    };
                    ch *= 2;
                    k
                } else {
                    LayerKind::ResBlockIdentity {
                        channels: ch,
                        bottleneck,
                        batchnorm,
                    }
                };
                layers.push(LayerSpec::new(name.clone(), kind, InitFamily::UniformHe));
                stage_layers.push(name);
            }
            stages.push(Stage {
                name: format!("stage{}", stage_no),
                layers: stage_layers,
            });
        }
        layers.push(LayerSpec::new("final_relu", LayerKind::Relu, InitFamily::Constant(0.0)));
        head(&mut layers, &mut stages, ch, num_classes);
        ArchSpec {
            name: format!(
                "resnet-{}@{}",
                blocks.iter().map(|b| b.to_string()).collect::<Vec<_>>().join("-"),
                base_ch
            ),
            input,
            num_classes,
            layers,
            stages,
            identity_skips_only: false,
        }
    }

    /// Residual network variant with standalone downsampling convolutions
    /// between stages, so every residual block has an identity skip and can
    /// be swapped out wholesale.
    pub fn resnet_identity(
        blocks: &[usize],
        base_ch: usize,
        input: [usize; 3],
        num_classes: usize,
        batchnorm: bool,
    ) -> ArchSpec {
        let mut layers = Vec::new();
        let mut stages = Vec::new();
        stem(&mut layers, &mut stages, input[0], base_ch);
        let mut ch = base_ch;
        for (si, &nblocks) in blocks.iter().enumerate() {
            let stage_no = si + 1;
            if si > 0 {
                layers.push(LayerSpec::new(
                    format!("stage{}.downsample", stage_no),
                    LayerKind::Conv2d {
                        in_ch: ch,
                        out_ch: ch * 2,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    },
                    InitFamily::UniformHe,
                ));
                layers.push(LayerSpec::new(
                    format!("stage{}.downsample_relu", stage_no),
                    LayerKind::Relu,
                    InitFamily::Constant(0.0),
                ));
                ch *= 2;
            }
            let mut stage_layers = Vec::new();
            for b in 1..=nblocks {
                let name = format!("stage{}.resblk{}", stage_no, b);
                layers.push(LayerSpec::new(
                    name.clone(),
                    LayerKind::ResBlockIdentity {
                        channels: ch,
                        bottleneck: false,
                        batchnorm,
                    },
                    InitFamily::UniformHe,
                ));
                stage_layers.push(name);
            }
            stages.push(Stage {
                name: format!("stage{}", stage_no),
                layers: stage_layers,
            });
        }
        layers.push(LayerSpec::new("final_relu", LayerKind::Relu, InitFamily::Constant(0.0)));
        head(&mut layers, &mut stages, ch, num_classes);
        ArchSpec {
            name: format!(
                "resnet-id-{}@{}",
                blocks.iter().map(|b| b.to_string()).collect::<Vec<_>>().join("-"),
                base_ch
            ),
            input,
            num_classes,
            layers,
            stages,
            identity_skips_only: true,
        }
    }

    /// VGG-style plain convolutional network. `conv_plan` holds channel
    /// counts per conv, with 0 marking a 2x2 max-pool.
    pub fn vgg_like(
        name: &str,
        conv_plan: &[usize],
        fc_width: usize,
        input: [usize; 3],
        num_classes: usize,
        batchnorm: bool,
    ) -> ArchSpec {
        let mut layers = Vec::new();
        let mut ch = input[0];
        let mut hw = input[1];
        let mut conv_no = 0;
        let mut pool_no = 0;
        for &c in conv_plan {
            if c == 0 {
                pool_no += 1;
                layers.push(LayerSpec::new(
                    format!("pool{}", pool_no),
                    LayerKind::MaxPool { kernel: 2, stride: 2 },
                    InitFamily::Constant(0.0),
                ));
                hw /= 2;
            } else {
                conv_no += 1;
                layers.push(LayerSpec::new(
                    format!("conv{}", conv_no),
                    LayerKind::Conv2d {
                        in_ch: ch,
                        out_ch: c,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    },
                    InitFamily::UniformHe,
                ));
                if batchnorm {
                    layers.push(LayerSpec::new(
                        format!("bn{}", conv_no),
                        LayerKind::BatchNorm { features: c },
                        InitFamily::Constant(0.0),
                    ));
                }
                layers.push(LayerSpec::new(
                    format!("conv{}_relu", conv_no),
                    LayerKind::Relu,
                    InitFamily::Constant(0.0),
                ));
                ch = c;
            }
        }
        layers.push(LayerSpec::new("flatten", LayerKind::Flatten, InitFamily::Constant(0.0)));
        let mut in_features = ch * hw * hw;
        for i in 1..=2 {
            layers.push(LayerSpec::new(
                format!("fc{}", i),
                LayerKind::Dense {
                    in_features,
                    out_features: fc_width,
                },
                InitFamily::UniformHe,
            ));
            layers.push(LayerSpec::new(format!("fc{}_relu", i), LayerKind::Relu, InitFamily::Constant(0.0)));
            in_features = fc_width;
        }
        layers.push(LayerSpec::new(
            "final_linear",
            LayerKind::Dense {
                in_features,
                out_features: num_classes,
            },
            InitFamily::UniformGlorot,
        ));
        ArchSpec {
            name: name.to_string(),
            input,
            num_classes,
            layers,
            stages: Vec::new(),
            identity_skips_only: false,
        }
    }

    /// The classic 11-layer plan scaled for 32x32 inputs.
    pub fn vgg11(input: [usize; 3], num_classes: usize, batchnorm: bool) -> ArchSpec {
        vgg_like(
            "vgg11",
            &[64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0],
            256,
            input,
            num_classes,
            batchnorm,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fcn_validates_and_counts() {
        let a = presets::fcn(3, 256, [1, 28, 28], 10);
        a.validate().unwrap();
        assert_eq!(a.depth(), 4); // layer1..3 + final_linear
        let expect = 784 * 256 + 256 + 2 * (256 * 256 + 256) + 256 * 10 + 10;
        assert_eq!(a.total_params(), expect);
    }

    #[test]
    fn resnet_validates() {
        let a = presets::resnet(&[2, 2, 2, 2], 8, [3, 32, 32], 10, false, false);
        a.validate().unwrap();
        assert_eq!(a.depth(), 1 + 8 + 1); // stem + blocks + classifier
        let a = presets::resnet(&[3, 3], 8, [3, 32, 32], 10, true, true);
        a.validate().unwrap();
    }

    #[test]
    fn resnet_identity_variant_has_no_projection_blocks() {
        let a = presets::resnet_identity(&[4, 4], 8, [3, 32, 32], 10, false);
        a.validate().unwrap();
        assert!(a
            .layers
            .iter()
            .all(|l| !matches!(l.kind, LayerKind::ResBlockDownsample { .. })));
        assert_eq!(a.identity_blocks_by_stage().len(), 2);
    }

    #[test]
    fn vgg_validates() {
        presets::vgg11([3, 32, 32], 10, false).validate().unwrap();
        presets::vgg11([3, 32, 32], 10, true).validate().unwrap();
    }

    #[test]
    fn bad_shapes_name_the_layer() {
        let mut a = presets::fcn(2, 16, [1, 8, 8], 10);
        // break layer2's fan-in
        for l in &mut a.layers {
            if l.name == "layer2" {
                l.kind = LayerKind::Dense {
                    in_features: 17,
                    out_features: 16,
                };
            }
        }
        let err = a.validate().unwrap_err().to_string();
        assert!(err.contains("layer2"), "{err}");
    }

    #[test]
    fn remove_empty_is_identity() {
        let a = presets::resnet(&[2, 2], 8, [3, 32, 32], 10, false, false);
        let b = a.remove_layers(&[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn remove_downsample_rejected() {
        let a = presets::resnet(&[2, 2], 8, [3, 32, 32], 10, false, false);
        let err = a
            .remove_layers(&["stage2.resblk1".to_string()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("stage2.resblk1"), "{err}");
    }

    #[test]
    fn remove_tail_blocks_of_each_stage() {
        let a = presets::resnet(&[4, 4, 4, 4], 8, [3, 32, 32], 10, false, false);
        let sel: Vec<String> = (1..=4)
            .flat_map(|s| (2..=4).map(move |b| format!("stage{}.resblk{}", s, b)))
            .collect();
        let b = a.remove_layers(&sel).unwrap();
        // stem + one block per stage + classifier
        assert_eq!(b.depth(), 1 + 4 + 1);
        b.validate().unwrap();
        assert!(a.depth() - b.depth() == 12);
    }

    #[test]
    fn equal_width_dense_removable_only() {
        let a = presets::fcn(3, 64, [1, 8, 8], 10);
        a.remove_layers(&["layer2".into()]).unwrap();
        // layer1 maps 64 inputs to 64? no: 8x8=64 in, 64 out — equal, so it
        // is removable here; final_linear is not.
        assert!(a.remove_layers(&["final_linear".into()]).is_err());
    }

    #[test]
    fn hash_changes_with_arch() {
        let a = presets::fcn(3, 64, [1, 8, 8], 10);
        let b = presets::fcn(3, 65, [1, 8, 8], 10);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }
}
