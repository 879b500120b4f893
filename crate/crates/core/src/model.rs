//! The FactorizePhys network: a Diff layer, a stack of 3-D conv blocks
//! (conv, tanh, instance norm), FSAM on the 7×7 embedding and a conv head
//! that collapses the embedding to one value per frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsam::{self, FsamConfig, FsamError, FsamParams, FsamVars};
use crate::nmf::NmfError;
use crate::params::{ConvParams, ConvVars};
use crate::tensor::{ConvSpec, Padding, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("input shape {got:?} does not match the architecture's {expected:?}")]
    Input { expected: Vec<usize>, got: Vec<usize> },
    #[error("parameter '{0}' is missing or has the wrong shape")]
    Param(String),
    #[error(transparent)]
    Fsam(#[from] FsamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<NmfError> for ModelError {
    fn from(e: NmfError) -> Self {
        Self::Fsam(e.into())
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    InstanceNorm,
}

/// One feature block: conv, then activation, then normalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub conv: ConvSpec,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub norm: Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Expected input `(C, T, H, W)` per sample.
    pub input: [usize; 4],
    pub layers: Vec<LayerSpec>,
    /// 1-based index of the layer whose output FSAM attends to.
    pub fsam_after_layer: usize,
    #[serde(default)]
    pub fsam: FsamConfig,
    pub head: ConvSpec,
}

/// Layers (1-based) that may and must downsample spatially.
pub const STRIDED_LAYERS: [usize; 2] = [3, 6];
/// Spatial extent at the FSAM stage.
pub const EMBEDDING_SIDE: usize = 7;

fn conv(cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3]) -> ConvSpec {
    ConvSpec {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        temporal_padding: Padding::Same,
        spatial_padding: Padding::Valid,
        bias: true,
    }
}

fn block(cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3]) -> LayerSpec {
    LayerSpec {
        conv: conv(cin, cout, kernel, stride),
        activation: Activation::Tanh,
        norm: Norm::InstanceNorm,
    }
}

fn plan(input: [usize; 4], down: [usize; 3], down_stride: [usize; 3]) -> ArchConfig {
    let k = [3, 3, 3];
    let s = [1, 1, 1];
    ArchConfig {
        input,
        layers: vec![
            block(3, 8, k, s),
            block(8, 8, k, s),
            block(8, 8, [3, 4, 4], [1, 2, 2]),
            block(8, 8, k, s),
            block(8, 8, k, s),
            block(8, 12, down, down_stride),
            block(12, 12, k, s),
            block(12, 12, k, s),
            block(12, 12, k, s),
        ],
        fsam_after_layer: 9,
        fsam: FsamConfig::default(),
        head: conv(12, 1, [3, 7, 7], s),
    }
}

/// Nine blocks for `161×72×72` RGB chunks; spatial extent
/// 72 → 70, 68, 33, 31, 29, 13, 11, 9, 7.
pub fn default_arch() -> ArchConfig {
    plan([3, 161, 72, 72], [3, 4, 4], [1, 2, 2])
}

/// The default plan adapted to `240×128×128` input: the second downsampling
/// block uses a 9×9 kernel with stride 4 so the embedding still ends at 7×7
/// (128 → 126, 124, 61, 59, 57, 13, 11, 9, 7).
pub fn scaled_arch() -> ArchConfig {
    plan([3, 240, 128, 128], [3, 9, 9], [1, 4, 4])
}

/// Per-layer output extents `(T, H, W)` computed by [`ArchConfig::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    pub layers: Vec<[usize; 3]>,
    pub head: [usize; 3],
}

impl ArchConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("arch serializes")
    }

    pub fn embedding_channels(&self) -> usize {
        self.layers[self.fsam_after_layer - 1].conv.out_channels
    }

    /// Output length per sample (`T − 1`).
    pub fn output_len(&self) -> usize {
        self.input[1].saturating_sub(1)
    }

    /// Checks the structural constraints and returns the shape trace.
    pub fn validate(&self) -> Result<ShapeTrace> {
        let bad = |m: String| Err(ModelError::Arch(m));
        let [c, t, h, w] = self.input;
        if t < 2 {
            return bad(format!("need at least 2 input frames, got {t}"));
        }
        if self.layers.len() < STRIDED_LAYERS[1] {
            return bad(format!("need at least {} layers, got {}", STRIDED_LAYERS[1], self.layers.len()));
        }
        if !(1..=self.layers.len()).contains(&self.fsam_after_layer) {
            return bad(format!("fsam_after_layer {} out of range", self.fsam_after_layer));
        }
        let mut dims = [t - 1, h, w];
        let mut channels = c;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            let s = &l.conv;
            if s.in_channels != channels {
                return bad(format!("layer {n} expects {} channels, receives {channels}", s.in_channels));
            }
            if s.temporal_padding != Padding::Same || s.stride[0] != 1 {
                return bad(format!("layer {n} must keep the temporal length (same padding, stride 1)"));
            }
            if s.spatial_padding != Padding::Valid {
                return bad(format!("layer {n} must use valid spatial padding"));
            }
            let strided = s.stride[1] > 1 || s.stride[2] > 1;
            if strided != STRIDED_LAYERS.contains(&n) {
                return bad(format!(
                    "spatial strides must appear exactly at layers {:?} (layer {n})",
                    STRIDED_LAYERS
                ));
            }
            dims = s.output_dims(dims)?;
            channels = s.out_channels;
            layers.push(dims);
        }
        let emb = layers[self.fsam_after_layer - 1];
        if emb[1..] != [EMBEDDING_SIDE, EMBEDDING_SIDE] {
            return bad(format!(
                "embedding after layer {} is {}x{}, expected {EMBEDDING_SIDE}x{EMBEDDING_SIDE}",
                self.fsam_after_layer, emb[1], emb[2]
            ));
        }
        let k = self.embedding_channels();
        self.fsam.validate([k, emb[0], emb[1], emb[2]])?;
        if self.head.in_channels != channels || self.head.out_channels != 1 {
            return bad(format!(
                "head must map {channels} channels to 1, got {}→{}",
                self.head.in_channels, self.head.out_channels
            ));
        }
        let head = self.head.output_dims(dims)?;
        if head != [t - 1, 1, 1] {
            return bad(format!("head output {:?} must be [{}, 1, 1]", head, t - 1));
        }
        Ok(ShapeTrace { layers, head })
    }

    /// Analytic number of trainable parameters.
    pub fn param_count(&self) -> usize {
        let k = self.embedding_channels();
        self.layers.iter().map(|l| l.conv.param_count()).sum::<usize>()
            + self.fsam.pre_spec(k).param_count()
            + self.fsam.post_spec(k).param_count()
            + self.head.param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub layers: Vec<ConvParams<T>>,
    pub fsam: FsamParams<T>,
    pub head: ConvParams<T>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub layers: Vec<ConvVars>,
    pub fsam: FsamVars,
    pub head: ConvVars,
}

/// Seeded fan-in scaled uniform initialization.
pub fn param_init<T: Scalar>(cfg: &ArchConfig, seed: u64) -> ModelParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = cfg.layers.iter().map(|l| ConvParams::init(&l.conv, &mut rng)).collect();
    let fsam = FsamParams::init(cfg.embedding_channels(), &cfg.fsam, &mut rng);
    let head = ConvParams::init(&cfg.head, &mut rng);
    ModelParams {
        layers,
        fsam,
        head,
        seed,
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn register(&self, tape: &mut Tape<T>) -> Result<ModelVars> {
        Ok(ModelVars {
            layers: self.layers.iter().map(|p| p.register(tape)).collect::<crate::tensor::Result<_>>()?,
            fsam: self.fsam.register(tape)?,
            head: self.head.register(tape)?,
        })
    }

    fn convs(&self) -> Vec<(String, &ConvParams<T>)> {
        let mut out: Vec<_> = (self.layers.iter().enumerate())
            .map(|(i, l)| (format!("layers.{}", i + 1), l))
            .collect();
        out.push(("fsam.pre".into(), &self.fsam.pre));
        out.push(("fsam.post".into(), &self.fsam.post));
        out.push(("head".into(), &self.head));
        out
    }

    fn convs_mut(&mut self) -> Vec<(String, &mut ConvParams<T>)> {
        let mut out: Vec<_> = (self.layers.iter_mut().enumerate())
            .map(|(i, l)| (format!("layers.{}", i + 1), l))
            .collect();
        out.push(("fsam.pre".into(), &mut self.fsam.pre));
        out.push(("fsam.post".into(), &mut self.fsam.post));
        out.push(("head".into(), &mut self.head));
        out
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, p) in self.convs() {
            out.push((format!("{prefix}.weight"), &p.weight));
            if let Some(b) = &p.bias {
                out.push((format!("{prefix}.bias"), b));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, p) in self.convs_mut() {
            let ConvParams { weight, bias } = p;
            out.push((format!("{prefix}.weight"), weight));
            if let Some(b) = bias {
                out.push((format!("{prefix}.bias"), b));
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            layers: self.layers.iter().map(|p| p.cast()).collect(),
            fsam: FsamParams {
                pre: self.fsam.pre.cast(),
                post: self.fsam.post.cast(),
            },
            head: self.head.cast(),
            seed: self.seed,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

impl ModelVars {
    /// Handles in the same order as [`ModelParams::named`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let mut add = |c: &ConvVars| {
            out.push(c.weight);
            out.extend(c.bias);
        };
        self.layers.iter().for_each(&mut add);
        add(&self.fsam.pre);
        add(&self.fsam.post);
        add(&self.head);
        out
    }
}

/// Adjacent-frame difference followed by instance normalization.
pub fn diff_layer<T: Scalar>(tape: &mut Tape<T>, frames: Var) -> Result<Var> {
    let d = tape.temporal_diff(frames)?;
    Ok(tape.instance_norm(d)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub use_fsam: bool,
    /// Keep a copy of the embedding entering FSAM.
    pub capture_embedding: bool,
    /// Keep each sample's reconstructed factorization matrix.
    pub capture_recons: bool,
}

impl ForwardOptions {
    pub fn new(use_fsam: bool) -> Self {
        Self {
            use_fsam,
            capture_embedding: false,
            capture_recons: false,
        }
    }
}

pub struct ForwardOutput<T> {
    /// `[N, T − 1]`
    pub output: Var,
    pub embedding: Option<Tensor<T>>,
    pub recons: Vec<Tensor<T>>,
}

/// Records the network on `tape` for `frames` of shape `[N, C, T, H, W]`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    frames: Var,
    vars: &ModelVars,
    cfg: &ArchConfig,
    opts: ForwardOptions,
) -> Result<ForwardOutput<T>> {
    let shape = tape.shape(frames).to_vec();
    if shape.len() != 5 || shape[1..] != cfg.input {
        return Err(ModelError::Input {
            expected: cfg.input.to_vec(),
            got: shape,
        });
    }
    let n = shape[0];
    let mut embedding = None;
    let mut recons = Vec::new();
    let mut x = diff_layer(tape, frames)?;
    for (i, (spec, v)) in cfg.layers.iter().zip(&vars.layers).enumerate() {
        let y = v.apply(tape, x, &spec.conv)?;
        let y = match spec.activation {
            Activation::Tanh => tape.tanh(y)?,
        };
        let y = match spec.norm {
            Norm::InstanceNorm => tape.instance_norm(y)?,
        };
        let mut y = y;
        if i + 1 == cfg.fsam_after_layer {
            if opts.capture_embedding {
                embedding = Some(tape.value(y).clone());
            }
            if opts.use_fsam {
                y = if opts.capture_recons {
                    fsam::fsam_forward_with_recons(tape, y, &vars.fsam, &cfg.fsam, &mut recons)?
                } else {
                    fsam::fsam_forward(tape, y, &vars.fsam, &cfg.fsam)?
                };
            }
        }
        x = y;
    }
    let out = vars.head.apply(tape, x, &cfg.head)?;
    let output = tape.reshape(out, &[n, cfg.output_len()])?;
    Ok(ForwardOutput {
        output,
        embedding,
        recons,
    })
}

/// Convenience wrapper returning only the output handle.
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    frames: Var,
    vars: &ModelVars,
    cfg: &ArchConfig,
    use_fsam: bool,
) -> Result<Var> {
    Ok(forward(tape, frames, vars, cfg, ForwardOptions::new(use_fsam))?.output)
}

/// Inference on `[N, C, T, H, W]` (or a single `[C, T, H, W]` sample),
/// returning one `T − 1` sample row per clip.
pub fn predict<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ArchConfig,
    frames: &Tensor<T>,
    use_fsam: bool,
) -> Result<Vec<Vec<T>>> {
    let frames = if frames.ndim() == 4 {
        let mut s = vec![1];
        s.extend_from_slice(frames.shape());
        frames.reshape(&s)?
    } else {
        frames.clone()
    };
    let mut tape = Tape::no_grad();
    let x = tape.constant(frames)?;
    let vars = params.register(&mut tape)?;
    let y = model_forward(&mut tape, x, &vars, cfg, use_fsam)?;
    let len = cfg.output_len();
    Ok(tape.value(y).data().chunks(len).map(|r| r.to_vec()).collect())
}
