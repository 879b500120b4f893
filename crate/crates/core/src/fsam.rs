//! Factorized self-attention over voxel embeddings `[N, κ, τ, α, β]`.
//!
//! Per sample: a pointwise conv and ReLU make the embedding nonnegative, a
//! [`MappingSpec`] lays it out as an `M×N` matrix, NMF reconstructs it at low
//! rank, and the reconstruction is mapped back, post-processed and used to
//! excite the input:
//!
//! `out = ε + IN(ε ⊙ ReLU(post(Γ⁻¹(NMF(Γ(ReLU(pre(ε))))))))`

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nmf::{self, NmfConfig, NmfError};
use crate::params::{ConvParams, ConvVars};
use crate::tensor::{ConvSpec, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FsamError {
    #[error("embedding has a negative entry at flat index {index}")]
    NegativeEntry { index: usize },
    #[error("frame depth {frame_depth} must be smaller than and divide {channels} channels")]
    FrameDepth { frame_depth: usize, channels: usize },
    #[error("rank {rank} exceeds min(M, N) = min({m}, {n})")]
    RankTooLarge { rank: usize, m: usize, n: usize },
    #[error("expected {expected} elements, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding has {got} channels, FSAM parameters expect {expected}")]
    Channels { expected: usize, got: usize },
    #[error(transparent)]
    Nmf(#[from] NmfError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, FsamError>;

/// Which embedding axes form the rows (M) of the factorization matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum MappingSpec {
    /// `τ → M`, `κ'·α·β → N`.
    #[default]
    TauToM,
    /// `κ' → M`, `τ·α·β → N`.
    KappaToM,
    /// `τ·κ' → M`, `α·β → N`.
    TauKappaToM,
    /// Channels split into `κ'/ψ` contiguous blocks of `ψ`; the position
    /// inside a block goes to M, everything else (block, τ, α, β) to N.
    TsmFrameDepth { frame_depth: usize },
}

/// Frame depth used when `tsm` is selected by name.
pub const DEFAULT_FRAME_DEPTH: usize = 4;

impl FromStr for MappingSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tau" => Ok(Self::TauToM),
            "kappa" => Ok(Self::KappaToM),
            "taukappa" => Ok(Self::TauKappaToM),
            "tsm" => Ok(Self::TsmFrameDepth {
                frame_depth: DEFAULT_FRAME_DEPTH,
            }),
            other => Err(format!("unknown mapping '{other}' (expected tau, kappa, taukappa or tsm)")),
        }
    }
}

impl fmt::Display for MappingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TauToM => f.write_str("tau"),
            Self::KappaToM => f.write_str("kappa"),
            Self::TauKappaToM => f.write_str("taukappa"),
            Self::TsmFrameDepth { frame_depth } => write!(f, "tsm{frame_depth}"),
        }
    }
}

/// Reshape/permute recipe taking `[κ', τ, α, β]` to `[M, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixLayout {
    split: Vec<usize>,
    axes: Vec<usize>,
    pub m: usize,
    pub n: usize,
}

impl MatrixLayout {
    fn permuted(&self) -> Vec<usize> {
        self.axes.iter().map(|&a| self.split[a]).collect()
    }

    fn inverse_axes(&self) -> Vec<usize> {
        let mut inv = vec![0; self.axes.len()];
        for (i, &a) in self.axes.iter().enumerate() {
            inv[a] = i;
        }
        inv
    }
}

impl MappingSpec {
    pub fn layout(&self, shape: [usize; 4]) -> Result<MatrixLayout> {
        let [k, t, a, b] = shape;
        let (split, axes, m) = match *self {
            Self::TauToM => (vec![k, t, a, b], vec![1, 0, 2, 3], t),
            Self::KappaToM => (vec![k, t, a, b], vec![0, 1, 2, 3], k),
            Self::TauKappaToM => (vec![k, t, a, b], vec![1, 0, 2, 3], t * k),
            Self::TsmFrameDepth { frame_depth: p } => {
                if p == 0 || p >= k || k % p != 0 {
                    return Err(FsamError::FrameDepth {
                        frame_depth: p,
                        channels: k,
                    });
                }
                (vec![k / p, p, t, a, b], vec![1, 0, 2, 3, 4], p)
            }
        };
        let total = k * t * a * b;
        let n = if m == 0 { 0 } else { total / m };
        Ok(MatrixLayout { split, axes, m, n })
    }
}

/// `Γ`: lays out a nonnegative `[κ', τ, α, β]` embedding as an `M×N` matrix.
pub fn map_to_matrix<T: Scalar>(e: &Tensor<T>, mapping: &MappingSpec) -> Result<Tensor<T>> {
    let shape = embedding_shape(e.shape())?;
    if let Some(index) = e.data().iter().position(|&v| v < T::zero()) {
        return Err(FsamError::NegativeEntry { index });
    }
    let l = mapping.layout(shape)?;
    Ok(e.reshape(&l.split)?.permute(&l.axes)?.reshape(&[l.m, l.n])?)
}

/// `Γ⁻¹`: the exact inverse of [`map_to_matrix`] for an embedding of `shape`.
pub fn map_from_matrix<T: Scalar>(v: &Tensor<T>, mapping: &MappingSpec, shape: [usize; 4]) -> Result<Tensor<T>> {
    let l = mapping.layout(shape)?;
    let expected = shape.iter().product();
    if v.len() != expected {
        return Err(FsamError::CountMismatch { expected, got: v.len() });
    }
    Ok(v.reshape(&l.permuted())?.permute(&l.inverse_axes())?.reshape(&shape)?)
}

fn embedding_shape(s: &[usize]) -> Result<[usize; 4]> {
    match *s {
        [k, t, a, b] => Ok([k, t, a, b]),
        _ => Err(TensorError::InvalidShape {
            op: "fsam_mapping",
            msg: format!("expected [κ, τ, α, β], got {:?}", s),
        }
        .into()),
    }
}

fn map_on_tape<T: Scalar>(tape: &mut Tape<T>, x: Var, l: &MatrixLayout) -> Result<Var> {
    let x = tape.reshape(x, &l.split)?;
    let x = tape.permute(x, &l.axes)?;
    Ok(tape.reshape(x, &[l.m, l.n])?)
}

fn unmap_on_tape<T: Scalar>(tape: &mut Tape<T>, v: Var, l: &MatrixLayout, shape: &[usize]) -> Result<Var> {
    let x = tape.reshape(v, &l.permuted())?;
    let x = tape.permute(x, &l.inverse_axes())?;
    Ok(tape.reshape(x, shape)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FsamConfig {
    pub mapping: MappingSpec,
    pub nmf: NmfConfig,
    /// Channels of the preprocessing conv; `None` keeps κ.
    pub channels: Option<usize>,
    pub residual: bool,
}

impl Default for FsamConfig {
    fn default() -> Self {
        Self {
            mapping: MappingSpec::TauToM,
            nmf: NmfConfig::default(),
            channels: None,
            residual: true,
        }
    }
}

impl FsamConfig {
    pub fn inner_channels(&self, channels: usize) -> usize {
        self.channels.unwrap_or(channels)
    }

    pub fn pre_spec(&self, channels: usize) -> ConvSpec {
        ConvSpec::pointwise(channels, self.inner_channels(channels))
    }

    pub fn post_spec(&self, channels: usize) -> ConvSpec {
        ConvSpec::pointwise(self.inner_channels(channels), channels)
    }

    /// Checks the configuration against an embedding of `[κ, τ, α, β]`.
    pub fn validate(&self, shape: [usize; 4]) -> Result<MatrixLayout> {
        self.nmf.validate()?;
        let [k, t, a, b] = shape;
        let l = self.mapping.layout([self.inner_channels(k), t, a, b])?;
        if self.nmf.rank > l.m.min(l.n) {
            return Err(FsamError::RankTooLarge {
                rank: self.nmf.rank,
                m: l.m,
                n: l.n,
            });
        }
        Ok(l)
    }
}

/// The two pointwise convolutions around the factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct FsamParams<T> {
    pub pre: ConvParams<T>,
    pub post: ConvParams<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct FsamVars {
    pub pre: ConvVars,
    pub post: ConvVars,
}

impl<T: Scalar> FsamParams<T> {
    pub fn init(channels: usize, cfg: &FsamConfig, rng: &mut impl Rng) -> Self {
        Self {
            pre: ConvParams::init(&cfg.pre_spec(channels), rng),
            post: ConvParams::init(&cfg.post_spec(channels), rng),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> Result<FsamVars> {
        Ok(FsamVars {
            pre: self.pre.register(tape)?,
            post: self.post.register(tape)?,
        })
    }

    pub fn len(&self) -> usize {
        self.pre.len() + self.post.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Records FSAM on `tape` for an embedding of shape `[N, κ, τ, α, β]`.
pub fn fsam_forward<T: Scalar>(tape: &mut Tape<T>, e: Var, vars: &FsamVars, cfg: &FsamConfig) -> Result<Var> {
    fsam_forward_inner(tape, e, vars, cfg, None)
}

/// Like [`fsam_forward`], also collecting each sample's reconstructed
/// matrix `V̂` into `recons`.
pub fn fsam_forward_with_recons<T: Scalar>(
    tape: &mut Tape<T>,
    e: Var,
    vars: &FsamVars,
    cfg: &FsamConfig,
    recons: &mut Vec<Tensor<T>>,
) -> Result<Var> {
    fsam_forward_inner(tape, e, vars, cfg, Some(recons))
}

fn fsam_forward_inner<T: Scalar>(
    tape: &mut Tape<T>,
    e: Var,
    vars: &FsamVars,
    cfg: &FsamConfig,
    mut recons: Option<&mut Vec<Tensor<T>>>,
) -> Result<Var> {
    let &[n, k, t, a, b] = tape.shape(e) else {
        return Err(TensorError::InvalidShape {
            op: "fsam",
            msg: format!("expected [N, κ, τ, α, β], got {:?}", tape.shape(e)),
        }
        .into());
    };
    let expected = tape.shape(vars.pre.weight)[1];
    if expected != k {
        return Err(FsamError::Channels { expected, got: k });
    }
    let layout = cfg.validate([k, t, a, b])?;
    let inner = cfg.inner_channels(k);

    let pre = vars.pre.apply(tape, e, &cfg.pre_spec(k))?;
    let pre = tape.relu(pre)?;
    let mut parts = Vec::with_capacity(n);
    for s in 0..n {
        let x = tape.select(pre, s)?;
        let x = tape.reshape(x, &[inner, t, a, b])?;
        let v = map_on_tape(tape, x, &layout)?;
        let vhat = nmf::factorize_on_tape(tape, v, &cfg.nmf)?;
        if let Some(r) = recons.as_deref_mut() {
            r.push(tape.value(vhat).clone());
        }
        parts.push(unmap_on_tape(tape, vhat, &layout, &[1, inner, t, a, b])?);
    }
    let ehat = if n == 1 { parts[0] } else { tape.concat(&parts)? };
    let post = vars.post.apply(tape, ehat, &cfg.post_spec(k))?;
    let post = tape.relu(post)?;
    let excited = tape.mul(e, post)?;
    let normed = tape.instance_norm(excited)?;
    if cfg.residual {
        Ok(tape.add(e, normed)?)
    } else {
        Ok(normed)
    }
}

/// FSAM on a plain tensor without recording gradients.
pub fn fsam_apply<T: Scalar>(e: &Tensor<T>, params: &FsamParams<T>, cfg: &FsamConfig) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let x = tape.constant(e.clone())?;
    let vars = params.register(&mut tape)?;
    let y = fsam_forward(&mut tape, x, &vars, cfg)?;
    Ok(tape.value(y).clone())
}

/// The attention branch removed: returns `e` unchanged.
pub fn fsam_bypass<T: Scalar>(e: &Tensor<T>) -> Tensor<T> {
    e.clone()
}
