//! Dense row-major tensors and the reverse-mode tape built on them.
//!
//! [`Tensor`] is a plain value type (shape plus contiguous buffer). Gradient
//! tracking lives on the [`Tape`], which owns every tensor produced while
//! recording and replays the recorded nodes in reverse on
//! [`Tape::backward`].

mod conv;
mod norm;
mod tape;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conv::{conv3d_forward, ConvSpec, Padding};
pub use norm::{instance_norm_forward, IN_EPS};
pub use tape::{Tape, Var};

/// Floating point element type usable by the tensor engine.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from `f64` used for constants.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c = a * b + beta * c` for strided row/column-major operands
    /// (`a` is m×k, `b` is k×n, `c` is m×n).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );
}

/// Largest offset touched by an `rows x cols` strided operand, plus one.
fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(a.len() >= extent(m, k, rsa, csa));
                assert!(b.len() >= extent(k, n, rsb, csb));
                assert!(c.len() >= extent(m, n, rsc, csc));
                // SAFETY: the asserts above bound every offset the kernel reads or writes.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is detached from every tensor that requires grad")]
    Detached,
    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardTwice,
    #[error("{op}: zero-size normalization slice")]
    ZeroSizeSlice { op: &'static str },
    #[error("{op}: division by zero-variance signal")]
    ZeroVariance { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional array stored contiguously in row-major order.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                msg: format!("shape {:?} needs {} elements, got {}", shape, numel(&shape), data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = numel(shape);
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element type conversion (used to lift a graph into 64-bit).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                expected: self.shape.clone(),
                got: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Materialized axis permutation: `out.shape[i] = self.shape[axes[i]]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                msg: format!("{:?} is not a permutation of {} axes", axes, nd),
            });
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.data.len();
        let mut data = Vec::with_capacity(n);
        if n > 0 {
            let mut idx = vec![0usize; nd];
            let mut offset = 0usize;
            for _ in 0..n {
                data.push(self.data[offset]);
                for d in (0..nd).rev() {
                    idx[d] += 1;
                    offset += src_strides[d];
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    offset -= src_strides[d] * out_shape[d];
                    idx[d] = 0;
                }
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    /// Sub-tensor at `index` along the first axis, keeping that axis with length 1.
    pub fn select_first(&self, index: usize) -> Result<Self> {
        let first = *self.shape.first().ok_or(TensorError::InvalidShape {
            op: "select",
            msg: "scalar has no leading axis".into(),
        })?;
        if index >= first {
            return Err(TensorError::InvalidShape {
                op: "select",
                msg: format!("index {} out of range for axis of length {}", index, first),
            });
        }
        let stride = self.data.len() / first;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self {
            shape,
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        })
    }

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = as_matrix(self, "matmul")?;
        let (k2, n) = as_matrix(rhs, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: vec![k, n],
                got: rhs.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// 2-D transpose.
    pub fn t(&self) -> Result<Self> {
        as_matrix(self, "transpose")?;
        self.permute(&[1, 0])
    }

    pub fn sum_all(&self) -> T {
        pairwise_sum(&self.data)
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }
}

pub(crate) fn as_matrix<T>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        &[r, c] => Ok((r, c)),
        s => Err(TensorError::InvalidShape {
            op,
            msg: format!("expected a 2-D matrix, got shape {:?}", s),
        }),
    }
}

/// `out += a (m×k) · b (k×n)`, row-major, fixed summation order.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Sum with eight independent lanes so the loop vectorizes while keeping a
/// fixed reduction order.
pub(crate) fn pairwise_sum<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rem = chunks.remainder();
    for c in chunks {
        for j in 0..8 {
            acc[j] = acc[j] + c[j];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &r in rem {
        s = s + r;
    }
    s
}
