//! Direct 3-D convolution over `[N, C, T, H, W]` volumes.
//!
//! Each output frame is computed as one GEMM over an unfolded (im2col)
//! matrix of its receptive fields. Reductions run in a fixed order that does
//! not depend on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(k_t, k_h, k_w)`
    pub kernel: [usize; 3],
    /// `(s_t, s_h, s_w)`
    #[serde(default = "unit_stride")]
    pub stride: [usize; 3],
    #[serde(default = "same")]
    pub temporal_padding: Padding,
    #[serde(default = "valid")]
    pub spatial_padding: Padding,
    #[serde(default = "yes")]
    pub bias: bool,
}

fn unit_stride() -> [usize; 3] {
    [1, 1, 1]
}
fn same() -> Padding {
    Padding::Same
}
fn valid() -> Padding {
    Padding::Valid
}
fn yes() -> bool {
    true
}

/// Output length and leading pad for one axis.
fn axis_geometry(len: usize, k: usize, s: usize, pad: Padding) -> Option<(usize, usize)> {
    match pad {
        Padding::Valid => (len >= k).then(|| ((len - k) / s + 1, 0)),
        Padding::Same => {
            let out = len.div_ceil(s);
            let total = ((out.saturating_sub(1)) * s + k).saturating_sub(len);
            (out >= 1).then_some((out, total / 2))
        }
    }
}

impl ConvSpec {
    /// 1×1×1 convolution with bias.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [1, 1, 1],
            stride: [1, 1, 1],
            temporal_padding: Padding::Same,
            spatial_padding: Padding::Same,
            bias: true,
        }
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.fan_in() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.iter().chain(&self.stride).any(|&v| v == 0)
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(TensorError::InvalidShape {
                op: "conv3d",
                msg: format!("kernel, stride and channel counts must be >= 1: {:?}", self),
            });
        }
        Ok(())
    }

    /// Output `(T, H, W)` for an input of `(T, H, W)`.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        Ok(self.geometry(input)?.map(|(o, _)| o))
    }

    fn geometry(&self, input: [usize; 3]) -> Result<[(usize, usize); 3]> {
        self.validate()?;
        let pads = [self.temporal_padding, self.spatial_padding, self.spatial_padding];
        let mut g = [(0, 0); 3];
        for a in 0..3 {
            g[a] = axis_geometry(input[a], self.kernel[a], self.stride[a], pads[a]).ok_or_else(|| {
                TensorError::InvalidShape {
                    op: "conv3d",
                    msg: format!(
                        "axis {} of length {} is smaller than kernel {} under valid padding",
                        a, input[a], self.kernel[a]
                    ),
                }
            })?;
        }
        Ok(g)
    }
}

#[derive(Clone, Copy)]
struct Geom {
    n: usize,
    ci: usize,
    co: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    pad: [usize; 3],
}

impl Geom {
    fn new(x_shape: &[usize], spec: &ConvSpec) -> Result<Self> {
        let &[n, c, t, h, w] = x_shape else {
            return Err(TensorError::InvalidShape {
                op: "conv3d",
                msg: format!("input must be [N,C,T,H,W], got {:?}", x_shape),
            });
        };
        if c != spec.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                expected: vec![n, spec.in_channels, t, h, w],
                got: x_shape.to_vec(),
            });
        }
        let g = spec.geometry([t, h, w])?;
        Ok(Self {
            n,
            ci: c,
            co: spec.out_channels,
            inp: [t, h, w],
            out: g.map(|(o, _)| o),
            k: spec.kernel,
            s: spec.stride,
            pad: g.map(|(_, p)| p),
        })
    }

    fn in_vol(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }

    fn w_per_out(&self) -> usize {
        self.ci * self.k.iter().product::<usize>()
    }

    fn out_plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    /// Unfold the receptive fields of output frame `to` of sample `n` into a
    /// `(ci*kt*kh*kw) x (hout*wout)` matrix.
    fn im2col<T: Scalar>(&self, x: &[T], n: usize, to: usize, cols: &mut [T]) {
        let [kt, kh, kw] = self.k;
        let [_, hin, win] = self.inp;
        let [_, hout, wout] = self.out;
        let plane = hout * wout;
        let in_vol = self.in_vol();
        let mut row = 0;
        for ci in 0..self.ci {
            let xbase = (n * self.ci + ci) * in_vol;
            for a in 0..kt {
                let ti = self.src(0, to, a);
                for bh in 0..kh {
                    for c in 0..kw {
                        let dst = &mut cols[row * plane..(row + 1) * plane];
                        row += 1;
                        let Some(ti) = ti else {
                            dst.fill(T::zero());
                            continue;
                        };
                        let (lo, hi_c) = self.col_range(c);
                        for ho in 0..hout {
                            let drow = &mut dst[ho * wout..(ho + 1) * wout];
                            let Some(hi) = self.src(1, ho, bh) else {
                                drow.fill(T::zero());
                                continue;
                            };
                            let xrow = &x[xbase + (ti * hin + hi) * win..xbase + (ti * hin + hi + 1) * win];
                            drow[..lo].fill(T::zero());
                            drow[hi_c..].fill(T::zero());
                            if self.s[2] == 1 {
                                drow[lo..hi_c].copy_from_slice(&xrow[lo + c - self.pad[2]..hi_c + c - self.pad[2]]);
                            } else {
                                for wo in lo..hi_c {
                                    drow[wo] = xrow[wo * self.s[2] + c - self.pad[2]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add the transpose of [`Geom::im2col`] into `dx`.
    fn col2im<T: Scalar>(&self, cols: &[T], n: usize, to: usize, dx: &mut [T]) {
        let [kt, kh, kw] = self.k;
        let [_, hin, win] = self.inp;
        let [_, hout, wout] = self.out;
        let plane = hout * wout;
        let in_vol = self.in_vol();
        let mut row = 0;
        for ci in 0..self.ci {
            let xbase = (n * self.ci + ci) * in_vol;
            for a in 0..kt {
                let ti = self.src(0, to, a);
                for bh in 0..kh {
                    for c in 0..kw {
                        let src = &cols[row * plane..(row + 1) * plane];
                        row += 1;
                        let Some(ti) = ti else { continue };
                        let (lo, hi_c) = self.col_range(c);
                        for ho in 0..hout {
                            let Some(hi) = self.src(1, ho, bh) else { continue };
                            let srow = &src[ho * wout..(ho + 1) * wout];
                            let xrow = &mut dx[xbase + (ti * hin + hi) * win..xbase + (ti * hin + hi + 1) * win];
                            if self.s[2] == 1 {
                                for (d, &v) in xrow[lo + c - self.pad[2]..hi_c + c - self.pad[2]].iter_mut().zip(&srow[lo..hi_c]) {
                                    *d = *d + v;
                                }
                            } else {
                                for wo in lo..hi_c {
                                    let i = wo * self.s[2] + c - self.pad[2];
                                    xrow[i] = xrow[i] + srow[wo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Input index along `axis` for output position `o` and kernel tap `k`.
    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.s[axis] + k) as isize - self.pad[axis] as isize;
        (i >= 0 && (i as usize) < self.inp[axis]).then_some(i as usize)
    }

    /// Range of output columns whose tap `kw` lands inside the input row.
    #[inline]
    fn col_range(&self, kw: usize) -> (usize, usize) {
        let (s, p, w_in, w_out) = (self.s[2], self.pad[2], self.inp[2], self.out[2]);
        let lo = if p > kw { (p - kw).div_ceil(s) } else { 0 };
        let last = w_in + p;
        let hi = if last > kw { ((last - 1 - kw) / s + 1).min(w_out) } else { 0 };
        (lo.min(hi), hi)
    }
}

fn check_weight<T: Scalar>(w: &Tensor<T>, spec: &ConvSpec) -> Result<()> {
    if w.shape() != spec.weight_shape() {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            expected: spec.weight_shape().to_vec(),
            got: w.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geom::new(x.shape(), spec)?;
    check_weight(w, spec)?;
    if let Some(b) = b {
        if b.shape() != [spec.out_channels] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                expected: vec![spec.out_channels],
                got: b.shape().to_vec(),
            });
        }
    }
    let (out_vol, plane, k) = (g.out_vol(), g.out_plane(), g.w_per_out());
    let mut out = vec![T::zero(); g.n * g.co * out_vol];
    {
        // each (n, t_out) slab is written by exactly one task
        let slabs = SlabWriter::new(&mut out);
        (0..g.n * g.out[0]).into_par_iter().for_each_init(
            || vec![T::zero(); k * plane],
            |cols, nt| {
                let (n, to) = (nt / g.out[0], nt % g.out[0]);
                g.im2col(x.data(), n, to, cols);
                let base = n * g.co * out_vol + to * plane;
                // SAFETY: slab (n, to) covers offsets base + co*out_vol + p for
                // co < g.co, p < plane, disjoint from every other slab.
                let c = unsafe { slabs.slice(base, (g.co - 1) * out_vol + plane) };
                T::gemm(g.co, k, plane, w.data(), k, 1, cols, plane, 1, T::zero(), c, out_vol, 1);
            },
        );
    }
    if let Some(b) = b {
        for (nc, vol) in out.chunks_mut(out_vol).enumerate() {
            let bias = b.data()[nc % g.co];
            vol.iter_mut().for_each(|v| *v = *v + bias);
        }
    }
    Tensor::new(vec![g.n, g.co, g.out[0], g.out[1], g.out[2]], out)
}

/// Number of fixed partitions used for the weight-gradient reduction. Kept
/// independent of the thread count so results do not depend on it.
const WEIGHT_GRAD_PARTS: usize = 8;

/// Gradient with respect to the convolution input.
pub(crate) fn conv3d_backward_input<T: Scalar>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: &[usize],
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geom::new(x_shape, spec)?;
    let (out_vol, plane, k) = (g.out_vol(), g.out_plane(), g.w_per_out());
    let mut dx = vec![T::zero(); g.n * g.ci * g.in_vol()];
    let mut cols = vec![T::zero(); k * plane];
    for n in 0..g.n {
        for to in 0..g.out[0] {
            let base = n * g.co * out_vol + to * plane;
            let dys = &dy.data()[base..base + (g.co - 1) * out_vol + plane];
            // cols = W^T (k x co) * dY (co x plane)
            T::gemm(k, g.co, plane, w.data(), 1, k, dys, out_vol, 1, T::zero(), &mut cols, plane, 1);
            g.col2im(&cols, n, to, &mut dx);
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

/// Gradient with respect to the kernel weights.
pub(crate) fn conv3d_backward_weight<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geom::new(x.shape(), spec)?;
    let (out_vol, plane, k) = (g.out_vol(), g.out_plane(), g.w_per_out());
    let total = g.n * g.out[0];
    let per = total.div_ceil(WEIGHT_GRAD_PARTS);
    let partials: Vec<Vec<T>> = (0..WEIGHT_GRAD_PARTS)
        .into_par_iter()
        .map(|part| {
            let mut acc = vec![T::zero(); g.co * k];
            let mut cols = vec![T::zero(); k * plane];
            for nt in part * per..((part + 1) * per).min(total) {
                let (n, to) = (nt / g.out[0], nt % g.out[0]);
                g.im2col(x.data(), n, to, &mut cols);
                let base = n * g.co * out_vol + to * plane;
                let dys = &dy.data()[base..base + (g.co - 1) * out_vol + plane];
                // acc += dY (co x plane) * cols^T (plane x k)
                T::gemm(g.co, plane, k, dys, out_vol, 1, &cols, 1, plane, T::one(), &mut acc, k, 1);
            }
            acc
        })
        .collect();
    let mut dw = vec![T::zero(); g.co * k];
    for p in &partials {
        for (a, &v) in dw.iter_mut().zip(p) {
            *a = *a + v;
        }
    }
    Tensor::new(spec.weight_shape().to_vec(), dw)
}

/// Gradient with respect to the bias: sum of `dy` per output channel.
pub(crate) fn conv3d_backward_bias<T: Scalar>(dy: &Tensor<T>, out_channels: usize) -> Tensor<T> {
    let shape = dy.shape();
    let vol: usize = shape[2..].iter().product();
    let mut db = vec![T::zero(); out_channels];
    for (nc, chunk) in dy.data().chunks(vol).enumerate() {
        let c = nc % out_channels;
        db[c] = db[c] + super::pairwise_sum(chunk);
    }
    Tensor::new(vec![out_channels], db).expect("bias shape")
}

/// Shared mutable access to disjoint regions of one output buffer.
struct SlabWriter<T> {
    ptr: *mut T,
    len: usize,
}

unsafe impl<T: Send> Send for SlabWriter<T> {}
unsafe impl<T: Send> Sync for SlabWriter<T> {}

impl<T> SlabWriter<T> {
    fn new(buf: &mut [T]) -> Self {
        Self {
            ptr: buf.as_mut_ptr(),
            len: buf.len(),
        }
    }

    /// # Safety
    /// Concurrent callers must only write disjoint element sets.
    #[allow(clippy::mut_from_ref)]
    unsafe fn slice(&self, offset: usize, len: usize) -> &mut [T] {
        assert!(offset + len <= self.len);
        std::slice::from_raw_parts_mut(self.ptr.add(offset), len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference convolution: straight nested loops over every tap.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: &ConvSpec) -> Tensor<f64> {
        let g = Geom::new(x.shape(), spec).unwrap();
        let [to_, ho_, wo_] = g.out;
        let mut out = Tensor::zeros(&[g.n, g.co, to_, ho_, wo_]);
        let xs = super::super::strides(x.shape());
        let ws = super::super::strides(w.shape());
        let os = super::super::strides(out.shape());
        for n in 0..g.n {
            for co in 0..g.co {
                for t in 0..to_ {
                    for h in 0..ho_ {
                        for wc in 0..wo_ {
                            let mut s = b.map_or(0.0, |b| b.data()[co]);
                            for ci in 0..g.ci {
                                for a in 0..g.k[0] {
                                    for bb in 0..g.k[1] {
                                        for c in 0..g.k[2] {
                                            let (Some(ti), Some(hi), Some(wi)) =
                                                (g.src(0, t, a), g.src(1, h, bb), g.src(2, wc, c))
                                            else {
                                                continue;
                                            };
                                            s += x.data()[n * xs[0] + ci * xs[1] + ti * xs[2] + hi * xs[3] + wi]
                                                * w.data()[co * ws[0] + ci * ws[1] + a * ws[2] + bb * ws[3] + c];
                                        }
                                    }
                                }
                            }
                            out.data_mut()[n * os[0] + co * os[1] + t * os[2] + h * os[3] + wc] = s;
                        }
                    }
                }
            }
        }
        out
    }

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn same_temporal_valid_spatial_shape() {
        let spec = ConvSpec {
            in_channels: 3,
            out_channels: 5,
            kernel: [3, 3, 3],
            stride: [1, 1, 1],
            temporal_padding: Padding::Same,
            spatial_padding: Padding::Valid,
            bias: true,
        };
        assert_eq!(spec.output_dims([8, 10, 10]).unwrap(), [8, 8, 8]);
    }

    #[test]
    fn too_small_input_is_an_error() {
        let spec = ConvSpec {
            kernel: [3, 5, 5],
            spatial_padding: Padding::Valid,
            ..ConvSpec::pointwise(1, 1)
        };
        assert!(spec.output_dims([4, 4, 4]).is_err());
        let zero = ConvSpec {
            stride: [0, 1, 1],
            ..ConvSpec::pointwise(1, 1)
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn matches_naive_for_mixed_strides_and_padding() {
        let cases = [
            ([1, 1, 1], Padding::Same, Padding::Valid, [3, 3, 3]),
            ([1, 2, 2], Padding::Same, Padding::Valid, [3, 4, 4]),
            ([2, 2, 3], Padding::Same, Padding::Same, [3, 3, 2]),
            ([1, 1, 1], Padding::Valid, Padding::Same, [2, 3, 3]),
        ];
        for (i, (stride, tp, sp, kernel)) in cases.into_iter().enumerate() {
            let spec = ConvSpec {
                in_channels: 2,
                out_channels: 3,
                kernel,
                stride,
                temporal_padding: tp,
                spatial_padding: sp,
                bias: true,
            };
            let xs = [2, 2, 5, 9, 8];
            let x = Tensor::new(xs.to_vec(), lcg(xs.iter().product(), i as u64)).unwrap();
            let w = Tensor::new(spec.weight_shape().to_vec(), lcg(spec.weight_shape().iter().product(), 99)).unwrap();
            let b = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
            let got = conv3d_forward(&x, &w, Some(&b), &spec).unwrap();
            let want = naive(&x, &w, Some(&b), &spec);
            assert_eq!(got.shape(), want.shape());
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12, "case {i}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn pointwise_weight_two_doubles_input() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 4, 4, 4], |i| i as f32 * 0.25 - 3.0);
        let w = Tensor::full(&[1, 1, 1, 1, 1], 2.0f32);
        let y = conv3d_forward(&x, &w, None, &ConvSpec { bias: false, ..ConvSpec::pointwise(1, 1) }).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 3, 4, 5], |i| ((i * 7) % 11) as f32 - 5.0);
        let w = Tensor::from_fn(&[3, 3, 1, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = conv3d_forward(&x, &w, None, &ConvSpec::pointwise(3, 3)).unwrap();
        assert_eq!(y, x);
    }
}
