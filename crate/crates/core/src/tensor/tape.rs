use super::conv::{conv3d_backward_bias, conv3d_backward_input, conv3d_backward_weight};
use super::norm::instance_norm_backward;
use super::{conv3d_forward, instance_norm_forward, matmul_into, numel, ConvSpec, Result, Scalar, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Tanh(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    MatMul(Var, Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Sum(Var),
    Mean(Var),
    TemporalDiff(Var),
    Select { x: Var, index: usize },
    Concat(Vec<Var>),
    NegPearson { x: Var, target: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::MatMul(..) => "matmul",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "reduce_mean",
            Op::TemporalDiff(_) => "temporal_diff",
            Op::Select { .. } => "select",
            Op::Concat(_) => "concat",
            Op::NegPearson { .. } => "neg_pearson",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv3d { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            Op::InstanceNorm { x, .. }
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Reshape(x)
            | Op::Permute { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::TemporalDiff(x)
            | Op::Select { x, .. }
            | Op::NegPearson { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of every tensor operation, replayed in reverse by
/// [`Tape::backward`].
///
/// Nodes are appended as operations execute, so parents always precede their
/// children. A tape is single-owner; use one tape per forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// Tape for inference: nothing requires grad and [`Tape::release`]
    /// frees intermediate buffers.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = self.grad_enabled && op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Trainable leaf; requires grad unless the tape is in no-grad mode.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Drop the buffer behind `v` on a no-grad tape. No-op when recording
    /// gradients, since backward may still read it.
    pub fn release(&mut self, v: Var) {
        if !self.grad_enabled {
            self.nodes[v.0].value = Tensor::zeros(&[0]);
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let out = conv3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        self.push(
            out,
            Op::Conv3d {
                x,
                w,
                b,
                spec: spec.clone(),
            },
        )
    }

    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let (y, inv_std) = instance_norm_forward(self.value(x))?;
        self.push(y, Op::InstanceNorm { x, inv_std })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.tanh());
        self.push(y, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.zip_with(a, b, |x, y| x + y);
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let y = self.zip_with(a, b, |x, y| x - y);
        self.push(y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.zip_with(a, b, |x, y| x * y);
        self.push(y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let y = self.zip_with(a, b, |x, y| x / y);
        self.push(y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let y = self.value(x).map(|v| v + c);
        self.push(y, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::MulScalar(x, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        self.push(y, Op::MatMul(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        self.push(y, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let y = self.value(x).permute(axes)?;
        self.push(
            y,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        )
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        super::as_matrix(self.value(x), "transpose")?;
        self.permute(x, &[1, 0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum_all());
        self.push(y, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "reduce_mean",
                msg: "mean of an empty tensor".into(),
            });
        }
        let y = Tensor::scalar(t.sum_all() / T::of(t.len() as f64));
        self.push(y, Op::Mean(x))
    }

    /// Adjacent-frame difference along axis 2 of `[N, C, T, H, W]`:
    /// `out[t] = x[t + 1] - x[t]`.
    pub fn temporal_diff(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[n, c, len, h, w] = t.shape() else {
            return Err(TensorError::InvalidShape {
                op: "temporal_diff",
                msg: format!("expected [N,C,T,H,W], got {:?}", t.shape()),
            });
        };
        if len < 2 {
            return Err(TensorError::InvalidShape {
                op: "temporal_diff",
                msg: format!("need at least 2 frames, got {}", len),
            });
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * c * (len - 1) * plane);
        for vol in t.data().chunks(len * plane) {
            for k in 0..len - 1 {
                let (cur, next) = (&vol[k * plane..(k + 1) * plane], &vol[(k + 1) * plane..(k + 2) * plane]);
                out.extend(next.iter().zip(cur).map(|(&b, &a)| b - a));
            }
        }
        let y = Tensor::new(vec![n, c, len - 1, h, w], out)?;
        self.push(y, Op::TemporalDiff(x))
    }

    /// Slice `index` of the first axis, kept as a length-1 axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let y = self.value(x).select_first(index)?;
        self.push(y, Op::Select { x, index })
    }

    /// Concatenate along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            op: "concat",
            msg: "nothing to concatenate".into(),
        })?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    expected: tail.clone(),
                    got: s.to_vec(),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let y = Tensor::new(shape, data)?;
        self.push(y, Op::Concat(parts.to_vec()))
    }

    /// Mean over rows of `1 - pearson(x[i], target[i])` for `x` of shape
    /// `[N, T]` (or `[T]`).
    pub fn neg_pearson(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() || xv.ndim() == 0 || xv.ndim() > 2 {
            return Err(TensorError::ShapeMismatch {
                op: "neg_pearson",
                expected: xv.shape().to_vec(),
                got: target.shape().to_vec(),
            });
        }
        let len = *xv.shape().last().unwrap();
        let rows = xv.len() / len.max(1);
        let mut total = 0.0;
        for (xr, gr) in xv.data().chunks(len).zip(target.data().chunks(len)) {
            let st = PearsonStats::new(xr, gr).ok_or(TensorError::ZeroVariance { op: "neg_pearson" })?;
            total += 1.0 - st.r;
        }
        let y = Tensor::scalar(T::of(total / rows as f64));
        self.push(
            y,
            Op::NegPearson {
                x,
                target: target.data().to_vec(),
            },
        )
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients become readable
    /// through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(dy);
                continue;
            }
            for (p, g) in self.vjp(id, &dy)? {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                grads[p.0] = Some(match grads[p.0].take() {
                    None => g,
                    Some(mut acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                        acc
                    }
                });
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    /// Parent gradients of node `id` given its output gradient.
    fn vjp(&self, id: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[id];
        let y = &node.value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let scaled = |t: &Tensor<T>, c: T| t.map(|v| v * c);
        let zip = |a: &Tensor<T>, b: &Tensor<T>, f: &dyn Fn(T, T) -> T| {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        };
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, spec } => {
                let xv = self.value(*x);
                if rg(*x) {
                    out.push((*x, conv3d_backward_input(dy, self.value(*w), xv.shape(), spec)?));
                }
                if rg(*w) {
                    out.push((*w, conv3d_backward_weight(dy, xv, spec)?));
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    out.push((b, conv3d_backward_bias(dy, spec.out_channels)));
                }
            }
            Op::InstanceNorm { x, inv_std } => out.push((*x, instance_norm_backward(dy, y, inv_std))),
            Op::Tanh(x) => out.push((*x, zip(dy, y, &|g, t| g * (T::one() - t * t)))),
            Op::Relu(x) => out.push((*x, zip(dy, y, &|g, t| if t > T::zero() { g } else { T::zero() }))),
            Op::Add(a, b) => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, dy.clone()));
                out.push((*b, scaled(dy, -T::one())));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, zip(dy, self.value(*b), &|g, v| g * v)));
                }
                if rg(*b) {
                    out.push((*b, zip(dy, self.value(*a), &|g, v| g * v)));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if rg(*a) {
                    out.push((*a, zip(dy, bv, &|g, v| g / v)));
                }
                if rg(*b) {
                    let gy = zip(dy, y, &|g, q| g * q);
                    out.push((*b, zip(&gy, bv, &|t, v| -t / v)));
                }
            }
            Op::AddScalar(x) => out.push((*x, dy.clone())),
            Op::MulScalar(x, c) => out.push((*x, scaled(dy, *c))),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if rg(*a) {
                    let bt = bv.t()?;
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(dy.data(), bt.data(), &mut da, m, n, k);
                    out.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if rg(*b) {
                    let at = av.t()?;
                    let mut db = vec![T::zero(); k * n];
                    matmul_into(at.data(), dy.data(), &mut db, k, m, n);
                    out.push((*b, Tensor::new(vec![k, n], db)?));
                }
            }
            Op::Reshape(x) => out.push((*x, dy.reshape(self.shape(*x))?)),
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                out.push((*x, dy.permute(&inv)?));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.shape(*x), dy.data()[0]))),
            Op::Mean(x) => {
                let n = numel(self.shape(*x));
                out.push((*x, Tensor::full(self.shape(*x), dy.data()[0] / T::of(n as f64))));
            }
            Op::TemporalDiff(x) => {
                let xs = self.shape(*x);
                let (len, plane) = (xs[2], xs[3] * xs[4]);
                let mut dx = Tensor::zeros(xs);
                for (gvol, dvol) in dy.data().chunks((len - 1) * plane).zip(dx.data_mut().chunks_mut(len * plane)) {
                    for k in 0..len - 1 {
                        for p in 0..plane {
                            let g = gvol[k * plane + p];
                            dvol[(k + 1) * plane + p] = dvol[(k + 1) * plane + p] + g;
                            dvol[k * plane + p] = dvol[k * plane + p] - g;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Select { x, index } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let stride = dy.len();
                dx.data_mut()[index * stride..(index + 1) * stride].copy_from_slice(dy.data());
                out.push((*x, dx));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p);
                    let n = numel(s);
                    if rg(p) {
                        out.push((p, Tensor::new(s.to_vec(), dy.data()[offset..offset + n].to_vec())?));
                    }
                    offset += n;
                }
            }
            Op::NegPearson { x, target } => {
                let xv = self.value(*x);
                let len = *xv.shape().last().unwrap();
                let rows = xv.len() / len;
                let scale = dy.data()[0].as_f64() / rows as f64;
                let mut dx = Vec::with_capacity(xv.len());
                for (xr, gr) in xv.data().chunks(len).zip(target.chunks(len)) {
                    let st = PearsonStats::new(xr, gr).ok_or(TensorError::ZeroVariance { op: "neg_pearson" })?;
                    let (denom, xx) = (st.sx * st.sg, st.sx * st.sx);
                    for (&xi, &gi) in xr.iter().zip(gr) {
                        let (xc, gc) = (xi.as_f64() - st.mx, gi.as_f64() - st.mg);
                        dx.push(T::of(-scale * (gc / denom - st.r * xc / xx)));
                    }
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
        }
        Ok(out)
    }
}

/// Centered sums for a Pearson correlation, accumulated in f64.
struct PearsonStats {
    mx: f64,
    mg: f64,
    sx: f64,
    sg: f64,
    r: f64,
}

impl PearsonStats {
    fn new<T: Scalar>(x: &[T], g: &[T]) -> Option<Self> {
        let n = x.len() as f64;
        let mx = x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let mg = g.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let (mut sxx, mut sgg, mut sxg) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(g) {
            let (xc, gc) = (a.as_f64() - mx, b.as_f64() - mg);
            sxx += xc * xc;
            sgg += gc * gc;
            sxg += xc * gc;
        }
        if sxx <= 0.0 || sgg <= 0.0 {
            return None;
        }
        let (sx, sg) = (sxx.sqrt(), sgg.sqrt());
        Some(Self {
            mx,
            mg,
            sx,
            sg,
            r: sxg / (sx * sg),
        })
    }
}
