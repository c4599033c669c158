//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. [`Graph::backward`] walks the
//! nodes in reverse creation order, which is a valid topological order because a node
//! can only reference nodes created before it.

use crate::conv::{self, ConvGeom};
use crate::error::{Result, TensorError};
use crate::float::{gemm, Float};
use crate::tensor::{split_axis, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable op whose forward value is computed by the caller.
pub trait CustomOp<T: Float> {
    fn name(&self) -> &'static str;
    /// Returns one gradient per input (`None` for inputs that need none).
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Float> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    Expand(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    RepeatInterleave(Var, usize),
    MatMul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    LeakyRelu(Var, T),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Batch statistics computed by a training-mode batch norm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, expected: &[usize], got: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, expected: expected.to_vec(), got: got.to_vec() }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: false }
    }

    /// Fails any op whose output contains NaN or infinity.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Which side of its kink every input of a piecewise-linear op (ReLU, LeakyReLU,
    /// abs) falls on. Two evaluations with equal patterns lie on the same linear piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu(x, _) | Op::Abs(x) = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), "scale")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a), "abs")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), "square")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.sqrt());
        self.push(v, Op::Sqrt(a), "sqrt")
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    /// Mean of all elements (scalar output).
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::of(t.len().max(1) as f64));
        self.push(v, Op::Mean(a), "mean")
    }

    /// Mean along `axis`, keeping it with size 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(TensorError::invalid("mean_axis", format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let inv = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        let d = t.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += x;
                }
            }
        }
        out.iter_mut().for_each(|x| *x *= inv);
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::MeanAxis(a, axis), "mean_axis")
    }

    /// Broadcasts a size-1 `axis` to length `n`.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || t.shape()[axis] != 1 {
            return Err(TensorError::invalid("expand", format!("axis {axis} of {:?} is not size 1", t.shape())));
        }
        let (outer, _, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&t.data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = n;
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::Expand(a, axis), "expand")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape(a), "reshape")
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(axes)?;
        self.push(v, Op::Permute(a, axes.to_vec()), "permute")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::Concat(parts.to_vec(), axis), "concat")
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::Slice { x: a, axis, start }, "slice")
    }

    /// Repeats every slice along axis 0 `r` times consecutively (`[a, b] → [a, a, b, b]` for r = 2).
    pub fn repeat_interleave(&mut self, a: Var, r: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 || r == 0 {
            return Err(TensorError::invalid("repeat_interleave", "needs rank ≥ 1 and r ≥ 1"));
        }
        let inner = t.len() / t.shape()[0];
        let mut out = Vec::with_capacity(t.len() * r);
        for row in t.data().chunks(inner.max(1)) {
            for _ in 0..r {
                out.extend_from_slice(row);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] *= r;
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::RepeatInterleave(a, r), "repeat_interleave")
    }

    /// Batched matrix product: `a` is `[B, M, K]`, `b` is `[B, K, N]` (or `[B, N, K]` when `trans_b`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); bt * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            gemm(
                false,
                trans_b,
                m,
                k,
                n,
                T::one(),
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let v = Tensor::new(&[bt, m, n], out)?;
        self.push(v, Op::MatMul { a, b, trans_b }, "matmul")
    }

    /// `y = x·Wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let din = *sx.last().ok_or_else(|| TensorError::invalid("linear", "scalar input"))?;
        if sw.len() != 2 || sw[1] != din {
            return Err(shape_err("linear", &[0, din], &sw));
        }
        let dout = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("linear", &[dout], self.shape(b)));
            }
        }
        let rows = self.value(x).len() / din.max(1);
        let mut out = vec![T::zero(); rows * dout];
        gemm(false, true, rows, din, dout, T::one(), self.value(x).data(), self.value(w).data(), T::zero(), &mut out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bd).for_each(|(o, &bv)| *o += bv);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::Linear { x, w, b }, "linear")
    }

    /// 2-D cross-correlation. `x` is `N×C×H×W`, `w` is `Co×C×kh×kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: (usize, usize)) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        let co = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err("conv2d", &[co], self.shape(b)));
            }
        }
        let geom = ConvGeom::new(sx[0], sx[1], sx[2], sx[3], sw[2], sw[3], stride, padding)?;
        let cols = conv::im2col(self.value(x).data(), &geom);
        let ohw = geom.oh * geom.ow;
        let mut ym = vec![T::zero(); co * geom.col_cols()];
        gemm(false, false, co, geom.col_rows(), geom.col_cols(), T::one(), self.value(w).data(), &cols, T::zero(), &mut ym);
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = conv::cm_to_nchw(&ym, geom.n, co, ohw, bias.as_deref());
        let v = Tensor::new(&[geom.n, co, geom.oh, geom.ow], out)?;
        self.push(v, Op::Conv2d { x, w, b, geom }, "conv2d")
    }

    /// Transposed convolution (adjoint of `conv2d`). `x` is `N×Ci×H×W`, `w` is `Ci×Co×kh×kw`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || stride == 0 {
            return Err(shape_err("conv_transpose2d", &sx, &sw));
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[1], sw[2], sw[3]);
        let oh = ((h - 1) * stride + kh)
            .checked_sub(2 * padding.0)
            .ok_or_else(|| TensorError::invalid("conv_transpose2d", "padding too large"))?;
        let ow = ((wd - 1) * stride + kw)
            .checked_sub(2 * padding.1)
            .ok_or_else(|| TensorError::invalid("conv_transpose2d", "padding too large"))?;
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err("conv_transpose2d", &[co], self.shape(b)));
            }
        }
        // geometry of the forward conv mapping the output grid back onto the input grid
        let geom = ConvGeom::new(n, co, oh, ow, kh, kw, stride, padding)?;
        if geom.oh != h || geom.ow != wd {
            return Err(TensorError::invalid("conv_transpose2d", "inconsistent geometry"));
        }
        let xm = conv::nchw_to_cm(self.value(x).data(), n, ci, h * wd);
        let mut cols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
        gemm(true, false, geom.col_rows(), ci, geom.col_cols(), T::one(), self.value(w).data(), &xm, T::zero(), &mut cols);
        let mut out = vec![T::zero(); n * co * oh * ow];
        conv::col2im(&cols, &geom, &mut out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (i, chunk) in out.chunks_mut(oh * ow).enumerate() {
                let bv = bd[i % co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let v = Tensor::new(&[n, co, oh, ow], out)?;
        self.push(v, Op::ConvTranspose2d { x, w, b, geom }, "conv_transpose2d")
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var, c: usize) -> Result<()> {
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(shape_err(op, &[c], self.shape(p)));
            }
        }
        let _ = x;
        Ok(())
    }

    /// Training-mode batch norm over `N×C×H×W`; returns the output and the batch statistics.
    pub fn batchnorm2d_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::invalid("batchnorm2d", format!("expected NCHW, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if n < 2 {
            return Err(TensorError::invalid("batchnorm2d", "training mode needs batch ≥ 2"));
        }
        self.check_affine("batchnorm2d", x, gamma, beta, c)?;
        let m = (n * hw) as f64;
        let xd = self.value(x).data();
        let sums = conv::channel_sums(xd, n, c, hw);
        let mean: Vec<T> = sums.iter().map(|&s| T::of(s.f64() / m)).collect();
        let mut sq = vec![0f64; c];
        for b in 0..n {
            for ch in 0..c {
                let mu = mean[ch];
                sq[ch] += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|&v| {
                        let d = (v - mu).f64();
                        d * d
                    })
                    .sum::<f64>();
            }
        }
        let var_b: Vec<f64> = sq.iter().map(|&s| s / m).collect();
        let inv_std: Vec<T> = var_b.iter().map(|&v| T::of(1.0 / (v + eps).sqrt())).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: sq.iter().map(|&s| T::of(s / (m - 1.0).max(1.0))).collect(),
        };
        let (v, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, n, c, hw);
        let node = self.push(v, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true }, "batchnorm2d")?;
        Ok((node, stats))
    }

    /// Inference-mode batch norm using fixed statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::invalid("batchnorm2d", format!("expected NCHW, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        self.check_affine("batchnorm2d", x, gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batchnorm2d", &[c], &[running_mean.len()]));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::of(1.0 / (v.f64() + eps).sqrt())).collect();
        let (v, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std, n, c, hw);
        self.push(v, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false }, "batchnorm2d")
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        n: usize,
        c: usize,
        hw: usize,
    ) -> (Tensor<T>, Vec<T>) {
        let xd = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in r {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        (Tensor::new(self.value(x).shape(), out).expect("same shape"), xhat)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        let v = self.value(x).map(|a| if a > T::zero() { a } else { a * s });
        self.push(v, Op::LeakyRelu(x, s), "leaky_relu")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| {
            if a >= T::zero() {
                T::one() / (T::one() + (-a).exp())
            } else {
                let e = a.exp();
                e / (T::one() + e)
            }
        });
        self.push(v, Op::Sigmoid(x), "sigmoid")
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
        self.check_affine("layer_norm", x, gamma, beta, d)?;
        let xd = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / d.max(1);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(T::of(is));
            for j in 0..d {
                let h = T::of((row[j].f64() - mean) * is);
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bt[j];
            }
        }
        let v = Tensor::new(&s, out)?;
        self.push(v, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, "layer_norm")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let v = Tensor::new(&s, out)?;
        self.push(v, Op::Softmax(x), "softmax")
    }

    /// Records a caller-computed value produced by `op` from `inputs`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let name = op.name();
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, name)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::invalid("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        self.backward_with(loss, Tensor::full(lv.shape(), T::one()))
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(out) {
            return Err(shape_err("backward", self.shape(out), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::Abs(a) => {
                let ga = g.zip_map(self.value(*a), |x, v| {
                    if v > T::zero() {
                        x
                    } else if v < T::zero() {
                        -x
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let two = T::of(2.0);
                let ga = g.zip_map(self.value(*a), |x, v| two * v * x)?;
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let half = T::of(0.5);
                let ga = g.zip_map(out, |x, y| if y > T::zero() { half * x / y } else { T::zero() })?;
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1);
                let s = g.data()[0] / T::of(n as f64);
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::MeanAxis(a, axis) => {
                let sa = self.shape(*a);
                let (outer, n, inner) = split_axis(sa, *axis);
                let inv = T::one() / T::of(n as f64);
                let mut ga = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        ga.extend(g.data()[o * inner..(o + 1) * inner].iter().map(|&x| x * inv));
                    }
                }
                self.accumulate(grads, *a, Tensor::new(sa, ga)?);
            }
            Op::Expand(a, axis) => {
                let sa = self.shape(*a);
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let mut ga = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let src = &g.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (acc, &x) in ga[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *acc += x;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(sa, ga)?);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.clone().reshape(self.shape(*a))?);
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                self.accumulate(grads, *a, g.permute(&inv)?);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let sp = self.shape(*p);
                    let n = sp[*axis];
                    if self.wants(*p) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            gp.extend_from_slice(&g.data()[(o * total + offset) * inner..(o * total + offset + n) * inner]);
                        }
                        self.accumulate(grads, *p, Tensor::new(sp, gp)?);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x);
                let (outer, n, inner) = split_axis(sx, *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    gx[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(sx, gx)?);
            }
            Op::RepeatInterleave(a, r) => {
                let sa = self.shape(*a);
                let inner = self.value(*a).len() / sa[0];
                let mut ga = vec![T::zero(); self.value(*a).len()];
                for (i, row) in g.data().chunks(inner.max(1)).enumerate() {
                    let dst = &mut ga[(i / r) * inner..(i / r + 1) * inner];
                    dst.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                }
                self.accumulate(grads, *a, Tensor::new(sa, ga)?);
            }
            Op::MatMul { a, b, trans_b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = out.shape()[2];
                let (ad, bd, gd) = (self.value(*a).data(), self.value(*b).data(), g.data());
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); bt * m * k];
                    for i in 0..bt {
                        // dA = dC · op(B)ᵀ
                        gemm(
                            false,
                            !trans_b,
                            m,
                            n,
                            k,
                            T::one(),
                            &gd[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            T::zero(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(&sa, ga)?);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); bt * k * n];
                    for i in 0..bt {
                        let (ai, gi) = (&ad[i * m * k..(i + 1) * m * k], &gd[i * m * n..(i + 1) * m * n]);
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B stored N×K: dB = dCᵀ · A
                            gemm(true, false, n, m, k, T::one(), gi, ai, T::zero(), dst);
                        } else {
                            gemm(true, false, k, m, n, T::one(), ai, gi, T::zero(), dst);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&sb, gb)?);
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w).to_vec();
                let (dout, din) = (sw[0], sw[1]);
                let rows = g.len() / dout.max(1);
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); rows * din];
                    gemm(false, false, rows, dout, din, T::one(), g.data(), self.value(*w).data(), T::zero(), &mut gx);
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); dout * din];
                    gemm(true, false, dout, rows, din, T::one(), g.data(), self.value(*x).data(), T::zero(), &mut gw);
                    self.accumulate(grads, *w, Tensor::new(&sw, gw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); dout];
                        for row in g.data().chunks(dout) {
                            gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                        self.accumulate(grads, *b, Tensor::new(&[dout], gb)?);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let co = self.shape(*w)[0];
                let ohw = geom.oh * geom.ow;
                let gm = conv::nchw_to_cm(g.data(), geom.n, co, ohw);
                if self.wants(*w) {
                    let cols = conv::im2col(self.value(*x).data(), geom);
                    let mut gw = vec![T::zero(); co * geom.col_rows()];
                    gemm(false, true, co, geom.col_cols(), geom.col_rows(), T::one(), &gm, &cols, T::zero(), &mut gw);
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w), gw)?);
                }
                if self.wants(*x) {
                    let mut gcols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
                    gemm(true, false, geom.col_rows(), co, geom.col_cols(), T::one(), self.value(*w).data(), &gm, T::zero(), &mut gcols);
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    conv::col2im(&gcols, geom, &mut gx);
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = conv::channel_sums(g.data(), geom.n, co, ohw);
                        self.accumulate(grads, *b, Tensor::new(&[co], gb)?);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let sx = self.shape(*x).to_vec();
                let (n, ci, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                let co = geom.c;
                let gcols = conv::im2col(g.data(), geom);
                if self.wants(*x) {
                    let mut gxm = vec![T::zero(); ci * n * hw];
                    gemm(false, false, ci, geom.col_rows(), geom.col_cols(), T::one(), self.value(*w).data(), &gcols, T::zero(), &mut gxm);
                    let gx = conv::cm_to_nchw(&gxm, n, ci, hw, None);
                    self.accumulate(grads, *x, Tensor::new(&sx, gx)?);
                }
                if self.wants(*w) {
                    let xm = conv::nchw_to_cm(self.value(*x).data(), n, ci, hw);
                    let mut gw = vec![T::zero(); ci * geom.col_rows()];
                    gemm(false, true, ci, geom.col_cols(), geom.col_rows(), T::one(), &xm, &gcols, T::zero(), &mut gw);
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w), gw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let gb = conv::channel_sums(g.data(), n, co, geom.h * geom.w);
                        self.accumulate(grads, *b, Tensor::new(&[co], gb)?);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let s = self.shape(*x).to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            sum_g[ch] += gd[i];
                            sum_gx[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let m = T::of((n * hw) as f64);
                    let mut gx = vec![T::zero(); gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch];
                            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                                gx[i] = if *train {
                                    k * (gd[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(&s, gx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], sum_gx)?);
                self.accumulate(grads, *beta, Tensor::new(&[c], sum_g)?);
            }
            Op::LeakyRelu(x, s) => {
                let s = *s;
                let gx = g.zip_map(self.value(*x), |gv, v| if v > T::zero() { gv } else { gv * s })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(out, |gv, y| gv * y * (T::one() - y))?;
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *self.shape(*x).last().unwrap();
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut ggam = vec![T::zero(); d];
                let mut gbet = vec![T::zero(); d];
                let mut gx = vec![T::zero(); gd.len()];
                let dn = T::of(d as f64);
                for (r, &is) in inv_std.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for (j, i) in row.clone().enumerate() {
                        ggam[j] += gd[i] * xhat[i];
                        gbet[j] += gd[i];
                        let dh = gd[i] * gam[j];
                        s1 += dh;
                        s2 += dh * xhat[i];
                    }
                    for (j, i) in row.enumerate() {
                        let dh = gd[i] * gam[j];
                        gx[i] = is * (dh - s1 / dn - xhat[i] * s2 / dn);
                    }
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(&[d], ggam)?);
                self.accumulate(grads, *beta, Tensor::new(&[d], gbet)?);
            }
            Op::Softmax(x) => {
                let d = *out.shape().last().unwrap();
                let mut gx = vec![T::zero(); out.len()];
                for ((gr, yr), dst) in g.data().chunks(d).zip(out.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape(), gx)?);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&vals, out, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.shape() != self.shape(*v) {
                            return Err(shape_err("custom backward", self.shape(*v), gi.shape()));
                        }
                        self.accumulate(grads, *v, gi);
                    }
                }
            }
        }
        Ok(())
    }
}

fn op_inputs<T: Float>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Abs(a)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::MeanAxis(a, _)
        | Op::Expand(a, _)
        | Op::Reshape(a)
        | Op::Permute(a, _)
        | Op::RepeatInterleave(a, _)
        | Op::LeakyRelu(a, _)
        | Op::Sigmoid(a)
        | Op::Softmax(a) => vec![*a],
        Op::Slice { x, .. } => vec![*x],
        Op::Concat(parts, _) => parts.clone(),
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b.iter().copied());
            v
        }
        Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Custom { inputs, .. } => inputs.clone(),
    }
}
