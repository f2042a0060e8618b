//! The recording tape. Every primitive appends one node; nodes are therefore in
//! topological order and backward is a single reverse sweep.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{self, axis_split, Conv1dGeom, Conv2dGeom};
use crate::params::{GradMap, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_map, broadcast_shape, strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    Shift(usize),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice { x: usize, axis: usize, start: usize },
    Gather { table: usize, indices: Vec<usize> },
    Softmax(usize),
    LayerNorm { x: usize, inv_std: Vec<T> },
    Reduce { x: usize, axis: Option<usize>, factor: T },
    Variance { x: usize, axis: usize },
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Pow(usize, T),
    Dropout(usize, Vec<T>),
    Conv1d { x: usize, w: usize, geom: Conv1dGeom },
    Conv2d { x: usize, w: usize, geom: Conv2dGeom },
    AvgPool1d { x: usize, kernel: usize, stride: usize },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode recording of one forward computation.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    /// Inference-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: BTreeMap::new(), training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    /// Training-mode tape with a seeded dropout stream.
    pub fn training(seed: u64) -> Self {
        Tape { nodes: Vec::new(), params: BTreeMap::new(), training: true, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::Numeric { op: name.to_string() });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient in [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Detached copy of `v`: same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Bring a stored parameter onto the tape (cached: one node per parameter).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node { value: p.value.clone(), op: Op::Param(id), needs_grad: p.requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| TensorError::shape(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&out_shape, &sa);
            let mb = broadcast_map(&out_shape, &sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Ok((Tensor::raw(out_shape, data), self.ng(a) || self.ng(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a.0, b.0), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a.0, b.0), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a.0, b.0), ng, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(t, Op::Div(a.0, b.0), ng, "div")
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let t = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a.0, k), ng, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Result<Var> {
        let t = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(t, Op::Shift(a.0), ng, "add_scalar")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    fn unary(&mut self, a: Var, op: Op<T>, name: &str, f: impl Fn(T) -> T) -> Result<Var> {
        let t = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(t, op, ng, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a.0), "relu", |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu(a.0), "gelu", gelu_fwd)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a.0), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a.0), "tanh", |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a.0), "exp", |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a.0), "log", |x| x.ln())
    }

    /// Elementwise `x^p`.
    pub fn powf(&mut self, a: Var, p: T) -> Result<Var> {
        self.unary(a, Op::Pow(a.0, p), "power", |x| x.powf(p))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Inverted dropout. Identity outside training mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(a);
        }
        let n = self.value(a).numel();
        let mask: Vec<T> = if rate >= 1.0 {
            vec![T::zero(); n]
        } else {
            let keep = T::lit(1.0 / (1.0 - rate));
            (0..n).map(|_| if self.rng.random::<f64>() < rate { T::zero() } else { keep }).collect()
        };
        self.dropout_with_mask(a, mask)
    }

    /// Multiply by an explicit (already scaled) keep mask.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(TensorError::shape("dropout_mask", "mask length differs from input"));
        }
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::raw(src.shape().to_vec(), data);
        let ng = self.ng(a);
        self.push(t, Op::Dropout(a.0, mask), ng, "dropout_mask")
    }

    // ---------------------------------------------------------------- linear algebra

    /// `[..., m, k] · [k, n]` or batched `[..., m, k] · [..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = matmul_dims(&sa, &sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        let b_batched = sb.len() > 2;
        for bi in 0..batch {
            let bo = if b_batched { bi * k * n } else { 0 };
            kernels::gemm_nn(&da[bi * m * k..][..m * k], &db[bo..][..k * n], &mut out[bi * m * n..][..m * n], m, k, n);
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::raw(shape, out), Op::MatMul(a.0, b.0), ng, "matmul")
    }

    /// General axis permutation.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&ax| ax >= s.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(TensorError::shape("permute", format!("invalid axes {axes:?} for {s:?}")));
        }
        let t = permute_tensor(self.value(a), axes);
        let ng = self.ng(a);
        self.push(t, Op::Permute(a.0, axes.to_vec()), ng, "permute")
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(TensorError::shape("transpose", "needs at least 2 dims"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| TensorError::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a.0), ng, "reshape")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::shape("concat", "axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(TensorError::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let d = self.value(p).data();
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&d[o * len..(o + 1) * len]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::raw(shape, data), Op::Concat(parts.iter().map(|p| p.0).collect(), axis), ng, "concat")
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(TensorError::shape("slice", format!("[{start}, {end}) on axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let ng = self.ng(a);
        self.push(Tensor::raw(shape, data), Op::Slice { x: a.0, axis, start }, ng, "slice")
    }

    /// Row lookup in a `[rows, d]` table (embedding projection).
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || indices.is_empty() || indices.iter().any(|&i| i >= s[0]) {
            return Err(TensorError::shape("embedding_project", format!("indices out of range for {s:?}")));
        }
        let d = s[1];
        let src = self.value(table).data();
        let data: Vec<T> = indices.iter().flat_map(|&i| src[i * d..(i + 1) * d].iter().copied()).collect();
        let ng = self.ng(table);
        self.push(
            Tensor::raw(vec![indices.len(), d], data),
            Op::Gather { table: table.0, indices: indices.to_vec() },
            ng,
            "embedding_project",
        )
    }

    // ---------------------------------------------------------------- normalisation & reductions

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let n = *src.shape().last().unwrap();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let t = Tensor::raw(src.shape().to_vec(), data);
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a.0), ng, "softmax")
    }

    /// Layer normalisation over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let n = *src.shape().last().unwrap();
        let nn = T::from_usize_lossy(n);
        let mut data = src.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / n);
        for row in data.chunks_mut(n) {
            let mean = row.iter().copied().fold(T::zero(), |s, x| s + x) / nn;
            let var = row.iter().fold(T::zero(), |s, &x| s + (x - mean) * (x - mean)) / nn;
            let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let t = Tensor::raw(src.shape().to_vec(), data);
        let ng = self.ng(a);
        self.push(t, Op::LayerNorm { x: a.0, inv_std }, ng, "layer_norm")
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool, name: &'static str) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = self.value(a).data();
        let (t, factor) = match axis {
            None => {
                let f = if mean { T::one() / T::from_usize_lossy(d.len()) } else { T::one() };
                let total = d.iter().copied().fold(T::zero(), |acc, x| acc + x);
                (Tensor::scalar(total * f), f)
            }
            Some(ax) => {
                if ax >= s.len() {
                    return Err(TensorError::shape(name, "axis out of range"));
                }
                let (outer, n, inner) = axis_split(&s, ax);
                let f = if mean { T::one() / T::from_usize_lossy(n) } else { T::one() };
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let row = &d[(o * n + j) * inner..][..inner];
                        for (dst, &x) in out[o * inner..][..inner].iter_mut().zip(row) {
                            *dst += x;
                        }
                    }
                }
                out.iter_mut().for_each(|x| *x *= f);
                let mut shape: Vec<usize> = s.iter().enumerate().filter(|&(i, _)| i != ax).map(|(_, &v)| v).collect();
                if shape.is_empty() {
                    shape.push(1);
                }
                (Tensor::raw(shape, out), f)
            }
        };
        let ng = self.ng(a);
        self.push(t, Op::Reduce { x: a.0, axis, factor }, ng, name)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, None, false, "sum")
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Some(axis), false, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, None, true, "mean")
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Some(axis), true, "mean")
    }

    /// Population variance along `axis` (the axis is removed).
    pub fn variance(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::shape("variance", "axis out of range"));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let nn = T::from_usize_lossy(n);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mean = (0..n).map(|j| d[(o * n + j) * inner + i]).fold(T::zero(), |s, x| s + x) / nn;
                out[o * inner + i] = (0..n)
                    .map(|j| d[(o * n + j) * inner + i] - mean)
                    .fold(T::zero(), |s, x| s + x * x)
                    / nn;
            }
        }
        let mut shape: Vec<usize> = s.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &v)| v).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(a);
        self.push(Tensor::raw(shape, out), Op::Variance { x: a.0, axis }, ng, "variance")
    }

    // ---------------------------------------------------------------- convolution & pooling

    /// 1-D convolution: input `[B, C_in, L]`, weight `[C_out, C_in, K]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        pad_left: usize,
        pad_right: usize,
        dilation: usize,
        stride: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || dilation == 0 || stride == 0 {
            return Err(TensorError::shape("conv1d", format!("input {sx:?}, weight {sw:?}")));
        }
        let span = dilation * (sw[2] - 1) + 1;
        let padded = sx[2] + pad_left + pad_right;
        if padded < span {
            return Err(TensorError::shape("conv1d", "kernel span exceeds padded input"));
        }
        let geom = Conv1dGeom {
            batch: sx[0],
            c_in: sx[1],
            c_out: sw[0],
            len_in: sx[2],
            len_out: (padded - span) / stride + 1,
            kernel: sw[2],
            pad_left,
            dilation,
            stride,
        };
        let out = kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let ng = self.ng(x) || self.ng(w);
        self.push(
            Tensor::raw(vec![geom.batch, geom.c_out, geom.len_out], out),
            Op::Conv1d { x: x.0, w: w.0, geom },
            ng,
            "conv1d",
        )
    }

    /// Same-padded 1-D convolution (odd kernels).
    pub fn conv1d_same(&mut self, x: Var, w: Var) -> Result<Var> {
        let k = self.shape(w).get(2).copied().unwrap_or(1);
        let total = k.saturating_sub(1);
        self.conv1d(x, w, total / 2, total - total / 2, 1, 1)
    }

    /// Same-padded 2-D convolution: input `[B, C_in, H, W]`, weight `[C_out, C_in, k, k]`, k ∈ {1, 3, 5}.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::shape("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        if sw[2] != sw[3] || ![1, 3, 5].contains(&sw[2]) {
            return Err(TensorError::shape("conv2d", format!("unsupported kernel {}x{}", sw[2], sw[3])));
        }
        let geom = Conv2dGeom { batch: sx[0], c_in: sx[1], c_out: sw[0], height: sx[2], width: sx[3], kh: sw[2], kw: sw[3] };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let ng = self.ng(x) || self.ng(w);
        self.push(
            Tensor::raw(vec![geom.batch, geom.c_out, geom.height, geom.width], out),
            Op::Conv2d { x: x.0, w: w.0, geom },
            ng,
            "conv2d",
        )
    }

    /// Average pooling over the last axis of `[B, C, L]`, no padding.
    pub fn avg_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || kernel == 0 || stride == 0 || kernel > s[2] {
            return Err(TensorError::shape("avg_pool1d", format!("kernel {kernel} on {s:?}")));
        }
        let len_out = (s[2] - kernel) / stride + 1;
        let d = self.value(x).data();
        let k = T::from_usize_lossy(kernel);
        let mut out = Vec::with_capacity(s[0] * s[1] * len_out);
        for row in d.chunks(s[2]) {
            for t in 0..len_out {
                let acc = row[t * stride..t * stride + kernel].iter().copied().fold(T::zero(), |a, v| a + v);
                out.push(acc / k);
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::raw(vec![s[0], s[1], len_out], out), Op::AvgPool1d { x: x.0, kernel, stride }, ng, "avg_pool1d")
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a one-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = BTreeMap::new();
        let mut params = Vec::new();
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    leaves.insert(id, Tensor::raw(node.value.shape().to_vec(), g));
                }
                Op::Param(pid) => {
                    if params.len() <= pid.index() {
                        params.resize(pid.index() + 1, None);
                    }
                    params[pid.index()] = Some(Tensor::raw(node.value.shape().to_vec(), g));
                }
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients { params: GradMap::from_parts(params), leaves })
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], id: usize, f: impl FnOnce(&mut [T])) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![T::zero(); self.nodes[id].value.numel()]);
        f(slot);
    }

    /// Accumulate `g·coef` reduced back onto the (possibly broadcast) shape of `id`.
    fn accum_broadcast(&self, grads: &mut [Option<Vec<T>>], id: usize, out_shape: &[usize], g: &[T], coef: impl Fn(usize) -> T) {
        let shape = self.nodes[id].value.shape().to_vec();
        self.accum(grads, id, |slot| {
            if shape == out_shape {
                for (i, (s, &gv)) in slot.iter_mut().zip(g).enumerate() {
                    *s += gv * coef(i);
                }
            } else {
                for (i, &j) in broadcast_map(out_shape, &shape).iter().enumerate() {
                    slot[j] += g[i] * coef(i);
                }
            }
        });
    }

    fn bmap(&self, id: usize, out_shape: &[usize]) -> Vec<usize> {
        broadcast_map(out_shape, self.nodes[id].value.shape())
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let oshape = out.shape();
        let val = |id: usize| self.nodes[id].value.data();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                self.accum_broadcast(grads, *a, oshape, g, |_| T::one());
                self.accum_broadcast(grads, *b, oshape, g, |_| T::one());
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(grads, *a, oshape, g, |_| T::one());
                self.accum_broadcast(grads, *b, oshape, g, |_| -T::one());
            }
            Op::Mul(a, b) => {
                let (ma, mb) = (self.bmap(*a, oshape), self.bmap(*b, oshape));
                let (da, db) = (val(*a), val(*b));
                self.accum_broadcast(grads, *a, oshape, g, |i| db[mb[i]]);
                self.accum_broadcast(grads, *b, oshape, g, |i| da[ma[i]]);
            }
            Op::Div(a, b) => {
                let (ma, mb) = (self.bmap(*a, oshape), self.bmap(*b, oshape));
                let (da, db) = (val(*a), val(*b));
                self.accum_broadcast(grads, *a, oshape, g, |i| T::one() / db[mb[i]]);
                self.accum_broadcast(grads, *b, oshape, g, |i| -da[ma[i]] / (db[mb[i]] * db[mb[i]]));
            }
            Op::Scale(a, k) => self.accum(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, &gv)| *s += gv * *k)),
            Op::Shift(a) => self.accum(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, &gv)| *s += gv)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[*a].value.shape(), self.nodes[*b].value.shape());
                let (batch, m, k, n) = matmul_dims(sa, sb).expect("validated in forward");
                let b_batched = sb.len() > 2;
                let (da, db) = (val(*a), val(*b));
                self.accum(grads, *a, |s| {
                    for bi in 0..batch {
                        let bo = if b_batched { bi * k * n } else { 0 };
                        kernels::gemm_nt(&g[bi * m * n..][..m * n], &db[bo..][..k * n], &mut s[bi * m * k..][..m * k], m, n, k);
                    }
                });
                self.accum(grads, *b, |s| {
                    for bi in 0..batch {
                        let bo = if b_batched { bi * k * n } else { 0 };
                        kernels::gemm_tn(&da[bi * m * k..][..m * k], &g[bi * m * n..][..m * n], &mut s[bo..][..k * n], m, k, n);
                    }
                });
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let back = permute_tensor(&Tensor::raw(oshape.to_vec(), g.to_vec()), &inv);
                self.accum(grads, *a, |s| s.iter_mut().zip(back.data()).for_each(|(s, &v)| *s += v));
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, &v)| *s += v));
            }
            Op::Dropout(a, mask) => {
                self.accum(grads, *a, |s| s.iter_mut().zip(g).zip(mask).for_each(|((s, &v), &m)| *s += v * m));
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_split(oshape, *axis);
                let total = oshape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.shape()[*axis] * inner;
                    self.accum(grads, p, |s| {
                        for o in 0..outer {
                            for (d, &v) in s[o * len..(o + 1) * len].iter_mut().zip(&g[o * total + offset..][..len]) {
                                *d += v;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let (outer, n, inner) = axis_split(&xs, *axis);
                let m = oshape[*axis];
                self.accum(grads, *x, |s| {
                    for o in 0..outer {
                        let dst = &mut s[(o * n + start) * inner..][..m * inner];
                        for (d, &v) in dst.iter_mut().zip(&g[o * m * inner..][..m * inner]) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Gather { table, indices } => {
                let d = oshape[1];
                self.accum(grads, *table, |s| {
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..d {
                            s[i * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let n = *oshape.last().unwrap();
                let y = out.data();
                self.accum(grads, *a, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot = grow.iter().zip(yrow).fold(T::zero(), |acc, (&gv, &yv)| acc + gv * yv);
                        for ((sv, &gv), &yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *sv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let n = *oshape.last().unwrap();
                let nn = T::from_usize_lossy(n);
                let y = out.data();
                self.accum(grads, *x, |s| {
                    for (((srow, grow), yrow), &is) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).zip(inv_std) {
                        let mg = grow.iter().copied().fold(T::zero(), |a, v| a + v) / nn;
                        let mgy = grow.iter().zip(yrow).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv) / nn;
                        for ((sv, &gv), &yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *sv += is * (gv - mg - yv * mgy);
                        }
                    }
                });
            }
            Op::Reduce { x, axis, factor } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                self.accum(grads, *x, |s| match axis {
                    None => s.iter_mut().for_each(|v| *v += g[0] * *factor),
                    Some(ax) => {
                        let (outer, n, inner) = axis_split(&xs, *ax);
                        for o in 0..outer {
                            for j in 0..n {
                                for i in 0..inner {
                                    s[(o * n + j) * inner + i] += g[o * inner + i] * *factor;
                                }
                            }
                        }
                    }
                });
            }
            Op::Variance { x, axis } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let (outer, n, inner) = axis_split(&xs, *axis);
                let d = val(*x);
                let nn = T::from_usize_lossy(n);
                let two = T::lit(2.0);
                self.accum(grads, *x, |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let mean = (0..n).map(|j| d[(o * n + j) * inner + i]).fold(T::zero(), |a, v| a + v) / nn;
                            let gv = g[o * inner + i];
                            for j in 0..n {
                                let idx = (o * n + j) * inner + i;
                                s[idx] += gv * two * (d[idx] - mean) / nn;
                            }
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                self.accum(grads, *a, |s| {
                    for ((sv, &gv), &xv) in s.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *sv += gv;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a);
                self.accum(grads, *a, |s| s.iter_mut().zip(g).zip(x).for_each(|((sv, &gv), &xv)| *sv += gv * gelu_grad(xv)));
            }
            Op::Sigmoid(a) | Op::Tanh(a) | Op::Exp(a) => {
                let y = out.data();
                let dy: fn(T) -> T = match op {
                    Op::Sigmoid(_) => |y| y * (T::one() - y),
                    Op::Tanh(_) => |y| T::one() - y * y,
                    _ => |y| y,
                };
                self.accum(grads, *a, |s| s.iter_mut().zip(g).zip(y).for_each(|((sv, &gv), &yv)| *sv += gv * dy(yv)));
            }
            Op::Log(a) => {
                let x = val(*a);
                self.accum(grads, *a, |s| s.iter_mut().zip(g).zip(x).for_each(|((sv, &gv), &xv)| *sv += gv / xv));
            }
            Op::Pow(a, p) => {
                let x = val(*a);
                let p = *p;
                self.accum(grads, *a, |s| {
                    s.iter_mut().zip(g).zip(x).for_each(|((sv, &gv), &xv)| *sv += gv * p * xv.powf(p - T::one()))
                });
            }
            Op::Conv1d { x, w, geom } => {
                let (dx, dw) = (val(*x), val(*w));
                let (nx, nw) = (self.nodes[*x].needs_grad, self.nodes[*w].needs_grad);
                let mut gx = nx.then(|| vec![T::zero(); dx.len()]);
                let mut gw = nw.then(|| vec![T::zero(); dw.len()]);
                kernels::conv1d_backward(dx, dw, g, geom, gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(gx) = gx {
                    self.accum(grads, *x, |s| s.iter_mut().zip(&gx).for_each(|(s, &v)| *s += v));
                }
                if let Some(gw) = gw {
                    self.accum(grads, *w, |s| s.iter_mut().zip(&gw).for_each(|(s, &v)| *s += v));
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = (val(*x), val(*w));
                let (nx, nw) = (self.nodes[*x].needs_grad, self.nodes[*w].needs_grad);
                let mut gx = nx.then(|| vec![T::zero(); dx.len()]);
                let mut gw = nw.then(|| vec![T::zero(); dw.len()]);
                kernels::conv2d_backward(dx, dw, g, geom, gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(gx) = gx {
                    self.accum(grads, *x, |s| s.iter_mut().zip(&gx).for_each(|(s, &v)| *s += v));
                }
                if let Some(gw) = gw {
                    self.accum(grads, *w, |s| s.iter_mut().zip(&gw).for_each(|(s, &v)| *s += v));
                }
            }
            Op::AvgPool1d { x, kernel, stride } => {
                let len_in = self.nodes[*x].value.shape()[2];
                let len_out = oshape[2];
                let k = T::from_usize_lossy(*kernel);
                self.accum(grads, *x, |s| {
                    for (srow, grow) in s.chunks_mut(len_in).zip(g.chunks(len_out)) {
                        for (t, &gv) in grow.iter().enumerate() {
                            for v in &mut srow[t * stride..t * stride + kernel] {
                                *v += gv / k;
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: GradMap<T>,
    leaves: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn params(&self) -> &GradMap<T> {
        &self.params
    }

    pub fn into_params(self) -> GradMap<T> {
        self.params
    }

    /// Gradient with respect to a [`Tape::leaf`]; `None` if the leaf never reached the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(TensorError::shape("matmul", format!("{sa:?} x {sb:?}")));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    let batch: usize = sa[..sa.len() - 2].iter().product();
    let ok = k == k2 && (sb.len() == 2 || sb[..sb.len() - 2] == sa[..sa.len() - 2]);
    if !ok {
        return Err(TensorError::shape("matmul", format!("{sa:?} x {sb:?}")));
    }
    Ok((batch, m, k, n))
}

fn permute_tensor<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let s = t.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let in_strides = strides(s);
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.numel();
    let d = t.data();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; axes.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(d[off]);
        for ax in (0..axes.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::raw(out_shape, out)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let u = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let u = c * (x + T::lit(0.044715) * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::lit(3.0 * 0.044715) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[3, 4]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        assert!(tape.value(c).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[2, 4]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[3]));
        let s = tape.softmax(a).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv1d_same_padding_length() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 96]));
        let w = tape.constant(Tensor::ones(&[2, 1, 3]));
        let y = tape.conv1d_same(x, w).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 96]);
    }

    #[test]
    fn log_of_zero_is_numeric_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(TensorError::Numeric { .. })));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::<f64>::new();
        let w = store.register("w", t(&[2, 2], &[0.3, -1.0, 2.0, 5.0]));
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let l = tape.sum(wv).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.params().get(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn disconnected_param_gets_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.register("w", Tensor::ones(&[3]));
        let u = store.register("u", Tensor::ones(&[3]));
        let mut tape = Tape::new();
        let _wv = tape.param(&store, w);
        let uv = tape.param(&store, u);
        let l = tape.sum(uv).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.params().get(w).is_none());
        assert_eq!(g.params().get_or_zeros(w, &[3]).data(), &[0.0; 3]);
    }

    #[test]
    fn dropout_edge_rates() {
        let mut tape = Tape::<f64>::training(7);
        let x = tape.leaf(Tensor::ones(&[10]));
        let same = tape.dropout(x, 0.0).unwrap();
        assert_eq!(same, x);
        let zero = tape.dropout(x, 1.0).unwrap();
        assert!(tape.value(zero).data().iter().all(|&v| v == 0.0));
        let l = tape.sum(zero).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        assert_eq!(tape.value(p).at(&[1, 1, 2]), tape.value(x).at(&[1, 2, 1]));
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
    }
}
