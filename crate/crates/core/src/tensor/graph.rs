use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Restricted broadcasting for binary element-wise ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bcast {
    /// Both operands have the same shape.
    Same,
    /// Right operand is `[C]` and is repeated along axis 1 of the left operand.
    Channel,
    /// Right operand holds a single value.
    Scalar,
}

/// A primitive together with its attributes, for [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add(Bcast),
    Mul(Bcast),
    ScaleShift {
        scale: f64,
        shift: f64,
    },
    Relu,
    Conv2d3x3,
    MeanAxis(Vec<usize>),
    VarAxis(Vec<usize>),
    /// `(x - mean_c) / sqrt(var_c + eps)` per channel (axis 1).
    ChannelNormalize {
        eps: f64,
    },
    SoftmaxCe(Vec<usize>),
    Mse,
    L2Normalize,
    CosineSim,
    NegEntropy,
    Rotate90k(usize),
    Concat(usize),
    Reshape(Vec<usize>),
    SelectRows(Vec<usize>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add(_) => "add",
            OpKind::Mul(_) => "mul",
            OpKind::ScaleShift { .. } => "scale_shift",
            OpKind::Relu => "relu",
            OpKind::Conv2d3x3 => "conv2d_3x3",
            OpKind::MeanAxis(_) => "mean_axis",
            OpKind::VarAxis(_) => "var_axis",
            OpKind::ChannelNormalize { .. } => "channel_normalize",
            OpKind::SoftmaxCe(_) => "softmax_ce",
            OpKind::Mse => "mse",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::CosineSim => "cosine_sim",
            OpKind::NegEntropy => "neg_entropy",
            OpKind::Rotate90k(_) => "rotate90k",
            OpKind::Concat(_) => "concat",
            OpKind::Reshape(_) => "reshape",
            OpKind::SelectRows(_) => "select_rows",
        }
    }
}

const NORM_EPS: f64 = 1e-12;

// Saved state needed by backward, per node.
enum Saved {
    None,
    Probs(Vec<f64>),
    Norms(Vec<f64>),
    CosParts { na: Vec<f64>, nb: Vec<f64>, cos: Vec<f64> },
    Normalized { xhat: Vec<f64>, inv_std: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Option<OpKind>,
    inputs: Vec<Var>,
    saved: Saved,
    requires_grad: bool,
    leaf: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is a topological order, so
/// backward is a single reverse sweep. A graph is a single-threaded value.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

struct Reduce {
    outer: usize,
    mid: usize,
    inner: usize,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let s: Vec<usize> = shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
    if s.is_empty() {
        vec![1]
    } else {
        s
    }
}

// Maps every input element to its output slot for an axis reduction.
fn reduction_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let mut idx = vec![0usize; numel];
    let rank = shape.len();
    let mut coord = vec![0usize; rank];
    for slot in idx.iter_mut() {
        let mut o = 0usize;
        for a in 0..rank {
            if !axes.contains(&a) {
                o = o * shape[a] + coord[a];
            }
        }
        *slot = o;
        for a in (0..rank).rev() {
            coord[a] += 1;
            if coord[a] < shape[a] {
                break;
            }
            coord[a] = 0;
        }
    }
    idx
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input or parameter. Only leaves marked `requires_grad`
    /// receive gradients.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad);
        value.set_grad(None);
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            saved: Saved::None,
            requires_grad,
            leaf: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copy of a leaf's value with its gradient attached.
    pub fn leaf_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = node.value.clone();
        t.set_grad(node.grad.clone());
        t
    }

    fn push(&mut self, op: OpKind, inputs: Vec<Var>, value: Tensor, saved: Saved) -> Result<Var> {
        check_finite(op.name(), value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op: Some(op), inputs, saved, requires_grad, leaf: false, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Generic entry point: applies `op` to `inputs`.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape(op.name(), format!("expected {n} inputs, got {}", inputs.len())))
            }
        };
        match &op {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add(b) => {
                arity(2)?;
                self.add_b(inputs[0], inputs[1], *b)
            }
            OpKind::Mul(b) => {
                arity(2)?;
                self.mul_b(inputs[0], inputs[1], *b)
            }
            OpKind::ScaleShift { scale, shift } => {
                arity(1)?;
                self.scale_shift(inputs[0], *scale, *shift)
            }
            OpKind::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            OpKind::Conv2d3x3 => {
                arity(2)?;
                self.conv2d_3x3(inputs[0], inputs[1])
            }
            OpKind::MeanAxis(axes) => {
                arity(1)?;
                self.mean_axis(inputs[0], axes)
            }
            OpKind::VarAxis(axes) => {
                arity(1)?;
                self.var_axis(inputs[0], axes)
            }
            OpKind::ChannelNormalize { eps } => {
                arity(3)?;
                self.channel_normalize(inputs[0], inputs[1], inputs[2], *eps)
            }
            OpKind::SoftmaxCe(labels) => {
                arity(1)?;
                self.softmax_ce(inputs[0], labels)
            }
            OpKind::Mse => {
                arity(2)?;
                self.mse(inputs[0], inputs[1])
            }
            OpKind::L2Normalize => {
                arity(1)?;
                self.l2_normalize(inputs[0])
            }
            OpKind::CosineSim => {
                arity(2)?;
                self.cosine_sim(inputs[0], inputs[1])
            }
            OpKind::NegEntropy => {
                arity(1)?;
                self.neg_entropy(inputs[0])
            }
            OpKind::Rotate90k(k) => {
                arity(1)?;
                self.rotate90k(inputs[0], *k)
            }
            OpKind::Concat(axis) => self.concat(inputs, *axis),
            OpKind::Reshape(shape) => {
                arity(1)?;
                self.reshape(inputs[0], shape)
            }
            OpKind::SelectRows(rows) => {
                arity(1)?;
                self.select_rows(inputs[0], rows)
            }
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(OpKind::MatMul, vec![a, b], Tensor::from_parts(vec![m, n], out), Saved::None)
    }

    fn check_bcast(&self, op: &'static str, a: Var, b: Var, bc: Bcast) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = match bc {
            Bcast::Same => sa == sb,
            Bcast::Channel => sa.len() >= 2 && sb.len() == 1 && sb[0] == sa[1],
            Bcast::Scalar => sb.iter().product::<usize>() == 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{sa:?} with {sb:?} under {bc:?}")))
        }
    }

    // Index of the right operand that pairs with left element `i`.
    fn bcast_index(shape: &[usize], bc: Bcast) -> impl Fn(usize) -> usize {
        let (c, inner) = match bc {
            Bcast::Channel => (shape[1], shape[2..].iter().product::<usize>()),
            _ => (1, 1),
        };
        move |i| match bc {
            Bcast::Same => i,
            Bcast::Channel => (i / inner) % c,
            Bcast::Scalar => 0,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_b(a, b, Bcast::Same)
    }

    pub fn add_b(&mut self, a: Var, b: Var, bc: Bcast) -> Result<Var> {
        self.check_bcast("add", a, b, bc)?;
        let idx = Self::bcast_index(self.shape(a), bc);
        let bv = self.value(b).data();
        let out: Vec<f64> = self.value(a).data().iter().enumerate().map(|(i, &x)| x + bv[idx(i)]).collect();
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Add(bc), vec![a, b], Tensor::from_parts(shape, out), Saved::None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mul_b(a, b, Bcast::Same)
    }

    pub fn mul_b(&mut self, a: Var, b: Var, bc: Bcast) -> Result<Var> {
        self.check_bcast("mul", a, b, bc)?;
        let idx = Self::bcast_index(self.shape(a), bc);
        let bv = self.value(b).data();
        let out: Vec<f64> = self.value(a).data().iter().enumerate().map(|(i, &x)| x * bv[idx(i)]).collect();
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Mul(bc), vec![a, b], Tensor::from_parts(shape, out), Saved::None)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn scale_shift(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| scale * x + shift).collect();
        let shape = self.shape(a).to_vec();
        self.push(OpKind::ScaleShift { scale, shift }, vec![a], Tensor::from_parts(shape, out), Saved::None)
    }

    /// Subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = self.shape(a).to_vec();
        self.push(OpKind::Relu, vec![a], Tensor::from_parts(shape, out), Saved::None)
    }

    /// x: `[n, c_in, h, w]`, weight: `[c_out, c_in, 3, 3]`; stride 1, zero padding 1.
    pub fn conv2d_3x3(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(weight));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::shape("conv2d_3x3", format!("input {sx:?}, weight {sw:?}")));
        }
        let d = ConvDims { n: sx[0], c_in: sx[1], c_out: sw[0], h: sx[2], w: sx[3] };
        let out = kernels::conv3x3(self.value(x).data(), self.value(weight).data(), &d);
        let shape = vec![d.n, d.c_out, d.h, d.w];
        self.push(OpKind::Conv2d3x3, vec![x, weight], Tensor::from_parts(shape, out), Saved::None)
    }

    fn check_axes(&self, op: &'static str, x: Var, axes: &[usize]) -> Result<()> {
        let rank = self.shape(x).len();
        if axes.is_empty() || axes.iter().any(|&a| a >= rank) {
            return Err(Error::shape(op, format!("axes {axes:?} for rank {rank}")));
        }
        let count: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        if count == 0 {
            return Err(Error::shape(op, "reduction over an empty axis"));
        }
        Ok(())
    }

    /// Mean over `axes`; reduced axes are removed (full reduction yields `[1]`).
    pub fn mean_axis(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes("mean_axis", x, axes)?;
        let shape = self.shape(x).to_vec();
        let out_shape = reduced_shape(&shape, axes);
        let idx = reduction_index(&shape, axes);
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, &o) in self.value(x).data().iter().zip(&idx) {
            out[o] += v;
        }
        for o in out.iter_mut() {
            *o /= count as f64;
        }
        self.push(OpKind::MeanAxis(axes.to_vec()), vec![x], Tensor::from_parts(out_shape, out), Saved::None)
    }

    /// Population (1/N) variance over `axes`.
    pub fn var_axis(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes("var_axis", x, axes)?;
        let shape = self.shape(x).to_vec();
        let out_shape = reduced_shape(&shape, axes);
        let idx = reduction_index(&shape, axes);
        let count = axes.iter().map(|&a| shape[a]).product::<usize>() as f64;
        let n_out: usize = out_shape.iter().product();
        let data = self.value(x).data();
        let mut mean = vec![0.0; n_out];
        for (v, &o) in data.iter().zip(&idx) {
            mean[o] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut out = vec![0.0; n_out];
        for (v, &o) in data.iter().zip(&idx) {
            let d = v - mean[o];
            out[o] += d * d;
        }
        out.iter_mut().for_each(|m| *m /= count);
        self.push(OpKind::VarAxis(axes.to_vec()), vec![x], Tensor::from_parts(out_shape, out), Saved::None)
    }

    fn reduce_dims(shape: &[usize]) -> Reduce {
        Reduce { outer: shape[0], mid: shape[1], inner: shape[2..].iter().product() }
    }

    /// Normalizes each channel (axis 1) of `x` by the given mean and variance.
    pub fn channel_normalize(&mut self, x: Var, mean: Var, var: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(mean) != [sx[1]] || self.shape(var) != [sx[1]] {
            return Err(Error::shape(
                "channel_normalize",
                format!("input {sx:?}, mean {:?}, var {:?}", self.shape(mean), self.shape(var)),
            ));
        }
        let r = Self::reduce_dims(&sx);
        let mv = self.value(mean).data();
        let inv_std: Vec<f64> = self.value(var).data().iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        check_finite("channel_normalize", &inv_std)?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for n in 0..r.outer {
            for c in 0..r.mid {
                let base = (n * r.mid + c) * r.inner;
                for i in base..base + r.inner {
                    out[i] = (xd[i] - mv[c]) * inv_std[c];
                }
            }
        }
        let saved = Saved::Normalized { xhat: out.clone(), inv_std };
        self.push(OpKind::ChannelNormalize { eps }, vec![x, mean, var], Tensor::from_parts(sx, out), saved)
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits against integer labels.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("softmax_ce", format!("logits {s:?}, {} labels", labels.len())));
        }
        let (b, k) = (s[0], s[1]);
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::shape("softmax_ce", format!("label out of range for {k} classes")));
        }
        let probs = softmax_rows(self.value(logits).data(), b, k);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &self.value(logits).data()[i * k..(i + 1) * k];
            loss += log_sum_exp(row) - row[l];
        }
        loss /= b as f64;
        self.push(OpKind::SoftmaxCe(labels.to_vec()), vec![logits], Tensor::scalar(loss), Saved::Probs(probs))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) || self.value(a).numel() == 0 {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let n = self.value(a).numel() as f64;
        let loss =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        self.push(OpKind::Mse, vec![a, b], Tensor::scalar(loss), Saved::None)
    }

    /// Row-wise `x / max(|x|, 1e-12)` on a `[batch, dim]` matrix.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("l2_normalize", format!("{s:?}")));
        }
        let d = s[1];
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = vec![0.0; xd.len()];
        for (row, orow) in xd.chunks(d.max(1)).zip(out.chunks_mut(d.max(1))) {
            let norm = kernels::dot(row, row).sqrt().max(NORM_EPS);
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        self.push(OpKind::L2Normalize, vec![x], Tensor::from_parts(s, out), Saved::Norms(norms))
    }

    /// Row-wise cosine similarity of two `[batch, dim]` matrices, giving `[batch]`.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || self.shape(b) != s.as_slice() {
            return Err(Error::shape("cosine_sim", format!("{s:?} vs {:?}", self.shape(b))));
        }
        let d = s[1].max(1);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut na = Vec::with_capacity(s[0]);
        let mut nb = Vec::with_capacity(s[0]);
        let mut cos = Vec::with_capacity(s[0]);
        for (ra, rb) in ad.chunks(d).zip(bd.chunks(d)) {
            let x = kernels::dot(ra, ra).sqrt().max(NORM_EPS);
            let y = kernels::dot(rb, rb).sqrt().max(NORM_EPS);
            cos.push(kernels::dot(ra, rb) / (x * y));
            na.push(x);
            nb.push(y);
        }
        let out = Tensor::from_parts(vec![s[0]], cos.clone());
        self.push(OpKind::CosineSim, vec![a, b], out, Saved::CosParts { na, nb, cos })
    }

    /// Mean over rows of the prediction entropy `-sum p log p` of `[batch, classes]` logits.
    pub fn neg_entropy(&mut self, logits: Var) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape("neg_entropy", format!("{s:?}")));
        }
        let (b, k) = (s[0], s[1]);
        let data = self.value(logits).data();
        let probs = softmax_rows(data, b, k);
        let mut total = 0.0;
        for i in 0..b {
            let row = &data[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            for j in 0..k {
                let p = probs[i * k + j];
                total -= p * (row[j] - lse);
            }
        }
        let h = total / b as f64;
        self.push(OpKind::NegEntropy, vec![logits], Tensor::scalar(h), Saved::Probs(probs))
    }

    /// Counter-clockwise rotation by `k` quarter turns. Accepts `[.., s, s]`
    /// images or `[n, 2]` point sets.
    pub fn rotate90k(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let out = rotate_any(self.value(x).data(), &s, k)?;
        self.push(OpKind::Rotate90k(k % 4), vec![x], Tensor::from_parts(s, out), Saved::None)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(OpKind::Concat(axis), xs.to_vec(), Tensor::from_parts(shape, out), Saved::None)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(
            OpKind::Reshape(shape.to_vec()),
            vec![x],
            Tensor::from_parts(t.shape().to_vec(), t.into_data()),
            Saved::None,
        )
    }

    /// Gathers rows of the leading axis.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x).select_rows(rows)?;
        self.push(OpKind::SelectRows(rows.to_vec()), vec![x], t, Saved::None)
    }

    /// Reverse sweep from a scalar `loss`. Fills gradients of every
    /// `requires_grad` leaf reachable from it; intermediate gradients are
    /// dropped once consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::NotScalar { numel });
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].leaf || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let input_grads = self.node_backward(i, &g)?;
            for (v, ig) in self.nodes[i].inputs.clone().into_iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                let target = &mut self.nodes[v.0];
                if !target.requires_grad {
                    continue;
                }
                match target.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    None => target.grad = Some(ig),
                }
            }
        }
        for node in self.nodes.iter().filter(|n| n.leaf) {
            if let Some(g) = &node.grad {
                check_finite("backward", g)?;
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let node = &self.nodes[i];
        let inp = &node.inputs;
        let val = |k: usize| self.nodes[inp[k].0].value.data();
        let shp = |k: usize| self.nodes[inp[k].0].value.shape();
        let Some(op) = &node.op else { return Ok(Vec::new()) };
        Ok(match op {
            OpKind::MatMul => {
                let (sa, sb) = (shp(0), shp(1));
                let (da, db) = kernels::matmul_backward(
                    val(0),
                    val(1),
                    g,
                    sa[0],
                    sa[1],
                    sb[1],
                    self.wants(inp[0]),
                    self.wants(inp[1]),
                );
                vec![da, db]
            }
            OpKind::Add(bc) => {
                let da = self.wants(inp[0]).then(|| g.to_vec());
                let db = self.wants(inp[1]).then(|| {
                    let idx = Self::bcast_index(shp(0), *bc);
                    let mut db = vec![0.0; val(1).len()];
                    for (j, &gv) in g.iter().enumerate() {
                        db[idx(j)] += gv;
                    }
                    db
                });
                vec![da, db]
            }
            OpKind::Mul(bc) => {
                let idx = Self::bcast_index(shp(0), *bc);
                let (av, bv) = (val(0), val(1));
                let da = self.wants(inp[0]).then(|| g.iter().enumerate().map(|(j, &gv)| gv * bv[idx(j)]).collect());
                let db = self.wants(inp[1]).then(|| {
                    let mut db = vec![0.0; bv.len()];
                    for (j, &gv) in g.iter().enumerate() {
                        db[idx(j)] += gv * av[j];
                    }
                    db
                });
                vec![da, db]
            }
            OpKind::ScaleShift { scale, .. } => vec![Some(g.iter().map(|&v| v * scale).collect())],
            OpKind::Relu => {
                vec![Some(val(0).iter().zip(g).map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 }).collect())]
            }
            OpKind::Conv2d3x3 => {
                let (sx, sw) = (shp(0), shp(1));
                let d = ConvDims { n: sx[0], c_in: sx[1], c_out: sw[0], h: sx[2], w: sx[3] };
                let (dx, dw) = kernels::conv3x3_backward(val(0), val(1), g, &d, self.wants(inp[0]), self.wants(inp[1]));
                vec![dx, dw]
            }
            OpKind::MeanAxis(axes) => {
                let s = shp(0);
                let idx = reduction_index(s, axes);
                let count = axes.iter().map(|&a| s[a]).product::<usize>() as f64;
                vec![Some(idx.iter().map(|&o| g[o] / count).collect())]
            }
            OpKind::VarAxis(axes) => {
                let s = shp(0);
                let idx = reduction_index(s, axes);
                let count = axes.iter().map(|&a| s[a]).product::<usize>() as f64;
                let x = val(0);
                let mut mean = vec![0.0; g.len()];
                for (v, &o) in x.iter().zip(&idx) {
                    mean[o] += v;
                }
                mean.iter_mut().for_each(|m| *m /= count);
                vec![Some(x.iter().zip(&idx).map(|(v, &o)| g[o] * 2.0 * (v - mean[o]) / count).collect())]
            }
            OpKind::ChannelNormalize { .. } => {
                let Saved::Normalized { xhat, inv_std } = &node.saved else { unreachable!() };
                let r = Self::reduce_dims(shp(0));
                let c = r.mid;
                let dx = self.wants(inp[0]).then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for n in 0..r.outer {
                        for (ch, &is) in inv_std.iter().enumerate() {
                            let base = (n * c + ch) * r.inner;
                            for j in base..base + r.inner {
                                dx[j] = g[j] * is;
                            }
                        }
                    }
                    dx
                });
                let (mut dmean, mut dvar) = (vec![0.0; c], vec![0.0; c]);
                for n in 0..r.outer {
                    for ch in 0..c {
                        let base = (n * c + ch) * r.inner;
                        for j in base..base + r.inner {
                            dmean[ch] -= g[j] * inv_std[ch];
                            dvar[ch] += g[j] * xhat[j];
                        }
                    }
                }
                // dy/dvar = -xhat * inv_std^2 / 2
                for ch in 0..c {
                    dvar[ch] *= -0.5 * inv_std[ch] * inv_std[ch];
                }
                vec![dx, self.wants(inp[1]).then_some(dmean), self.wants(inp[2]).then_some(dvar)]
            }
            OpKind::SoftmaxCe(labels) => {
                let Saved::Probs(p) = &node.saved else { unreachable!() };
                let b = labels.len();
                let k = p.len() / b;
                let mut d: Vec<f64> = p.iter().map(|&v| v * g[0] / b as f64).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= g[0] / b as f64;
                }
                vec![Some(d)]
            }
            OpKind::Mse => {
                let n = val(0).len() as f64;
                let diff: Vec<f64> = val(0).iter().zip(val(1)).map(|(a, b)| 2.0 * (a - b) * g[0] / n).collect();
                let db = self.wants(inp[1]).then(|| diff.iter().map(|v| -v).collect());
                vec![self.wants(inp[0]).then_some(diff), db]
            }
            OpKind::L2Normalize => {
                let Saved::Norms(norms) = &node.saved else { unreachable!() };
                let y = node.value.data();
                let d = shp(0)[1].max(1);
                let mut dx = vec![0.0; g.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dxr = &mut dx[r * d..(r + 1) * d];
                    if norm > NORM_EPS {
                        let yg = kernels::dot(yr, gr);
                        for j in 0..d {
                            dxr[j] = (gr[j] - yr[j] * yg) / norm;
                        }
                    } else {
                        for j in 0..d {
                            dxr[j] = gr[j] / norm;
                        }
                    }
                }
                vec![Some(dx)]
            }
            OpKind::CosineSim => {
                let Saved::CosParts { na, nb, cos } = &node.saved else { unreachable!() };
                let (av, bv) = (val(0), val(1));
                let d = shp(0)[1].max(1);
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for r in 0..na.len() {
                    let (ra, rb) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                    let inv = 1.0 / (na[r] * nb[r]);
                    for j in 0..d {
                        da[r * d + j] = g[r] * (rb[j] * inv - cos[r] * ra[j] / (na[r] * na[r]));
                        db[r * d + j] = g[r] * (ra[j] * inv - cos[r] * rb[j] / (nb[r] * nb[r]));
                    }
                }
                vec![self.wants(inp[0]).then_some(da), self.wants(inp[1]).then_some(db)]
            }
            OpKind::NegEntropy => {
                let Saved::Probs(p) = &node.saved else { unreachable!() };
                let s = shp(0);
                let (b, k) = (s[0], s[1]);
                let logits = val(0);
                let mut d = vec![0.0; p.len()];
                for r in 0..b {
                    let row = &logits[r * k..(r + 1) * k];
                    let lse = log_sum_exp(row);
                    let pr = &p[r * k..(r + 1) * k];
                    let h: f64 = -pr.iter().zip(row).map(|(&pj, &z)| pj * (z - lse)).sum::<f64>();
                    for j in 0..k {
                        d[r * k + j] = -pr[j] * ((row[j] - lse) + h) * g[0] / b as f64;
                    }
                }
                vec![Some(d)]
            }
            OpKind::Rotate90k(k) => vec![Some(rotate_any(g, shp(0), (4 - k) % 4)?)],
            OpKind::Concat(axis) => {
                let base = node.value.shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total = base[*axis] * inner;
                let mut offset = 0;
                let mut grads = Vec::with_capacity(inp.len());
                for (k, &v) in inp.iter().enumerate() {
                    let len = shp(k)[*axis] * inner;
                    if self.wants(v) {
                        let mut gi = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gi.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        grads.push(Some(gi));
                    } else {
                        grads.push(None);
                    }
                    offset += len;
                }
                grads
            }
            OpKind::Reshape(_) => vec![Some(g.to_vec())],
            OpKind::SelectRows(rows) => {
                let n_rows = shp(0)[0];
                let stride = val(0).len().checked_div(n_rows).unwrap_or(0);
                let mut dx = vec![0.0; val(0).len()];
                for (k, &r) in rows.iter().enumerate() {
                    kernels::axpy(&mut dx[r * stride..(r + 1) * stride], 1.0, &g[k * stride..(k + 1) * stride]);
                }
                vec![Some(dx)]
            }
        })
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(data: &[f64], b: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * k];
    for r in 0..b {
        let row = &data[r * k..(r + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..k {
            let e = (row[j] - m).exp();
            out[r * k + j] = e;
            z += e;
        }
        out[r * k..(r + 1) * k].iter_mut().for_each(|v| *v /= z);
    }
    out
}

pub(crate) fn rotate_any(data: &[f64], shape: &[usize], k: usize) -> Result<Vec<f64>> {
    match shape {
        [_, 2] => Ok(kernels::rotate_points(data, k)),
        s if s.len() >= 3 => {
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            if h != w {
                return Err(Error::NonSquare { h, w });
            }
            Ok(kernels::rotate_planes(data, h, k))
        }
        s => Err(Error::shape("rotate90k", format!("{s:?}"))),
    }
}
