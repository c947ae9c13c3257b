use super::gemm::{gemm, Layout};
use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The kind of a recorded op, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    Scale,
    AddConst,
    MulConst,
    Relu,
    Gelu,
    Exp,
    Softmax,
    LayerNorm,
    Sum,
    Mean,
    SumAll,
    MaxAll,
    Transpose,
    Reshape,
    Concat,
    Slice,
    Gather,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::AddConst,
        OpKind::MulConst,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Exp,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAll,
        OpKind::MaxAll,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Gather,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::AddConst => "add_const",
            OpKind::MulConst => "mul_const",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Exp => "exp",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAll => "sum_all",
            OpKind::MaxAll => "max_all",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Gather => "gather",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Tensor),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    MaxAll { x: Var, argmax: usize },
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::AddConst(..) => OpKind::AddConst,
            Op::MulConst(..) => OpKind::MulConst,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Exp(..) => OpKind::Exp,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::SumAll(..) => OpKind::SumAll,
            Op::MaxAll { .. } => OpKind::MaxAll,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Gather { .. } => OpKind::Gather,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Record-on-execute gradient tape.
///
/// Single-owner: build one tape per forward pass, then consume it with
/// [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`] for every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Verification hook: scales every gradient emitted by ops of `kind` by
    /// 1.5 so a gradient check can be shown to catch a broken backward rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let err = || Error::shape("matmul", ta.shape(), tb.shape());
        let (m, k) = ta.dims2().map_err(|_| err())?;
        let (br, bc) = tb.dims2().map_err(|_| err())?;
        let (k2, n) = if b_transposed { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(err());
        }
        let mut out = vec![0.0; m * n];
        let lb = if b_transposed {
            Layout::Transposed
        } else {
            Layout::Normal
        };
        gemm(m, k, n, ta.data(), Layout::Normal, tb.data(), lb, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, b_transposed }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.zip(a, b, |x, y| x / y);
        Ok(self.push(value, Op::Div(a, b), &[a, b]))
    }

    /// Adds a bias vector of length `cols` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let tb = self.value(bias);
        let cols = tx.cols();
        if tb.numel() != cols {
            return Err(Error::shape("add_row", tx.shape(), tb.shape()));
        }
        let b = tb.data();
        let mut value = tx.clone();
        for row in value.data_mut().chunks_mut(cols) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// `x + c` for a non-differentiable tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        let value = tx.add(c).map_err(|_| Error::shape("add_const", tx.shape(), c.shape()))?;
        Ok(self.push(value, Op::AddConst(x), &[x]))
    }

    /// `x ⊙ c` for a non-differentiable tensor `c` of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(Error::shape("mul_const", tx.shape(), c.shape()));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        Ok(self.push(value, Op::MulConst(x, c), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| gelu_parts(v).0);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x), &[x])
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, len, inner) = axis_split(tx.shape(), axis)?;
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[idx(j)]);
                }
                if !max.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "softmax input slice has maximum {max}"
                    )));
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        if out.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax produced NaN".into()));
        }
        let value = Tensor {
            shape: tx.shape().to_vec(),
            data: out,
        };
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalises over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        for p in [gain, bias] {
            let tp = self.value(p);
            if tp.numel() != cols {
                return Err(Error::shape("layer_norm", tx.shape(), tp.shape()));
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = tx.numel() / cols;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor {
            shape: tx.shape().to_vec(),
            data: out,
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    // ---- reductions -----------------------------------------------------

    fn reduce(&self, x: Var, axis: usize, scale_by_len: bool) -> Result<Tensor> {
        let tx = self.value(x);
        let (outer, len, inner) = axis_split(tx.shape(), axis)?;
        let src = tx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if scale_by_len {
            for v in &mut out {
                *v /= len as f64;
            }
        }
        Tensor::new(reduced_shape(tx.shape(), axis), out)
    }

    /// Sum along `axis`; the axis is dropped from the shape.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.reduce(x, axis, false)?;
        Ok(self.push(value, Op::Sum { x, axis }, &[x]))
    }

    /// Mean along `axis`; the axis is dropped from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.reduce(x, axis, true)?;
        Ok(self.push(value, Op::Mean { x, axis }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    /// Largest element; the gradient flows to the first maximiser.
    pub fn max_all(&mut self, x: Var) -> Var {
        let data = self.value(x).data();
        let mut argmax = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[argmax] {
                argmax = i;
            }
        }
        let value = Tensor::scalar(data[argmax]);
        self.push(value, Op::MaxAll { x, argmax }, &[x])
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && axis < s.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis)?;
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, alen, inner) = axis_split(tx.shape(), axis)?;
        if len == 0 || start + len > alen {
            return Err(Error::Contract(format!(
                "slice {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                tx.shape()
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * alen + start) * inner;
            out.extend_from_slice(&tx.data()[from..from + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Row gather: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = tt.dims2()?;
        if ids.is_empty() {
            return Err(Error::Contract("gather with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::UnknownToken { id, size: rows });
            }
            out.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, cols) = tl.dims2()?;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::UnknownToken { id: t, size: cols });
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - log_z).exp();
            }
            loss += log_z - row[t];
        }
        let value = Tensor::scalar(loss / rows as f64);
        if !value.all_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Replays backward rules in reverse recording order. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Tape { mut nodes, fault } = self;
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad || matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = std::mem::replace(&mut nodes[i].op, Op::Leaf);
            let mut contributions = backward_rule(&nodes, &nodes[i].value, &op, g)?;
            if fault == Some(op.kind()) {
                for (_, t) in &mut contributions {
                    for v in t.data_mut() {
                        *v *= 1.5;
                    }
                }
            }
            for (v, t) in contributions {
                if !nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            }
        }
        for (node, g) in nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            } else if g.is_none() {
                *g = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn like(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Gradient contributions of one op to its inputs.
fn backward_rule(nodes: &[Node], out: &Tensor, op: &Op, g: Tensor) -> Result<Vec<(Var, Tensor)>> {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    let gd = g.data();
    let mut res = Vec::with_capacity(2);
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, b_transposed } => {
            let ta = val(*a);
            let tb = val(*b);
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = out.shape()[1];
            if needs(*a) {
                let mut da = vec![0.0; m * k];
                if *b_transposed {
                    // out = A·Bᵀ, B is n×k: dA = G·B
                    gemm(m, n, k, gd, Layout::Normal, tb.data(), Layout::Normal, &mut da, 0.0);
                } else {
                    // B is k×n: dA = G·Bᵀ
                    gemm(m, n, k, gd, Layout::Normal, tb.data(), Layout::Transposed, &mut da, 0.0);
                }
                res.push((*a, like(ta.shape(), da)));
            }
            if needs(*b) {
                let mut db = vec![0.0; k * n];
                if *b_transposed {
                    // dB (n×k) = Gᵀ·A
                    gemm(n, m, k, gd, Layout::Transposed, ta.data(), Layout::Normal, &mut db, 0.0);
                } else {
                    // dB (k×n) = Aᵀ·G
                    gemm(k, m, n, ta.data(), Layout::Transposed, gd, Layout::Normal, &mut db, 0.0);
                }
                res.push((*b, like(tb.shape(), db)));
            }
        }
        Op::Add(a, b) => {
            res.push((*a, g.clone()));
            res.push((*b, g));
        }
        Op::Sub(a, b) => {
            res.push((*b, g.scale(-1.0)));
            res.push((*a, g));
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let da = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
            let db = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
            res.push((*a, like(ta.shape(), da)));
            res.push((*b, like(tb.shape(), db)));
        }
        Op::Div(a, b) => {
            let tb = val(*b);
            let da = gd.iter().zip(tb.data()).map(|(g, y)| g / y).collect();
            let db = gd
                .iter()
                .zip(tb.data())
                .zip(out.data())
                .map(|((g, y), q)| -g * q / y)
                .collect();
            res.push((*a, like(tb.shape(), da)));
            res.push((*b, like(tb.shape(), db)));
        }
        Op::AddRow { x, bias } => {
            let tb = val(*bias);
            let cols = tb.numel();
            let mut db = vec![0.0; cols];
            for row in gd.chunks(cols) {
                for (acc, v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            res.push((*bias, like(tb.shape(), db)));
            res.push((*x, g));
        }
        Op::Scale(x, s) => res.push((*x, g.scale(*s))),
        Op::AddConst(x) => res.push((*x, g)),
        Op::MulConst(x, c) => {
            let dx = gd.iter().zip(c.data()).map(|(g, c)| g * c).collect();
            res.push((*x, like(c.shape(), dx)));
        }
        Op::Relu(x) => {
            let tx = val(*x);
            let dx = gd
                .iter()
                .zip(tx.data())
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect();
            res.push((*x, like(tx.shape(), dx)));
        }
        Op::Gelu(x) => {
            let tx = val(*x);
            let dx = gd
                .iter()
                .zip(tx.data())
                .map(|(g, &v)| g * gelu_parts(v).1)
                .collect();
            res.push((*x, like(tx.shape(), dx)));
        }
        Op::Exp(x) => {
            let dx = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
            res.push((*x, like(out.shape(), dx)));
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(out.shape(), *axis)?;
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        dx[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                    }
                }
            }
            res.push((*x, like(out.shape(), dx)));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gain_t = val(*gain);
            let gv = gain_t.data();
            let cols = gv.len();
            let n = cols as f64;
            let mut dgain = vec![0.0; cols];
            let mut dbias = vec![0.0; cols];
            let mut dx = vec![0.0; gd.len()];
            for (r, &is) in inv_std.iter().enumerate() {
                let grow = &gd[r * cols..(r + 1) * cols];
                let hrow = &xhat[r * cols..(r + 1) * cols];
                let mut sum_dh = 0.0;
                let mut sum_dh_h = 0.0;
                for c in 0..cols {
                    dgain[c] += grow[c] * hrow[c];
                    dbias[c] += grow[c];
                    let dh = grow[c] * gv[c];
                    sum_dh += dh;
                    sum_dh_h += dh * hrow[c];
                }
                for c in 0..cols {
                    let dh = grow[c] * gv[c];
                    dx[r * cols + c] = is / n * (n * dh - sum_dh - hrow[c] * sum_dh_h);
                }
            }
            res.push((*gain, like(gain_t.shape(), dgain)));
            res.push((*bias, like(val(*bias).shape(), dbias)));
            res.push((*x, like(out.shape(), dx)));
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let tx = val(*x);
            let (outer, len, inner) = axis_split(tx.shape(), *axis)?;
            let factor = if matches!(op, Op::Mean { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut dx = vec![0.0; tx.numel()];
            for o in 0..outer {
                for j in 0..len {
                    let base = (o * len + j) * inner;
                    for i in 0..inner {
                        dx[base + i] = gd[o * inner + i] * factor;
                    }
                }
            }
            res.push((*x, like(tx.shape(), dx)));
        }
        Op::SumAll(x) => {
            let tx = val(*x);
            res.push((*x, Tensor::full(tx.shape(), gd[0])));
        }
        Op::MaxAll { x, argmax } => {
            let mut dx = Tensor::zeros(val(*x).shape());
            dx.data_mut()[*argmax] = gd[0];
            res.push((*x, dx));
        }
        Op::Transpose(x) => res.push((*x, g.transpose()?)),
        Op::Reshape(x) => res.push((*x, g.reshaped(val(*x).shape())?)),
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = axis_split(out.shape(), *axis)?;
            let mut parts: Vec<Vec<f64>> = inputs
                .iter()
                .map(|v| Vec::with_capacity(val(*v).numel()))
                .collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (k, v) in inputs.iter().enumerate() {
                    let chunk = val(*v).shape()[*axis] * inner;
                    parts[k].extend_from_slice(&gd[offset..offset + chunk]);
                    offset += chunk;
                }
            }
            for (v, d) in inputs.iter().zip(parts) {
                res.push((*v, like(val(*v).shape(), d)));
            }
        }
        Op::Slice { x, axis, start } => {
            let tx = val(*x);
            let (outer, alen, inner) = axis_split(tx.shape(), *axis)?;
            let len = out.shape()[*axis];
            let mut dx = vec![0.0; tx.numel()];
            for o in 0..outer {
                let from = (o * alen + start) * inner;
                dx[from..from + len * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            res.push((*x, like(tx.shape(), dx)));
        }
        Op::Gather { table, ids } => {
            let tt = val(*table);
            let cols = tt.cols();
            let mut dt = vec![0.0; tt.numel()];
            for (r, &id) in ids.iter().enumerate() {
                for c in 0..cols {
                    dt[id * cols + c] += gd[r * cols + c];
                }
            }
            res.push((*table, like(tt.shape(), dt)));
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let tl = val(*logits);
            let cols = tl.cols();
            let scale = gd[0] / targets.len() as f64;
            let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                dl[r * cols + t] -= scale;
            }
            res.push((*logits, like(tl.shape(), dl)));
        }
    }
    Ok(res)
}
