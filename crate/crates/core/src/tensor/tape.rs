use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::scalar::Scalar;

use super::{ParamStore, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise single-input primitives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary<S> {
    Neg,
    Scale(S),
    Log,
    Exp,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(S),
    Relu6,
    Elu,
    Softplus,
}

impl<S: Scalar> Unary<S> {
    pub fn name(&self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Scale(_) => "scale",
            Unary::Log => "log",
            Unary::Exp => "exp",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Relu6 => "relu6",
            Unary::Elu => "elu",
            Unary::Softplus => "softplus",
        }
    }

    pub fn apply(&self, x: S) -> S {
        let zero = S::zero();
        match *self {
            Unary::Neg => -x,
            Unary::Scale(c) => c * x,
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(zero),
            Unary::LeakyRelu(slope) => {
                if x > zero {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Relu6 => x.max(zero).min(S::lit(6.0)),
            Unary::Elu => {
                if x > zero {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Softplus => softplus(x),
        }
    }

    /// Derivative given input `x` and output `y`; kinks take subgradient 0
    /// except where the function is the identity on the right.
    fn derivative(&self, x: S, y: S) -> S {
        let zero = S::zero();
        let one = S::one();
        match *self {
            Unary::Neg => -one,
            Unary::Scale(c) => c,
            Unary::Log => one / x,
            Unary::Exp => y,
            Unary::Tanh => one - y * y,
            Unary::Sigmoid => y * (one - y),
            Unary::Relu => {
                if x > zero {
                    one
                } else {
                    zero
                }
            }
            Unary::LeakyRelu(slope) => {
                if x > zero {
                    one
                } else {
                    slope
                }
            }
            Unary::Relu6 => {
                if x > zero && x < S::lit(6.0) {
                    one
                } else {
                    zero
                }
            }
            Unary::Elu => {
                if x > zero {
                    one
                } else {
                    y + one
                }
            }
            Unary::Softplus => sigmoid(x),
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    let one = S::one();
    if x >= S::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

/// How the two operands of an elementwise primitive line up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    ScalarLhs,
    ScalarRhs,
    /// Left operand has last axis 1 and is repeated along it.
    ColLhs(usize),
    ColRhs(usize),
}

impl Broadcast {
    #[inline]
    fn index(self, k: usize) -> (usize, usize) {
        match self {
            Broadcast::Same => (k, k),
            Broadcast::ScalarLhs => (0, k),
            Broadcast::ScalarRhs => (k, 0),
            Broadcast::ColLhs(c) => (k / c, k),
            Broadcast::ColRhs(c) => (k, k / c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentReduce {
    Sum,
    Mean,
    Max,
}

enum Op<S> {
    Leaf,
    Unary(Var, Unary<S>),
    Binary(Var, Var, Binary, Broadcast),
    MatMul(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherRows(Var, Arc<[usize]>),
    Segment {
        input: Var,
        segments: Arc<[usize]>,
        reduce: SegmentReduce,
        // Max only: source row per output element, usize::MAX for empty segments.
        winners: Vec<usize>,
    },
    SegmentSoftmax(Var, Arc<[usize]>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    BroadcastRows(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
    name: Option<String>,
}

/// Records a differentiable computation for one reverse pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and the reverse pass is a single backwards sweep.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    bound: HashMap<String, Var>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor<S>, needs_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// An anonymous differentiable leaf; query its gradient with [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Binds a named leaf. Trainable leaves appear in [`Gradients::get`].
    /// Binding the same name twice returns the first handle.
    pub fn named_leaf(&mut self, name: &str, value: Tensor<S>, trainable: bool) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = self.push_leaf(value, trainable, Some(name.to_string()));
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Binds a registered parameter of `store` onto this tape.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        Ok(self.named_leaf(name, p.value.clone(), p.trainable))
    }

    pub fn scalar(&mut self, value: S) -> Var {
        self.constant(Tensor::scalar(value))
    }

    // ---- elementwise ----

    pub fn unary(&mut self, a: Var, kind: Unary<S>) -> Var {
        let value = self.value(a).map(|x| kind.apply(x));
        self.push(value, Op::Unary(a, kind), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }
    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.unary(a, Unary::Scale(c))
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }
    pub fn relu6(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu6)
    }
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Elu)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    fn broadcast(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(Broadcast, Vec<usize>), TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let leading = |s: &[usize]| s[..s.len().saturating_sub(1)].to_vec();
        if sa == sb {
            Ok((Broadcast::Same, sa.to_vec()))
        } else if tb.numel() == 1 {
            Ok((Broadcast::ScalarRhs, sa.to_vec()))
        } else if ta.numel() == 1 {
            Ok((Broadcast::ScalarLhs, sb.to_vec()))
        } else if tb.cols() == 1 && leading(sa) == leading(sb) {
            Ok((Broadcast::ColRhs(ta.cols()), sa.to_vec()))
        } else if ta.cols() == 1 && leading(sa) == leading(sb) {
            Ok((Broadcast::ColLhs(tb.cols()), sb.to_vec()))
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var, TensorError> {
        let (bc, shape) = self.broadcast(kind.name(), a, b)?;
        let n: usize = shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = (0..n)
            .map(|k| {
                let (ia, ib) = bc.index(k);
                let (x, y) = (da[ia], db[ib]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Binary(a, b, kind, bc), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Binary::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Binary::Div)
    }

    // ---- linear algebra and layout ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(mismatch());
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        if tb.shape()[0] != k {
            return Err(mismatch());
        }
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = da[i * k + p];
                if x == S::zero() {
                    continue;
                }
                let brow = &db[p * m..(p + 1) * m];
                for (o, &w) in row.iter_mut().zip(brow) {
                    *o = *o + x * w;
                }
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Concatenates along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if start >= end || end > t.cols() {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: t.cols(),
            });
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let value = Tensor::matrix(rows, end - start, data)?;
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<S>().ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::LogSoftmaxRows(a), &[a])
    }

    /// Row `index[r]` of `a` for every `r`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (rows, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(index.len(), c, data)?;
        Ok(self.push(value, Op::GatherRows(a, index), &[a]))
    }

    /// Reduces the rows of `values` into `num_segments` rows keyed by
    /// `segments`. Empty segments produce a zero row.
    pub fn segment(
        &mut self,
        values: Var,
        segments: Arc<[usize]>,
        num_segments: usize,
        reduce: SegmentReduce,
    ) -> Result<Var, TensorError> {
        let name = match reduce {
            SegmentReduce::Sum => "segment_sum",
            SegmentReduce::Mean => "segment_mean",
            SegmentReduce::Max => "segment_max",
        };
        let t = self.value(values);
        let c = t.cols();
        check_segments(name, t, &segments, num_segments)?;
        let mut out = vec![S::zero(); num_segments * c];
        let mut winners = Vec::new();
        match reduce {
            SegmentReduce::Sum | SegmentReduce::Mean => {
                for (r, &s) in segments.iter().enumerate() {
                    for (o, &x) in out[s * c..(s + 1) * c].iter_mut().zip(t.row(r)) {
                        *o = *o + x;
                    }
                }
                if reduce == SegmentReduce::Mean {
                    let counts = segment_counts(&segments, num_segments);
                    for (s, &n) in counts.iter().enumerate() {
                        if n > 0 {
                            let inv = S::one() / S::lit(n as f64);
                            for o in &mut out[s * c..(s + 1) * c] {
                                *o = *o * inv;
                            }
                        }
                    }
                }
            }
            SegmentReduce::Max => {
                winners = vec![usize::MAX; num_segments * c];
                for (r, &s) in segments.iter().enumerate() {
                    for (j, &x) in t.row(r).iter().enumerate() {
                        let k = s * c + j;
                        if winners[k] == usize::MAX || x > out[k] {
                            out[k] = x;
                            winners[k] = r;
                        }
                    }
                }
            }
        }
        let value = Tensor::matrix(num_segments, c, out)?;
        Ok(self.push(
            value,
            Op::Segment {
                input: values,
                segments,
                reduce,
                winners,
            },
            &[values],
        ))
    }

    pub fn segment_sum(&mut self, v: Var, seg: Arc<[usize]>, n: usize) -> Result<Var, TensorError> {
        self.segment(v, seg, n, SegmentReduce::Sum)
    }
    pub fn segment_mean(
        &mut self,
        v: Var,
        seg: Arc<[usize]>,
        n: usize,
    ) -> Result<Var, TensorError> {
        self.segment(v, seg, n, SegmentReduce::Mean)
    }
    pub fn segment_max(&mut self, v: Var, seg: Arc<[usize]>, n: usize) -> Result<Var, TensorError> {
        self.segment(v, seg, n, SegmentReduce::Max)
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(
        &mut self,
        values: Var,
        segments: Arc<[usize]>,
        num_segments: usize,
    ) -> Result<Var, TensorError> {
        let t = self.value(values);
        let c = t.cols();
        check_segments("segment_softmax", t, &segments, num_segments)?;
        let mut maxes = vec![S::neg_infinity(); num_segments * c];
        for (r, &s) in segments.iter().enumerate() {
            for (m, &x) in maxes[s * c..(s + 1) * c].iter_mut().zip(t.row(r)) {
                *m = m.max(x);
            }
        }
        let mut out = Vec::with_capacity(t.numel());
        let mut sums = vec![S::zero(); num_segments * c];
        for (r, &s) in segments.iter().enumerate() {
            for (j, &x) in t.row(r).iter().enumerate() {
                let e = (x - maxes[s * c + j]).exp();
                sums[s * c + j] = sums[s * c + j] + e;
                out.push(e);
            }
        }
        for (r, &s) in segments.iter().enumerate() {
            for j in 0..c {
                out[r * c + j] = out[r * c + j] / sums[s * c + j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::SegmentSoftmax(values, segments), &[values]))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / S::lit(t.numel().max(1) as f64));
        self.push(value, Op::Mean(a), &[a])
    }

    /// Sums each row into a single column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<S> = (0..t.rows())
            .map(|r| t.row(r).iter().copied().sum())
            .collect();
        let value = Tensor::column_vector(data);
        self.push(value, Op::RowSum(a), &[a])
    }

    /// Repeats a one-row tensor `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.rows() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![1, t.cols()],
            });
        }
        let mut data = Vec::with_capacity(rows * t.cols());
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, t.cols(), data)?;
        Ok(self.push(value, Op::BroadcastRows(a), &[a]))
    }

    // ---- reverse pass ----

    /// Propagates d(loss)/d(node) back to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, TensorError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        let mut out = Gradients {
            named: BTreeMap::new(),
            leaves: HashMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                if let Some(name) = &node.name {
                    out.named.insert(name.clone(), g.clone());
                }
                out.leaves.insert(Var(i), g);
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        // Leaves recorded after the loss cannot influence it.
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                let z = Tensor::zeros(node.value.shape());
                if let Some(name) = &node.name {
                    out.named.insert(name.clone(), z.clone());
                }
                out.leaves.insert(Var(i), z);
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor<S> {
        Tensor::zeros(self.shape(v))
    }

    fn backprop_node(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let data = (0..gd.len())
                    .map(|k| gd[k] * kind.derivative(x[k], y[k]))
                    .collect();
                let t = Tensor::new(node.value.shape().to_vec(), data).expect("unary shape");
                self.accumulate(grads, *a, t);
            }
            Op::Binary(a, b, kind, bc) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = self.zeros_like(*a);
                let mut gb = self.zeros_like(*b);
                {
                    let (ga_d, gb_d) = (ga.data_mut(), gb.data_mut());
                    for (k, &gk) in gd.iter().enumerate() {
                        let (ia, ib) = bc.index(k);
                        let (x, y) = (xa[ia], xb[ib]);
                        let (dx, dy) = match kind {
                            Binary::Add => (gk, gk),
                            Binary::Sub => (gk, -gk),
                            Binary::Mul => (gk * y, gk * x),
                            Binary::Div => (gk / y, -gk * x / (y * y)),
                        };
                        ga_d[ia] = ga_d[ia] + dx;
                        gb_d[ib] = gb_d[ib] + dy;
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (da, db) = (ta.data(), tb.data());
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![S::zero(); n * k];
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &db[p * m..(p + 1) * m];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| *x * *y).sum();
                        }
                    }
                    self.accumulate(grads, *a, Tensor::matrix(n, k, ga).expect("matmul grad"));
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![S::zero(); k * m];
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let x = da[i * k + p];
                            if x == S::zero() {
                                continue;
                            }
                            for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o = *o + x * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::matrix(k, m, gb).expect("matmul grad"));
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut data = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        data.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    let t = Tensor::new(self.shape(p).to_vec(), data).expect("concat grad");
                    self.accumulate(grads, p, t);
                }
            }
            Op::SliceCols(a, start) => {
                let mut ga = self.zeros_like(*a);
                let c = ga.cols();
                let w = node.value.cols();
                let rows = node.value.rows();
                let d = ga.data_mut();
                for r in 0..rows {
                    d[r * c + start..r * c + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let c = node.value.cols().max(1);
                let mut out = vec![S::zero(); y.len()];
                for r in 0..y.len() / c {
                    let s = r * c..(r + 1) * c;
                    let dot: S = gd[s.clone()]
                        .iter()
                        .zip(&y[s.clone()])
                        .map(|(a, b)| *a * *b)
                        .sum();
                    for k in s {
                        out[k] = y[k] * (gd[k] - dot);
                    }
                }
                let t = Tensor::new(node.value.shape().to_vec(), out).expect("softmax grad");
                self.accumulate(grads, *a, t);
            }
            Op::LogSoftmaxRows(a) => {
                let y = node.value.data();
                let c = node.value.cols().max(1);
                let mut out = vec![S::zero(); y.len()];
                for r in 0..y.len() / c {
                    let s = r * c..(r + 1) * c;
                    let total: S = gd[s.clone()].iter().copied().sum();
                    for k in s {
                        out[k] = gd[k] - y[k].exp() * total;
                    }
                }
                let t = Tensor::new(node.value.shape().to_vec(), out).expect("log_softmax grad");
                self.accumulate(grads, *a, t);
            }
            Op::GatherRows(a, index) => {
                let mut ga = self.zeros_like(*a);
                let c = ga.cols();
                let d = ga.data_mut();
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] = d[i * c + j] + gd[r * c + j];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Segment {
                input,
                segments,
                reduce,
                winners,
            } => {
                let mut gv = self.zeros_like(*input);
                let c = gv.cols();
                let d = gv.data_mut();
                match reduce {
                    SegmentReduce::Sum => {
                        for (r, &s) in segments.iter().enumerate() {
                            d[r * c..(r + 1) * c].copy_from_slice(&gd[s * c..(s + 1) * c]);
                        }
                    }
                    SegmentReduce::Mean => {
                        let counts = segment_counts(segments, node.value.rows());
                        for (r, &s) in segments.iter().enumerate() {
                            let inv = S::one() / S::lit(counts[s] as f64);
                            for j in 0..c {
                                d[r * c + j] = gd[s * c + j] * inv;
                            }
                        }
                    }
                    SegmentReduce::Max => {
                        for (k, &src) in winners.iter().enumerate() {
                            if src != usize::MAX {
                                let j = k % c;
                                d[src * c + j] = d[src * c + j] + gd[k];
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, gv);
            }
            Op::SegmentSoftmax(a, segments) => {
                let y = node.value.data();
                let c = node.value.cols();
                let n = segments.iter().copied().max().map_or(0, |m| m + 1);
                let mut dots = vec![S::zero(); n * c];
                for (r, &s) in segments.iter().enumerate() {
                    for j in 0..c {
                        dots[s * c + j] = dots[s * c + j] + gd[r * c + j] * y[r * c + j];
                    }
                }
                let mut out = vec![S::zero(); y.len()];
                for (r, &s) in segments.iter().enumerate() {
                    for j in 0..c {
                        let k = r * c + j;
                        out[k] = y[k] * (gd[k] - dots[s * c + j]);
                    }
                }
                let t =
                    Tensor::new(node.value.shape().to_vec(), out).expect("segment softmax grad");
                self.accumulate(grads, *a, t);
            }
            Op::Sum(a) => {
                let t = Tensor::full(self.shape(*a), gd[0]);
                self.accumulate(grads, *a, t);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel().max(1);
                let t = Tensor::full(self.shape(*a), gd[0] / S::lit(n as f64));
                self.accumulate(grads, *a, t);
            }
            Op::RowSum(a) => {
                let c = self.value(*a).cols();
                let data = gd.iter().flat_map(|&x| std::iter::repeat_n(x, c)).collect();
                let t = Tensor::new(self.shape(*a).to_vec(), data).expect("row_sum grad");
                self.accumulate(grads, *a, t);
            }
            Op::BroadcastRows(a) => {
                let c = node.value.cols();
                let mut acc = vec![S::zero(); c];
                for row in gd.chunks(c.max(1)) {
                    for (o, &x) in acc.iter_mut().zip(row) {
                        *o = *o + x;
                    }
                }
                let t = Tensor::new(self.shape(*a).to_vec(), acc).expect("broadcast grad");
                self.accumulate(grads, *a, t);
            }
        }
    }
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

fn check_segments<S: Scalar>(
    op: &'static str,
    values: &Tensor<S>,
    segments: &[usize],
    num_segments: usize,
) -> Result<(), TensorError> {
    if segments.len() != values.rows() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: values.shape().to_vec(),
            rhs: vec![segments.len()],
        });
    }
    if let Some(&bad) = segments.iter().find(|&&s| s >= num_segments) {
        return Err(TensorError::IndexOutOfRange {
            op,
            index: bad,
            bound: num_segments,
        });
    }
    Ok(())
}

fn segment_counts(segments: &[usize], n: usize) -> Vec<usize> {
    let mut counts = vec![0; n];
    for &s in segments {
        counts[s] += 1;
    }
    counts
}

/// Result of [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    named: BTreeMap<String, Tensor<S>>,
    leaves: HashMap<Var, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a trainable named leaf.
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.named.get(name)
    }

    /// Gradient of any differentiable leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.get(&v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.named.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.named.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Keeps only the named gradients accepted by `keep`.
    pub fn filter(mut self, keep: impl Fn(&str) -> bool) -> Self {
        self.named.retain(|k, _| keep(k));
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let x = t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i = tape.constant(Tensor::eye(3));
        let xv = tape.constant(x.clone());
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn segment_sum_direct() {
        let mut tape = Tape::new();
        let v = tape.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.segment_sum(v, Arc::from(vec![0, 0]), 1).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
    }

    #[test]
    fn segment_max_routes_gradient_to_winner() {
        let mut tape = Tape::new();
        let v = tape.input(t(3, 1, &[1.0, 5.0, 2.0]));
        let m = tape.segment_max(v, Arc::from(vec![0, 0, 0]), 1).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0]);
        let loss = tape.sum(m);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(v).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_segments_are_zero() {
        let mut tape = Tape::new();
        let v = tape.constant(t(2, 1, &[3.0, -4.0]));
        let seg: Arc<[usize]> = Arc::from(vec![0, 0]);
        for reduce in [SegmentReduce::Sum, SegmentReduce::Mean, SegmentReduce::Max] {
            let out = tape.segment(v, seg.clone(), 3, reduce).unwrap();
            assert_eq!(&tape.value(out).data()[1..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn segment_mean_is_sum_over_count() {
        let mut tape = Tape::new();
        let v = tape.constant(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]));
        let seg: Arc<[usize]> = Arc::from(vec![1, 1, 0]);
        let s = tape.segment_sum(v, seg.clone(), 2).unwrap();
        let m = tape.segment_mean(v, seg, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[5.0, 9.0, 4.0, 6.0]);
        assert_eq!(tape.value(m).data(), &[5.0, 9.0, 2.0, 3.0]);
    }

    #[test]
    fn segment_index_out_of_range() {
        let mut tape = Tape::new();
        let v = tape.constant(t(2, 1, &[1.0, 2.0]));
        assert!(tape.segment_sum(v, Arc::from(vec![0, 2]), 2).is_err());
        assert!(tape.gather_rows(v, Arc::from(vec![2])).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn constants_and_frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(2.0), true, "w");
        store.insert("frozen", Tensor::scalar(5.0), false, "w");
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let f = tape.param(&store, "frozen").unwrap();
        let c = tape.constant(Tensor::scalar(7.0));
        let a = tape.mul(w, f).unwrap();
        let b = tape.mul(a, c).unwrap();
        let g = tape.backward(b).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[35.0]);
        assert!(g.get("frozen").is_none());
        assert!(g.wrt(c).is_none());
    }

    #[test]
    fn column_broadcast_mul() {
        let mut tape = Tape::new();
        let coef = tape.input(t(2, 1, &[2.0, 3.0]));
        let msg = tape.input(t(2, 2, &[1.0, 1.0, 1.0, 2.0]));
        let y = tape.mul(coef, msg).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 2.0, 3.0, 6.0]);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(coef).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(g.wrt(msg).unwrap().data(), &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn segment_softmax_sums_to_one() {
        let mut tape = Tape::new();
        let v = tape.constant(t(5, 1, &[0.3, -1.0, 2.0, 0.0, 7.0]));
        let sm = tape
            .segment_softmax(v, Arc::from(vec![0, 0, 1, 1, 1]), 2)
            .unwrap();
        let d = tape.value(sm).data();
        assert!((d[0] + d[1] - 1.0).abs() < 1e-12);
        assert!((d[2] + d[3] + d[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stable_sigmoid_and_softplus() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((softplus(1000.0f64) - 1000.0).abs() < 1e-9);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
