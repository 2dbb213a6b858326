use super::tensor::gemm;
use super::{GraphError, Tensor};

/// Index of a node on a [`Tape`]. Ids are only meaningful for the tape that
/// issued them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a user-supplied primitive: receives the input
/// values, the output value and the output gradient, and returns one gradient
/// per input.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

/// Tags for the shape-generic primitives, for callers that pick the operation
/// at run time. Parameterised operations (scaling, column selection, batch
/// norm) have dedicated methods on [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Affine,
    MatMul,
    MatVec,
    Add,
    Sub,
    Mul,
    Relu,
    MaxZero,
    MinZero,
    Square,
    Concat,
    SumCols,
    MeanRows,
    SumAll,
    Diag,
}

/// Per-feature batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    MatVec { a: NodeId, x: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    ScaleCols { x: NodeId, scales: Vec<f64> },
    Relu(NodeId),
    MinZero(NodeId),
    Square(NodeId),
    Concat(Vec<NodeId>),
    SelectCols { x: NodeId, cols: Vec<usize> },
    SumCols(NodeId),
    MeanRows(NodeId),
    SumAll(NodeId),
    Diag(NodeId),
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Custom { inputs: Vec<NodeId>, backward: BackwardFn },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of differentiable operations.
///
/// Nodes are appended in creation order, so every input id precedes the node
/// that consumes it and a reverse sweep over the node list is a valid
/// topological order for backpropagation.
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> GraphError {
    GraphError::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), kink_margin: f64::INFINITY }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Smallest non-zero |input| seen by a ReLU or min{0, ·} so far. Gradient
    /// checks use it to reject points that sit too close to a kink.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Leaf that receives a gradient from [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a fixed input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        id
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        if !value.is_finite() {
            return Err(GraphError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad });
        Ok(id)
    }

    fn note_kinks(&mut self, x: NodeId) {
        let m = self.nodes[x.0]
            .value
            .data()
            .iter()
            .filter(|v| **v != 0.0)
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        self.kink_margin = self.kink_margin.min(m);
    }

    fn rank2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), GraphError> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(mismatch(op, format!("expected a rank-2 operand, got {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), GraphError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Dispatch on a [`Primitive`] tag.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        let arity = match prim {
            Primitive::Affine => 3,
            Primitive::MatMul | Primitive::MatVec | Primitive::Add | Primitive::Sub | Primitive::Mul => 2,
            Primitive::Concat => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(GraphError::Arity { op: format!("{:?}", prim), expected: arity, got: inputs.len() });
        }
        match prim {
            Primitive::Affine => self.affine(inputs[0], inputs[1], inputs[2]),
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::MatVec => self.matvec(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Sub => self.sub(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::Relu | Primitive::MaxZero => self.relu(inputs[0]),
            Primitive::MinZero => self.min_zero(inputs[0]),
            Primitive::Square => self.square(inputs[0]),
            Primitive::Concat => self.concat(inputs),
            Primitive::SumCols => self.sum_cols(inputs[0]),
            Primitive::MeanRows => self.mean_rows(inputs[0]),
            Primitive::SumAll => self.sum_all(inputs[0]),
            Primitive::Diag => self.diag(inputs[0]),
        }
    }

    /// `y = x Wᵀ + b` for `x: [batch, in]`, `W: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (batch, din) = self.rank2("affine", x)?;
        let (dout, win) = self.rank2("affine", w)?;
        if win != din || self.shape(b) != [dout] {
            return Err(mismatch(
                "affine",
                format!("x {:?}, W {:?}, b {:?}", self.shape(x), self.shape(w), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; batch * dout];
        let bias = self.value(b).data();
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(bias);
        }
        gemm(batch, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut out, true);
        let value = Tensor::from_parts(vec![batch, dout], out);
        self.push("affine", value, Op::Affine { x, w, b }, &[x, w, b])
    }

    /// Matrix-matrix product `[p, q] · [q, r]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (p, q) = self.rank2("matmul", a)?;
        let (q2, r) = self.rank2("matmul", b)?;
        if q != q2 {
            return Err(mismatch("matmul", format!("{:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = vec![0.0; p * r];
        gemm(p, q, r, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push("matmul", Tensor::from_parts(vec![p, r], out), Op::MatMul { a, b }, &[a, b])
    }

    /// Matrix-vector product `[p, q] · [q]`.
    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId, GraphError> {
        let (p, q) = self.rank2("matvec", a)?;
        if self.shape(x) != [q] {
            return Err(mismatch("matvec", format!("{:?} x {:?}", self.shape(a), self.shape(x))));
        }
        let av = self.value(a).data();
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..p).map(|i| av[i * q..(i + 1) * q].iter().zip(xv).map(|(u, v)| u * v).sum()).collect();
        self.push("matvec", Tensor::vector(out), Op::MatVec { a, x }, &[a, x])
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, GraphError> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, GraphError> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId, GraphError> {
        let value = self.value(x).map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    /// Multiplies column `j` of a `[batch, k]` tensor by `scales[j]`.
    pub fn scale_cols(&mut self, x: NodeId, scales: &[f64]) -> Result<NodeId, GraphError> {
        let (_, k) = self.rank2("scale_cols", x)?;
        if scales.len() != k {
            return Err(mismatch("scale_cols", format!("{:?} with {} scales", self.shape(x), k)));
        }
        let v = self.value(x);
        let data = v.data().chunks(k).flat_map(|row| row.iter().zip(scales).map(|(a, s)| a * s)).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("scale_cols", value, Op::ScaleCols { x, scales: scales.to_vec() }, &[x])
    }

    /// Elementwise `max{0, x}`.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.note_kinks(x);
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// Elementwise `max{0, x}`; same primitive as [`Tape::relu`].
    pub fn max_zero(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.relu(x)
    }

    /// Elementwise `min{0, x}`.
    pub fn min_zero(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.note_kinks(x);
        let value = self.value(x).map(|v| v.min(0.0));
        self.push("min_zero", value, Op::MinZero(x), &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let value = self.value(x).map(|v| v * v);
        self.push("square", value, Op::Square(x), &[x])
    }

    /// Concatenation of rank-2 tensors along the feature axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(mismatch("concat", "no inputs".into()));
        }
        let batch = self.rank2("concat", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (b, w) = self.rank2("concat", p)?;
            if b != batch {
                let shapes: Vec<_> = parts.iter().map(|&q| self.shape(q).to_vec()).collect();
                return Err(mismatch("concat", format!("row counts differ: {:?}", shapes)));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(batch * total);
        for r in 0..batch {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_parts(vec![batch, total], data);
        self.push("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    /// Gathers the listed columns of a `[batch, k]` tensor.
    pub fn select_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId, GraphError> {
        let (batch, k) = self.rank2("select_cols", x)?;
        if cols.is_empty() || cols.iter().any(|&c| c >= k) {
            return Err(mismatch("select_cols", format!("columns {:?} of {:?}", cols, self.shape(x))));
        }
        let v = self.value(x);
        let data = (0..batch).flat_map(|r| cols.iter().map(move |&c| v.get(r, c))).collect();
        let value = Tensor::from_parts(vec![batch, cols.len()], data);
        self.push("select_cols", value, Op::SelectCols { x, cols: cols.to_vec() }, &[x])
    }

    /// Contiguous column range `start..start + len`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, GraphError> {
        let cols: Vec<usize> = (start..start + len).collect();
        self.select_cols(x, &cols)
    }

    /// Row sums: `[batch, k] -> [batch, 1]`.
    pub fn sum_cols(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let (batch, k) = self.rank2("sum_cols", x)?;
        let data = self.value(x).data().chunks(k).map(|r| r.iter().sum()).collect();
        self.push("sum_cols", Tensor::from_parts(vec![batch, 1], data), Op::SumCols(x), &[x])
    }

    /// Mean over the batch axis: `[batch, k] -> [k]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let (batch, k) = self.rank2("mean_rows", x)?;
        let mut out = vec![0.0; k];
        for row in self.value(x).data().chunks(k) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= batch as f64);
        self.push("mean_rows", Tensor::vector(out), Op::MeanRows(x), &[x])
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Diagonal embedding `[n] -> [n, n]`.
    pub fn diag(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(mismatch("diag", format!("expected a vector, got {:?}", s)));
        }
        let n = s[0];
        let mut data = vec![0.0; n * n];
        for (i, v) in self.value(x).data().iter().enumerate() {
            data[i * n + i] = *v;
        }
        self.push("diag", Tensor::from_parts(vec![n, n], data), Op::Diag(x), &[x])
    }

    fn check_bn(&self, op: &'static str, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<(usize, usize), GraphError> {
        let (batch, k) = self.rank2(op, x)?;
        if self.shape(gamma) != [k] || self.shape(beta) != [k] {
            return Err(mismatch(
                op,
                format!("x {:?}, gamma {:?}, beta {:?}", self.shape(x), self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok((batch, k))
    }

    /// Per-feature batch normalization with batch statistics (biased variance).
    /// Returns the output node and the statistics used.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        epsilon: f64,
    ) -> Result<(NodeId, BatchMoments), GraphError> {
        let (batch, k) = self.check_bn("batch_norm", x, gamma, beta)?;
        if batch < 2 {
            return Err(GraphError::BatchTooSmall { batch });
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; k];
        for row in xv.chunks(k) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= batch as f64);
        let mut var = vec![0.0; k];
        for row in xv.chunks(k) {
            for j in 0..k {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= batch as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let (value, xhat) = self.normalize(x, gamma, beta, &mean, &inv_std);
        let id = self.push(
            "batch_norm",
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: true },
            &[x, gamma, beta],
        )?;
        Ok((id, BatchMoments { mean, var }))
    }

    /// Batch normalization with fixed (moving) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        epsilon: f64,
    ) -> Result<NodeId, GraphError> {
        let (_, k) = self.check_bn("batch_norm_eval", x, gamma, beta)?;
        if mean.len() != k || var.len() != k {
            return Err(mismatch("batch_norm_eval", format!("{} features, {} / {} moments", k, mean.len(), var.len())));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let (value, xhat) = self.normalize(x, gamma, beta, mean, &inv_std);
        self.push(
            "batch_norm_eval",
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: false },
            &[x, gamma, beta],
        )
    }

    fn normalize(&self, x: NodeId, gamma: NodeId, beta: NodeId, mean: &[f64], inv_std: &[f64]) -> (Tensor, Vec<f64>) {
        let xv = self.value(x);
        let k = mean.len();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(k) {
            for j in 0..k {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        (Tensor::from_parts(xv.shape().to_vec(), out), xhat)
    }

    /// Records an operation whose value was computed by the caller and whose
    /// vector-Jacobian product is supplied as a closure.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor, backward: BackwardFn) -> Result<NodeId, GraphError> {
        self.push("custom", value, Op::Custom { inputs: inputs.to_vec(), backward }, inputs)
    }

    /// Reverse sweep from a one-element output node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, GraphError> {
        let out_value = self.value(output);
        if out_value.numel() != 1 {
            return Err(GraphError::NonScalarOutput { shape: out_value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out_value.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
        }

        let mut leaves = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                leaves.push((NodeId(i), g));
            }
        }
        Ok(Gradients { leaves })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |id: NodeId, g: Tensor| {
            if !self.wants(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let dyv = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (batch, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[0];
                if self.wants(*x) {
                    let mut dx = vec![0.0; batch * din];
                    gemm(batch, dout, din, dyv, false, self.value(*w).data(), false, &mut dx, false);
                    acc(*x, Tensor::from_parts(vec![batch, din], dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, batch, din, dyv, true, self.value(*x).data(), false, &mut dw, false);
                    acc(*w, Tensor::from_parts(vec![dout, din], dw));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; dout];
                    for row in dyv.chunks(dout) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    acc(*b, Tensor::vector(db));
                }
            }
            Op::MatMul { a, b } => {
                let (p, q) = (self.shape(*a)[0], self.shape(*a)[1]);
                let r = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; p * q];
                    gemm(p, r, q, dyv, false, self.value(*b).data(), true, &mut da, false);
                    acc(*a, Tensor::from_parts(vec![p, q], da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; q * r];
                    gemm(q, p, r, self.value(*a).data(), true, dyv, false, &mut db, false);
                    acc(*b, Tensor::from_parts(vec![q, r], db));
                }
            }
            Op::MatVec { a, x } => {
                let (p, q) = (self.shape(*a)[0], self.shape(*a)[1]);
                let xv = self.value(*x).data();
                let av = self.value(*a).data();
                if self.wants(*a) {
                    let da = (0..p).flat_map(|i| xv.iter().map(move |xj| dyv[i] * xj)).collect();
                    acc(*a, Tensor::from_parts(vec![p, q], da));
                }
                if self.wants(*x) {
                    let dx = (0..q).map(|j| (0..p).map(|i| av[i * q + j] * dyv[i]).sum()).collect();
                    acc(*x, Tensor::vector(dx));
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.wants(*a) {
                    let d = dyv.iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    acc(*a, Tensor::from_parts(va.shape().to_vec(), d));
                }
                if self.wants(*b) {
                    let d = dyv.iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    acc(*b, Tensor::from_parts(vb.shape().to_vec(), d));
                }
            }
            Op::Scale(x, c) => acc(*x, dy.map(|v| v * c)),
            Op::AddScalar(x) => acc(*x, dy.clone()),
            Op::ScaleCols { x, scales } => {
                let k = scales.len();
                let d = dyv.chunks(k).flat_map(|row| row.iter().zip(scales).map(|(g, s)| g * s)).collect();
                acc(*x, Tensor::from_parts(dy.shape().to_vec(), d));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = dyv.iter().zip(xv.data()).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::MinZero(x) => {
                let xv = self.value(*x);
                let d = dyv.iter().zip(xv.data()).map(|(g, v)| if *v < 0.0 { *g } else { 0.0 }).collect();
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let d = dyv.iter().zip(xv.data()).map(|(g, v)| 2.0 * v * g).collect();
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Concat(parts) => {
                let total = dy.cols();
                let batch = dy.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        let d = (0..batch).flat_map(|r| dyv[r * total + offset..r * total + offset + w].iter().copied()).collect();
                        acc(p, Tensor::from_parts(vec![batch, w], d));
                    }
                    offset += w;
                }
            }
            Op::SelectCols { x, cols } => {
                let shape = self.shape(*x).to_vec();
                let k = shape[1];
                let mut d = vec![0.0; shape[0] * k];
                for (r, row) in dyv.chunks(cols.len()).enumerate() {
                    for (g, &c) in row.iter().zip(cols) {
                        d[r * k + c] += g;
                    }
                }
                acc(*x, Tensor::from_parts(shape, d));
            }
            Op::SumCols(x) => {
                let shape = self.shape(*x).to_vec();
                let k = shape[1];
                let d = dyv.iter().flat_map(|g| std::iter::repeat_n(*g, k)).collect();
                acc(*x, Tensor::from_parts(shape, d));
            }
            Op::MeanRows(x) => {
                let shape = self.shape(*x).to_vec();
                let inv = 1.0 / shape[0] as f64;
                let d = (0..shape[0]).flat_map(|_| dyv.iter().map(|g| g * inv)).collect();
                acc(*x, Tensor::from_parts(shape, d));
            }
            Op::SumAll(x) => {
                let shape = self.shape(*x).to_vec();
                acc(*x, Tensor::full(&shape, dyv[0]));
            }
            Op::Diag(x) => {
                let n = self.shape(*x)[0];
                acc(*x, Tensor::vector((0..n).map(|i| dyv[i * n + i]).collect()));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let k = inv_std.len();
                let batch = dy.rows();
                let mut dgamma = vec![0.0; k];
                let mut dbeta = vec![0.0; k];
                for (row, hrow) in dyv.chunks(k).zip(xhat.chunks(k)) {
                    for j in 0..k {
                        dbeta[j] += row[j];
                        dgamma[j] += row[j] * hrow[j];
                    }
                }
                if self.wants(*x) {
                    let g = self.value(*gamma).data();
                    let mut dx = Vec::with_capacity(dyv.len());
                    if *batch_stats {
                        let n = batch as f64;
                        for (row, hrow) in dyv.chunks(k).zip(xhat.chunks(k)) {
                            for j in 0..k {
                                dx.push(g[j] * inv_std[j] / n * (n * row[j] - dbeta[j] - hrow[j] * dgamma[j]));
                            }
                        }
                    } else {
                        for row in dyv.chunks(k) {
                            for j in 0..k {
                                dx.push(g[j] * inv_std[j] * row[j]);
                            }
                        }
                    }
                    acc(*x, Tensor::from_parts(dy.shape().to_vec(), dx));
                }
                acc(*gamma, Tensor::vector(dgamma));
                acc(*beta, Tensor::vector(dbeta));
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let gs = backward(&vals, &node.value, dy);
                for (&i, g) in inputs.iter().zip(gs) {
                    acc(i, g);
                }
            }
        }
    }
}

/// Gradients of a scalar output with respect to every leaf created with
/// [`Tape::variable`]. Leaves the output does not depend on get zeros.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<(NodeId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves.binary_search_by_key(&id, |(i, _)| *i).ok().map(|k| &self.leaves[k].1)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.leaves.iter().map(|(i, t)| (*i, t))
    }
}
