//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough state to push gradients back to its parents. Graphs are built per
//! forward pass and thrown away afterwards. In inference mode
//! ([`Graph::inference`]) no node requires a gradient and backward is never run.

use std::hash::{DefaultHasher, Hash, Hasher};

use ndarray::{concatenate, s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Mat),
    Relu(NodeId),
    QuickGelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(NodeId),
    L2Normalize {
        x: NodeId,
        norms: Vec<f64>,
    },
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    /// Scalar computed outside the tape together with its local gradient.
    Scalar(NodeId, Mat),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    track: bool,
    kinks: DefaultHasher,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn quick_gelu(x: f64) -> f64 {
    x * sigmoid(1.702 * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    /// A graph that records gradients for variables flagged as requiring them.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            track: true,
            kinks: DefaultHasher::new(),
        }
    }

    /// A graph where nothing requires a gradient.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            track: false,
            kinks: DefaultHasher::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Folds the branch taken at non-differentiable points into the graph's
    /// kink signature.
    pub fn record_kinks(&mut self, branches: impl IntoIterator<Item = u64>) {
        for b in branches {
            b.hash(&mut self.kinks);
        }
    }

    /// Hash of every ReLU sign pattern and recorded branch so far. Two
    /// forward passes with equal signatures took the same piecewise-smooth
    /// branch everywhere.
    pub fn kink_signature(&self) -> u64 {
        self.kinks.finish()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = self.track && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.variable(value, false)
    }

    pub fn variable(&mut self, value: Mat, requires_grad: bool) -> NodeId {
        let requires_grad = requires_grad && self.track;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        assert_eq!(self.value(row).nrows(), 1, "add_row: bias must be a single row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor), &[a])
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, mask: Mat) -> NodeId {
        let v = self.value(a) * &mask;
        self.push(v, Op::MulConst(a, mask), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        for &x in self.nodes[a.0].value.iter() {
            (x > 0.0).hash(&mut self.kinks);
        }
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    /// `x · σ(1.702 x)`, the activation of the CLIP backbone MLPs.
    pub fn quick_gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(quick_gelu);
        self.push(v, Op::QuickGelu(a), &[a])
    }

    /// Row-wise layer norm with `1 × n` gain and bias rows.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let v = &xhat * self.value(gain) + self.value(bias);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Row-wise softmax. With `causal`, row i only attends to columns ≤ i.
    pub fn softmax_rows(&mut self, a: NodeId, causal: bool) -> NodeId {
        let mut v = self.value(a).clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let limit = if causal { i + 1 } else { row.len() };
            let max = row.iter().take(limit).fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                if j < limit {
                    *x = (*x - max).exp();
                    sum += *x;
                } else {
                    *x = 0.0;
                }
            }
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Scales every row to unit L2 norm. Rows must be nonzero.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / norm);
            norms.push(norm);
        }
        self.push(v, Op::L2Normalize { x: a, norms }, &[a])
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: height mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut v = Mat::zeros((indices.len(), t.ncols()));
        for (k, &i) in indices.iter().enumerate() {
            v.row_mut(k).assign(&t.row(i));
        }
        self.push(v, Op::GatherRows(table, indices.to_vec()), &[table])
    }

    /// Records a scalar `value = f(input)` whose gradient `df/dinput` was
    /// computed by the caller.
    pub fn scalar_fn(&mut self, input: NodeId, value: f64, grad: Mat) -> NodeId {
        assert_eq!(grad.dim(), self.value(input).dim(), "scalar_fn: gradient shape");
        let v = Mat::from_elem((1, 1), value);
        self.push(v, Op::Scalar(input, grad), &[input])
    }

    /// Back-propagates from a `1 × 1` root. Returns the gradient of every node
    /// that requires one.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        assert_eq!(self.value(root).dim(), (1, 1), "backward: root must be scalar");
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, dy: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, dy.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(dy));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, dy.dot(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, dy.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, dy.clone());
                if self.needs(*row) {
                    self.accumulate(grads, *row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, dy * *f),
            Op::MulConst(a, mask) => self.accumulate(grads, *a, dy * mask),
            Op::Relu(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| {
                    if x <= 0.0 {
                        *g = 0.0
                    }
                });
                self.accumulate(grads, *a, g);
            }
            Op::QuickGelu(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| {
                    let sg = sigmoid(1.702 * x);
                    *g *= sg + 1.702 * x * sg * (1.0 - sg);
                });
                self.accumulate(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.needs(*gain) {
                    let dg = (dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gain, dg);
                }
                if self.needs(*bias) {
                    self.accumulate(grads, *bias, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs(*x) {
                    let dxhat = dy * self.value(*gain);
                    let n = dxhat.ncols() as f64;
                    let mut dx = Mat::zeros(dxhat.dim());
                    for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(i);
                        let xh = xhat.row(i);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let inv = inv_std[i];
                        Zip::from(&mut out)
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &d, &h| *o = inv / n * (n * d - sum_dh - h * sum_dh_xh));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut g = dy * y;
                for (i, mut row) in g.rows_mut().into_iter().enumerate() {
                    let dot = row.sum();
                    Zip::from(&mut row).and(y.row(i)).for_each(|g, &yv| *g -= yv * dot);
                }
                self.accumulate(grads, *a, g);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut g = dy.clone();
                for (i, mut row) in g.rows_mut().into_iter().enumerate() {
                    let dot = row.dot(&y.row(i));
                    let norm = norms[i];
                    Zip::from(&mut row)
                        .and(y.row(i))
                        .for_each(|g, &yv| *g = (*g - yv * dot) / norm);
                }
                self.accumulate(grads, *x, g);
            }
            Op::SliceRows(a, start) => {
                let mut g = Mat::zeros(self.value(*a).dim());
                g.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(dy);
                self.accumulate(grads, *a, g);
            }
            Op::SliceCols(a, start) => {
                let mut g = Mat::zeros(self.value(*a).dim());
                g.slice_mut(s![.., *start..*start + dy.ncols()]).assign(dy);
                self.accumulate(grads, *a, g);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).nrows();
                    if self.needs(*p) {
                        let g = dy.slice(s![offset..offset + rows, ..]).to_owned();
                        self.accumulate(grads, *p, g);
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).ncols();
                    if self.needs(*p) {
                        let g = dy.slice(s![.., offset..offset + cols]).to_owned();
                        self.accumulate(grads, *p, g);
                    }
                    offset += cols;
                }
            }
            Op::GatherRows(table, indices) => {
                let mut g = Mat::zeros(self.value(*table).dim());
                for (k, &i) in indices.iter().enumerate() {
                    let mut row = g.row_mut(i);
                    row += &dy.row(k);
                }
                self.accumulate(grads, *table, g);
            }
            Op::Scalar(input, local) => {
                self.accumulate(grads, *input, local * dy[[0, 0]]);
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}
