//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! The graph is rebuilt on every forward pass (define-by-run). Each [`Node`]
//! owns its value, an accumulated gradient of the same shape, and a closure
//! that pushes gradient into its parents. [`Node::backward`] walks the graph
//! in reverse topological order from a scalar root.
//!
//! Gradient accumulation is additive; callers zero gradients between steps.

use std::cell::{Ref, RefCell};
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::mat::Mat;

type BackwardFn = Box<dyn Fn(&Mat, &Mat, &[Node])>;

struct NodeData {
    value: RefCell<Mat>,
    grad: RefCell<Mat>,
    parents: Vec<Node>,
    backward: Option<BackwardFn>,
    constant: bool,
    op: &'static str,
}

/// Handle to one value in the computation graph. Cloning shares the node.
pub struct Node {
    data: Rc<NodeData>,
}

impl Clone for Node {
    fn clone(&self) -> Self {
        Node {
            data: Rc::clone(&self.data),
        }
    }
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Node[{} {}x{}{}]",
            self.data.op,
            self.rows(),
            self.cols(),
            if self.data.constant { " const" } else { "" }
        )
    }
}

impl Node {
    fn new(value: Mat, parents: Vec<Node>, backward: Option<BackwardFn>, op: &'static str) -> Node {
        let grad = Mat::zeros(value.rows(), value.cols());
        Node {
            data: Rc::new(NodeData {
                value: RefCell::new(value),
                grad: RefCell::new(grad),
                parents,
                backward,
                constant: false,
                op,
            }),
        }
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(value: Mat) -> Node {
        let grad = Mat::zeros(value.rows(), value.cols());
        Node {
            data: Rc::new(NodeData {
                value: RefCell::new(value),
                grad: RefCell::new(grad),
                parents: Vec::new(),
                backward: None,
                constant: true,
                op: "const",
            }),
        }
    }

    /// Trainable leaf.
    pub fn param(value: Mat) -> Node {
        Node::new(value, Vec::new(), None, "param")
    }

    pub fn scalar(v: f64) -> Node {
        Node::constant(Mat::from_vec(1, 1, vec![v]))
    }

    pub fn value(&self) -> Ref<'_, Mat> {
        self.data.value.borrow()
    }

    pub fn grad(&self) -> Ref<'_, Mat> {
        self.data.grad.borrow()
    }

    pub fn rows(&self) -> usize {
        self.data.value.borrow().rows()
    }

    pub fn cols(&self) -> usize {
        self.data.value.borrow().cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.value.borrow().shape()
    }

    pub fn is_constant(&self) -> bool {
        self.data.constant
    }

    /// Scalar payload of a 1x1 node.
    pub fn item(&self) -> f64 {
        self.data.value.borrow().item()
    }

    /// Overwrite the stored value in place. Only meaningful for leaves
    /// (optimizer updates, finite-difference probes).
    pub fn set_value(&self, value: Mat) {
        let mut v = self.data.value.borrow_mut();
        debug_assert_eq!(v.shape(), value.shape());
        *v = value;
    }

    pub fn with_value_mut<R>(&self, f: impl FnOnce(&mut Mat) -> R) -> R {
        f(&mut self.data.value.borrow_mut())
    }

    pub fn zero_grad(&self) {
        self.data.grad.borrow_mut().fill(0.0);
    }

    fn accumulate_grad(&self, delta: &Mat) {
        if self.data.constant {
            return;
        }
        self.data.grad.borrow_mut().add_assign(delta);
    }

    fn unary(
        &self,
        value: Mat,
        op: &'static str,
        backward: impl Fn(&Mat, &Mat, &[Node]) + 'static,
    ) -> Node {
        Node::new(value, vec![self.clone()], Some(Box::new(backward)), op)
    }

    // ── Arithmetic ──────────────────────────────────────────────────────

    pub fn matmul(&self, other: &Node) -> Result<Node> {
        if self.cols() != other.rows() {
            return Err(Error::Dim {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let value = self.value().matmul(&other.value());
        Ok(Node::new(
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(|_v, g, ps| {
                let a = ps[0].value();
                let b = ps[1].value();
                ps[0].accumulate_grad(&g.matmul_nt(&b));
                ps[1].accumulate_grad(&a.matmul_tn(g));
            })),
            "matmul",
        ))
    }

    pub fn transpose(&self) -> Node {
        let value = self.value().transpose();
        self.unary(value, "transpose", |_v, g, ps| {
            ps[0].accumulate_grad(&g.transpose());
        })
    }

    fn check_same_shape(&self, other: &Node, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dim {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Node) -> Result<Node> {
        self.check_same_shape(other, "add")?;
        let value = self.value().zip(&other.value(), |a, b| a + b);
        Ok(Node::new(
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(|_v, g, ps| {
                ps[0].accumulate_grad(g);
                ps[1].accumulate_grad(g);
            })),
            "add",
        ))
    }

    pub fn sub(&self, other: &Node) -> Result<Node> {
        self.check_same_shape(other, "sub")?;
        let value = self.value().zip(&other.value(), |a, b| a - b);
        Ok(Node::new(
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(|_v, g, ps| {
                ps[0].accumulate_grad(g);
                ps[1].accumulate_grad(&g.scale(-1.0));
            })),
            "sub",
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Node) -> Result<Node> {
        self.check_same_shape(other, "mul")?;
        let value = self.value().zip(&other.value(), |a, b| a * b);
        Ok(Node::new(
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(|_v, g, ps| {
                let a = ps[0].value();
                let b = ps[1].value();
                ps[0].accumulate_grad(&g.zip(&b, |g, b| g * b));
                ps[1].accumulate_grad(&g.zip(&a, |g, a| g * a));
            })),
            "mul",
        ))
    }

    /// Add a 1xC row to every row of an RxC matrix.
    pub fn add_row(&self, row: &Node) -> Result<Node> {
        if row.rows() != 1 || row.cols() != self.cols() {
            return Err(Error::Dim {
                op: "add_row",
                lhs: self.shape(),
                rhs: row.shape(),
            });
        }
        let mut value = self.value().clone();
        {
            let r = row.value();
            for i in 0..value.rows() {
                for (x, &b) in value.row_mut(i).iter_mut().zip(r.row(0).iter()) {
                    *x += b;
                }
            }
        }
        Ok(Node::new(
            value,
            vec![self.clone(), row.clone()],
            Some(Box::new(|_v, g, ps| {
                ps[0].accumulate_grad(g);
                let mut col_sum = Mat::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (s, &x) in col_sum.row_mut(0).iter_mut().zip(g.row(i).iter()) {
                        *s += x;
                    }
                }
                ps[1].accumulate_grad(&col_sum);
            })),
            "add_row",
        ))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, k: f64) -> Node {
        let value = self.value().scale(k);
        self.unary(value, "scale", move |_v, g, ps| {
            ps[0].accumulate_grad(&g.scale(k));
        })
    }

    /// Rescale a matrix by a learned 1x1 scalar node.
    pub fn scale_by(&self, scalar: &Node) -> Result<Node> {
        if scalar.shape() != (1, 1) {
            return Err(Error::Dim {
                op: "scale_by",
                lhs: self.shape(),
                rhs: scalar.shape(),
            });
        }
        let s = scalar.item();
        let value = self.value().scale(s);
        Ok(Node::new(
            value,
            vec![self.clone(), scalar.clone()],
            Some(Box::new(|_v, g, ps| {
                let s = ps[1].item();
                ps[0].accumulate_grad(&g.scale(s));
                let a = ps[0].value();
                let dot: f64 = g
                    .data()
                    .iter()
                    .zip(a.data().iter())
                    .map(|(&g, &a)| g * a)
                    .sum();
                ps[1].accumulate_grad(&Mat::from_vec(1, 1, vec![dot]));
            })),
            "scale_by",
        ))
    }

    pub fn sigmoid(&self) -> Node {
        let value = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(value, "sigmoid", |v, g, ps| {
            ps[0].accumulate_grad(&g.zip(v, |g, y| g * y * (1.0 - y)));
        })
    }

    pub fn tanh(&self) -> Node {
        let value = self.value().map(f64::tanh);
        self.unary(value, "tanh", |v, g, ps| {
            ps[0].accumulate_grad(&g.zip(v, |g, y| g * (1.0 - y * y)));
        })
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&self) -> Result<Node> {
        {
            let v = self.value();
            if !v.is_finite() {
                return Err(Error::numeric("softmax_rows: non-finite input"));
            }
        }
        let mut value = self.value().clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        Ok(self.unary(value, "softmax_rows", |v, g, ps| {
            // dx_j = y_j * (g_j - sum_k g_k y_k), per row
            let mut out = Mat::zeros(g.rows(), g.cols());
            for i in 0..g.rows() {
                let y = v.row(i);
                let gr = g.row(i);
                let dot: f64 = y.iter().zip(gr.iter()).map(|(&y, &g)| y * g).sum();
                for (o, (&y, &g)) in out.row_mut(i).iter_mut().zip(y.iter().zip(gr.iter())) {
                    *o = y * (g - dot);
                }
            }
            ps[0].accumulate_grad(&out);
        }))
    }

    /// Horizontal concatenation: all operands share a row count.
    pub fn concat_cols(parts: &[Node]) -> Result<Node> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: empty operand list"));
        }
        let rows = parts[0].rows();
        for p in parts {
            if p.rows() != rows {
                return Err(Error::Dim {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
        }
        let widths: Vec<usize> = parts.iter().map(Node::cols).collect();
        let total: usize = widths.iter().sum();
        let mut value = Mat::zeros(rows, total);
        for i in 0..rows {
            let out = value.row_mut(i);
            let mut off = 0;
            for p in parts {
                let v = p.value();
                out[off..off + v.cols()].copy_from_slice(v.row(i));
                off += v.cols();
            }
        }
        Ok(Node::new(
            value,
            parts.to_vec(),
            Some(Box::new(move |_v, g, ps| {
                let mut off = 0;
                for (p, &w) in ps.iter().zip(widths.iter()) {
                    let mut slice = Mat::zeros(g.rows(), w);
                    for i in 0..g.rows() {
                        slice.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                    }
                    p.accumulate_grad(&slice);
                    off += w;
                }
            })),
            "concat_cols",
        ))
    }

    /// Vertical stacking: all operands share a column count.
    pub fn concat_rows(parts: &[Node]) -> Result<Node> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: empty operand list"));
        }
        let cols = parts[0].cols();
        for p in parts {
            if p.cols() != cols {
                return Err(Error::Dim {
                    op: "concat_rows",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
        }
        let heights: Vec<usize> = parts.iter().map(Node::rows).collect();
        let total: usize = heights.iter().sum();
        let mut value = Mat::zeros(total, cols);
        let mut off = 0;
        for p in parts {
            let v = p.value();
            for i in 0..v.rows() {
                value.row_mut(off + i).copy_from_slice(v.row(i));
            }
            off += v.rows();
        }
        Ok(Node::new(
            value,
            parts.to_vec(),
            Some(Box::new(move |_v, g, ps| {
                let mut off = 0;
                for (p, &h) in ps.iter().zip(heights.iter()) {
                    let mut slice = Mat::zeros(h, g.cols());
                    for i in 0..h {
                        slice.row_mut(i).copy_from_slice(g.row(off + i));
                    }
                    p.accumulate_grad(&slice);
                    off += h;
                }
            })),
            "concat_rows",
        ))
    }

    /// Elementwise mean of same-shaped nodes (the subspace pooling layer).
    pub fn mean_over(parts: &[Node]) -> Result<Node> {
        if parts.is_empty() {
            return Err(Error::contract("mean_over: empty operand list"));
        }
        for p in parts {
            if p.shape() != parts[0].shape() {
                return Err(Error::Dim {
                    op: "mean_over",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
        }
        let k = parts.len() as f64;
        let mut value = parts[0].value().clone();
        for p in &parts[1..] {
            value.add_assign(&p.value());
        }
        let value = value.scale(1.0 / k);
        Ok(Node::new(
            value,
            parts.to_vec(),
            Some(Box::new(move |_v, g, ps| {
                let scaled = g.scale(1.0 / k);
                for p in ps {
                    p.accumulate_grad(&scaled);
                }
            })),
            "mean_over",
        ))
    }

    /// Mean squared error over all entries, as a 1x1 node.
    pub fn mse(&self, other: &Node) -> Result<Node> {
        self.check_same_shape(other, "mse")?;
        let n = self.value().len() as f64;
        let diff = self.value().zip(&other.value(), |a, b| a - b);
        let value = Mat::from_vec(1, 1, vec![diff.data().iter().map(|d| d * d).sum::<f64>() / n]);
        Ok(Node::new(
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |_v, g, ps| {
                let gs = g.item() * 2.0 / n;
                let a = ps[0].value();
                let b = ps[1].value();
                let d = a.zip(&b, |a, b| (a - b) * gs);
                ps[0].accumulate_grad(&d);
                ps[1].accumulate_grad(&d.scale(-1.0));
            })),
            "mse",
        ))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&self) -> Node {
        let value = Mat::from_vec(1, 1, vec![self.value().sum()]);
        self.unary(value, "sum", |_v, g, ps| {
            let gs = g.item();
            let shape = ps[0].shape();
            ps[0].accumulate_grad(&Mat::full(shape.0, shape.1, gs));
        })
    }

    /// Select rows by index (embedding lookup, row slicing). Gradient
    /// scatter-adds into the source rows.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Node> {
        let rows = self.rows();
        for &i in indices {
            if i >= rows {
                return Err(Error::contract(format!(
                    "gather_rows: index {i} out of range for {rows} rows"
                )));
            }
        }
        let cols = self.cols();
        let mut value = Mat::zeros(indices.len(), cols);
        {
            let v = self.value();
            for (r, &i) in indices.iter().enumerate() {
                value.row_mut(r).copy_from_slice(v.row(i));
            }
        }
        let idx: Vec<usize> = indices.to_vec();
        Ok(self.unary(value, "gather_rows", move |_v, g, ps| {
            let shape = ps[0].shape();
            let mut delta = Mat::zeros(shape.0, shape.1);
            for (r, &i) in idx.iter().enumerate() {
                for (d, &x) in delta.row_mut(i).iter_mut().zip(g.row(r).iter()) {
                    *d += x;
                }
            }
            ps[0].accumulate_grad(&delta);
        }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `self`, with `mask[i] == false` rows excluded. Stable log-sum-exp.
    pub fn cross_entropy_rows(&self, targets: &[usize], mask: &[bool]) -> Result<Node> {
        let (rows, cols) = self.shape();
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::contract(format!(
                "cross_entropy_rows: {} logit rows vs {} targets / {} mask entries",
                rows,
                targets.len(),
                mask.len()
            )));
        }
        for (&t, &m) in targets.iter().zip(mask.iter()) {
            if m && t >= cols {
                return Err(Error::contract(format!(
                    "cross_entropy_rows: target id {t} out of range for {cols} classes"
                )));
            }
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::contract(
                "cross_entropy_rows: every position is masked out",
            ));
        }
        let mut total = 0.0;
        {
            let v = self.value();
            for i in 0..rows {
                if !mask[i] {
                    continue;
                }
                let row = v.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
                total += lse - row[targets[i]];
            }
        }
        let value = Mat::from_vec(1, 1, vec![total / count as f64]);
        let targets: Vec<usize> = targets.to_vec();
        let mask: Vec<bool> = mask.to_vec();
        Ok(self.unary(value, "cross_entropy_rows", move |_v, g, ps| {
            let gs = g.item() / count as f64;
            let logits = ps[0].value();
            let mut delta = Mat::zeros(logits.rows(), logits.cols());
            for i in 0..logits.rows() {
                if !mask[i] {
                    continue;
                }
                let row = logits.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let out = delta.row_mut(i);
                for (j, (&e, o)) in exps.iter().zip(out.iter_mut()).enumerate() {
                    let p = e / sum;
                    *o = gs * (p - if j == targets[i] { 1.0 } else { 0.0 });
                }
            }
            ps[0].accumulate_grad(&delta);
        }))
    }

    /// Copy of the current value as a fresh constant leaf; cuts the graph.
    pub fn detach(&self) -> Node {
        Node::constant(self.value().clone())
    }

    /// Contiguous column slice [lo, hi).
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<Node> {
        let (rows, cols) = self.shape();
        if lo >= hi || hi > cols {
            return Err(Error::contract(format!(
                "slice_cols: [{lo}, {hi}) out of range for {cols} columns"
            )));
        }
        let width = hi - lo;
        let mut value = Mat::zeros(rows, width);
        {
            let v = self.value();
            for r in 0..rows {
                value.row_mut(r).copy_from_slice(&v.row(r)[lo..hi]);
            }
        }
        Ok(self.unary(value, "slice_cols", move |_v, g, ps| {
            let shape = ps[0].shape();
            let mut delta = Mat::zeros(shape.0, shape.1);
            for r in 0..g.rows() {
                delta.row_mut(r)[lo..hi].copy_from_slice(g.row(r));
            }
            ps[0].accumulate_grad(&delta);
        }))
    }

    /// Fused LSTM activation: `pre` holds the four gate pre-activations
    /// [i | f | g | o] (1x4d) and `cell` the previous cell state (1xd).
    /// The output packs the new hidden and cell states side by side as
    /// [h | c] (1x2d); callers slice the halves apart.
    pub fn lstm_activation(pre: &Node, cell: &Node) -> Result<Node> {
        let d = cell.cols();
        if pre.rows() != 1 || cell.rows() != 1 || pre.cols() != 4 * d {
            return Err(Error::Dim {
                op: "lstm_activation",
                lhs: pre.shape(),
                rhs: cell.shape(),
            });
        }
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut value = Mat::zeros(1, 2 * d);
        {
            let p = pre.value();
            let c_prev = cell.value();
            let row = p.row(0);
            for u in 0..d {
                let i = sigmoid(row[u]);
                let f = sigmoid(row[d + u]);
                let g = row[2 * d + u].tanh();
                let o = sigmoid(row[3 * d + u]);
                let c = f * c_prev.at(0, u) + i * g;
                value.set(0, u, o * c.tanh());
                value.set(0, d + u, c);
            }
        }
        Ok(Node::new(
            value,
            vec![pre.clone(), cell.clone()],
            Some(Box::new(move |v, grad, ps| {
                let p = ps[0].value();
                let c_prev = ps[1].value();
                let row = p.row(0);
                let mut d_pre = Mat::zeros(1, 4 * d);
                let mut d_cell = Mat::zeros(1, d);
                for u in 0..d {
                    let i = sigmoid(row[u]);
                    let f = sigmoid(row[d + u]);
                    let g = row[2 * d + u].tanh();
                    let o = sigmoid(row[3 * d + u]);
                    let c = v.at(0, d + u);
                    let tanh_c = c.tanh();
                    let gh = grad.at(0, u);
                    let gc = grad.at(0, d + u);
                    let dc = gc + gh * o * (1.0 - tanh_c * tanh_c);
                    d_pre.set(0, u, dc * g * i * (1.0 - i));
                    d_pre.set(0, d + u, dc * c_prev.at(0, u) * f * (1.0 - f));
                    d_pre.set(0, 2 * d + u, dc * i * (1.0 - g * g));
                    d_pre.set(0, 3 * d + u, gh * tanh_c * o * (1.0 - o));
                    d_cell.set(0, u, dc * f);
                }
                ps[0].accumulate_grad(&d_pre);
                ps[1].accumulate_grad(&d_cell);
            })),
            "lstm_activation",
        ))
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Reverse accumulation from a 1x1 root. Repeated calls without zeroing
    /// accumulate additively.
    pub fn backward(&self) -> Result<()> {
        if self.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward: root must be 1x1, got {}x{}",
                self.rows(),
                self.cols()
            )));
        }
        let order = self.topo_order();
        // Interior nodes are per-graph scratch: reset them so a repeated
        // backward contributes exactly one more copy to the leaves.
        for node in &order {
            if !node.data.parents.is_empty() {
                node.data.grad.borrow_mut().fill(0.0);
            }
        }
        self.accumulate_grad(&Mat::from_vec(1, 1, vec![1.0]));
        for node in order.iter().rev() {
            if let Some(backward) = &node.data.backward {
                let value = node.data.value.borrow();
                let grad = node.data.grad.borrow();
                backward(&value, &grad, &node.data.parents);
            }
        }
        Ok(())
    }

    /// Post-order over parent edges; root comes last.
    fn topo_order(&self) -> Vec<Node> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const NodeData> = HashSet::new();
        let mut stack: Vec<(Node, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            let ptr = Rc::as_ptr(&node.data);
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(ptr) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.data.parents {
                if !visited.contains(&Rc::as_ptr(&p.data)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

// ── Parameter store ─────────────────────────────────────────────────────

/// Named collection of trainable leaves for one model direction.
///
/// Names are stable across checkpoint round-trips; the text format keeps 17
/// significant digits so values survive save/load bit-identically.
#[derive(Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Node>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Mat) -> Result<Node> {
        if name.contains(char::is_whitespace) {
            return Err(Error::contract(format!(
                "parameter name {name:?} contains whitespace"
            )));
        }
        if self.params.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        let node = Node::param(value);
        self.params.insert(name.to_string(), node.clone());
        Ok(node)
    }

    pub fn get(&self, name: &str) -> Result<&Node> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Node)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&self) {
        for node in self.params.values() {
            node.zero_grad();
        }
    }

    /// Total number of scalar coordinates.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|n| n.value().len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        self.write_to(&mut out)?;
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn write_to(&self, out: &mut String) -> Result<()> {
        for (name, node) in &self.params {
            let v = node.value();
            write!(out, "{} {} {}", name, v.rows(), v.cols()).unwrap();
            for x in v.data() {
                write!(out, " {:.17e}", x).unwrap();
            }
            out.push('\n');
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let file = std::fs::File::open(path)?;
        Self::read_from(BufReader::new(file), &path.display().to_string())
    }

    pub fn read_from(reader: impl BufRead, path: &str) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse_err = |msg: &str| Error::Parse {
                path: path.to_string(),
                line: lineno + 1,
                msg: msg.to_string(),
            };
            let name = parts.next().ok_or_else(|| parse_err("missing name"))?;
            let rows: usize = parts
                .next()
                .ok_or_else(|| parse_err("missing rows"))?
                .parse()
                .map_err(|_| parse_err("bad row count"))?;
            let cols: usize = parts
                .next()
                .ok_or_else(|| parse_err("missing cols"))?
                .parse()
                .map_err(|_| parse_err("bad col count"))?;
            let mut data = Vec::with_capacity(rows * cols);
            for p in parts {
                data.push(
                    p.parse::<f64>()
                        .map_err(|_| parse_err(&format!("bad value {p:?}")))?,
                );
            }
            if data.len() != rows * cols {
                return Err(parse_err(&format!(
                    "expected {} values, found {}",
                    rows * cols,
                    data.len()
                )));
            }
            store
                .insert(name, Mat::from_vec(rows, cols, data))
                .map_err(|e| parse_err(&e.to_string()))?;
        }
        Ok(store)
    }
}

// ── Gradient checking ───────────────────────────────────────────────────

/// Outcome of one finite-difference sweep over a store.
#[derive(Debug)]
pub struct GradCheckReport {
    /// Max relative error per parameter name.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    if diff <= 1e-10 {
        return 0.0;
    }
    diff / a.abs().max(n.abs()).max(1e-8)
}

/// Compare analytic gradients of a deterministic scalar loss against central
/// finite differences, parameter by parameter.
pub fn check_gradients<F>(
    mut f: F,
    store: &ParamStore,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<Node>,
{
    store.zero_grads();
    let loss = f(store)?;
    if !loss.value().is_finite() {
        return Err(Error::numeric("check_gradients: non-finite loss"));
    }
    loss.backward()?;
    let analytic: BTreeMap<String, Mat> = store
        .iter()
        .map(|(name, node)| (name.to_string(), node.grad().clone()))
        .collect();

    let mut per_param = BTreeMap::new();
    let mut max_rel = 0.0f64;
    for (name, node) in store.iter() {
        let len = node.value().len();
        let mut worst = 0.0f64;
        for i in 0..len {
            let orig = node.value().data()[i];
            node.with_value_mut(|m| m.data_mut()[i] = orig + step);
            let plus = f(store)?.item();
            node.with_value_mut(|m| m.data_mut()[i] = orig - step);
            let minus = f(store)?.item();
            node.with_value_mut(|m| m.data_mut()[i] = orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::numeric("check_gradients: non-finite probe loss"));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[name].data()[i];
            worst = worst.max(rel_err(a, numeric));
        }
        max_rel = max_rel.max(worst);
        per_param.insert(name.to_string(), worst);
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        pass: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn matmul_identity() {
        let eye = Node::constant(Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let b = Node::constant(Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let out = eye.matmul(&b).unwrap();
        assert_eq!(out.value().data(), b.value().data());
    }

    #[test]
    fn matmul_hand_sum() {
        let a = Node::constant(Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = Node::constant(Mat::from_vec(2, 1, vec![1.0, 1.0]));
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Node::constant(Mat::zeros(2, 3));
        let b = Node::constant(Mat::zeros(2, 3));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.insert("a", random_mat(&mut rng, 3, 4)).unwrap();
        store.insert("b", random_mat(&mut rng, 4, 2)).unwrap();
        let report = check_gradients(
            |s| s.get("a")?.matmul(s.get("b")?).map(|n| n.sum()),
            &store,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_trivial_rows() {
        let x = Node::constant(Mat::from_vec(2, 2, vec![0.0, 0.0, 2.0f64.ln(), 0.0]));
        let y = x.softmax_rows().unwrap();
        let v = y.value();
        assert!((v.at(0, 0) - 0.5).abs() < 1e-12);
        assert!((v.at(0, 1) - 0.5).abs() < 1e-12);
        assert!((v.at(1, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((v.at(1, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_direct_formula_oracle() {
        // brute-force evaluation of exp/sum for row [1,2,3]
        let raw = [1.0f64, 2.0, 3.0];
        let sum: f64 = raw.iter().map(|x| x.exp()).sum();
        let expected: Vec<f64> = raw.iter().map(|x| x.exp() / sum).collect();
        let y = Node::constant(Mat::row_vec(raw.to_vec()))
            .softmax_rows()
            .unwrap();
        for (got, want) in y.value().data().iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Node::constant(Mat::row_vec(vec![f64::NAN, 0.0]));
        assert!(matches!(x.softmax_rows(), Err(Error::Numeric(_))));
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Node::constant(Mat::row_vec(vec![0.0]));
        assert!((x.sigmoid().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mse_identity_and_disjoint() {
        let a = Node::constant(Mat::row_vec(vec![0.3, -1.2, 4.0]));
        assert_eq!(a.mse(&a).unwrap().item(), 0.0);
        let p = Node::constant(Mat::row_vec(vec![1.0, 0.0]));
        let q = Node::constant(Mat::row_vec(vec![0.0, 1.0]));
        assert!((p.mse(&q).unwrap().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Mat::row_vec(vec![3.0])).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert!((x.grad().item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_constant_root_leaves_grads_zero() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Mat::row_vec(vec![2.0])).unwrap();
        let _unused = x.scale(3.0);
        let root = Node::scalar(5.0);
        root.backward().unwrap();
        assert_eq!(x.grad().item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let x = Node::constant(Mat::zeros(2, 2));
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_shared_subexpression_accumulates() {
        // loss = x*x + x*x -> d/dx = 4x
        let mut store = ParamStore::new();
        let x = store.insert("x", Mat::row_vec(vec![1.5])).unwrap();
        let sq = x.mul(&x).unwrap();
        let loss = sq.add(&sq).unwrap();
        loss.backward().unwrap();
        assert!((x.grad().item() - 6.0).abs() < 1e-12);
        let report = check_gradients(
            |s| {
                let x = s.get("x")?;
                let sq = x.mul(x)?;
                sq.add(&sq)
            },
            &store,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.pass);
    }

    #[test]
    fn constant_node_never_accumulates() {
        let c = Node::constant(Mat::row_vec(vec![2.0]));
        let loss = c.mul(&c).unwrap();
        loss.backward().unwrap();
        assert_eq!(c.grad().item(), 0.0);
    }

    #[test]
    fn repeated_backward_accumulates_additively() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Mat::row_vec(vec![3.0])).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert!((x.grad().item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn all_op_gradients_match_finite_differences_randomized() {
        // 100 randomized trials across every differentiable op.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..100 {
            let r = rng.gen_range(1..4usize);
            let c = rng.gen_range(1..4usize);
            let k = rng.gen_range(1..4usize);
            let mut store = ParamStore::new();
            store.insert("a", random_mat(&mut rng, r, c)).unwrap();
            store.insert("b", random_mat(&mut rng, r, c)).unwrap();
            store.insert("m", random_mat(&mut rng, c, k)).unwrap();
            store.insert("row", random_mat(&mut rng, 1, c)).unwrap();
            store.insert("s", random_mat(&mut rng, 1, 1)).unwrap();
            let ids: Vec<usize> = (0..3).map(|_| rng.gen_range(0..r)).collect();
            let report = check_gradients(
                |s| {
                    let a = s.get("a")?;
                    let b = s.get("b")?;
                    let m = s.get("m")?;
                    let row = s.get("row")?;
                    let sc = s.get("s")?;
                    let t1 = a.matmul(m)?.tanh().sum();
                    let t2 = a.add(b)?.sigmoid().mse(&b.softmax_rows()?)?;
                    let t3 = Node::concat_cols(&[a.clone(), b.mul(a)?])?
                        .softmax_rows()?
                        .sum();
                    let t4 = a.add_row(row)?.transpose().sum().scale(0.5);
                    let t5 = Node::mean_over(&[a.clone(), b.clone(), a.sub(b)?])?.sum();
                    let t6 = a.gather_rows(&ids)?.scale_by(sc)?.sum();
                    let t7 = Node::concat_rows(&[a.clone(), b.clone()])?.sum();
                    t1.add(&t2)?
                        .add(&t3)?
                        .add(&t4)?
                        .add(&t5)?
                        .add(&t6)?
                        .add(&t7)
                },
                &store,
                1e-4,
                1e-3,
            )
            .unwrap();
            assert!(
                report.pass,
                "trial {trial}: max rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn slice_cols_and_lstm_activation_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let d = rng.gen_range(1..4usize);
            let mut store = ParamStore::new();
            store.insert("pre", random_mat(&mut rng, 1, 4 * d)).unwrap();
            store.insert("cell", random_mat(&mut rng, 1, d)).unwrap();
            let report = check_gradients(
                |s| {
                    let hc = Node::lstm_activation(s.get("pre")?, s.get("cell")?)?;
                    let h = hc.slice_cols(0, d)?;
                    let c = hc.slice_cols(d, 2 * d)?;
                    h.mul(&h)?.sum().add(&c.tanh().sum())
                },
                &store,
                1e-4,
                1e-4,
            )
            .unwrap();
            assert!(report.pass, "max rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn lstm_activation_matches_unfused_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let d = 3;
        let pre = Node::constant(random_mat(&mut rng, 1, 4 * d));
        let cell = Node::constant(random_mat(&mut rng, 1, d));
        let fused = Node::lstm_activation(&pre, &cell).unwrap();
        let i = pre.slice_cols(0, d).unwrap().sigmoid();
        let f = pre.slice_cols(d, 2 * d).unwrap().sigmoid();
        let g = pre.slice_cols(2 * d, 3 * d).unwrap().tanh();
        let o = pre.slice_cols(3 * d, 4 * d).unwrap().sigmoid();
        let c = f.mul(&cell).unwrap().add(&i.mul(&g).unwrap()).unwrap();
        let h = o.mul(&c.tanh()).unwrap();
        for u in 0..d {
            assert!((fused.value().at(0, u) - h.value().at(0, u)).abs() < 1e-12);
            assert!((fused.value().at(0, d + u) - c.value().at(0, u)).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_gradient_and_values() {
        // uniform logits over 4 classes -> loss = ln 4
        let logits = Node::constant(Mat::zeros(2, 4));
        let loss = logits
            .cross_entropy_rows(&[1, 3], &[true, true])
            .unwrap();
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("l", random_mat(&mut rng, 3, 5)).unwrap();
        let report = check_gradients(
            |s| {
                s.get("l")?
                    .cross_entropy_rows(&[0, 4, 2], &[true, false, true])
            },
            &store,
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn cross_entropy_all_masked_is_contract_error() {
        let logits = Node::constant(Mat::zeros(2, 4));
        assert!(matches!(
            logits.cross_entropy_rows(&[0, 0], &[false, false]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Mat::row_vec(vec![2.0])).unwrap();
        let y = x.mul(&x).unwrap();
        let loss = y.detach().mul(&x).unwrap().sum();
        loss.backward().unwrap();
        // d/dx [const(4) * x] = 4, not 4 + 2*2*... through y
        assert!((x.grad().item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn check_gradients_quadratic_passes_tight_tol() {
        let mut store = ParamStore::new();
        store.insert("w", Mat::row_vec(vec![1.7])).unwrap();
        store.insert("ignored", Mat::row_vec(vec![0.4])).unwrap();
        let report = check_gradients(
            |s| {
                let w = s.get("w")?;
                w.mul(w)?.sum().scale(0.5).add(&Node::scalar(1.0))
            },
            &store,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        // parameter the loss ignores: analytic and numeric both zero
        assert_eq!(report.per_param["ignored"], 0.0);
    }

    #[test]
    fn param_store_round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.insert("w.a", random_mat(&mut rng, 3, 2)).unwrap();
        store
            .insert("w.b", Mat::row_vec(vec![-0.0, 1.0 / 3.0, 1e-300, 6.02e23]))
            .unwrap();
        let mut text = String::new();
        store.write_to(&mut text).unwrap();
        let loaded = ParamStore::read_from(text.as_bytes(), "mem").unwrap();
        for (name, node) in store.iter() {
            let a = node.value();
            let b = loaded.get(name).unwrap().value();
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn param_store_rejects_duplicates_and_bad_lines() {
        let mut store = ParamStore::new();
        store.insert("w", Mat::zeros(1, 1)).unwrap();
        assert!(store.insert("w", Mat::zeros(1, 1)).is_err());
        let bad = "w 2 2 1.0 2.0\n";
        let err = ParamStore::read_from(bad.as_bytes(), "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
