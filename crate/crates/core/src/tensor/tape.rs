use super::{Tensor, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    AddBias(usize, usize),
    Concat { parts: Vec<usize>, axis: usize },
    Reshape(usize),
    Tile { src: usize, rows: usize },
    GatherRows { src: usize, idx: Vec<usize> },
    NormalizeRows { src: usize, norms: Vec<f64> },
    RowDot(usize, usize),
    Sum(usize),
    Mean(usize),
    SoftmaxCe { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    Mse(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one [`Tape::backward`] call, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Add the adjoint of `v` into `target`'s gradient buffer. A var that the
    /// loss does not depend on contributes zeros.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.len()]),
        }
    }
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// a[m×k] · b[n×k]ᵀ
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// a[k×m]ᵀ · b[k×n]
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn add_into(dst: &mut Option<Vec<f64>>, g: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *dst = Some(g.to_vec()),
    }
}

/// Numerically stable softmax of one row of logits.
pub(crate) fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_grad())
    }

    /// Record a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on a leaf by previous backward calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = self.needs(inputs);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a.0, b.0), "matmul", &[a.0, b.0])
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_t")?;
        let (n, k2) = self.matrix_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::dim("matmul_t", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let out = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a.0, b.0), "matmul_t", &[a.0, b.0])
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, op, name, &[a.0, b.0])
    }

    fn map(&mut self, a: Var, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect());
        self.push(t, op, name, &[a.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a.0, b.0), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.map(a, "scale", Op::Scale(a.0, alpha), |x| alpha * x)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, "tanh", Op::Tanh(a.0), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, "relu", Op::Relu(a.0), |x| x.max(0.0))
    }

    /// Add a bias vector to every row of `a[m×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "add_bias")?;
        if self.value(bias).len() != n {
            return Err(Error::dim(
                "add_bias",
                format!("bias of length {} for {n} columns", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.push(Tensor::from_parts(vec![m, n], data), Op::AddBias(a.0, bias.0), "add_bias", &[a.0, bias.0])
    }

    /// Concatenate along `axis`. Vectors concatenate along axis 0; matrices
    /// along rows (0) or columns (1).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat parts"));
        }
        let all_vec = parts.iter().all(|&p| self.value(p).shape().len() == 1);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        if all_vec {
            if axis != 0 {
                return Err(Error::dim("concat", "vectors only concatenate along axis 0"));
            }
            let data: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).data().to_vec()).collect();
            let n = data.len();
            return self.push(Tensor::from_parts(vec![n], data), Op::Concat { parts: ids, axis }, "concat", &parts_ids(parts));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.matrix_dims(p, "concat"))
            .collect::<Result<_>>()?;
        match axis {
            0 => {
                let cols = dims[0].1;
                if dims.iter().any(|d| d.1 != cols) {
                    return Err(Error::dim("concat", format!("column extents differ: {dims:?}")));
                }
                let rows = dims.iter().map(|d| d.0).sum();
                let data: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).data().to_vec()).collect();
                self.push(Tensor::from_parts(vec![rows, cols], data), Op::Concat { parts: ids, axis }, "concat", &parts_ids(parts))
            }
            1 => {
                let rows = dims[0].0;
                if dims.iter().any(|d| d.0 != rows) {
                    return Err(Error::dim("concat", format!("row extents differ: {dims:?}")));
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                self.push(Tensor::from_parts(vec![rows, cols], data), Op::Concat { parts: ids, axis }, "concat", &parts_ids(parts))
            }
            _ => Err(Error::dim("concat", format!("axis {axis} out of range"))),
        }
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("{:?} to {shape:?}", self.value(a).shape()),
            ));
        }
        let t = Tensor::from_parts(shape.to_vec(), self.value(a).data().to_vec());
        self.push(t, Op::Reshape(a.0), "reshape", &[a.0])
    }

    /// Repeat a vector (or single row) `rows` times into a `[rows×n]` matrix.
    pub fn tile_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, n) = self.value(a).dims2();
        if r != 1 || rows == 0 {
            return Err(Error::dim("tile_rows", format!("cannot tile {:?} {rows} times", self.value(a).shape())));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        self.push(Tensor::from_parts(vec![rows, n], data), Op::Tile { src: a.0, rows }, "tile_rows", &[a.0])
    }

    /// Select rows of a matrix by index.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::Empty("gather_rows index"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {m}")));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), n], data);
        self.push(t, Op::GatherRows { src: a.0, idx: idx.to_vec() }, "gather_rows", &[a.0])
    }

    fn normalize_impl(&mut self, a: Var, name: &'static str) -> Result<Var> {
        let ta = self.value(a);
        let (rows, n) = ta.dims2();
        let mut data = ta.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= NORM_EPS {
                return Err(Error::Degenerate { op: name, norm });
            }
            row.iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, Op::NormalizeRows { src: a.0, norms }, name, &[a.0])
    }

    /// Scale a vector to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        if self.value(a).shape().len() != 1 {
            return Err(Error::dim("l2_normalize", format!("expected a vector, got {:?}", self.value(a).shape())));
        }
        self.normalize_impl(a, "l2_normalize")
    }

    /// Scale each row of a matrix to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims(a, "l2_normalize_rows")?;
        self.normalize_impl(a, "l2_normalize_rows")
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_similarity")?;
        let fa = self.reshape(a, &[self.value(a).len()])?;
        let fb = self.reshape(b, &[self.value(b).len()])?;
        let na = self.l2_normalize(fa)?;
        let nb = self.l2_normalize(fb)?;
        let p = self.mul(na, nb)?;
        self.sum(p)
    }

    /// Per-row dot products of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (m, n) = self.matrix_dims(a, "row_dot")?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let data = (0..m)
            .map(|i| (0..n).map(|j| ta[i * n + j] * tb[i * n + j]).sum())
            .collect();
        self.push(Tensor::from_parts(vec![m], data), Op::RowDot(a.0, b.0), "row_dot", &[a.0, b.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), "sum", &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.0), "mean", &[a.0])
    }

    /// Mean cross-entropy of `logits` (a `[K]` vector or `[B×K]` matrix)
    /// against class indices, one per row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, k) = t.dims2();
        if t.shape().len() > 2 {
            return Err(Error::dim("softmax_cross_entropy", format!("logits {:?}", t.shape())));
        }
        if labels.len() != rows {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let mut probs = vec![0.0; rows * k];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &t.data()[r * k..(r + 1) * k];
            softmax_row(row, &mut probs[r * k..(r + 1) * k]);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= rows as f64;
        let op = Op::SoftmaxCe {
            logits: logits.0,
            labels: labels.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(loss), op, "softmax_cross_entropy", &[logits.0])
    }

    /// Mean squared difference.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let s = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.push(Tensor::scalar(s), Op::Mse(pred.0, target.0), "mse", &[pred.0, target.0])
    }

    /// Reverse sweep from a scalar root. Adjoints of differentiable leaves are
    /// added to their gradient buffers on the tape, so repeated calls
    /// accumulate; the full adjoint table is returned as well.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                if let Some(g) = g {
                    node.value.accumulate_grad(g)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let live = |j: usize| self.nodes[j].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().1;
                if live(*a) {
                    add_into(&mut grads[*a], &mm_nt(g, val(*b).data(), m, n, k));
                }
                if live(*b) {
                    add_into(&mut grads[*b], &mm_tn(val(*a).data(), g, m, k, n));
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().0;
                if live(*a) {
                    add_into(&mut grads[*a], &mm(g, val(*b).data(), m, n, k));
                }
                if live(*b) {
                    add_into(&mut grads[*b], &mm_tn(g, val(*a).data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                if live(*a) {
                    add_into(&mut grads[*a], g);
                }
                if live(*b) {
                    add_into(&mut grads[*b], g);
                }
            }
            Op::Sub(a, b) => {
                if live(*a) {
                    add_into(&mut grads[*a], g);
                }
                if live(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    add_into(&mut grads[*b], &neg);
                }
            }
            Op::Mul(a, b) => {
                if live(*a) {
                    let d: Vec<f64> = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[*a], &d);
                }
                if live(*b) {
                    let d: Vec<f64> = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[*b], &d);
                }
            }
            Op::Scale(a, alpha) => {
                let d: Vec<f64> = g.iter().map(|x| alpha * x).collect();
                add_into(&mut grads[*a], &d);
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(x, y)| x * (1.0 - y * y))
                    .collect();
                add_into(&mut grads[*a], &d);
            }
            Op::Relu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                    .collect();
                add_into(&mut grads[*a], &d);
            }
            Op::AddBias(a, b) => {
                if live(*a) {
                    add_into(&mut grads[*a], g);
                }
                if live(*b) {
                    let n = val(*b).len();
                    let mut d = vec![0.0; n];
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                    add_into(&mut grads[*b], &d);
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).len();
                        if live(p) {
                            add_into(&mut grads[p], &g[off..off + n]);
                        }
                        off += n;
                    }
                } else {
                    let (rows, cols) = node.value.dims2();
                    let mut off = 0;
                    for &p in parts {
                        let w = val(p).dims2().1;
                        if live(p) {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                d.extend_from_slice(&g[r * cols + off..r * cols + off + w]);
                            }
                            add_into(&mut grads[p], &d);
                        }
                        off += w;
                    }
                }
            }
            Op::Reshape(a) => add_into(&mut grads[*a], g),
            Op::Tile { src, rows } => {
                let n = val(*src).len();
                let mut d = vec![0.0; n];
                for r in 0..*rows {
                    d.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(x, y)| *x += y);
                }
                add_into(&mut grads[*src], &d);
            }
            Op::GatherRows { src, idx } => {
                let (m, n) = val(*src).dims2();
                let mut d = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    d[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(x, y)| *x += y);
                }
                add_into(&mut grads[*src], &d);
            }
            Op::NormalizeRows { src, norms } => {
                let (_, n) = node.value.dims2();
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = (gs[j] - ys[j] * dot) / norm;
                    }
                }
                add_into(&mut grads[*src], &d);
            }
            Op::RowDot(a, b) => {
                let (_, n) = val(*a).dims2();
                for (x, y) in [(*a, *b), (*b, *a)] {
                    if live(x) {
                        let other = val(y).data();
                        let d: Vec<f64> = other
                            .iter()
                            .enumerate()
                            .map(|(j, v)| v * g[j / n])
                            .collect();
                        add_into(&mut grads[x], &d);
                    }
                }
            }
            Op::Sum(a) => add_into(&mut grads[*a], &vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                add_into(&mut grads[*a], &vec![g[0] / n as f64; n]);
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * k + y] -= scale;
                }
                add_into(&mut grads[*logits], &d);
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (val(*p).data(), val(*t).data());
                let c = 2.0 * g[0] / pv.len() as f64;
                let d: Vec<f64> = pv.iter().zip(tv).map(|(a, b)| c * (a - b)).collect();
                if live(*t) {
                    let neg: Vec<f64> = d.iter().map(|x| -x).collect();
                    add_into(&mut grads[*t], &neg);
                }
                if live(*p) {
                    add_into(&mut grads[*p], &d);
                }
            }
        }
    }
}

fn parts_ids(parts: &[Var]) -> Vec<usize> {
    parts.iter().map(|p| p.0).collect()
}
