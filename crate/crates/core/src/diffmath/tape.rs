use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    SegmentSoftmax { x: Var, masked: Vec<bool>, seg: usize },
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    SumRowGroups(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of primitive operations for reverse-mode differentiation.
///
/// Every operation appends one node; [`Tape::backward`] walks the record in
/// reverse and accumulates `+=` into each input, so a value consumed by
/// several operations receives the sum of its contributions.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn softmax_segments(x: &[f64], masked: &[bool], seg: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (s, chunk) in x.chunks(seg).enumerate() {
        let base = s * seg;
        let live = || (0..seg).filter(|&j| !masked[base + j]);
        let Some(max) = live().map(|j| chunk[j]).reduce(f64::max) else {
            continue;
        };
        let mut total = 0.0;
        for j in live() {
            let e = (chunk[j] - max).exp();
            out[base + j] = e;
            total += e;
        }
        for j in live() {
            out[base + j] /= total;
        }
    }
    out
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it participates in differentiation iff `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op_name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (tm, tr) = (self.value(m), self.value(row));
        let n = tm.cols();
        if tr.numel() != n {
            return Err(shape_err("add_row", tm, tr));
        }
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tr.data()[i % n])
            .collect();
        let out = Tensor::new(tm.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(m, row), &[m, row]))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[x])
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "leaky_relu slope must lie in (0, 1), got {slope}"
            )));
        }
        Ok(self.map(x, |v| if v >= 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, f64::ln, Op::Ln(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Softmax over a vector with an additive `{0, -inf}` mask.
    ///
    /// Masked entries come out as exactly zero. At least one entry must be
    /// unmasked.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[f64]) -> Result<Var> {
        let n = self.value(logits).numel();
        if mask.len() != n {
            return Err(Error::Shape {
                op: "masked_softmax",
                left: self.value(logits).shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let masked = mask
            .iter()
            .map(|&m| match m {
                0.0 => Ok(false),
                m if m == f64::NEG_INFINITY => Ok(true),
                other => Err(Error::InvalidMask(format!("entries must be 0 or -inf, got {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if masked.iter().all(|&m| m) {
            return Err(Error::InvalidMask("every entry is masked".into()));
        }
        self.segment_softmax(logits, &masked, n)
    }

    /// Softmax over consecutive segments of `seg` elements (row-major order).
    ///
    /// `masked[i] == true` removes element `i` from its segment. A segment
    /// whose elements are all masked produces zeros.
    pub fn segment_softmax(&mut self, x: Var, masked: &[bool], seg: usize) -> Result<Var> {
        let tx = self.value(x);
        if seg == 0 || tx.numel() % seg != 0 || masked.len() != tx.numel() {
            return Err(Error::Shape {
                op: "segment_softmax",
                left: tx.shape().to_vec(),
                right: vec![masked.len(), seg],
            });
        }
        let data = softmax_segments(tx.data(), masked, seg);
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::SegmentSoftmax {
                x,
                masked: masked.to_vec(),
                seg,
            },
            &[x],
        ))
    }

    /// Flattens and concatenates into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of nothing".into()));
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|v| self.value(*v).data().iter().copied())
            .collect();
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), parts))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        };
        let rows = self.value(*first).rows();
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows || t.shape().len() != 2 {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks equal-length vectors (or `1 × n` rows) into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(first) = rows.first() else {
            return Err(Error::InvalidArgument("stack_rows of nothing".into()));
        };
        let n = self.value(*first).numel();
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            let t = self.value(*r);
            if t.numel() != n {
                return Err(shape_err("stack_rows", self.value(*first), t));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows.len(), n, data)?;
        Ok(self.push(out, Op::StackRows(rows.to_vec()), rows))
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::InvalidArgument(format!(
                    "gather_rows: row {i} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::matrix(idx.len(), cols, data)?;
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let r = self.gather_rows(x, &[i])?;
        let n = self.value(r).numel();
        self.reshape(r, vec![n])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: tx.shape().to_vec(),
                right: vec![],
            });
        }
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let out = Tensor::matrix(c, r, transpose_raw(tx.data(), r, c))?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(shape, tx.data().to_vec()).map_err(|_| Error::Shape {
            op: "reshape",
            left: tx.shape().to_vec(),
            right: vec![tx.numel()],
        })?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Treats a vector as a `1 × n` matrix.
    pub fn as_row(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.reshape(x, vec![1, n])
    }

    pub fn as_col(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.reshape(x, vec![n, 1])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums each run of `group` consecutive rows: `(G·group) × n → G × n`.
    pub fn sum_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        if group == 0 || rows % group != 0 {
            return Err(Error::Shape {
                op: "sum_row_groups",
                left: tx.shape().to_vec(),
                right: vec![group],
            });
        }
        let mut data = vec![0.0; rows / group * cols];
        for r in 0..rows {
            let g = r / group;
            for (o, v) in data[g * cols..(g + 1) * cols].iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        let out = Tensor::matrix(rows / group, cols, data)?;
        Ok(self.push(out, Op::SumRowGroups(x, group), &[x]))
    }

    /// Dot product of two equal-length vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Reverse pass from a scalar output.
    ///
    /// Populates `grad` on every `requires_grad` leaf reachable from `loss`.
    /// Calling it twice accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let seed = self.value(loss);
        if seed.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: seed.shape().to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let value = &mut self.nodes[i].value;
            if value.requires_grad() {
                let merged = match value.grad() {
                    Some(prev) => prev.iter().zip(&g).map(|(a, b)| a + b).collect(),
                    None => g,
                };
                value.set_grad(merged);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut acc = |v: Var, contrib: &dyn Fn(usize) -> f64| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let n = nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            for (k, s) in slot.iter_mut().enumerate() {
                *s += contrib(k);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if nodes[a.0].needs_grad {
                    let bt = transpose_raw(tb.data(), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    acc(*a, &|j| da[j]);
                }
                if nodes[b.0].needs_grad {
                    let at = transpose_raw(ta.data(), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    acc(*b, &|j| db[j]);
                }
            }
            Op::Add(a, b) => {
                acc(*a, &|j| g[j]);
                acc(*b, &|j| g[j]);
            }
            Op::Sub(a, b) => {
                acc(*a, &|j| g[j]);
                acc(*b, &|j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &|j| g[j] * db[j]);
                acc(*b, &|j| g[j] * da[j]);
            }
            Op::AddRow(m, row) => {
                acc(*m, &|j| g[j]);
                let n = out.cols();
                let mut col_sums = vec![0.0; n];
                for (j, v) in g.iter().enumerate() {
                    col_sums[j % n] += v;
                }
                acc(*row, &|j| col_sums[j]);
            }
            Op::Affine(x, scale) => acc(*x, &|j| scale * g[j]),
            Op::Tanh(x) => {
                let y = out.data();
                acc(*x, &|j| g[j] * (1.0 - y[j] * y[j]));
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(*x, &|j| g[j] * y[j] * (1.0 - y[j]));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &|j| if xv[j] > 0.0 { g[j] } else { slope * g[j] });
            }
            Op::Exp(x) => {
                let y = out.data();
                acc(*x, &|j| g[j] * y[j]);
            }
            Op::Ln(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &|j| g[j] / xv[j]);
            }
            Op::Clamp(x, lo, hi) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &|j| if xv[j] >= *lo && xv[j] <= *hi { g[j] } else { 0.0 });
            }
            Op::SegmentSoftmax { x, masked, seg } => {
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for s in 0..y.len() / seg {
                    let range = s * seg..(s + 1) * seg;
                    let inner: f64 = range.clone().map(|j| y[j] * g[j]).sum();
                    for j in range {
                        if !masked[j] {
                            dx[j] = y[j] * (g[j] - inner);
                        }
                    }
                }
                acc(*x, &|j| dx[j]);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    let o = offset;
                    acc(*p, &|j| g[o + j]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let c = nodes[p.0].value.cols();
                    let o = offset;
                    acc(*p, &|j| g[(j / c) * total + o + j % c]);
                    offset += c;
                }
            }
            Op::StackRows(rows) => {
                let n = out.cols();
                for (r, v) in rows.iter().enumerate() {
                    acc(*v, &|j| g[r * n + j]);
                }
            }
            Op::GatherRows(x, idx) => {
                let cols = out.cols();
                let mut dx = vec![0.0; nodes[x.0].value.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dx[src * cols + c] += g[r * cols + c];
                    }
                }
                acc(*x, &|j| dx[j]);
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let gt = transpose_raw(g, r, c);
                acc(*x, &|j| gt[j]);
            }
            Op::Reshape(x) => acc(*x, &|j| g[j]),
            Op::Sum(x) => acc(*x, &|_| g[0]),
            Op::SumRowGroups(x, group) => {
                let cols = out.cols();
                acc(*x, &|j| g[(j / cols / group) * cols + j % cols]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::eye(2));
        let m = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let p = t.matmul(i, m).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0; 3]));
        let y = t.masked_softmax(x, &[0.0; 3]).unwrap();
        for v in t.value(y).data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }

        let x = t.constant(Tensor::vector(vec![5.0, 2.0, 9.0]));
        let y = t.masked_softmax(x, &[0.0, 0.0, f64::NEG_INFINITY]).unwrap();
        let e = (3.0f64).exp();
        let v = t.value(y).data();
        assert_eq!(v[2], 0.0);
        assert_abs_diff_eq!(v[0], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 1.0 / (e + 1.0), epsilon = 1e-15);

        let x = t.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
        let y = t.masked_softmax(x, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(t.value(y).data()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value(y).data()[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_masks() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let inf = f64::NEG_INFINITY;
        assert!(matches!(t.masked_softmax(x, &[inf, inf]), Err(Error::InvalidMask(_))));
        assert!(matches!(t.masked_softmax(x, &[0.0, 1.0]), Err(Error::InvalidMask(_))));
    }

    #[test]
    fn leaky_relu_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![3.0, -5.0]));
        let y = t.leaky_relu(x, 0.2).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, -1.0]);
        assert!(t.leaky_relu(x, 1.5).is_err());
    }

    #[test]
    fn leaky_relu_subgradient_at_zero_is_slope() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.0]));
        let y = t.leaky_relu(x, 0.01).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.01]);
    }

    #[test]
    fn sigmoid_and_concat() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z);
        assert_eq!(t.value(s).data(), &[0.5]);
        let a = t.constant(Tensor::vector(vec![1.0]));
        let b = t.constant(Tensor::vector(vec![2.0, 3.0]));
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx (x*x + x) = 2x + 1
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![3.0]));
        let sq = t.mul(x, x).unwrap();
        let y = t.add(sq, x).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_grad() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = t.param(Tensor::vector(vec![1.0, 1.0]));
        let d = t.dot(c, p).unwrap();
        t.backward(d).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn segment_softmax_empty_segment_is_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let y = t.segment_softmax(x, &[true, true, false, false], 2).unwrap();
        let v = t.value(y).data().to_vec();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert_abs_diff_eq!(v[2] + v[3], 1.0, epsilon = 1e-15);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap()[0], 0.0);
    }
}
