use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{dims2, Tensor};
use super::DiffError;

/// Additive logit offset applied to masked softmax entries.
pub const MASK_NEG: f64 = -1.0e9;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    Affine(usize, f64),
    ScaleBy(usize, usize),
    Shift(usize, usize),
    MulConst(usize, Vec<f64>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Sqrt(usize),
    MaskedSoftmax(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    GatherRows(usize, Vec<usize>),
    SegmentWeightedSum(usize, usize),
    SumSquares(usize),
    Reshape(usize),
    SliceRows(usize, usize),
    Select(usize, usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of primitive applications.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Adds the adjoint of `var` into `tensor.grad`.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<(), DiffError> {
        if var.tape != self.tape {
            return Err(DiffError::ForeignVar);
        }
        if !tensor.requires_grad() {
            return Ok(());
        }
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, DiffError> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(DiffError::ForeignVar);
        }
        Ok(v.id)
    }

    fn push(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        kind: Op,
        inputs: &[usize],
    ) -> Result<Var, DiffError> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { shape, value, op: kind, requires_grad });
        Ok(Var { tape: self.id, id: self.nodes.len() - 1 })
    }

    /// Records a copy of `tensor` as a leaf.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.values().to_vec(),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad(),
        });
        Var { tape: self.id, id: self.nodes.len() - 1 }
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var, DiffError> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(DiffError::ShapeMismatch { op: "constant", left: shape, right: vec![values.len()] });
        }
        self.push("constant", shape, values, Op::Const, &[])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.id].value[0]
    }

    /// Copies a recorded value out as a constant tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded values are finite").constant()
    }

    fn dims(&self, i: usize) -> (usize, usize) {
        dims2(&self.nodes[i].shape)
    }

    fn mismatch(&self, op: &'static str, a: usize, b: usize) -> DiffError {
        DiffError::ShapeMismatch { op, left: self.nodes[a].shape.clone(), right: self.nodes[b].shape.clone() }
    }

    /// `a · b` for `a: m x k`, `b: k x n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.dims(ai);
        let (k2, n) = self.dims(bi);
        if k != k2 {
            return Err(self.mismatch("matmul", ai, bi));
        }
        let av = &self.nodes[ai].value;
        let bv = &self.nodes[bi].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        self.push("matmul", vec![m, n], out, Op::MatMul(ai, bi), &[ai, bi])
    }

    /// `a · bᵀ` for `a: m x k`, `b: n x k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.dims(ai);
        let (n, k2) = self.dims(bi);
        if k != k2 {
            return Err(self.mismatch("matmul_t", ai, bi));
        }
        let av = &self.nodes[ai].value;
        let bv = &self.nodes[bi].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        self.push("matmul_t", vec![m, n], out, Op::MatMulT(ai, bi), &[ai, bi])
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        kind: fn(usize, usize) -> Op,
    ) -> Result<Var, DiffError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(self.mismatch(op, ai, bi));
        }
        let out = self.nodes[ai].value.iter().zip(&self.nodes[bi].value).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.nodes[ai].shape.clone();
        self.push(op, shape, out, kind(ai, bi), &[ai, bi])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Adds the length-`n` vector `b` to every row of `a: m x n`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, n) = self.dims(ai);
        if self.nodes[bi].value.len() != n {
            return Err(self.mismatch("add_row", ai, bi));
        }
        let bv = &self.nodes[bi].value;
        let mut out = self.nodes[ai].value.clone();
        for r in 0..m {
            for (o, y) in out[r * n..(r + 1) * n].iter_mut().zip(bv) {
                *o += y;
            }
        }
        let shape = self.nodes[ai].shape.clone();
        self.push("add_row", shape, out, Op::AddRow(ai, bi), &[ai, bi])
    }

    /// Adds `b[r]` to every entry of row `r` of `a: m x n`.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, n) = self.dims(ai);
        if self.nodes[bi].value.len() != m {
            return Err(self.mismatch("add_col", ai, bi));
        }
        let bv = &self.nodes[bi].value;
        let mut out = self.nodes[ai].value.clone();
        for r in 0..m {
            for o in &mut out[r * n..(r + 1) * n] {
                *o += bv[r];
            }
        }
        let shape = self.nodes[ai].shape.clone();
        self.push("add_col", shape, out, Op::AddCol(ai, bi), &[ai, bi])
    }

    /// `scale · a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, DiffError> {
        let ai = self.check(a)?;
        let out = self.nodes[ai].value.iter().map(|x| scale * x + shift).collect();
        let shape = self.nodes[ai].shape.clone();
        self.push("affine", shape, out, Op::Affine(ai, scale), &[ai])
    }

    /// Multiplies `a` by the recorded scalar `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, DiffError> {
        let (ai, si) = (self.check(a)?, self.check(s)?);
        if self.nodes[si].value.len() != 1 {
            return Err(self.mismatch("scale_by", ai, si));
        }
        let sv = self.nodes[si].value[0];
        let out = self.nodes[ai].value.iter().map(|x| sv * x).collect();
        let shape = self.nodes[ai].shape.clone();
        self.push("scale_by", shape, out, Op::ScaleBy(ai, si), &[ai, si])
    }

    /// Adds the recorded scalar `s` to every entry of `a`.
    pub fn shift(&mut self, a: Var, s: Var) -> Result<Var, DiffError> {
        let (ai, si) = (self.check(a)?, self.check(s)?);
        if self.nodes[si].value.len() != 1 {
            return Err(self.mismatch("shift", ai, si));
        }
        let sv = self.nodes[si].value[0];
        let out = self.nodes[ai].value.iter().map(|x| sv + x).collect();
        let shape = self.nodes[ai].shape.clone();
        self.push("shift", shape, out, Op::Shift(ai, si), &[ai, si])
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var, DiffError> {
        let ai = self.check(a)?;
        if factors.len() != self.nodes[ai].value.len() {
            return Err(DiffError::ShapeMismatch {
                op: "mul_const",
                left: self.nodes[ai].shape.clone(),
                right: vec![factors.len()],
            });
        }
        let out = self.nodes[ai].value.iter().zip(&factors).map(|(x, f)| x * f).collect();
        let shape = self.nodes[ai].shape.clone();
        self.push("mul_const", shape, out, Op::MulConst(ai, factors), &[ai])
    }

    /// Concatenates along the last axis; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let Some(&first) = ids.first() else {
            return Err(DiffError::Empty { op: "concat_cols" });
        };
        let (m, _) = self.dims(first);
        let mut total = 0;
        for &i in &ids {
            let (r, c) = self.dims(i);
            if r != m {
                return Err(self.mismatch("concat_cols", first, i));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &i in &ids {
                let (_, c) = self.dims(i);
                out.extend_from_slice(&self.nodes[i].value[r * c..(r + 1) * c]);
            }
        }
        let shape = if self.nodes[first].shape.len() == 2 { vec![m, total] } else { vec![total] };
        self.push("concat_cols", shape, out, Op::ConcatCols(ids.clone()), &ids)
    }

    /// Stacks rows; all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let Some(&first) = ids.first() else {
            return Err(DiffError::Empty { op: "concat_rows" });
        };
        let (_, n) = self.dims(first);
        let mut rows = 0;
        let mut out = Vec::new();
        for &i in &ids {
            let (r, c) = self.dims(i);
            if c != n {
                return Err(self.mismatch("concat_rows", first, i));
            }
            rows += r;
            out.extend_from_slice(&self.nodes[i].value);
        }
        self.push("concat_rows", vec![rows, n], out, Op::ConcatRows(ids.clone()), &ids)
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        kind: fn(usize) -> Op,
    ) -> Result<Var, DiffError> {
        let ai = self.check(a)?;
        let out = self.nodes[ai].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[ai].shape.clone();
        self.push(op, shape, out, kind(ai), &[ai])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        let ai = self.check(a)?;
        if self.nodes[ai].value.iter().any(|&x| x <= 0.0) {
            return Err(DiffError::Domain { op: "log" });
        }
        self.unary("log", a, f64::ln, Op::Log)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary("softplus", a, softplus, Op::Softplus)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var, DiffError> {
        let ai = self.check(a)?;
        if self.nodes[ai].value.iter().any(|&x| x < 0.0) {
            return Err(DiffError::Domain { op: "sqrt" });
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt)
    }

    /// Row-wise softmax over the last axis. `visible[r * n + c] == false`
    /// adds [`MASK_NEG`] to the logit, which drives the weight to exactly 0.
    pub fn masked_softmax(&mut self, a: Var, visible: &[bool]) -> Result<Var, DiffError> {
        let ai = self.check(a)?;
        let (m, n) = self.dims(ai);
        if visible.len() != m * n {
            return Err(DiffError::ShapeMismatch {
                op: "masked_softmax",
                left: self.nodes[ai].shape.clone(),
                right: vec![visible.len()],
            });
        }
        let av = &self.nodes[ai].value;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let vis = &visible[r * n..(r + 1) * n];
            if !vis.iter().any(|&v| v) {
                return Err(DiffError::FullyMasked { row: r });
            }
            let logits: Vec<f64> =
                av[r * n..(r + 1) * n].iter().zip(vis).map(|(&x, &v)| if v { x } else { x + MASK_NEG }).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let row = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for (o, l) in row.iter_mut().zip(&logits) {
                *o = (l - max).exp();
                total += *o;
            }
            for o in row.iter_mut() {
                *o /= total;
            }
        }
        let shape = self.nodes[ai].shape.clone();
        self.push("masked_softmax", shape, out, Op::MaskedSoftmax(ai), &[ai])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].value.iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(ai), &[ai])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let ai = self.check(a)?;
        let n = self.nodes[ai].value.len();
        if n == 0 {
            return Err(DiffError::Empty { op: "mean" });
        }
        let s = self.nodes[ai].value.iter().sum::<f64>() / n as f64;
        self.push("mean", Vec::new(), vec![s], Op::Mean(ai), &[ai])
    }

    /// Sums over the last axis: `m x n -> m`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let ai = self.check(a)?;
        let (m, n) = self.dims(ai);
        let av = &self.nodes[ai].value;
        let out = (0..m).map(|r| av[r * n..(r + 1) * n].iter().sum()).collect();
        self.push("row_sum", vec![m], out, Op::RowSum(ai), &[ai])
    }

    /// Sum of squared entries, as a scalar.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var, DiffError> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].value.iter().map(|x| x * x).sum();
        self.push("sum_squares", Vec::new(), vec![s], Op::SumSquares(ai), &[ai])
    }

    /// Selects rows of `a: m x n` by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, DiffError> {
        let ai = self.check(a)?;
        let (m, n) = self.dims(ai);
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(DiffError::IndexOutOfRange { op: "gather_rows", index: bad, len: m });
        }
        let av = &self.nodes[ai].value;
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            out.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        self.push("gather_rows", vec![index.len(), n], out, Op::GatherRows(ai, index.to_vec()), &[ai])
    }

    /// `out[i] = Σ_p w[i, p] · g[i·P + p]` for `w: N x P`, `g: (N·P) x d`.
    pub fn segment_weighted_sum(&mut self, w: Var, g: Var) -> Result<Var, DiffError> {
        let (wi, gi) = (self.check(w)?, self.check(g)?);
        let (nseg, p) = self.dims(wi);
        let (rows, d) = self.dims(gi);
        if rows != nseg * p {
            return Err(self.mismatch("segment_weighted_sum", wi, gi));
        }
        let wv = &self.nodes[wi].value;
        let gv = &self.nodes[gi].value;
        let mut out = vec![0.0; nseg * d];
        for i in 0..nseg {
            let orow = &mut out[i * d..(i + 1) * d];
            for k in 0..p {
                let weight = wv[i * p + k];
                if weight == 0.0 {
                    continue;
                }
                let r = i * p + k;
                for (o, x) in orow.iter_mut().zip(&gv[r * d..(r + 1) * d]) {
                    *o += weight * x;
                }
            }
        }
        self.push("segment_weighted_sum", vec![nseg, d], out, Op::SegmentWeightedSum(wi, gi), &[wi, gi])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let ai = self.check(a)?;
        let n: usize = shape.iter().product();
        if n != self.nodes[ai].value.len() || shape.len() > 2 {
            return Err(DiffError::ShapeMismatch { op: "reshape", left: self.nodes[ai].shape.clone(), right: shape });
        }
        let out = self.nodes[ai].value.clone();
        self.push("reshape", shape, out, Op::Reshape(ai), &[ai])
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let ai = self.check(a)?;
        let (m, n) = self.dims(ai);
        if start >= end || end > m {
            return Err(DiffError::IndexOutOfRange { op: "slice_rows", index: end, len: m });
        }
        let out = self.nodes[ai].value[start * n..end * n].to_vec();
        self.push("slice_rows", vec![end - start, n], out, Op::SliceRows(ai, start), &[ai])
    }

    /// Entry `index` of the flattened tensor, as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var, DiffError> {
        let ai = self.check(a)?;
        let len = self.nodes[ai].value.len();
        if index >= len {
            return Err(DiffError::IndexOutOfRange { op: "select", index, len });
        }
        let v = self.nodes[ai].value[index];
        self.push("select", Vec::new(), vec![v], Op::Select(ai, index), &[ai])
    }

    /// Reverse sweep from a scalar `loss`. The tape itself is not modified,
    /// so the sweep can be repeated.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let li = self.check(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(DiffError::NotScalar { shape: self.nodes[li].shape.clone() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        for id in (0..=li).rev() {
            let Some(dy) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(dy);
                continue;
            }
            self.propagate(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[i].requires_grad {
                return;
            }
            let g = grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()]);
            f(g);
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&nodes[*a].shape);
                let (_, n) = dims2(&nodes[*b].shape);
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |g| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let drow = &dy[i * n..(i + 1) * n];
                            g[i * k + p] += drow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                g[p * n + j] += x * dy[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims2(&nodes[*a].shape);
                let (n, _) = dims2(&nodes[*b].shape);
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |g| {
                    for i in 0..m {
                        for j in 0..n {
                            let d = dy[i * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                g[i * k + p] += d * bv[j * k + p];
                            }
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..m {
                        for j in 0..n {
                            let d = dy[i * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                g[j * k + p] += d * av[i * k + p];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * x;
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * x;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let (_, n) = dims2(&nodes[*a].shape);
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % n] += d;
                    }
                });
            }
            Op::AddCol(a, b) => {
                let (_, n) = dims2(&nodes[*a].shape);
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i / n] += d;
                    }
                });
            }
            Op::Affine(a, scale) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += scale * d));
            }
            Op::ScaleBy(a, s) => {
                let sv = nodes[*s].value[0];
                let av = &nodes[*a].value;
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += sv * d));
                acc(*s, &mut |g| g[0] += dy.iter().zip(av).map(|(d, x)| d * x).sum::<f64>());
            }
            Op::Shift(a, s) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*s, &mut |g| g[0] += dy.iter().sum::<f64>());
            }
            Op::MulConst(a, factors) => {
                acc(*a, &mut |g| {
                    for ((g, d), f) in g.iter_mut().zip(dy).zip(factors) {
                        *g += d * f;
                    }
                });
            }
            Op::ConcatCols(ids) => {
                let (m, total) = dims2(&node.shape);
                let mut offset = 0;
                for &i in ids {
                    let (_, c) = dims2(&nodes[i].shape);
                    acc(i, &mut |g| {
                        for r in 0..m {
                            for j in 0..c {
                                g[r * c + j] += dy[r * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for &i in ids {
                    let len = nodes[i].value.len();
                    acc(i, &mut |g| {
                        for (g, d) in g.iter_mut().zip(&dy[offset..offset + len]) {
                            *g += d;
                        }
                    });
                    offset += len;
                }
            }
            Op::Sigmoid(a) => {
                acc(*a, &mut |g| {
                    for ((g, d), s) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * s * (1.0 - s);
                    }
                });
            }
            Op::Exp(a) => {
                acc(*a, &mut |g| {
                    for ((g, d), e) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * e;
                    }
                });
            }
            Op::Log(a) => {
                let av = &nodes[*a].value;
                acc(*a, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(av) {
                        *g += d / x;
                    }
                });
            }
            Op::Softplus(a) => {
                let av = &nodes[*a].value;
                acc(*a, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * sigmoid(*x);
                    }
                });
            }
            Op::Sqrt(a) => {
                acc(*a, &mut |g| {
                    for ((g, d), s) in g.iter_mut().zip(dy).zip(y) {
                        if *s > 0.0 {
                            *g += d * 0.5 / s;
                        }
                    }
                });
            }
            Op::MaskedSoftmax(a) => {
                let (m, n) = dims2(&node.shape);
                acc(*a, &mut |g| {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let dr = &dy[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0]));
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.len() as f64;
                acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
            Op::RowSum(a) => {
                let (_, n) = dims2(&nodes[*a].shape);
                acc(*a, &mut |g| {
                    for (i, g) in g.iter_mut().enumerate() {
                        *g += dy[i / n];
                    }
                });
            }
            Op::SumSquares(a) => {
                let av = &nodes[*a].value;
                acc(*a, &mut |g| {
                    for (g, x) in g.iter_mut().zip(av) {
                        *g += 2.0 * x * dy[0];
                    }
                });
            }
            Op::GatherRows(a, index) => {
                let (_, n) = dims2(&nodes[*a].shape);
                acc(*a, &mut |g| {
                    for (r, &i) in index.iter().enumerate() {
                        for j in 0..n {
                            g[i * n + j] += dy[r * n + j];
                        }
                    }
                });
            }
            Op::SegmentWeightedSum(w, src) => {
                let (nseg, p) = dims2(&nodes[*w].shape);
                let (_, d) = dims2(&nodes[*src].shape);
                let (wv, gv) = (&nodes[*w].value, &nodes[*src].value);
                acc(*w, &mut |g| {
                    for i in 0..nseg {
                        let drow = &dy[i * d..(i + 1) * d];
                        for k in 0..p {
                            let r = i * p + k;
                            g[r] += drow.iter().zip(&gv[r * d..(r + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                acc(*src, &mut |g| {
                    for i in 0..nseg {
                        for k in 0..p {
                            let r = i * p + k;
                            let weight = wv[r];
                            for j in 0..d {
                                g[r * d + j] += weight * dy[i * d + j];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::SliceRows(a, start) => {
                let (_, n) = dims2(&nodes[*a].shape);
                let off = start * n;
                acc(*a, &mut |g| {
                    for (j, d) in dy.iter().enumerate() {
                        g[off + j] += d;
                    }
                });
            }
            Op::Select(a, index) => {
                acc(*a, &mut |g| g[*index] += dy[0]);
            }
        }
    }
}
