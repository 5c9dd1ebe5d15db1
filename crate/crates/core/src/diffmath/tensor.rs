use super::DiffError;

/// Dense row-major array of `f64` with an accumulated-gradient companion.
///
/// Shapes are 0-d (scalar), 1-d (vector) or 2-d (matrix). The tape treats a
/// vector of length `n` as a `1 x n` row wherever a matrix is expected.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, DiffError> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(DiffError::ShapeMismatch { op: "tensor", left: shape, right: vec![values.len()] });
        }
        if shape.len() > 2 {
            return Err(DiffError::Rank { op: "tensor", shape });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: "tensor" });
        }
        Ok(Self { grad: vec![0.0; n], shape, values, requires_grad: true })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![0.0; n], grad: vec![0.0; n], requires_grad: true }
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn randn<R: rand::Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        let mut t = Self::zeros(shape);
        for v in &mut t.values {
            *v = rng.sample(normal);
        }
        t
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.values.fill(value);
        t
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(Vec::new(), vec![v]).expect("finite scalar")
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(vec![n], values).expect("finite vector")
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, DiffError> {
        Self::new(vec![rows, cols], values)
    }

    /// Marks the tensor as a constant: the tape will not propagate into it.
    pub fn constant(mut self) -> Self {
        self.requires_grad = false;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Direct mutable access for optimizers and finite-difference probes.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<(), DiffError> {
        if delta.len() != self.grad.len() {
            return Err(DiffError::ShapeMismatch {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: vec![delta.len()],
            });
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: "accumulate_grad" });
        }
        for (g, d) in self.grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// `(rows, cols)` under the row-vector convention.
    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.shape)
    }

    /// Row `r` of a 2-d tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.values[r * c..(r + 1) * c]
    }
}

pub(crate) fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1]),
    }
}
