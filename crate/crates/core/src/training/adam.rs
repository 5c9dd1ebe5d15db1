use crate::diffmath::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Vec<f64>> = params.into_iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { v: m.clone(), m, step: 0 }
    }
}

/// One bias-corrected Adam update from the gradients stored on `params`.
///
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step(params: &mut [(&'static str, &mut Tensor)], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Invalid(format!("adam: {} parameters but state for {}", params.len(), state.m.len())));
    }
    for (i, (name, t)) in params.iter().enumerate() {
        if t.numel() != state.m[i].len() {
            return Err(Error::Invalid(format!("adam: parameter `{name}` changed shape")));
        }
        if t.grad().iter().any(|g| !g.is_finite()) {
            return Err(Error::Invalid(format!("adam: non-finite gradient in parameter `{name}`")));
        }
    }
    state.step += 1;
    let c1 = 1.0 - BETA1.powi(state.step as i32);
    let c2 = 1.0 - BETA2.powi(state.step as i32);
    for (i, (_, t)) in params.iter_mut().enumerate() {
        let grad = t.grad().to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in t.values_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
            *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPSILON);
        }
    }
    Ok(())
}
