use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DiffError, Tape, Var};

/// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self { rate: rate.clamp(0.0, 0.95), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn apply(&mut self, tape: &mut Tape, a: Var) -> Result<Var, DiffError> {
        if self.rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - self.rate;
        let n = tape.value(a).len();
        let mask = (0..n).map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        tape.mul_const(a, mask)
    }
}

/// Applies dropout when training, passes through otherwise.
pub fn maybe_dropout(tape: &mut Tape, a: Var, dropout: Option<&mut Dropout>) -> Result<Var, DiffError> {
    match dropout {
        Some(d) => d.apply(tape, a),
        None => Ok(a),
    }
}
