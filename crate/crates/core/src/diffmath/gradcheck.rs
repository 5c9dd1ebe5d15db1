use super::{DiffError, Tape, Tensor, Var};

/// Relative error used throughout: `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x + eps·e) - f(x - eps·e)) / (2·eps)`, over every entry of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    let mut inputs = [x.clone()];
    grad_check_many(|tape, vars| f(tape, vars[0]), &mut inputs, eps, None)
}

/// Multi-tensor variant of [`grad_check`]. When `max_entries` is set, only
/// that many evenly spaced entries of each tensor are probed.
pub fn grad_check_many<F>(f: F, inputs: &mut [Tensor], eps: f64, max_entries: Option<usize>) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(DiffError::Domain { op: "grad_check eps" });
    }
    let eval = |inputs: &[Tensor]| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(DiffError::NotScalar { shape: tape.shape(out).to_vec() });
        }
        Ok(tape.scalar(out))
    };

    let base = eval(inputs)?;
    let again = eval(inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(DiffError::NonDeterministic { first: base, second: again });
    }

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs.iter())
            .map(|(&v, t)| grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    };

    let mut worst: f64 = 0.0;
    for t in 0..inputs.len() {
        if !inputs[t].requires_grad() {
            continue;
        }
        let n = inputs[t].numel();
        let probes: Vec<usize> = match max_entries {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        for e in probes {
            let orig = inputs[t].values()[e];
            inputs[t].values_mut()[e] = orig + eps;
            let plus = eval(inputs);
            inputs[t].values_mut()[e] = orig - eps;
            let minus = eval(inputs);
            inputs[t].values_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[t][e], numeric));
        }
    }
    Ok(worst)
}
