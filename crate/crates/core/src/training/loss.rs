use crate::diffmath::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::ModelVars;

/// Mean of `−ln σ(ŷ⁺ − ŷ⁻)` over aligned pairs.
pub fn bpr_loss(tape: &mut Tape, pos: Var, neg: Var) -> Result<Var> {
    let (n, m) = (tape.value(pos).len(), tape.value(neg).len());
    if n == 0 || n != m {
        return Err(Error::Invalid(format!("bpr_loss: {n} positive vs {m} negative scores")));
    }
    let diff = tape.sub(neg, pos)?;
    let l = tape.softplus(diff)?;
    Ok(tape.mean(l)?)
}

/// `−Σ log λ_i + ½ Σ Δt_i (λ_i + λ_{i+1})` over consecutive observed events.
///
/// `intervals[i]` is the gap between events `i` and `i + 1`.
pub fn tpp_nll(tape: &mut Tape, lambdas: Var, intervals: &[f64]) -> Result<Var> {
    let n = tape.value(lambdas).len();
    if n == 0 {
        return Err(Error::Invalid("tpp_nll: no events".into()));
    }
    if intervals.len() + 1 != n {
        return Err(Error::Invalid(format!(
            "tpp_nll: {n} intensities need {} intervals, got {}",
            n - 1,
            intervals.len()
        )));
    }
    if let Some(i) = tape.value(lambdas).iter().position(|&x| x.is_nan() || x <= 0.0) {
        return Err(Error::Invalid(format!("tpp_nll: intensity {i} is not positive")));
    }
    if intervals.iter().any(|&dt| dt.is_nan() || dt < 0.0) {
        return Err(Error::Invalid("tpp_nll: negative interval".into()));
    }
    let logs = tape.log(lambdas)?;
    let log_sum = tape.sum(logs)?;
    if n == 1 {
        return Ok(tape.affine(log_sum, -1.0, 0.0)?);
    }
    let col = tape.reshape(lambdas, vec![n, 1])?;
    let left = tape.slice_rows(col, 0, n - 1)?;
    let right = tape.slice_rows(col, 1, n)?;
    let pair = tape.add(left, right)?;
    let half: Vec<f64> = intervals.iter().map(|dt| 0.5 * dt).collect();
    let area = tape.mul_const(pair, half)?;
    let integral = tape.sum(area)?;
    Ok(tape.sub(integral, log_sum)?)
}

/// `‖Θ‖₂` over every parameter except the padding item row; `‖Θ‖₂²` when `squared`.
pub fn regularizer(tape: &mut Tape, vars: &ModelVars, squared: bool) -> Result<Var> {
    let mut total: Option<Var> = None;
    for v in vars.all() {
        let v = if v == vars.item {
            let rows = tape.shape(v)[0];
            tape.slice_rows(v, 0, rows - 1)?
        } else {
            v
        };
        let s = tape.sum_squares(v)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("registry is never empty");
    // the norm is not differentiable at 0
    if squared || tape.scalar(total) == 0.0 {
        return Ok(total);
    }
    Ok(tape.sqrt(total)?)
}

/// `bpr + tpp + γ·reg`; `tpp` is `None` when the point-process term is off.
pub fn joint_loss(tape: &mut Tape, bpr: Var, tpp: Option<Var>, reg: Var, gamma: f64) -> Result<Var> {
    let mut l = bpr;
    if let Some(t) = tpp {
        l = tape.add(l, t)?;
    }
    if gamma != 0.0 {
        let r = tape.affine(reg, gamma, 0.0)?;
        l = tape.add(l, r)?;
    }
    Ok(l)
}
