//! Mutually exciting attention over friends' events and self-exciting
//! attention over the user's own sequence, both under temporal masks.

use rand::Rng;

use crate::diffmath::{maybe_dropout, Dropout, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::socialgraph::INIT_STD;

/// Visibility of source events (columns) from target positions (rows).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemporalMask {
    pub rows: usize,
    pub cols: usize,
    pub visible: Vec<bool>,
}

impl TemporalMask {
    pub fn is_visible(&self, i: usize, w: usize) -> bool {
        self.visible[i * self.cols + w]
    }

    /// Rows without any visible source; these take the fallback path.
    pub fn empty_rows(&self) -> Vec<bool> {
        (0..self.rows).map(|i| !self.visible[i * self.cols..(i + 1) * self.cols].iter().any(|&v| v)).collect()
    }
}

/// Friend events are visible when not padding and not after the target (`t_w <= t_i`).
pub fn build_masks(target_times: &[f64], source_times: &[f64], pad: &[bool]) -> TemporalMask {
    let (rows, cols) = (target_times.len(), source_times.len());
    let mut visible = Vec::with_capacity(rows * cols);
    for &ti in target_times {
        for (w, &tw) in source_times.iter().enumerate() {
            visible.push(!pad[w] && tw <= ti);
        }
    }
    TemporalMask { rows, cols, visible }
}

/// Strict causal order over one sequence: `j < i`.
pub fn causal_mask(len: usize) -> TemporalMask {
    let mut visible = vec![false; len * len];
    for i in 0..len {
        for j in 0..i {
            visible[i * len + j] = true;
        }
    }
    TemporalMask { rows: len, cols: len, visible }
}

/// How raw intervals (days) enter the attention logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntervalScale {
    /// Upper clip, in days.
    pub clip: f64,
    /// Use `ln(1 + Δt)` instead of `Δt`.
    pub log: bool,
}

impl Default for IntervalScale {
    fn default() -> Self {
        Self { clip: f64::INFINITY, log: false }
    }
}

impl IntervalScale {
    pub fn apply(&self, dt: f64) -> f64 {
        let dt = dt.max(0.0).min(self.clip);
        if self.log {
            dt.ln_1p()
        } else {
            dt
        }
    }
}

/// `Δt[i][w] = t_i − t_w` on visible cells, 0 elsewhere.
pub fn intervals(target_times: &[f64], source_times: &[f64], mask: &TemporalMask, scale: IntervalScale) -> Vec<f64> {
    let mut out = vec![0.0; mask.rows * mask.cols];
    for (i, &ti) in target_times.iter().enumerate() {
        for (w, &tw) in source_times.iter().enumerate() {
            if mask.is_visible(i, w) {
                out[i * mask.cols + w] = scale.apply(ti - tw);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MutualParams {
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub beta: Tensor,
    pub mu: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct MutualVars {
    pub w_query: Var,
    pub w_key: Var,
    pub w_value: Var,
    pub beta: Var,
    pub mu: Var,
}

impl MutualParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            w_query: Tensor::randn(&[d, d], INIT_STD, rng),
            w_key: Tensor::randn(&[d, d], INIT_STD, rng),
            w_value: Tensor::randn(&[d, d], INIT_STD, rng),
            beta: Tensor::scalar(0.0),
            mu: Tensor::scalar(0.0),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("mutual.w_query", &self.w_query),
            ("mutual.w_key", &self.w_key),
            ("mutual.w_value", &self.w_value),
            ("mutual.beta", &self.beta),
            ("mutual.mu", &self.mu),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("mutual.w_query", &mut self.w_query),
            ("mutual.w_key", &mut self.w_key),
            ("mutual.w_value", &mut self.w_value),
            ("mutual.beta", &mut self.beta),
            ("mutual.mu", &mut self.mu),
        ]
    }

    pub fn record(&self, tape: &mut Tape) -> MutualVars {
        MutualVars {
            w_query: tape.leaf(&self.w_query),
            w_key: tape.leaf(&self.w_key),
            w_value: tape.leaf(&self.w_value),
            beta: tape.leaf(&self.beta),
            mu: tape.leaf(&self.mu),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfParams {
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    pub beta: Tensor,
    pub mu: Tensor,
    pub w_intensity: Tensor,
    pub b_intensity: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct SelfVars {
    pub w_query: Var,
    pub w_key: Var,
    pub w_value: Var,
    pub beta: Var,
    pub mu: Var,
    pub w_intensity: Var,
    pub b_intensity: Var,
}

impl SelfParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Self {
            w_query: Tensor::randn(&[d, d], INIT_STD, rng),
            w_key: Tensor::randn(&[d, d], INIT_STD, rng),
            w_value: Tensor::randn(&[d, d], INIT_STD, rng),
            beta: Tensor::scalar(0.0),
            mu: Tensor::scalar(0.0),
            w_intensity: Tensor::randn(&[d], INIT_STD, rng),
            b_intensity: Tensor::scalar(0.0),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("self.w_query", &self.w_query),
            ("self.w_key", &self.w_key),
            ("self.w_value", &self.w_value),
            ("self.beta", &self.beta),
            ("self.mu", &self.mu),
            ("self.w_intensity", &self.w_intensity),
            ("self.b_intensity", &self.b_intensity),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("self.w_query", &mut self.w_query),
            ("self.w_key", &mut self.w_key),
            ("self.w_value", &mut self.w_value),
            ("self.beta", &mut self.beta),
            ("self.mu", &mut self.mu),
            ("self.w_intensity", &mut self.w_intensity),
            ("self.b_intensity", &mut self.b_intensity),
        ]
    }

    pub fn record(&self, tape: &mut Tape) -> SelfVars {
        SelfVars {
            w_query: tape.leaf(&self.w_query),
            w_key: tape.leaf(&self.w_key),
            w_value: tape.leaf(&self.w_value),
            beta: tape.leaf(&self.beta),
            mu: tape.leaf(&self.mu),
            w_intensity: tape.leaf(&self.w_intensity),
            b_intensity: tape.leaf(&self.b_intensity),
        }
    }
}

/// `QKᵀ/√d (+ β·Δt + μ)`.
fn logits(tape: &mut Tape, q: Var, k: Var, dt: &[f64], beta: Var, mu: Var, temporal: bool) -> Result<Var> {
    let d = tape.shape(q)[1];
    let rows = tape.shape(q)[0];
    let cols = tape.shape(k)[0];
    let s = tape.matmul_t(q, k)?;
    let s = tape.affine(s, 1.0 / (d as f64).sqrt(), 0.0)?;
    if !temporal {
        return Ok(s);
    }
    let dt = tape.constant(vec![rows, cols], dt.to_vec())?;
    let bdt = tape.scale_by(dt, beta)?;
    let s = tape.add(s, bdt)?;
    Ok(tape.shift(s, mu)?)
}

#[derive(Clone, Copy, Debug)]
pub struct MutualOutput {
    /// `l x d`.
    pub t_m: Var,
    /// `l x (d_F + l)`: friend columns first, then one own-event column per
    /// position that is only visible on rows without any visible friend event.
    pub attention: Var,
    pub friend_cols: usize,
}

/// Row `i` of `T^m` is `Σ_w A[i][w]·W_V·h^F_w` with
/// `A = softmax(mask(Q·Kᵀ/√d + β·Δt + μ))`, `Q = E·W_Q`, `K = S_F·W_K`.
///
/// Rows that see no friend event return `W_V` applied to the row's own event
/// embedding. `friends` is `None` when the user has no friend slots at all.
/// `temporal = false` drops the `β·Δt + μ` term.
#[allow(clippy::too_many_arguments)]
pub fn mutual_excite(
    tape: &mut Tape,
    events: Var,
    friends: Option<Var>,
    dt: &[f64],
    mask: &TemporalMask,
    p: &MutualVars,
    temporal: bool,
    dropout: Option<&mut Dropout>,
) -> Result<MutualOutput> {
    let l = tape.shape(events)[0];
    let d_f = friends.map_or(0, |f| tape.shape(f)[0]);
    if mask.rows != l || mask.cols != d_f || dt.len() != l * d_f {
        return Err(Error::Invalid(format!(
            "mutual_excite: {l} events, {d_f} friend slots, mask {}x{}, {} intervals",
            mask.rows,
            mask.cols,
            dt.len()
        )));
    }
    let width = d_f + l;
    let empty = mask.empty_rows();
    let mut visible = vec![false; l * width];
    let mut dt_aug = vec![0.0; l * width];
    for i in 0..l {
        visible[i * width..i * width + d_f].copy_from_slice(&mask.visible[i * d_f..(i + 1) * d_f]);
        dt_aug[i * width..i * width + d_f].copy_from_slice(&dt[i * d_f..(i + 1) * d_f]);
        visible[i * width + d_f + i] = empty[i];
    }

    let q = tape.matmul(events, p.w_query)?;
    let k_own = tape.matmul(events, p.w_key)?;
    let v_own = tape.matmul_t(events, p.w_value)?;
    let (k, v) = match friends {
        Some(f) => {
            let k_f = tape.matmul(f, p.w_key)?;
            let v_f = tape.matmul_t(f, p.w_value)?;
            (tape.concat_rows(&[k_f, k_own])?, tape.concat_rows(&[v_f, v_own])?)
        }
        None => (k_own, v_own),
    };
    let s = logits(tape, q, k, &dt_aug, p.beta, p.mu, temporal)?;
    let attention = tape.masked_softmax(s, &visible)?;
    let weights = maybe_dropout(tape, attention, dropout)?;
    let t_m = tape.matmul(weights, v)?;
    Ok(MutualOutput { t_m, attention, friend_cols: d_f })
}

#[derive(Clone, Copy, Debug)]
pub struct SelfOutput {
    /// `l x d`.
    pub t_s: Var,
    /// Last row of `T^S`, length `d`.
    pub h_s: Var,
    /// `l x l`.
    pub attention: Var,
}

/// `T^S = softmax(mask(Q·Kᵀ/√d + β·Δt + μ))·V` with `Q, K, V = T^m·W`.
///
/// Position `i` attends to positions `j < i`; position 0 attends to itself.
pub fn self_excite(
    tape: &mut Tape,
    t_m: Var,
    dt: &[f64],
    p: &SelfVars,
    temporal: bool,
    dropout: Option<&mut Dropout>,
) -> Result<SelfOutput> {
    let l = tape.shape(t_m)[0];
    if l == 0 {
        return Err(Error::Invalid("self_excite: empty sequence".into()));
    }
    if dt.len() != l * l {
        return Err(Error::Invalid(format!("self_excite: {l} events but {} intervals", dt.len())));
    }
    let mut visible = causal_mask(l).visible;
    visible[0] = true;
    let q = tape.matmul(t_m, p.w_query)?;
    let k = tape.matmul(t_m, p.w_key)?;
    let v = tape.matmul(t_m, p.w_value)?;
    let s = logits(tape, q, k, dt, p.beta, p.mu, temporal)?;
    let attention = tape.masked_softmax(s, &visible)?;
    let weights = maybe_dropout(tape, attention, dropout)?;
    let t_s = tape.matmul(weights, v)?;
    let d = tape.shape(t_s)[1];
    let last = tape.slice_rows(t_s, l - 1, l)?;
    let h_s = tape.reshape(last, vec![d])?;
    Ok(SelfOutput { t_s, h_s, attention })
}

/// `λ_i = softplus(w·T^S_i + b)`, one positive intensity per position.
pub fn scalar_intensity(tape: &mut Tape, t_s: Var, p: &SelfVars) -> Result<Var> {
    let l = tape.shape(t_s)[0];
    let z = tape.matmul_t(t_s, p.w_intensity)?;
    let z = tape.reshape(z, vec![l])?;
    let z = tape.shift(z, p.b_intensity)?;
    Ok(tape.softplus(z)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::grad_check_many;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn big_mutual(d: usize, rng: &mut ChaCha8Rng) -> MutualParams {
        MutualParams {
            w_query: rand_matrix(rng, d, d, 1.0),
            w_key: rand_matrix(rng, d, d, 1.0),
            w_value: rand_matrix(rng, d, d, 1.0),
            beta: Tensor::scalar(-0.4),
            mu: Tensor::scalar(0.2),
        }
    }

    fn big_self(d: usize, rng: &mut ChaCha8Rng) -> SelfParams {
        SelfParams {
            w_query: rand_matrix(rng, d, d, 1.0),
            w_key: rand_matrix(rng, d, d, 1.0),
            w_value: rand_matrix(rng, d, d, 1.0),
            beta: Tensor::scalar(-0.3),
            mu: Tensor::scalar(0.1),
            w_intensity: Tensor::vector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()),
            b_intensity: Tensor::scalar(0.2),
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// `x·W` (row vector times matrix).
    fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
        let d = x.len();
        (0..d).map(|c| (0..d).map(|r| x[r] * w.values()[r * d + c]).sum()).collect()
    }

    /// `W·x`.
    fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..d).map(|r| (0..d).map(|c| w.values()[r * d + c] * x[c]).sum()).collect()
    }

    #[test]
    fn mask_rules() {
        let m = build_masks(&[3.0, 5.0], &[5.0, 3.0, 1.0], &[false, false, true]);
        assert!(!m.is_visible(0, 0), "future friend event");
        assert!(m.is_visible(0, 1), "tie is visible");
        assert!(!m.is_visible(1, 2), "padding");
        assert!(m.is_visible(1, 0));
        let e = build_masks(&[0.5], &[1.0], &[false]);
        assert_eq!(e.empty_rows(), vec![true]);
        let c = causal_mask(3);
        assert!(!c.is_visible(0, 0) && c.is_visible(2, 1) && !c.is_visible(1, 1));
    }

    #[test]
    fn singleton_friend_event_passes_value_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 3;
        let mut p = big_mutual(d, &mut rng);
        p.beta = Tensor::scalar(0.0);
        p.mu = Tensor::scalar(0.0);
        let ev = rand_matrix(&mut rng, 1, d, 1.0);
        let fr = rand_matrix(&mut rng, 1, d, 1.0);
        let mut tape = Tape::new();
        let (e, f) = (tape.leaf(&ev), tape.leaf(&fr));
        let vars = p.record(&mut tape);
        let mask = build_masks(&[2.0], &[1.0], &[false]);
        let out = mutual_excite(&mut tape, e, Some(f), &[1.0], &mask, &vars, true, None).unwrap();
        let want = matvec(&p.w_value, fr.values());
        assert_eq!(tape.value(out.t_m), want.as_slice());
    }

    #[test]
    fn identical_friend_events_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 3;
        let p = big_mutual(d, &mut rng);
        let ev = rand_matrix(&mut rng, 1, d, 1.0);
        let row = rand_matrix(&mut rng, 1, d, 1.0);
        let fr = Tensor::new(vec![2, d], row.values().repeat(2)).unwrap();
        let mut tape = Tape::new();
        let (e, f) = (tape.leaf(&ev), tape.leaf(&fr));
        let vars = p.record(&mut tape);
        let mask = build_masks(&[2.0], &[1.0, 1.0], &[false, false]);
        let out = mutual_excite(&mut tape, e, Some(f), &[1.0, 1.0], &mask, &vars, true, None).unwrap();
        assert_eq!(&tape.value(out.attention)[..2], &[0.5, 0.5]);
    }

    #[test]
    fn mutual_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let p = big_mutual(d, &mut rng);
        let ev = rand_matrix(&mut rng, 1, d, 1.0);
        let fr = rand_matrix(&mut rng, 3, d, 1.0);
        let ft = [0.5, 1.5, 1.9];
        let mask = build_masks(&[2.0], &ft, &[false; 3]);
        let dt = intervals(&[2.0], &ft, &mask, IntervalScale::default());
        let mut tape = Tape::new();
        let (e, f) = (tape.leaf(&ev), tape.leaf(&fr));
        let vars = p.record(&mut tape);
        let out = mutual_excite(&mut tape, e, Some(f), &dt, &mask, &vars, true, None).unwrap();

        let q = vecmat(ev.values(), &p.w_query);
        let beta = p.beta.values()[0];
        let mu = p.mu.values()[0];
        let logit: Vec<f64> = (0..3)
            .map(|w| dot(&q, &vecmat(fr.row(w), &p.w_key)) / (d as f64).sqrt() + beta * (2.0 - ft[w]) + mu)
            .collect();
        let m = logit.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logit.iter().map(|x| (x - m).exp()).sum();
        let mut want = vec![0.0; d];
        for w in 0..3 {
            let a = (logit[w] - m).exp() / z;
            for (o, v) in want.iter_mut().zip(matvec(&p.w_value, fr.row(w))) {
                *o += a * v;
            }
        }
        for (g, w) in tape.value(out.t_m).iter().zip(&want) {
            assert!((g - w).abs() < 1e-10);
        }
    }

    #[test]
    fn mutual_fallback_uses_own_event() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 3;
        let p = big_mutual(d, &mut rng);
        let ev = rand_matrix(&mut rng, 2, d, 1.0);
        let fr = rand_matrix(&mut rng, 2, d, 1.0);
        let ft = [1.5, 9.0];
        let mask = build_masks(&[1.0, 2.0], &ft, &[false, false]);
        let dt = intervals(&[1.0, 2.0], &ft, &mask, IntervalScale::default());
        let mut tape = Tape::new();
        let (e, f) = (tape.leaf(&ev), tape.leaf(&fr));
        let vars = p.record(&mut tape);
        let out = mutual_excite(&mut tape, e, Some(f), &dt, &mask, &vars, true, None).unwrap();
        assert_eq!(&tape.value(out.t_m)[..d], matvec(&p.w_value, ev.row(0)).as_slice());
        // row 1 sees only the first friend event
        assert_eq!(&tape.value(out.t_m)[d..], matvec(&p.w_value, fr.row(0)).as_slice());

        let mut tape = Tape::new();
        let e = tape.leaf(&ev);
        let vars = p.record(&mut tape);
        let none = build_masks(&[1.0, 2.0], &[], &[]);
        let out = mutual_excite(&mut tape, e, None, &[], &none, &vars, true, None).unwrap();
        assert_eq!(&tape.value(out.t_m)[d..], matvec(&p.w_value, ev.row(1)).as_slice());
    }

    fn run_self(t_m: &Tensor, times: &[f64], p: &SelfParams, temporal: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let l = times.len();
        let dt = intervals(times, times, &causal_mask(l), IntervalScale::default());
        let mut tape = Tape::new();
        let x = tape.leaf(t_m);
        let vars = p.record(&mut tape);
        let out = self_excite(&mut tape, x, &dt, &vars, temporal, None).unwrap();
        let lam = scalar_intensity(&mut tape, out.t_s, &vars).unwrap();
        (tape.value(out.t_s).to_vec(), tape.value(out.h_s).to_vec(), tape.value(lam).to_vec())
    }

    #[test]
    fn single_event_self_attention_is_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = big_self(3, &mut rng);
        let x = rand_matrix(&mut rng, 1, 3, 1.0);
        let (_, h, _) = run_self(&x, &[0.0], &p, true);
        assert_eq!(h, vecmat(x.values(), &p.w_value));
    }

    #[test]
    fn identical_events_average_visible_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = big_self(3, &mut rng);
        p.beta = Tensor::scalar(0.0);
        let row = rand_matrix(&mut rng, 1, 3, 1.0);
        let x = Tensor::new(vec![4, 3], row.values().repeat(4)).unwrap();
        let (ts, _, _) = run_self(&x, &[0.0, 1.0, 2.0, 3.0], &p, true);
        let v = vecmat(row.values(), &p.w_value);
        for r in ts.chunks(3) {
            for (a, b) in r.iter().zip(&v) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 3;
        let p = big_self(d, &mut rng);
        let x = rand_matrix(&mut rng, 3, d, 1.0);
        let times = [0.0, 0.7, 2.0];
        let (ts, h, lam) = run_self(&x, &times, &p, true);
        let q: Vec<Vec<f64>> = (0..3).map(|i| vecmat(x.row(i), &p.w_query)).collect();
        let k: Vec<Vec<f64>> = (0..3).map(|i| vecmat(x.row(i), &p.w_key)).collect();
        let v: Vec<Vec<f64>> = (0..3).map(|i| vecmat(x.row(i), &p.w_value)).collect();
        let (beta, mu) = (p.beta.values()[0], p.mu.values()[0]);
        for i in 0..3 {
            let want: Vec<f64> = if i == 0 {
                v[0].clone()
            } else {
                let lg: Vec<f64> =
                    (0..i).map(|j| dot(&q[i], &k[j]) / (d as f64).sqrt() + beta * (times[i] - times[j]) + mu).collect();
                let m = lg.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = lg.iter().map(|x| (x - m).exp()).sum();
                (0..d).map(|c| (0..i).map(|j| (lg[j] - m).exp() / z * v[j][c]).sum()).collect()
            };
            for c in 0..d {
                assert!((ts[i * d + c] - want[c]).abs() < 1e-10);
            }
            let z = dot(&want, p.w_intensity.values()) + p.b_intensity.values()[0];
            assert!((lam[i] - (1.0 + z.exp()).ln()).abs() < 1e-10);
        }
        assert_eq!(h, ts[2 * d..].to_vec());
    }

    #[test]
    fn intensity_readout_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = big_self(3, &mut rng);
        let x = rand_matrix(&mut rng, 4, 3, 1.0);
        let times = [0.0, 1.0, 2.0, 3.0];
        p.w_intensity = Tensor::zeros(&[3]);
        p.b_intensity = Tensor::scalar(0.0);
        let (_, _, lam) = run_self(&x, &times, &p, true);
        assert!(lam.iter().all(|&l| (l - std::f64::consts::LN_2).abs() < 1e-15));
        p.b_intensity = Tensor::scalar(20.0);
        let (_, _, lam) = run_self(&x, &times, &p, true);
        assert!(lam.iter().all(|&l| (l - 20.0).abs() < 1e-8));
        let mut prev = 0.0;
        for b in [-3.0, -1.0, 0.0, 0.5, 2.0] {
            p.b_intensity = Tensor::scalar(b);
            let (_, _, lam) = run_self(&x, &times, &p, true);
            assert!(lam[0] > prev);
            prev = lam[0];
        }
    }

    #[test]
    fn zero_temporal_terms_equal_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sp = big_self(3, &mut rng);
        let mut mp = big_mutual(3, &mut rng);
        sp.beta = Tensor::scalar(0.0);
        sp.mu = Tensor::scalar(0.0);
        mp.beta = Tensor::scalar(0.0);
        mp.mu = Tensor::scalar(0.0);
        let x = rand_matrix(&mut rng, 4, 3, 1.0);
        let times = [0.0, 1.0, 2.5, 3.0];
        let (a, _, _) = run_self(&x, &times, &sp, true);
        let (b, _, _) = run_self(&x, &times, &sp, false);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-12);
        }
        let fr = rand_matrix(&mut rng, 3, 3, 1.0);
        let ft = [0.5, 2.0, 2.8];
        let mask = build_masks(&times, &ft, &[false; 3]);
        let dt = intervals(&times, &ft, &mask, IntervalScale::default());
        let run = |temporal: bool| {
            let mut tape = Tape::new();
            let (e, f) = (tape.leaf(&x), tape.leaf(&fr));
            let vars = mp.record(&mut tape);
            let out = mutual_excite(&mut tape, e, Some(f), &dt, &mask, &vars, temporal, None).unwrap();
            tape.value(out.t_m).to_vec()
        };
        for (u, v) in run(true).iter().zip(&run(false)) {
            assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn excitation_params_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 3;
        let mp = big_mutual(d, &mut rng);
        let sp = big_self(d, &mut rng);
        let times = [0.0, 1.0, 2.0, 2.5];
        let ft = [0.5, 1.0, 3.0];
        let mask = build_masks(&times, &ft, &[false, false, false]);
        let dt_m = intervals(&times, &ft, &mask, IntervalScale::default());
        let dt_s = intervals(&times, &times, &causal_mask(4), IntervalScale::default());
        let mut inputs: Vec<Tensor> = mp.named().into_iter().chain(sp.named()).map(|(_, t)| t.clone()).collect();
        inputs.push(rand_matrix(&mut rng, 4, d, 1.0));
        inputs.push(rand_matrix(&mut rng, 3, d, 1.0));
        let err = grad_check_many(
            |tape, v| {
                let m = MutualVars { w_query: v[0], w_key: v[1], w_value: v[2], beta: v[3], mu: v[4] };
                let s = SelfVars {
                    w_query: v[5],
                    w_key: v[6],
                    w_value: v[7],
                    beta: v[8],
                    mu: v[9],
                    w_intensity: v[10],
                    b_intensity: v[11],
                };
                let unwrap = |e: Error| match e {
                    Error::Diff(d) => d,
                    e => panic!("{e}"),
                };
                let tm = mutual_excite(tape, v[12], Some(v[13]), &dt_m, &mask, &m, true, None).map_err(unwrap)?;
                let so = self_excite(tape, tm.t_m, &dt_s, &s, true, None).map_err(unwrap)?;
                let lam = scalar_intensity(tape, so.t_s, &s).map_err(unwrap)?;
                let a = tape.log(lam)?;
                let a = tape.sum(a)?;
                let b = tape.sum_squares(so.h_s)?;
                tape.sub(b, a)
            },
            &mut inputs,
            1e-4,
            None,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn attention_rows_sum_to_one(seed in 0u64..1000, l in 1usize..6, nf in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let mp = big_mutual(d, &mut rng);
            let sp = big_self(d, &mut rng);
            let mut times: Vec<f64> = (0..l).map(|_| rng.random_range(0.0..10.0)).collect();
            times.sort_by(f64::total_cmp);
            let ft: Vec<f64> = (0..nf).map(|_| rng.random_range(0.0..10.0)).collect();
            let pad: Vec<bool> = (0..nf).map(|_| rng.random_bool(0.3)).collect();
            let mask = build_masks(&times, &ft, &pad);
            let dt = intervals(&times, &ft, &mask, IntervalScale::default());
            let ev = rand_matrix(&mut rng, l, d, 1.0);
            let fr = rand_matrix(&mut rng, nf.max(1), d, 1.0);
            let mut tape = Tape::new();
            let e = tape.leaf(&ev);
            let f = (nf > 0).then(|| tape.leaf(&fr));
            let mv = mp.record(&mut tape);
            let sv = sp.record(&mut tape);
            let m = mutual_excite(&mut tape, e, f, &dt, &mask, &mv, true, None).unwrap();
            let dts = intervals(&times, &times, &causal_mask(l), IntervalScale::default());
            let s = self_excite(&mut tape, m.t_m, &dts, &sv, true, None).unwrap();
            for (a, w) in [(m.attention, nf + l), (s.attention, l)] {
                for row in tape.value(a).chunks(w) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn temperature_keeps_argmax(seed in 0u64..1000, scale in 0.2f64..5.0) {
            // Rescaling every logit by a common positive factor (a change of the
            // √d temperature) moves the weights but not the row argmax.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let mp = big_mutual(d, &mut rng);
            let times = [5.0, 8.0];
            let ft = [1.0, 2.0, 4.0, 6.0, 7.5];
            let mask = build_masks(&times, &ft, &[false; 5]);
            let ev = rand_matrix(&mut rng, 2, d, 1.0);
            let fr = rand_matrix(&mut rng, 5, d, 1.0);
            let weights = |s: f64| {
                let mut p = mp.clone();
                p.w_query.values_mut().iter_mut().for_each(|x| *x *= s);
                let mut tape = Tape::new();
                let (e, f) = (tape.leaf(&ev), tape.leaf(&fr));
                let vars = p.record(&mut tape);
                let out = mutual_excite(&mut tape, e, Some(f), &[0.0; 10], &mask, &vars, false, None).unwrap();
                tape.value(out.attention).to_vec()
            };
            let (a, b) = (weights(1.0), weights(scale));
            let argmax = |r: &[f64]| r.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
            for (ra, rb) in a.chunks(7).zip(b.chunks(7)) {
                prop_assert_eq!(argmax(ra), argmax(rb));
            }
        }

        #[test]
        fn future_friend_events_do_not_leak(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let mp = big_mutual(d, &mut rng);
            let times = [1.0, 3.0, 5.0, 7.0];
            let ft = [0.5, 2.0, 4.0, 6.0, 9.0];
            let mask = build_masks(&times, &ft, &[false; 5]);
            let dt = intervals(&times, &ft, &mask, IntervalScale::default());
            let ev = rand_matrix(&mut rng, 4, d, 1.0);
            let fr = rand_matrix(&mut rng, 5, d, 1.0);
            let w = rng.random_range(0..5);
            let mut fr2 = fr.clone();
            for x in &mut fr2.values_mut()[w * d..(w + 1) * d] {
                *x += rng.random_range(-3.0..3.0);
            }
            let run = |f: &Tensor| {
                let mut tape = Tape::new();
                let (e, f) = (tape.leaf(&ev), tape.leaf(f));
                let vars = mp.record(&mut tape);
                let out = mutual_excite(&mut tape, e, Some(f), &dt, &mask, &vars, true, None).unwrap();
                tape.value(out.t_m).to_vec()
            };
            let (a, b) = (run(&fr), run(&fr2));
            for i in 0..4 {
                if ft[w] > times[i] {
                    prop_assert_eq!(&a[i * d..(i + 1) * d], &b[i * d..(i + 1) * d]);
                }
            }
        }
    }
}
