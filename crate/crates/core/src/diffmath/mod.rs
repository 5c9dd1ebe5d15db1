//! Dense `f64` tensors with a define-by-run reverse-mode tape.
//!
//! Every model equation is written against the primitives on [`Tape`]:
//! matrix products, elementwise maps, masked softmax, reductions and row
//! gathers. A fresh tape is built for every forward pass; parameters enter as
//! leaves and their adjoints are added back into [`Tensor::grad`].

mod dropout;
mod gradcheck;
mod tape;
mod tensor;

pub use dropout::{maybe_dropout, Dropout};
pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use tape::{Gradients, Tape, Var, MASK_NEG};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: tensors of rank > 2 are not supported (shape {shape:?})")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("masked softmax: row {row} has no visible entry")]
    FullyMasked { row: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: argument outside the domain")]
    Domain { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ln2() -> f64 {
        std::f64::consts::LN_2
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softplus_zero_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![], vec![0.0]).unwrap();
        let y = tape.softplus(x).unwrap();
        assert!((tape.scalar(y) - ln2()).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_singleton() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let y = tape.masked_softmax(x, &[true, false]).unwrap();
        assert_eq!(tape.value(y), &[1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = tape.masked_softmax(x, &[true, false, false, false]).unwrap_err();
        assert_eq!(err, DiffError::FullyMasked { row: 1 });
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        match tape.matmul(a, b).unwrap_err() {
            DiffError::ShapeMismatch { op, left, right } => {
                assert_eq!(op, "matmul");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.sum(v).unwrap();
        tape.backward(s).unwrap().accumulate_into(v, &mut x).unwrap();
        assert_eq!(x.grad(), &[1.0, 1.0, 1.0]);

        x.zero_grad();
        assert!(x.grad().iter().all(|&g| g == 0.0));
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap().accumulate_into(v, &mut x).unwrap();
        assert_eq!(x.grad(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_without_zero_grad() {
        let mut x = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.sum(v).unwrap();
        for _ in 0..2 {
            tape.backward(s).unwrap().accumulate_into(v, &mut x).unwrap();
        }
        assert_eq!(x.grad(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let v = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(tape.backward(v), Err(DiffError::NotScalar { .. })));
        let mut other = Tape::new();
        let w = other.constant(vec![], vec![1.0]).unwrap();
        assert_eq!(tape.backward(w).unwrap_err(), DiffError::ForeignVar);
    }

    #[test]
    fn backward_leaves_forward_values_untouched() {
        let x = Tensor::vector(vec![0.3, -0.7, 1.1]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let e = tape.exp(v).unwrap();
        let s = tape.sigmoid(e).unwrap();
        let l = tape.sum(s).unwrap();
        let before: Vec<Vec<f64>> = [v, e, s, l].iter().map(|&n| tape.value(n).to_vec()).collect();
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        let after: Vec<Vec<f64>> = [v, e, s, l].iter().map(|&n| tape.value(n).to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn gradcheck_quadratic_exact() {
        let x = Tensor::scalar(3.0);
        let err = grad_check(|t, v| t.mul(v, v), &x, 1e-3).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn gradcheck_softmax_sum_is_constant() {
        let x = Tensor::matrix(2, 3, vec![0.2, -0.4, 1.0, 0.3, 0.3, -2.0]).unwrap();
        let mask = [true, true, false, true, false, true];
        let err = grad_check(
            |t, v| {
                let s = t.masked_softmax(v, &mask)?;
                t.sum(s)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn gradcheck_detects_nondeterminism() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let x = Tensor::scalar(1.0);
        let res = grad_check(
            |t, v| {
                counter.set(counter.get() + 1.0);
                t.affine(v, 1.0, counter.get())
            },
            &x,
            1e-4,
        );
        assert!(matches!(res, Err(DiffError::NonDeterministic { .. })));
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    type Primitive = fn(&mut Tape, &[Var]) -> Result<Var, DiffError>;

    /// Each entry builds a scalar through one primitive, weighted by a fixed
    /// readout so the check is not degenerate.
    fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Primitive)> {
        fn readout(t: &mut Tape, y: Var) -> Result<Var, DiffError> {
            let n = t.value(y).len();
            let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
            let y2 = t.mul_const(y, w)?;
            t.sum(y2)
        }
        vec![
            ("matmul", vec![vec![2, 3], vec![3, 2]], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                readout(t, y)
            }),
            ("matmul_t", vec![vec![2, 3], vec![4, 3]], |t, v| {
                let y = t.matmul_t(v[0], v[1])?;
                readout(t, y)
            }),
            ("add", vec![vec![2, 2], vec![2, 2]], |t, v| {
                let y = t.add(v[0], v[1])?;
                readout(t, y)
            }),
            ("sub", vec![vec![3], vec![3]], |t, v| {
                let y = t.sub(v[0], v[1])?;
                readout(t, y)
            }),
            ("mul", vec![vec![2, 2], vec![2, 2]], |t, v| {
                let y = t.mul(v[0], v[1])?;
                readout(t, y)
            }),
            ("add_row", vec![vec![3, 2], vec![2]], |t, v| {
                let y = t.add_row(v[0], v[1])?;
                readout(t, y)
            }),
            ("add_col", vec![vec![3, 2], vec![3]], |t, v| {
                let y = t.add_col(v[0], v[1])?;
                readout(t, y)
            }),
            ("affine", vec![vec![4]], |t, v| {
                let y = t.affine(v[0], -1.7, 0.4)?;
                readout(t, y)
            }),
            ("scale_by", vec![vec![2, 2], vec![]], |t, v| {
                let y = t.scale_by(v[0], v[1])?;
                readout(t, y)
            }),
            ("shift", vec![vec![2, 2], vec![]], |t, v| {
                let y = t.shift(v[0], v[1])?;
                readout(t, y)
            }),
            ("concat_cols", vec![vec![2, 1], vec![2, 2]], |t, v| {
                let y = t.concat_cols(&[v[0], v[1]])?;
                readout(t, y)
            }),
            ("concat_rows", vec![vec![1, 2], vec![2, 2]], |t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                readout(t, y)
            }),
            ("sigmoid", vec![vec![5]], |t, v| {
                let y = t.sigmoid(v[0])?;
                readout(t, y)
            }),
            ("exp", vec![vec![5]], |t, v| {
                let y = t.exp(v[0])?;
                readout(t, y)
            }),
            ("log", vec![vec![5]], |t, v| {
                let p = t.affine(v[0], 1.0, 2.0)?;
                let y = t.log(p)?;
                readout(t, y)
            }),
            ("softplus", vec![vec![5]], |t, v| {
                let y = t.softplus(v[0])?;
                readout(t, y)
            }),
            ("sqrt", vec![vec![4]], |t, v| {
                let p = t.affine(v[0], 1.0, 1.5)?;
                let y = t.sqrt(p)?;
                readout(t, y)
            }),
            ("masked_softmax", vec![vec![2, 3]], |t, v| {
                let y = t.masked_softmax(v[0], &[true, true, false, false, true, true])?;
                readout(t, y)
            }),
            ("sum", vec![vec![2, 2]], |t, v| {
                let y = t.sum(v[0])?;
                t.mul(y, y)
            }),
            ("mean", vec![vec![3]], |t, v| {
                let y = t.mean(v[0])?;
                t.mul(y, y)
            }),
            ("row_sum", vec![vec![2, 3]], |t, v| {
                let y = t.row_sum(v[0])?;
                readout(t, y)
            }),
            ("sum_squares", vec![vec![2, 2]], |t, v| t.sum_squares(v[0])),
            ("gather_rows", vec![vec![3, 2]], |t, v| {
                let y = t.gather_rows(v[0], &[2, 0, 2])?;
                readout(t, y)
            }),
            ("segment_weighted_sum", vec![vec![2, 2], vec![4, 3]], |t, v| {
                let y = t.segment_weighted_sum(v[0], v[1])?;
                readout(t, y)
            }),
            ("reshape", vec![vec![2, 3]], |t, v| {
                let y = t.reshape(v[0], vec![3, 2])?;
                readout(t, y)
            }),
            ("slice_rows", vec![vec![3, 2]], |t, v| {
                let y = t.slice_rows(v[0], 1, 3)?;
                readout(t, y)
            }),
            ("select", vec![vec![4]], |t, v| {
                let y = t.select(v[0], 2)?;
                t.mul(y, y)
            }),
        ]
    }

    #[test]
    fn every_primitive_passes_gradcheck_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (name, shapes, f) in primitives() {
            for _ in 0..20 {
                let mut inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
                let err = grad_check_many(f, &mut inputs, 1e-4, None).unwrap();
                assert!(err <= 1e-5, "{name}: {err}");
            }
        }
    }

    #[test]
    fn masked_softmax_rows_normalize_and_masked_cells_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (m, n) = (4, 6);
            let vals: Vec<f64> = (0..m * n).map(|_| rng.random_range(-20.0..20.0)).collect();
            let mut vis: Vec<bool> = (0..m * n).map(|_| rng.random_bool(0.6)).collect();
            for r in 0..m {
                vis[r * n] = true;
            }
            let mut tape = Tape::new();
            let x = tape.constant(vec![m, n], vals).unwrap();
            let y = tape.masked_softmax(x, &vis).unwrap();
            let out = tape.value(y);
            for r in 0..m {
                let s: f64 = out[r * n..(r + 1) * n].iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
                for c in 0..n {
                    if !vis[r * n + c] {
                        assert_eq!(out[r * n + c], 0.0);
                    }
                }
            }
        }
    }
}
