//! Dense matrices, reverse-mode differentiation, and AdamW.

pub mod checkpoint;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Precision;
pub use params::{AdamWConfig, Parameter, ParameterSet};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::{is_masked, Tensor, SENTINEL};

use rand::Rng;

/// Uniform initialization in `[-bound, bound)`.
pub fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(rows, cols, data).expect("length matches shape")
}

/// Glorot-style bound for a `fan_in x fan_out` weight.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[cfg(test)]
mod gradcheck {
    //! Central finite differences against every primitive's backward rule.

    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-4;
    const TOL: f64 = 1e-3;

    /// Builds `f` on a fresh tape with the given leaves and returns the
    /// scalar output value.
    fn eval(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    }

    fn check(inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
            for i in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += EPS;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= EPS;
                let numeric = (eval(&plus, f) - eval(&minus, f)) / (2.0 * EPS);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                assert!(rel < TOL, "input {k} entry {i}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rand(seed: u64, rows: usize, cols: usize) -> Tensor {
        uniform(&mut ChaCha8Rng::seed_from_u64(seed), rows, cols, 1.0)
    }

    /// Weighted sum so that every output entry gets a distinct upstream
    /// gradient.
    fn reduce(tape: &mut Tape, y: Var) -> Var {
        let [r, c] = tape.shape(y);
        let w = tape.constant(rand(999, r, c));
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn matmul() {
        check(vec![rand(1, 3, 4), rand(2, 4, 2)], &|t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            reduce(t, y)
        });
    }

    #[test]
    fn transpose_add_sub_mul() {
        check(vec![rand(3, 3, 4), rand(4, 3, 4), rand(5, 4, 3)], &|t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let s = t.sub(a, v[1]).unwrap();
            let m = t.mul(s, v[1]).unwrap();
            let tr = t.transpose(v[2]);
            let y = t.add(m, tr).unwrap();
            reduce(t, y)
        });
    }

    #[test]
    fn add_row_and_scale() {
        check(vec![rand(6, 3, 4), rand(7, 1, 4)], &|t, v| {
            let y = t.add_row(v[0], v[1]).unwrap();
            let y = t.scale(y, -1.7);
            reduce(t, y)
        });
    }

    #[test]
    fn concat_and_slice() {
        check(vec![rand(8, 3, 4), rand(9, 3, 2), rand(10, 1, 6)], &|t, v| {
            let c = t.concat(&[v[0], v[1]], Axis::Cols).unwrap();
            let r = t.concat(&[c, v[2]], Axis::Rows).unwrap();
            let s = t.slice(r, 1..4, 2..5).unwrap();
            reduce(t, s)
        });
    }

    #[test]
    fn relu_and_masked_fill() {
        check(vec![rand(11, 3, 4)], &|t, v| {
            let r = t.relu(v[0]);
            let mask: Vec<bool> = (0..12).map(|i| i % 5 == 0).collect();
            let m = t.masked_fill(r, &mask, 0.25).unwrap();
            reduce(t, m)
        });
    }

    #[test]
    fn dropout_train_mode() {
        check(vec![rand(12, 3, 4)], &|t, v| {
            let d = t.dropout(v[0], 0.3, true, 77).unwrap();
            reduce(t, d)
        });
    }

    #[test]
    fn softmax_both_axes() {
        for axis in [Axis::Rows, Axis::Cols] {
            check(vec![rand(13, 3, 4)], &move |t, v| {
                let s = t.softmax(v[0], axis);
                reduce(t, s)
            });
        }
    }

    #[test]
    fn mean_both_axes_and_flatten() {
        for axis in [Axis::Rows, Axis::Cols] {
            check(vec![rand(14, 3, 4)], &move |t, v| {
                let m = t.mean(v[0], axis);
                let f = t.flatten(m);
                reduce(t, f)
            });
        }
    }

    #[test]
    fn gather_rows_with_repeats() {
        check(vec![rand(15, 3, 4)], &|t, v| {
            let g = t.gather_rows(v[0], &[2, 0, 2, 1]).unwrap();
            reduce(t, g)
        });
    }

    #[test]
    fn cross_entropy_with_masked_entries() {
        check(vec![rand(16, 3, 4)], &|t, v| {
            let f = t.flatten(v[0]);
            let mask: Vec<bool> = (0..12).map(|i| i % 4 == 3).collect();
            let m = t.masked_fill(f, &mask, SENTINEL).unwrap();
            t.cross_entropy(m, 5).unwrap()
        });
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Mean over 1e5 independently seeded draws of a constant input.
        let n = 100_000u64;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(1, 1, 3.0));
        let mut total = 0.0;
        for seed in 0..n {
            let d = tape.dropout(x, 0.1, true, seed).unwrap();
            total += tape.value(d).item();
        }
        let mean = total / n as f64;
        assert!((mean - 3.0).abs() / 3.0 < 0.01, "mean {mean}");
    }

    #[test]
    fn softmax_mass_and_masking() {
        let mut tape = Tape::new();
        let x = tape.constant(rand(17, 4, 6));
        let mask: Vec<bool> = (0..24).map(|i| i % 3 == 1).collect();
        let m = tape.masked_fill(x, &mask, SENTINEL).unwrap();
        let s = tape.softmax(m, Axis::Cols);
        let v = tape.value(s);
        for r in 0..4 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (i, p) in v.data().iter().enumerate() {
            if mask[i] {
                assert!(*p < 1e-12);
            }
        }
    }
}
