//! Finite-difference checks of every primitive on random small tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;
use crate::tensor::Tensor;

const SEEDS: u64 = 100;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Entries bounded away from zero, for kinked primitives.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(1e-3..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Reduces a tensor to a scalar with fixed random weights so every output
/// entry contributes a distinct sensitivity.
fn weighted_sum(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone())?;
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn check_unary(kind: Primitive, make: impl Fn(&mut ChaCha8Rng, usize, usize) -> Tensor) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(1..=8);
        let cols = rng.random_range(1..=8);
        let at = make(&mut rng, rows, cols);
        let mut tape = Tape::new();
        let probe = tape.constant(at.clone()).unwrap();
        let out = tape.apply(kind.clone(), &[probe]).unwrap();
        let (orows, ocols) = tape.value(out).shape();
        let weights = random(&mut rng, orows, ocols, -1.0, 1.0);
        let report = finite_difference_check(
            |tape, x| {
                let y = tape.apply(kind.clone(), &[x])?;
                weighted_sum(tape, y, &weights)
            },
            &at,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{kind} seed {seed}: {}", report.max_rel_error);
    }
}

/// Checks each argument of a binary/ternary primitive in turn.
fn check_nary(
    kind: Primitive,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
        let out = tape.apply(kind.clone(), &vars).unwrap();
        let (orows, ocols) = tape.value(out).shape();
        let weights = random(&mut rng, orows, ocols, -1.0, 1.0);
        for which in 0..inputs.len() {
            let report = finite_difference_check(
                |tape, x| {
                    let mut args = Vec::with_capacity(inputs.len());
                    for (i, t) in inputs.iter().enumerate() {
                        args.push(if i == which { x } else { tape.constant(t.clone())? });
                    }
                    let y = tape.apply(kind.clone(), &args)?;
                    weighted_sum(tape, y, &weights)
                },
                &inputs[which],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(
                report.passed,
                "{kind} seed {seed} input {which}: {}",
                report.max_rel_error
            );
        }
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=8), rng.random_range(1..=8))
}

#[test]
fn elementwise_unary() {
    check_unary(Primitive::Relu, away_from_zero);
    check_unary(Primitive::Abs, away_from_zero);
    check_unary(Primitive::Log, |r, m, n| random(r, m, n, 0.1, 3.0));
    check_unary(Primitive::Sqrt, |r, m, n| random(r, m, n, 0.1, 3.0));
    check_unary(Primitive::Exp, |r, m, n| random(r, m, n, -2.0, 2.0));
    check_unary(Primitive::Square, |r, m, n| random(r, m, n, -2.0, 2.0));
    check_unary(Primitive::Scale(-0.7), |r, m, n| random(r, m, n, -2.0, 2.0));
    check_unary(Primitive::AddScalar(3.0), |r, m, n| random(r, m, n, -2.0, 2.0));
}

#[test]
fn row_and_reduction_ops() {
    let any = |r: &mut ChaCha8Rng, m, n| random(r, m, n, -3.0, 3.0);
    check_unary(Primitive::SoftmaxRows, any);
    check_unary(Primitive::LogSoftmaxRows, any);
    check_unary(Primitive::MeanAll, any);
    check_unary(Primitive::SumAll, any);
    check_unary(Primitive::ColumnMean, any);
    check_unary(Primitive::RowSum, any);
}

#[test]
fn pick_columns() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = dims(&mut rng);
        let cols: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
        let at = random(&mut rng, m, n, -2.0, 2.0);
        let weights = random(&mut rng, m, 1, -1.0, 1.0);
        let r = finite_difference_check(
            |tape, x| {
                let y = tape.pick_columns(x, cols.clone())?;
                weighted_sum(tape, y, &weights)
            },
            &at,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed);
    }
}

#[test]
fn binary_ops() {
    let same = |lo: f64, hi: f64| {
        move |r: &mut ChaCha8Rng| {
            let (m, n) = dims(r);
            vec![random(r, m, n, -2.0, 2.0), random(r, m, n, lo, hi)]
        }
    };
    check_nary(Primitive::Add, same(-2.0, 2.0));
    check_nary(Primitive::Sub, same(-2.0, 2.0));
    check_nary(Primitive::Mul, same(-2.0, 2.0));
    check_nary(Primitive::Div, same(0.5, 2.0));
    check_nary(Primitive::Matmul, |r| {
        let (m, k) = dims(r);
        let n = r.random_range(1..=8);
        vec![random(r, m, k, -1.0, 1.0), random(r, k, n, -1.0, 1.0)]
    });
    check_nary(Primitive::MatmulTransposed, |r| {
        let (m, k) = dims(r);
        let n = r.random_range(1..=8);
        vec![random(r, m, k, -1.0, 1.0), random(r, n, k, -1.0, 1.0)]
    });
    for kind in [Primitive::AddRowBias, Primitive::SubRow] {
        check_nary(kind, |r| {
            let (m, n) = dims(r);
            vec![random(r, m, n, -1.0, 1.0), random(r, 1, n, -1.0, 1.0)]
        });
    }
}

#[test]
fn batchnorm_both_modes() {
    let make = |r: &mut ChaCha8Rng| {
        let m = r.random_range(2..=8);
        let n = r.random_range(1..=8);
        vec![
            random(r, m, n, -2.0, 2.0),
            random(r, 1, n, 0.5, 1.5),
            random(r, 1, n, -0.5, 0.5),
        ]
    };
    check_nary(Primitive::BatchNorm(BatchNormMode::Train { eps: 1e-5 }), make);
    check_nary(
        Primitive::BatchNorm(BatchNormMode::Eval {
            mean: vec![0.1; 8],
            var: vec![0.7; 8],
            eps: 1e-5,
        }),
        |r| {
            let mut v = make(r);
            // eval statistics are fixed-width; pad to 8 columns
            let m = v[0].rows();
            v[0] = random(r, m, 8, -2.0, 2.0);
            v[1] = random(r, 1, 8, 0.5, 1.5);
            v[2] = random(r, 1, 8, -0.5, 0.5);
            v
        },
    );
}

#[test]
fn batchnorm_train_standardizes_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, 64, 5, -10.0, 30.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let g = tape.constant(Tensor::full(1, 5, 1.0)).unwrap();
    let b = tape.constant(Tensor::zeros(1, 5)).unwrap();
    let (y, _) = tape.batchnorm_train(xv, g, b, 1e-5).unwrap();
    let y = tape.value(y);
    for (m, v) in y.column_means().iter().zip(y.column_variances()) {
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-6, "{v}");
    }
}

#[test]
fn batchnorm_eval_is_affine() {
    // f(a x1 + (1-a) x2) == a f(x1) + (1-a) f(x2) for an affine map.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x1 = random(&mut rng, 4, 3, -2.0, 2.0);
    let x2 = random(&mut rng, 4, 3, -2.0, 2.0);
    let apply = |x: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let g = tape.constant(Tensor::row_vector(vec![2.0, 0.5, 1.0])).unwrap();
        let b = tape.constant(Tensor::row_vector(vec![0.1, -0.2, 0.3])).unwrap();
        let y = tape
            .batchnorm_eval(xv, g, b, vec![0.5, -1.0, 0.0], vec![2.0, 0.25, 1.0], 1e-5)
            .unwrap();
        tape.value(y).clone()
    };
    let a = 0.3;
    let mix = Tensor::new(
        4,
        3,
        x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + (1.0 - a) * q).collect(),
    )
    .unwrap();
    let (f1, f2, fm) = (apply(&x1), apply(&x2), apply(&mix));
    for i in 0..fm.len() {
        let expect = a * f1.data()[i] + (1.0 - a) * f2.data()[i];
        assert!((fm.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn tied_weight_gradient_matches_composite_difference() {
    // W used directly and transposed: the check differentiates the composite.
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k) = dims(&mut rng);
        let m = rng.random_range(1..=8);
        let x = random(&mut rng, m, k, -1.0, 1.0);
        let y = random(&mut rng, m, n, -1.0, 1.0);
        let w = random(&mut rng, n, k, -1.0, 1.0);
        let composite = |tape: &mut Tape, wv: Var| -> Result<Var> {
            let xv = tape.constant(x.clone())?;
            let yv = tape.constant(y.clone())?;
            let a = tape.matmul_transposed(xv, wv)?; // m x n
            let b = tape.matmul(yv, wv)?; // m x k
            let a2 = tape.square(a)?;
            let b2 = tape.square(b)?;
            let sa = tape.mean_all(a2)?;
            let sb = tape.mean_all(b2)?;
            tape.add(sa, sb)
        };
        let r = finite_difference_check(composite, &w, 1e-5, 1e-4).unwrap();
        assert!(r.passed, "seed {seed}: {}", r.max_rel_error);
        // either single path alone gives a different gradient
        let only_a = finite_difference_check(
            |tape: &mut Tape, wv: Var| {
                let xv = tape.constant(x.clone())?;
                let a = tape.matmul_transposed(xv, wv)?;
                let a2 = tape.square(a)?;
                tape.mean_all(a2)
            },
            &w,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert_ne!(only_a.analytic, r.analytic);
    }
}

#[test]
fn reruns_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 6, 4, -1.0, 1.0);
        let w = random(&mut rng, 3, 4, -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x).unwrap();
        let wv = tape.leaf(w).unwrap();
        let h = tape.matmul_transposed(xv, wv).unwrap();
        let s = tape.softmax_rows(h).unwrap();
        let l = tape.log(s).unwrap();
        let loss = tape.mean_all(l).unwrap();
        let g = tape.backward(loss).unwrap();
        (
            tape.value(loss).data().to_vec(),
            g.get(xv).unwrap().data().to_vec(),
            g.get(wv).unwrap().data().to_vec(),
        )
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
