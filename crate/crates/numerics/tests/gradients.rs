//! Central finite-difference checks for every primitive, run in f64.

use panoseg_numerics::{
    check_op, primitive_suite, Graph, Result, Tensor, Var, SUITE_EPS, SUITE_SAMPLES,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn check<F>(inputs: &[(&str, &[usize])], seed: u64, op: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let report = check_op(inputs, seed, SUITE_EPS, SUITE_SAMPLES, op).unwrap();
    assert!(
        report.max_rel_error <= TOL,
        "max rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
    report.max_rel_error
}

#[test]
fn every_primitive_passes() {
    let suite = primitive_suite().unwrap();
    assert!(suite.len() >= 30);
    for (name, report) in suite {
        assert!(report.checked > 0, "{name} checked nothing");
        assert!(
            report.max_rel_error <= TOL,
            "{name}: {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

#[test]
fn conv_with_bias_and_padding() {
    check(
        &[("x", &[6, 5, 3]), ("w", &[2, 3, 3, 3]), ("b", &[2])],
        77,
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
    );
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn(&[8, 8, 3], 1.0, &mut rng));
        let w = g.constant(Tensor::randn(&[4, 3, 3, 3], 0.3, &mut rng));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.upsample2x(y).unwrap();
        let s = g.softmax(y, 2).unwrap();
        g.value(s).clone()
    };
    assert!(run().bit_eq(&run()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn(&[rows, cols], 5.0, &mut rng));
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(cols) {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardizes(rows in 1usize..5, cols in 2usize..33, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn(&[rows, cols], 3.0, &mut rng));
        let gam = g.constant(Tensor::ones(&[cols]));
        let bet = g.constant(Tensor::zeros(&[cols]));
        let y = g.layer_norm(x, gam, bet).unwrap();
        let stats = |row: &[f32]| {
            let m = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let v = row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / cols as f64;
            (m, v)
        };
        let rows_in = g.value(x).data().chunks(cols);
        for (row_in, row_out) in rows_in.zip(g.value(y).data().chunks(cols)) {
            let (_, var_in) = stats(row_in);
            let (m, v) = stats(row_out);
            // The output variance is var / (var + eps) with eps = 1e-5.
            let expected = var_in / (var_in + 1e-5);
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((v - expected).abs() < 1e-4);
        }
    }

    #[test]
    fn matmul_gradient_random_shapes(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..100) {
        let shapes: [(&str, &[usize]); 2] = [("a", &[m, k]), ("b", &[k, n])];
        check(&shapes, seed, |g, v| g.matmul(v[0], v[1]));
    }

    #[test]
    fn conv_gradient_random_shapes(h in 3usize..7, w in 3usize..7, stride in 1usize..3, pad in 0usize..2, seed in 0u64..100) {
        let shapes: [(&str, &[usize]); 2] = [("x", &[h, w, 2]), ("w", &[2, 3, 3, 2])];
        check(&shapes, seed, |g, v| g.conv2d(v[0], v[1], None, stride, pad));
    }
}

/// Softmax over rows ignores a per-column shift, so the shift's true gradient
/// is zero and its central difference is pure roundoff. The floor keeps such
/// coordinates from reading as large relative errors.
#[test]
fn zero_gradient_is_not_a_relative_error() {
    let report = check_op(&[("a", &[4, 3]), ("r", &[3])], 5, 1e-5, 15, |g, v| {
        let x = g.add_row(v[0], v[1])?;
        g.softmax(x, 0)
    })
    .unwrap();
    assert_eq!(report.checked, 15);
    assert!(report.max_rel_error <= TOL, "{:?}", report.worst);
}
