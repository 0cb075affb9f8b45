//! Kernels compared against naive, independently written reference code.

use dvp_core::numerics::{gelu, layer_norm, matmul, seeded_rng, softmax_rows, Tensor};
use dvp_core::prompt::{generate_dvp, PromptGenerator};
use proptest::prelude::*;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Maclaurin series of erf, summed until terms vanish.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-18 * sum.abs().max(1e-300) {
        n += 1.0;
        term *= -x * x / n;
        sum += term / (2.0 * n + 1.0);
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

fn gelu_oracle(x: f64) -> f64 {
    0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

#[test]
fn matmul_hand_case() {
    let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap();
    assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    let bad = Tensor::zeros(&[2, 3]);
    let err = matmul(&bad, &bad).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn gelu_reference_points() {
    let x = Tensor::new(vec![3], vec![0.0, 3.0, -3.0]).unwrap();
    let y = gelu(&x).unwrap();
    assert_eq!(y.data()[0], 0.0);
    assert!((gelu_oracle(3.0) - 2.995950).abs() < 1e-5);
    assert!((gelu_oracle(-3.0) + 0.004050).abs() < 1e-5);
    assert!((y.data()[1] - 2.995950).abs() < 1e-5);
    assert!((y.data()[2] + 0.004050).abs() < 1e-5);
}

#[test]
fn gelu_matches_series_on_a_grid() {
    let xs: Vec<f64> = (-120..=120).map(|i| i as f64 * 0.05).collect();
    let y = gelu(&Tensor::new(vec![xs.len()], xs.clone()).unwrap()).unwrap();
    for (x, got) in xs.iter().zip(y.data()) {
        assert!((got - gelu_oracle(*x)).abs() < 1e-7 * x.abs().max(1.0), "gelu({x})");
    }
}

#[test]
fn softmax_closed_form() {
    let x = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let y = softmax_rows(&x).unwrap();
    let e = std::f64::consts::E;
    assert_eq!(y.row(0), &[0.5, 0.5]);
    assert!((y.get(1, 0) - e / (e + 1.0)).abs() < 1e-15);
    assert!((y.get(1, 0) - 0.731059).abs() < 1e-6);
    assert!((y.get(1, 1) - 0.268941).abs() < 1e-6);
}

#[test]
fn layer_norm_hand_case() {
    let x = Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap();
    let y = layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-12).unwrap();
    assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    let bias = Tensor::new(vec![2], vec![0.25, -2.0]).unwrap();
    let z = layer_norm(&x, &Tensor::zeros(&[2]), &bias, 1e-5).unwrap();
    assert_eq!(z.data(), bias.data());
}

/// Per-head explicit loops: softmax(q Wq_i (F Wk_i)^T / sqrt(d/h)) F Wv_i,
/// concatenated, then times Wo.
fn dvp_oracle(g: &PromptGenerator, q: &Tensor, f: &Tensor) -> Vec<f64> {
    let d = g.width();
    let hw = d / g.n_heads;
    let proj = |x: &Tensor, w: &Tensor| naive_matmul(x.data(), w.data(), x.rows(), d, d);
    let (qp, kp, vp) = (proj(q, &g.w_q), proj(f, &g.w_k), proj(f, &g.w_v));
    let (nq, nk) = (q.rows(), f.rows());
    let mut heads = vec![0.0; nq * d];
    for h in 0..g.n_heads {
        for i in 0..nq {
            let mut logits = vec![0.0; nk];
            for (j, l) in logits.iter_mut().enumerate() {
                for c in h * hw..(h + 1) * hw {
                    *l += qp[i * d + c] * kp[j * d + c];
                }
                *l /= (hw as f64).sqrt();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                let p = (l - m).exp() / z;
                for c in h * hw..(h + 1) * hw {
                    heads[i * d + c] += p * vp[j * d + c];
                }
            }
        }
    }
    naive_matmul(&heads, g.w_o.data(), nq, d, d)
}

#[test]
fn generate_dvp_matches_per_head_loops() {
    for seed in 0..10 {
        let mut rng = seeded_rng(seed);
        let g = PromptGenerator::new(4, 2, &mut rng).unwrap();
        let q = Tensor::uniform_init(&[2, 4], 1, &mut rng);
        let f = Tensor::uniform_init(&[3, 4], 1, &mut rng);
        let got = generate_dvp(&g, &q, &f).unwrap();
        let want = dvp_oracle(&g, &q, &f);
        assert_eq!(got.shape(), &[2, 4]);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn generate_dvp_single_key_is_value_projection() {
    let mut rng = seeded_rng(3);
    let g = PromptGenerator::new(8, 4, &mut rng).unwrap();
    let q = Tensor::uniform_init(&[1, 8], 1, &mut rng);
    let f = Tensor::uniform_init(&[1, 8], 1, &mut rng);
    let v = naive_matmul(f.data(), g.w_v.data(), 1, 8, 8);
    let want = naive_matmul(&v, g.w_o.data(), 1, 8, 8);
    let got = generate_dvp(&g, &q, &f).unwrap();
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-14);
    }
}

fn int_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-20i32..20).prop_map(f64::from), rows * cols)
}

proptest! {
    #[test]
    fn matmul_equals_triple_loop_on_integers(
        (m, k, n, a, b) in (1usize..9, 1usize..9, 1usize..9)
            .prop_flat_map(|(m, k, n)| (Just(m), Just(k), Just(n), int_matrix(m, k), int_matrix(k, n)))
    ) {
        let ta = Tensor::matrix(m, k, a.clone()).unwrap();
        let tb = Tensor::matrix(k, n, b.clone()).unwrap();
        let got = matmul(&ta, &tb).unwrap();
        prop_assert_eq!(got.data(), &naive_matmul(&a, &b, m, k, n)[..]);
    }

    #[test]
    fn matmul_identity(a in int_matrix(3, 5)) {
        let ta = Tensor::matrix(3, 5, a).unwrap();
        prop_assert_eq!(matmul(&ta, &Tensor::identity(5)).unwrap(), ta);
    }

    #[test]
    fn softmax_rows_are_distributions(
        data in prop::collection::vec(-15.0f64..15.0, 12),
        shift in -100.0f64..100.0,
    ) {
        let x = Tensor::matrix(3, 4, data.clone()).unwrap();
        let y = softmax_rows(&x).unwrap();
        for r in 0..3 {
            let row = y.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        let shifted = Tensor::matrix(3, 4, data.iter().map(|v| v + shift).collect()).unwrap();
        prop_assert!(softmax_rows(&shifted).unwrap().max_abs_diff(&y) < 1e-12);
    }
}

#[test]
fn softmax_rejects_nan() {
    let x = Tensor::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap();
    assert!(softmax_rows(&x).is_err());
}
