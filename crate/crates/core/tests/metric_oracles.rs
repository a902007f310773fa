//! Metrics against independent brute-force and closed-form oracles.

mod common;

use cbm_auc::evaluation::{concept_correlation, f1_suite, fit_affine, linear_probe};
use common::{bit_rows as rows, brute_r_bar_sq, f1_hand_case, normal_equations};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> cbm_autograd::Tensor {
    common::random(&[rows, cols], rng)
}

#[test]
fn correlation_matches_pairwise_brute_force() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = random(3, 2, &mut rng);
        for d in [2, 3] {
            let pred = random(3, d, &mut rng);
            let got = concept_correlation(&truth, &pred).unwrap();
            let want = brute_r_bar_sq(&truth, &pred);
            assert!((got - want).abs() <= 1e-10, "seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn f1_suite_matches_hand_counts() {
    let case = f1_hand_case();
    assert_eq!(case.len(), 10);
    for (name, got, want) in case {
        assert_eq!(got, want, "{name}");
    }
}

#[test]
fn f1_zero_division_rules() {
    let none = rows(&["00", "00"]);
    let some = rows(&["01", "00"]);
    let f = f1_suite(&none, &none, &none, &none).unwrap();
    assert_eq!((f.per_action.clone(), f.f1_all, f.m_f1_cpt), (vec![1.0, 1.0], 1.0, 1.0));
    let f = f1_suite(&none, &some, &some, &none).unwrap();
    assert_eq!(f.per_action, vec![1.0, 0.0]);
    assert_eq!(f.per_concept, vec![1.0, 0.0]);
}

#[test]
fn probe_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = random(50, 4, &mut rng);
    let y = random(50, 4, &mut rng);
    let tau = 1e-3;
    let (w, b) = fit_affine(&x, &y, tau).unwrap();
    let oracle = normal_equations(&x, &y, tau);
    for (k, beta) in oracle.iter().enumerate() {
        for j in 0..4 {
            assert!((w[(j, k)] - beta[j]).abs() <= 1e-8);
        }
        assert!((b[k] - beta[4]).abs() <= 1e-8);
    }

    let (xt, yt) = (random(20, 4, &mut rng), random(20, 4, &mut rng));
    let mut sse = 0.0;
    for i in 0..20 {
        for (k, beta) in oracle.iter().enumerate() {
            let fit: f64 = (0..4).map(|j| xt.at2(i, j) * beta[j]).sum::<f64>() + beta[4];
            sse += (fit - yt.at2(i, k)).powi(2);
        }
    }
    let oracle_rmse = (sse / 80.0).sqrt();
    let got = linear_probe(&x, &y, &xt, &yt, tau).unwrap();
    assert!((got - oracle_rmse).abs() <= 1e-8);
}
