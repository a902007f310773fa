//! Derivative checks: the stability residual in input space against its
//! shared-feature form, finite-difference oracles, and parameter gradients
//! of the three composite losses.

mod common;

use cbm_auc::config::{ConceptLossKind, ModelKind};
use cbm_auc::data::{Batch, Targets};
use cbm_auc::losses::{loss_cbmauc, theta_reg_input, INPUT_REG_CAP};
use cbm_auc::nets::Model;
use cbm_autograd::{Tape, Tensor};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn input_residual_is_feature_residual_pulled_back() {
    for seed in 0..10u64 {
        for targets in [1, 3] {
            let (err, smallest) = transport_error(seed, targets);
            assert!(smallest > 1e-8, "degenerate residual at seed {seed}");
            assert!(err <= 1e-5, "seed {seed}, {targets} targets: relative error {err}");
        }
    }
}

#[test]
fn constant_relevance_zeroes_both_penalties() {
    assert_eq!(constant_relevance_penalties(11), (0.0, 0.0));
}

#[test]
fn input_penalty_respects_size_cap() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = Model::new(&mlp_cfg(ModelKind::Cbmauc, 2, 3, 1, [3, 4, 4]), &mut rng).unwrap();
    let tape = Tape::new();
    let b = m.bind(&tape);
    let x = tape.leaf(random(&[2, 3, 4, 4], &mut rng));
    let f = m.forward(&b, x, true).unwrap();
    assert!(theta_reg_input(&f, x, 95).is_err());
    assert!(theta_reg_input(&f, x, 96).is_ok());
}

/// Per-example outputs of an evaluation-mode forward pass.
fn eval_outputs(m: &Model, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut shape = vec![1];
    shape.extend_from_slice(&m.cfg.input_shape);
    let p = m.predict(&Tensor::new(shape, x.to_vec())).unwrap();
    (
        p.logits.data().to_vec(),
        p.concepts.data().to_vec(),
        p.theta.unwrap().data().to_vec(),
    )
}

#[test]
fn input_penalty_matches_central_differences() {
    // Two-layer tanh backbone on a 12-dimensional input; eval mode so each
    // example is an independent function of its own input.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cfg = mlp_cfg(ModelKind::Cbmauc, 2, 3, 2, [1, 3, 4]);
    cfg.backbone_widths = vec![7, 6];
    let mut m = Model::new(&cfg, &mut rng).unwrap();
    perturb_bn(&mut m, &mut rng);
    let batch = 3;
    let xs = random(&[batch, 1, 3, 4], &mut rng);

    let tape = Tape::new();
    let b = m.bind(&tape);
    let x = tape.leaf(xs.clone());
    let f = m.forward(&b, x, false).unwrap();
    let analytic = theta_reg_input(&f, x, INPUT_REG_CAP).unwrap().item();

    let eps = 1e-6;
    let (d, n_c, c_t) = (12, 5, 2);
    let mut oracle = 0.0;
    for e in 0..batch {
        let x0 = xs.data()[e * d..(e + 1) * d].to_vec();
        let (_, _, theta) = eval_outputs(&m, &x0);
        // grad_f[t][i], jac_c[j][i]
        let mut grad_f = vec![vec![0.0; d]; c_t];
        let mut jac_c = vec![vec![0.0; d]; n_c];
        for i in 0..d {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[i] += eps;
            xm[i] -= eps;
            let (fp, cp, _) = eval_outputs(&m, &xp);
            let (fm, cm, _) = eval_outputs(&m, &xm);
            for t in 0..c_t {
                grad_f[t][i] = (fp[t] - fm[t]) / (2.0 * eps);
            }
            for j in 0..n_c {
                jac_c[j][i] = (cp[j] - cm[j]) / (2.0 * eps);
            }
        }
        for t in 0..c_t {
            for i in 0..d {
                let through_c: f64 = (0..n_c).map(|j| theta[t * n_c + j] * jac_c[j][i]).sum();
                oracle += (grad_f[t][i] - through_c).powi(2);
            }
        }
    }
    oracle /= batch as f64;
    assert!(oracle > 1e-6);
    let rel = (analytic - oracle).abs() / oracle;
    assert!(rel <= 1e-4, "analytic {analytic} vs oracle {oracle}");
}

#[test]
fn composite_loss_gradients_match_finite_differences() {
    for (kind, params, err) in composite_gradient_errors() {
        assert!(params < 5000);
        assert!(err <= 1e-3, "{kind}: relative error {err}");
    }
}

#[test]
fn bce_concept_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut cfg = mlp_cfg(ModelKind::Cbmauc, 2, 3, 2, [1, 2, 3]);
    cfg.concept_loss = ConceptLossKind::Bce;
    let m = Model::new(&cfg, &mut rng).unwrap();
    let batch = classes_batch(4, &cfg, &mut rng);
    assert!(max_param_grad_error(&m, &batch, cbmauc_loss) <= 1e-3);
}

#[test]
fn losses_are_invariant_under_batch_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = mlp_cfg(ModelKind::Cbmauc, 2, 3, 3, [1, 2, 3]);
    let m = Model::new(&cfg, &mut rng).unwrap();
    let batch = classes_batch(4, &cfg, &mut rng);
    let perm = [2usize, 0, 3, 1];
    let inv = {
        let mut inv = [0usize; 4];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    };
    let permuted = Batch {
        x: {
            let per = batch.x.numel() / 4;
            let mut shape = batch.x.shape().to_vec();
            shape[0] = 4;
            Tensor::new(shape, perm.iter().flat_map(|&p| batch.x.data()[p * per..(p + 1) * per].to_vec()).collect())
        },
        targets: match &batch.targets {
            Targets::Classes(c) => Targets::Classes(perm.iter().map(|&p| c[p]).collect()),
            Targets::Multi(_) => unreachable!(),
        },
        c_sup: Tensor::new(
            vec![4, 2],
            perm.iter().flat_map(|&p| batch.c_sup.row(p).to_vec()).collect(),
        ),
    };
    // The same matched/mismatched pairs, re-indexed for the permuted batch.
    let sigma = [3usize, 0, 1, 2];
    let sigma_p: Vec<usize> = perm.iter().map(|&p| inv[sigma[p]]).collect();

    let eval = |batch: &Batch, sigma: &[usize]| {
        let tape = Tape::new();
        let b = m.bind(&tape);
        let f = m.forward(&b, tape.leaf(batch.x.clone()), true).unwrap();
        loss_cbmauc(&m, &b, &f, batch, Some(sigma), 0.5, 0.3, 1.2).unwrap().breakdown
    };
    let a = eval(&batch, &sigma);
    let p = eval(&permuted, &sigma_p);
    for (u, v) in [
        (a.task, p.task),
        (a.concept, p.concept),
        (a.dis, p.dis),
        (a.theta_reg, p.theta_reg),
        (a.total, p.total),
    ] {
        assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0), "{u} vs {v}");
    }
}

#[test]
fn breakdown_total_recombines_exactly() {
    use cbm_auc::losses::Weights;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = mlp_cfg(ModelKind::Cbmauc, 2, 3, 3, [1, 2, 3]);
    let m = Model::new(&cfg, &mut rng).unwrap();
    let batch = classes_batch(4, &cfg, &mut rng);
    let tape = Tape::new();
    let b = m.bind(&tape);
    let f = m.forward(&b, tape.leaf(batch.x.clone()), true).unwrap();
    let bd = loss_cbmauc(&m, &b, &f, &batch, Some(&[1, 0, 3, 2]), 0.5, 0.01, 2.0).unwrap().breakdown;
    let w = Weights {
        alpha: 0.5,
        beta: 0.01,
        lambda: 2.0,
    };
    assert_eq!(bd.total, bd.recombine(w));
    assert!(bd.task >= 0.0 && bd.concept >= 0.0 && bd.dis >= 0.0 && bd.theta_reg >= 0.0);
}

#[test]
fn degenerate_weights_reduce_to_task_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = mlp_cfg(ModelKind::Cbmauc, 2, 3, 3, [1, 2, 3]);
    let m = Model::new(&cfg, &mut rng).unwrap();
    let batch = classes_batch(4, &cfg, &mut rng);
    let tape = Tape::new();
    let b = m.bind(&tape);
    let f = m.forward(&b, tape.leaf(batch.x.clone()), true).unwrap();
    let bd = loss_cbmauc(&m, &b, &f, &batch, None, 0.0, 0.0, 0.0).unwrap().breakdown;
    assert_eq!(bd.total, bd.task);
}

#[test]
fn aggregate_gradient_is_relevance() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = mlp_cfg(ModelKind::Cbmauc, 2, 3, 3, [1, 2, 3]);
    let m = Model::new(&cfg, &mut rng).unwrap();
    let tape = Tape::new();
    let theta = tape.leaf(random(&[2, 15], &mut rng));
    let c = tape.leaf(random(&[2, 5], &mut rng));
    let logits = m.aggregate(theta, c).unwrap();
    for t in 0..3 {
        let g = tape.grad(logits.slice_cols(t, 1).sum(), &[c]).unwrap()[0].value();
        for e in 0..2 {
            assert_eq!(g.row(e), &theta.value().row(e)[t * 5..t * 5 + 5]);
        }
    }
}
