//! Helpers shared by the integration suites and the acceptance run.
#![allow(dead_code)]

use cbm_auc::config::{BackboneName, ModelConfig, ModelKind};
use cbm_auc::data::{Batch, Targets};
use cbm_auc::losses::{
    loss_cbm, loss_cbmauc, loss_msenn, stability_residuals, theta_reg_input, theta_reg_shared, LossTerms,
    INPUT_REG_CAP,
};
use cbm_auc::nets::{Bound, Forward, Model};
use cbm_autograd::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

pub fn mlp_cfg(model: ModelKind, d_ex: usize, d_im: usize, targets: usize, input: [usize; 3]) -> ModelConfig {
    ModelConfig {
        model,
        d_ex,
        d_im,
        k: d_im.min(2),
        num_targets: targets,
        backbone: BackboneName::Mlp,
        backbone_widths: vec![10, 8],
        input_shape: input,
        dis_hidden: 6,
        batch_size: 4,
        ..ModelConfig::default()
    }
}

/// Pushes batch-norm running statistics away from the identity so eval
/// mode is not trivially equal to an affine-free path.
pub fn perturb_bn(m: &mut Model, rng: &mut ChaCha8Rng) {
    for s in &mut m.bn {
        s.mean.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        s.var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
    }
}

pub fn norm(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn classes_batch(n: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Batch {
    let mut shape = vec![n];
    shape.extend_from_slice(&cfg.input_shape);
    let c_sup = Tensor::new(
        vec![n, cfg.d_ex],
        (0..n * cfg.d_ex).map(|_| f64::from(rng.gen_range(0..2u8))).collect(),
    );
    Batch {
        x: random(&shape, rng),
        targets: Targets::Classes((0..n).map(|_| rng.gen_range(0..cfg.num_targets)).collect()),
        c_sup,
    }
}

pub type LossFn = for<'t> fn(&Model, &Bound<'t>, &Forward<'t>, &Batch) -> LossTerms<'t>;

pub fn loss_value(m: &Model, batch: &Batch, loss: LossFn) -> f64 {
    let tape = Tape::new();
    let b = m.bind(&tape);
    let f = m.forward(&b, tape.leaf(batch.x.clone()), true).unwrap();
    loss(m, &b, &f, batch).total.item()
}

/// Largest per-entry relative gradient error; entries where both values
/// are below 1e-7 are compared absolutely.
pub fn max_param_grad_error(m: &Model, batch: &Batch, loss: LossFn) -> f64 {
    let tape = Tape::new();
    let b = m.bind(&tape);
    let f = m.forward(&b, tape.leaf(batch.x.clone()), true).unwrap();
    let total = loss(m, &b, &f, batch).total;
    let grads = tape.grad(total, &b.vars).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        let g = g.value();
        for k in 0..g.numel() {
            let mut plus = m.clone();
            plus.params[pi].value.data_mut()[k] += h;
            let mut minus = m.clone();
            minus.params[pi].value.data_mut()[k] -= h;
            let numeric = (loss_value(&plus, batch, loss) - loss_value(&minus, batch, loss)) / (2.0 * h);
            let a = g.data()[k];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-7 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
            worst = worst.max(err);
        }
    }
    worst
}

pub fn cbm_loss<'t>(m: &Model, b: &Bound<'t>, f: &Forward<'t>, batch: &Batch) -> LossTerms<'t> {
    loss_cbm(m, b, f, batch, 0.7).unwrap()
}

pub fn msenn_loss<'t>(m: &Model, b: &Bound<'t>, f: &Forward<'t>, batch: &Batch) -> LossTerms<'t> {
    loss_msenn(m, b, f, batch, Some(&[1, 2, 3, 0]), 0.5, 0.3).unwrap()
}

pub fn cbmauc_loss<'t>(m: &Model, b: &Bound<'t>, f: &Forward<'t>, batch: &Batch) -> LossTerms<'t> {
    loss_cbmauc(m, b, f, batch, Some(&[3, 0, 1, 2]), 0.5, 0.3, 1.2).unwrap()
}

/// Largest `‖r_x − (∂h/∂x)ᵀ r_h‖ / ‖r_x‖` over targets for one random
/// net and batch; also returns the smallest `‖r_x‖` seen.
pub fn transport_error(seed: u64, targets: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = mlp_cfg(ModelKind::Cbmauc, 2, 3, targets, [3, 4, 4]);
    let m = Model::new(&cfg, &mut rng).unwrap();
    let tape = Tape::new();
    let b = m.bind(&tape);
    let x = tape.leaf(random(&[4, 3, 4, 4], &mut rng));
    let f = m.forward(&b, x, true).unwrap();
    let theta = f.theta.unwrap();
    let r_h = stability_residuals(f.h, f.c, theta, f.logits).unwrap();
    let r_x = stability_residuals(x, f.c, theta, f.logits).unwrap();
    let (mut worst, mut smallest) = (0.0f64, f64::INFINITY);
    for (rh, rx) in r_h.iter().zip(&r_x) {
        let pulled = tape.vjp(f.h, *rh, &[x]).unwrap()[0].value();
        let rx = rx.value();
        let diff = rx.zip(&pulled, |a, b| a - b);
        worst = worst.max(norm(&rx).max(f64::MIN_POSITIVE).recip() * norm(&diff));
        smallest = smallest.min(norm(&rx));
    }
    (worst, smallest)
}

/// `(theta_reg_shared, theta_reg_input)` with the relevance network's last
/// layer zeroed, so relevances are constant in the input.
pub fn constant_relevance_penalties(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = mlp_cfg(ModelKind::Cbmauc, 2, 3, 3, [3, 4, 4]);
    let mut m = Model::new(&cfg, &mut rng).unwrap();
    m.param_mut("theta.2.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let tape = Tape::new();
    let b = m.bind(&tape);
    let x = tape.leaf(random(&[4, 3, 4, 4], &mut rng));
    let f = m.forward(&b, x, true).unwrap();
    (
        theta_reg_shared(&f).unwrap().item(),
        theta_reg_input(&f, x, INPUT_REG_CAP).unwrap().item(),
    )
}

/// Worst gradient error of each composite loss on its own small MLP net,
/// with that net's parameter count.
pub fn composite_gradient_errors() -> Vec<(ModelKind, usize, f64)> {
    let cases: [(ModelKind, usize, usize, LossFn); 3] = [
        (ModelKind::Cbm, 3, 0, cbm_loss),
        (ModelKind::Msenn, 0, 4, msenn_loss),
        (ModelKind::Cbmauc, 2, 3, cbmauc_loss),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (kind, d_ex, d_im, loss))| {
            let mut rng = ChaCha8Rng::seed_from_u64(20 + i as u64);
            let cfg = mlp_cfg(kind, d_ex, d_im, 3, [1, 2, 3]);
            let m = Model::new(&cfg, &mut rng).unwrap();
            let batch = classes_batch(4, &cfg, &mut rng);
            (kind, m.num_params(), max_param_grad_error(&m, &batch, loss))
        })
        .collect()
}

/// Pearson r from raw moments with the `n − 1` convention.
pub fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    let cov = (sxy - sx * sy / n) / (n - 1.0);
    let vx = (sxx - sx * sx / n) / (n - 1.0);
    let vy = (syy - sy * sy / n) / (n - 1.0);
    cov / (vx * vy).sqrt()
}

pub fn brute_r_bar_sq(truth: &Tensor, pred: &Tensor) -> f64 {
    let col = |t: &Tensor, j: usize| (0..t.rows()).map(|i| t.at2(i, j)).collect::<Vec<_>>();
    let mut total = 0.0;
    for j in 0..truth.cols() {
        let mut best: f64 = 0.0;
        for i in 0..pred.cols() {
            best = best.max(brute_pearson(&col(truth, j), &col(pred, i)).powi(2));
        }
        total += best;
    }
    total / truth.cols() as f64
}

/// Solves `A z = b` in place by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut z = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * z[c]).sum();
        z[r] = (b[r] - s) / a[r][r];
    }
    z
}

/// Normal equations for `[X 1] β ≈ y` with ridge `τ` on the slopes only.
pub fn normal_equations(x: &Tensor, y: &Tensor, tau: f64) -> Vec<Vec<f64>> {
    let (n, p) = (x.rows(), x.cols());
    let design: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = x.row(i).to_vec();
            r.push(1.0);
            r
        })
        .collect();
    let mut ata = vec![vec![0.0; p + 1]; p + 1];
    for r in &design {
        for a in 0..=p {
            for b in 0..=p {
                ata[a][b] += r[a] * r[b];
            }
        }
    }
    for (j, row) in ata.iter_mut().enumerate().take(p) {
        row[j] += tau;
    }
    (0..y.cols())
        .map(|k| {
            let atb: Vec<f64> = (0..=p).map(|a| (0..n).map(|i| design[i][a] * y.at2(i, k)).sum()).collect();
            gauss_solve(ata.clone(), atb)
        })
        .collect()
}


pub fn bit_rows(bits: &[&str]) -> Vec<Vec<bool>> {
    bits.iter().map(|r| r.chars().map(|c| c == '1').collect()).collect()
}

/// `(name, computed, hand value)` for a 6-sample, 4-action case with two
/// concepts.
pub fn f1_hand_case() -> Vec<(String, f64, f64)> {
    let pred = bit_rows(&["1010", "1100", "0000", "1011", "0110", "1000"]);
    let truth = bit_rows(&["1000", "1101", "0000", "0011", "0100", "1000"]);
    // action 0: tp 3 (rows 0,1,5), fp 1 (row 3), fn 0       -> 6/7
    // action 1: tp 2 (rows 1,4), fp 0, fn 0                -> 1
    // action 2: tp 1 (row 3), fp 2 (rows 0,4), fn 0        -> 2/4
    // action 3: tp 1 (row 3), fp 0, fn 1 (row 1)           -> 2/3
    // global:   tp 7, fp 3, fn 1                           -> 14/18
    let cpt_pred = bit_rows(&["10", "01", "11", "00", "10", "01"]);
    let cpt_truth = bit_rows(&["10", "00", "10", "00", "11", "01"]);
    // concept 0: tp 3, fp 0, fn 0 -> 1
    // concept 1: tp 1 (row 5), fp 2 (rows 1,2), fn 1 (row 4) -> 2/5
    // global: tp 4, fp 2, fn 1 -> 8/11
    let f = cbm_auc::evaluation::f1_suite(&pred, &truth, &cpt_pred, &cpt_truth).unwrap();
    let actions = [6.0 / 7.0, 1.0, 2.0 / 4.0, 2.0 / 3.0];
    let concepts = [1.0, 2.0 / 5.0];
    let mut out = Vec::new();
    for (i, (&got, &want)) in f.per_action.iter().zip(&actions).enumerate() {
        out.push((format!("action {i}"), got, want));
    }
    for (i, (&got, &want)) in f.per_concept.iter().zip(&concepts).enumerate() {
        out.push((format!("concept {i}"), got, want));
    }
    out.push(("mF1".into(), f.m_f1, actions.iter().sum::<f64>() / 4.0));
    out.push(("F1_all".into(), f.f1_all, 14.0 / 18.0));
    out.push(("mF1_cpt".into(), f.m_f1_cpt, concepts.iter().sum::<f64>() / 2.0));
    out.push(("F1_cpt_all".into(), f.f1_cpt_all, 8.0 / 11.0));
    out
}
