//! Objective terms and their combinations for the three model kinds.

use std::cell::Cell;

use cbm_autograd::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::{ConceptLossKind, ModelKind, TaskKind};
use crate::data::{Batch, Targets};
use crate::error::{CoreError, Result};
use crate::nets::{Bound, Forward, Model};
use crate::training::make_negative_pairs;

thread_local! {
    static JACOBIAN_EVALS: Cell<usize> = const { Cell::new(0) };
}

/// Stability-penalty evaluations on this thread since the last reset.
pub fn jacobian_count() -> usize {
    JACOBIAN_EVALS.with(Cell::get)
}

pub fn reset_jacobian_count() {
    JACOBIAN_EVALS.with(|c| c.set(0));
}

fn bump_jacobian_count() {
    JACOBIAN_EVALS.with(|c| c.set(c.get() + 1));
}

/// Default size cap for [`theta_reg_input`], in input entries per call.
pub const INPUT_REG_CAP: usize = 1 << 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub concept: f64,
    pub dis: f64,
    pub theta_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `((task + α·dis) + β·theta_reg) + λ·concept`, in the same order the
    /// tape evaluates it.
    pub fn recombine(&self, w: Weights) -> f64 {
        ((self.task + w.alpha * self.dis) + w.beta * self.theta_reg) + w.lambda * self.concept
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

/// Softmax cross-entropy (multiclass) or mean binary cross-entropy on
/// sigmoided logits (multilabel).
pub fn task_loss<'t>(logits: Var<'t>, targets: &Targets, kind: TaskKind) -> Result<Var<'t>> {
    let shape = logits.shape();
    let (n, c) = (shape[0], shape[1]);
    if targets.len() != n {
        return Err(CoreError::Shape(format!("{} targets for {n} logit rows", targets.len())));
    }
    let tape = logits.tape();
    match (kind, targets) {
        (TaskKind::Multiclass, Targets::Classes(ys)) => {
            let mut onehot = vec![0.0; n * c];
            for (i, &y) in ys.iter().enumerate() {
                if y >= c {
                    return Err(CoreError::Invalid(format!("class {y} out of range for {c} targets")));
                }
                onehot[i * c + y] = 1.0;
            }
            let v = logits.value();
            let maxes: Vec<f64> = (0..n)
                .map(|i| v.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let shift = tape.leaf(Tensor::new(vec![n, 1], maxes)).broadcast_cols(c);
            let shifted = logits.sub(shift);
            let lse = shifted.exp().sum_cols().ln();
            let picked = shifted.mul(tape.leaf(Tensor::new(vec![n, c], onehot))).sum_cols();
            Ok(lse.sub(picked).mean())
        }
        (TaskKind::Multilabel, Targets::Multi(y)) => {
            if y.shape() != [n, c] {
                return Err(CoreError::Shape(format!("targets {:?} vs logits {shape:?}", y.shape())));
            }
            if y.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(CoreError::Invalid("multilabel targets must lie in [0, 1]".into()));
            }
            let y = tape.leaf(y.clone());
            Ok(logits.softplus().sub(y.mul(logits)).mean())
        }
        _ => Err(CoreError::Invalid(format!("targets do not match task kind {kind:?}"))),
    }
}

/// Sum over concepts of the per-concept loss, averaged over the batch.
/// BCE is additionally averaged over concepts.
pub fn concept_loss<'t>(pred: Var<'t>, c_sup: &Tensor, kind: ConceptLossKind) -> Result<Var<'t>> {
    let shape = pred.shape();
    if shape != c_sup.shape() {
        return Err(CoreError::Shape(format!(
            "concept predictions {shape:?} vs labels {:?}",
            c_sup.shape()
        )));
    }
    let tape = pred.tape();
    let (n, d) = (shape[0], shape[1]);
    if d == 0 || n == 0 {
        return Ok(tape.scalar(0.0));
    }
    let y = tape.leaf(c_sup.clone());
    Ok(match kind {
        ConceptLossKind::Mse => pred.sub(y).square().sum().scale(1.0 / n as f64),
        ConceptLossKind::Bce => {
            const EPS: f64 = 1e-12;
            let one_minus_y = tape.leaf(c_sup.map(|v| 1.0 - v));
            let pos = y.mul(pred.add_scalar(EPS).ln());
            let neg = one_minus_y.mul(pred.neg().add_scalar(1.0 + EPS).ln());
            pos.add(neg).mean().neg()
        }
    })
}

/// `mean_b[(real_b − a)² + (fake_b − b)²]`.
pub fn dis_loss<'t>(real: Var<'t>, fake: Var<'t>, a: f64, b: f64) -> Var<'t> {
    let n = real.shape()[0] as f64;
    let r = real.add_scalar(-a).square().sum();
    let f = fake.add_scalar(-b).square().sum();
    r.add(f).scale(1.0 / n)
}

/// Per-target residuals `∇_wrt Σ_b f_t − vjp(c, θ_t)` with respect to `wrt`.
///
/// `theta` is target-major, `[batch, targets · concepts]`. Gradients are
/// batch sums, so any coupling between examples (batch normalization in
/// training mode) is part of the total derivative.
pub fn stability_residuals<'t>(wrt: Var<'t>, c: Var<'t>, theta: Var<'t>, logits: Var<'t>) -> Result<Vec<Var<'t>>> {
    let tape = wrt.tape();
    let d = c.shape()[1];
    let targets = logits.shape()[1];
    if theta.shape()[1] != targets * d {
        return Err(CoreError::Shape(format!(
            "relevance width {} != {targets} x {d}",
            theta.shape()[1]
        )));
    }
    let mut out = Vec::with_capacity(targets);
    for t in 0..targets {
        let total = tape.grad(logits.slice_cols(t, 1).sum(), &[wrt])?[0];
        let through_c = tape.vjp(c, theta.slice_cols(t * d, d), &[wrt])?[0];
        out.push(total.sub(through_c));
    }
    Ok(out)
}

/// `Σ_t ‖r_t‖² / batch`.
pub fn residual_penalty<'t>(residuals: &[Var<'t>], batch: usize) -> Result<Var<'t>> {
    let first = residuals
        .first()
        .ok_or_else(|| CoreError::Invalid("no residuals".into()))?;
    let mut acc = first.square().sum();
    for r in &residuals[1..] {
        acc = acc.add(r.square().sum());
    }
    Ok(acc.scale(1.0 / batch as f64))
}

fn relevance_parts<'t>(fwd: &Forward<'t>) -> Result<Var<'t>> {
    fwd.theta
        .ok_or_else(|| CoreError::Invalid("stability penalty needs a relevance network".into()))
}

/// Stability penalty in shared-feature space: the Jacobian is only
/// `concepts × D_h`.
pub fn theta_reg_shared<'t>(fwd: &Forward<'t>) -> Result<Var<'t>> {
    let theta = relevance_parts(fwd)?;
    bump_jacobian_count();
    let r = stability_residuals(fwd.h, fwd.c, theta, fwd.logits)?;
    residual_penalty(&r, fwd.h.shape()[0])
}

/// Stability penalty in input space. `fwd` must have been computed from
/// `x`. Meant for checking the shared-feature form on small inputs.
pub fn theta_reg_input<'t>(fwd: &Forward<'t>, x: Var<'t>, cap: usize) -> Result<Var<'t>> {
    let theta = relevance_parts(fwd)?;
    let size = x.value().numel();
    if size > cap {
        return Err(CoreError::Invalid(format!(
            "input of {size} entries exceeds the input-space penalty cap of {cap}"
        )));
    }
    bump_jacobian_count();
    let r = stability_residuals(x, fwd.c, theta, fwd.logits)?;
    residual_penalty(&r, x.shape()[0])
}

/// Scalar total plus the per-term values.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
}

/// Generic combination used by the three model-specific losses.
///
/// `sigma` is the negative-pair derangement; it is required when
/// `alpha > 0`.
pub fn combined_loss<'t>(
    model: &Model,
    b: &Bound<'t>,
    fwd: &Forward<'t>,
    batch: &Batch,
    sigma: Option<&[usize]>,
    w: Weights,
) -> Result<LossTerms<'t>> {
    let cfg = &model.cfg;
    let tape = fwd.h.tape();
    let zero = || tape.scalar(0.0);
    let task = task_loss(fwd.logits, &batch.targets, cfg.task_kind)?;

    let dis = if w.alpha > 0.0 && cfg.uses_discriminator() {
        let sigma = sigma.ok_or_else(|| CoreError::Invalid("discriminator term needs negative pairs".into()))?;
        let h = if cfg.dis_detach_h { fwd.h.detach() } else { fwd.h };
        let pair = make_negative_pairs(fwd.c, h, sigma)?;
        dis_loss(model.discriminate(b, pair.z)?, model.discriminate(b, pair.z_fake)?, 1.0, 0.0)
    } else {
        zero()
    };

    let reg = if w.beta > 0.0 && cfg.model != ModelKind::Cbm {
        theta_reg_shared(fwd)?
    } else {
        zero()
    };

    let concept = if w.lambda > 0.0 && cfg.model != ModelKind::Msenn {
        if batch.c_sup.cols() != cfg.d_ex {
            return Err(CoreError::Invalid(format!(
                "batch has {} concept labels, model expects {}",
                batch.c_sup.cols(),
                cfg.d_ex
            )));
        }
        concept_loss(fwd.c_ex, &batch.c_sup, cfg.concept_loss)?
    } else {
        zero()
    };

    let total = task
        .add(dis.scale(w.alpha))
        .add(reg.scale(w.beta))
        .add(concept.scale(w.lambda));
    let breakdown = LossBreakdown {
        task: task.item(),
        concept: concept.item(),
        dis: dis.item(),
        theta_reg: reg.item(),
        total: total.item(),
    };
    Ok(LossTerms { total, breakdown })
}

fn require_kind(model: &Model, kind: ModelKind) -> Result<()> {
    if model.cfg.model != kind {
        return Err(CoreError::Invalid(format!("expected a {kind} model, got {}", model.cfg.model)));
    }
    Ok(())
}

/// Task loss plus `λ` times the concept loss.
pub fn loss_cbm<'t>(model: &Model, b: &Bound<'t>, fwd: &Forward<'t>, batch: &Batch, lambda: f64) -> Result<LossTerms<'t>> {
    require_kind(model, ModelKind::Cbm)?;
    let w = Weights {
        alpha: 0.0,
        beta: 0.0,
        lambda,
    };
    combined_loss(model, b, fwd, batch, None, w)
}

/// Task loss plus discriminator and stability terms; no concept supervision.
pub fn loss_msenn<'t>(
    model: &Model,
    b: &Bound<'t>,
    fwd: &Forward<'t>,
    batch: &Batch,
    sigma: Option<&[usize]>,
    alpha: f64,
    beta: f64,
) -> Result<LossTerms<'t>> {
    require_kind(model, ModelKind::Msenn)?;
    let w = Weights {
        alpha,
        beta,
        lambda: 0.0,
    };
    combined_loss(model, b, fwd, batch, sigma, w)
}

#[allow(clippy::too_many_arguments)]
pub fn loss_cbmauc<'t>(
    model: &Model,
    b: &Bound<'t>,
    fwd: &Forward<'t>,
    batch: &Batch,
    sigma: Option<&[usize]>,
    alpha: f64,
    beta: f64,
    lambda: f64,
) -> Result<LossTerms<'t>> {
    require_kind(model, ModelKind::Cbmauc)?;
    combined_loss(model, b, fwd, batch, sigma, Weights { alpha, beta, lambda })
}
