//! Metrics: task error, concept RMSE, linear probe, concept correlation,
//! F1 suite, parameter accounting, and the limited-supervision sweep.

use std::path::Path;

use cbm_autograd::{sigmoid, Tensor};
use nalgebra::DMatrix;
use num_rational::Ratio;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, ModelKind, TaskKind};
use crate::data::{fisher_yates, Dataset, Label};
use crate::error::{CoreError, Result};
use crate::nets::{Model, ParamGroup, Predictions};
use crate::training::train;

/// Ridge term of the linear probe.
pub const PROBE_TAU: f64 = 1e-3;
/// Fraction of the evaluation set used to fit the probe.
pub const PROBE_TRAIN_FRACTION: f64 = 0.8;

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            t.row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

/// Fraction of mismatched class indices.
pub fn task_error_01(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(CoreError::Shape(format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    if pred.is_empty() {
        return Err(CoreError::Invalid("no predictions".into()));
    }
    let wrong = pred.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / pred.len() as f64)
}

/// Root mean squared deviation over all entries.
pub fn concept_rmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(CoreError::Shape(format!("{:?} vs {:?}", pred.shape(), truth.shape())));
    }
    if pred.numel() == 0 {
        return Err(CoreError::Invalid("empty concept matrix".into()));
    }
    let sse: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sse / pred.numel() as f64).sqrt())
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Affine ridge fit from `x` to `y`, returning `(weights, intercept)`.
///
/// Columns are centered so the intercept is not penalized; the penalized
/// least-squares system `[X; √τ I] W = [Y; 0]` is solved by QR.
pub fn fit_affine(x: &Tensor, y: &Tensor, tau: f64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (n, p, q) = (x.rows(), x.cols(), y.cols());
    if y.rows() != n || n == 0 {
        return Err(CoreError::Shape(format!("probe inputs have {n} and {} rows", y.rows())));
    }
    let xm = to_matrix(x);
    let ym = to_matrix(y);
    let x_mean: Vec<f64> = (0..p).map(|j| xm.column(j).mean()).collect();
    let y_mean: Vec<f64> = (0..q).map(|j| ym.column(j).mean()).collect();
    if p == 0 {
        return Ok((DMatrix::zeros(0, q), y_mean));
    }
    let mut a = DMatrix::zeros(n + p, p);
    let mut b = DMatrix::zeros(n + p, q);
    for i in 0..n {
        for j in 0..p {
            a[(i, j)] = xm[(i, j)] - x_mean[j];
        }
        for j in 0..q {
            b[(i, j)] = ym[(i, j)] - y_mean[j];
        }
    }
    for j in 0..p {
        a[(n + j, j)] = tau.sqrt();
    }
    let qr = a.qr();
    let r = qr.r();
    let scale = r.diagonal().amax().max(1e-300);
    if r.diagonal().iter().any(|d| d.abs() <= 1e-12 * scale) {
        return Err(CoreError::Invalid("probe design is rank-deficient; use a positive ridge term".into()));
    }
    let rhs = qr.q().transpose() * b;
    let w = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| CoreError::Invalid("probe solve failed".into()))?;
    let intercept = (0..q)
        .map(|k| y_mean[k] - (0..p).map(|j| x_mean[j] * w[(j, k)]).sum::<f64>())
        .collect();
    Ok((w, intercept))
}

/// Fits an affine ridge map on the training pair and reports RMSE on the
/// test pair.
pub fn linear_probe(
    pred_train: &Tensor,
    true_train: &Tensor,
    pred_test: &Tensor,
    true_test: &Tensor,
    tau: f64,
) -> Result<f64> {
    if pred_test.cols() != pred_train.cols() || true_test.cols() != true_train.cols() {
        return Err(CoreError::Shape("probe train and test widths differ".into()));
    }
    let (w, b) = fit_affine(pred_train, true_train, tau)?;
    let x = to_matrix(pred_test);
    let mut fitted = if w.nrows() == 0 {
        DMatrix::zeros(x.nrows(), b.len())
    } else {
        x * w
    };
    for mut row in fitted.row_iter_mut() {
        for (v, bk) in row.iter_mut().zip(&b) {
            *v += bk;
        }
    }
    let fitted = Tensor::new(
        vec![fitted.nrows(), fitted.ncols()],
        (0..fitted.nrows())
            .flat_map(|i| (0..fitted.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| fitted[(i, j)])
            .collect(),
    );
    concept_rmse(&fitted, true_test)
}

/// Seeded 80/20 split of `n` rows: `(fit, held_out)`.
pub fn probe_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    fisher_yates(&mut idx, &mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64) * PROBE_TRAIN_FRACTION).round() as usize;
    let held = idx.split_off(cut.min(n));
    (idx, held)
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * t.cols());
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), t.cols()], data)
}

/// [`linear_probe`] on a seeded 80/20 split of the rows.
pub fn linear_probe_split(pred: &Tensor, truth: &Tensor, tau: f64, seed: u64) -> Result<f64> {
    let (fit, held) = probe_split(pred.rows(), seed);
    if fit.is_empty() || held.is_empty() {
        return Err(CoreError::Invalid(format!("{} rows are too few for a probe split", pred.rows())));
    }
    linear_probe(
        &select_rows(pred, &fit),
        &select_rows(truth, &fit),
        &select_rows(pred, &held),
        &select_rows(truth, &held),
        tau,
    )
}

/// Pearson r between two columns; zero when either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    (0..t.rows()).map(|i| t.at2(i, j)).collect()
}

/// `r̄² = mean_j max_i r²(truth_j, pred_i)`.
pub fn concept_correlation(truth: &Tensor, pred: &Tensor) -> Result<f64> {
    if truth.rows() != pred.rows() {
        return Err(CoreError::Shape(format!("{} vs {} rows", truth.rows(), pred.rows())));
    }
    if truth.rows() < 2 || truth.cols() == 0 || pred.cols() == 0 {
        return Err(CoreError::Invalid(format!(
            "concept correlation needs two rows and nonempty matrices, got {:?} and {:?}",
            truth.shape(),
            pred.shape()
        )));
    }
    let preds: Vec<Vec<f64>> = (0..pred.cols()).map(|i| column(pred, i)).collect();
    let total: f64 = (0..truth.cols())
        .map(|j| {
            let t = column(truth, j);
            preds.iter().map(|p| pearson(&t, p).powi(2)).fold(0.0, f64::max)
        })
        .sum();
    Ok((total / truth.cols() as f64).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    /// One when nothing is positive on either side.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

fn column_counts(pred: &[Vec<bool>], truth: &[Vec<bool>], j: usize) -> Counts {
    let mut c = Counts::default();
    for (p, t) in pred.iter().zip(truth) {
        match (p[j], t[j]) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

/// Per-column F1 and micro-F1 over the flattened matrix.
pub fn f1_scores(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<(Vec<f64>, f64)> {
    if pred.len() != truth.len() || pred.iter().zip(truth).any(|(p, t)| p.len() != t.len()) {
        return Err(CoreError::Shape("prediction and label matrices differ in shape".into()));
    }
    let cols = truth.first().map_or(0, Vec::len);
    let per: Vec<Counts> = (0..cols).map(|j| column_counts(pred, truth, j)).collect();
    let total = per.iter().fold(Counts::default(), |a, c| Counts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    Ok((per.iter().map(Counts::f1).collect(), total.f1()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Block {
    pub per_action: Vec<f64>,
    #[serde(rename = "mF1")]
    pub m_f1: f64,
    #[serde(rename = "F1_all")]
    pub f1_all: f64,
    pub per_concept: Vec<f64>,
    #[serde(rename = "mF1_cpt")]
    pub m_f1_cpt: f64,
    #[serde(rename = "F1_cpt_all")]
    pub f1_cpt_all: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Action and concept F1 metrics on binarized matrices.
pub fn f1_suite(
    pred: &[Vec<bool>],
    truth: &[Vec<bool>],
    cpt_pred: &[Vec<bool>],
    cpt_truth: &[Vec<bool>],
) -> Result<F1Block> {
    let (per_action, f1_all) = f1_scores(pred, truth)?;
    let (per_concept, f1_cpt_all) = f1_scores(cpt_pred, cpt_truth)?;
    Ok(F1Block {
        m_f1: mean(&per_action),
        per_action,
        f1_all,
        m_f1_cpt: mean(&per_concept),
        per_concept,
        f1_cpt_all,
    })
}

pub fn binarize(t: &Tensor, threshold: f64) -> Vec<Vec<bool>> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|&v| v >= threshold).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub dh_over_d: f64,
    pub param_reduction: f64,
}

fn ratio_f64(r: Ratio<u128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `D_h / Π input_dims` and `shared / unshared`, reduced exactly before the
/// final conversion.
pub fn accounting(d_h: usize, input_dims: &[usize], params_shared: usize, params_unshared: usize) -> Result<Accounting> {
    let d: u128 = input_dims.iter().map(|&v| v as u128).product();
    if d == 0 || input_dims.is_empty() || params_unshared == 0 || d_h == 0 || params_shared == 0 {
        return Err(CoreError::Invalid("accounting needs positive sizes".into()));
    }
    Ok(Accounting {
        dh_over_d: ratio_f64(Ratio::new(d_h as u128, d)),
        param_reduction: ratio_f64(Ratio::new(params_shared as u128, params_unshared as u128)),
    })
}

/// Parameter count of the reference architecture without sharing: separate
/// backbones for the concept and relevance paths, plus a decoder mirroring
/// the concept path (backbone and encoder sized), in place of the
/// discriminator.
pub fn reference_unshared_params(model: &Model) -> usize {
    let backbone = model.group_params(ParamGroup::Backbone);
    let encoder = model.group_params(ParamGroup::Encoder);
    let relevance = model.group_params(ParamGroup::Parametrizer) + model.group_params(ParamGroup::Head);
    2 * backbone + encoder + relevance + (backbone + encoder)
}

/// Mean and two sample standard deviations (`N − 1`); zero spread for
/// fewer than two values. Deviations are taken from the first value, so
/// identical inputs return that value exactly with zero spread.
pub fn mean_two_sigma(v: &[f64]) -> (f64, f64) {
    let Some(&x0) = v.first() else {
        return (0.0, 0.0);
    };
    let n = v.len() as f64;
    let shift = v.iter().map(|x| x - x0).sum::<f64>() / n;
    let m = x0 + shift;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - x0 - shift).powi(2)).sum::<f64>() / (n - 1.0);
    (m, 2.0 * var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: ModelKind,
    pub num_examples: usize,
    /// Multiclass: 0-1 error. Multilabel: `1 − F1_all`.
    pub task_error: f64,
    /// Absent without supervised concepts.
    pub concept_rmse: Option<f64>,
    pub probe_rmse: Option<f64>,
    pub r_bar_sq: Option<f64>,
    /// Multilabel tasks only.
    pub f1: Option<F1Block>,
    pub accounting: Accounting,
    pub num_params: usize,
}

/// Validation metric used for checkpoint selection.
pub fn validation_metric(model: &Model, ds: &Dataset) -> Result<f64> {
    let p = model.predict(&ds.all().x)?;
    task_metric(model, ds, &p)
}

fn task_metric(model: &Model, ds: &Dataset, p: &Predictions) -> Result<f64> {
    match model.cfg.task_kind {
        TaskKind::Multiclass => {
            let labels = ds
                .class_labels()
                .ok_or_else(|| CoreError::Invalid("multiclass model on multilabel data".into()))?;
            task_error_01(&argmax_rows(&p.logits), &labels)
        }
        TaskKind::Multilabel => {
            let (_, f1_all) = f1_scores(&binarize(&p.logits, 0.0), &multilabel_truth(ds)?)?;
            Ok(1.0 - f1_all)
        }
    }
}

fn multilabel_truth(ds: &Dataset) -> Result<Vec<Vec<bool>>> {
    ds.examples
        .iter()
        .map(|e| match &e.y {
            Label::Multi(v) => Ok(v.iter().map(|&x| x >= 0.5).collect()),
            Label::Class(_) => Err(CoreError::Invalid("multilabel model on multiclass data".into())),
        })
        .collect()
}

fn supervised_labels(ds: &Dataset) -> Tensor {
    let d = ds.d_ex();
    let data = ds.examples.iter().flat_map(|e| e.c_sup.iter().copied()).collect();
    Tensor::new(vec![ds.len(), d], data)
}

/// Full report on an evaluation split. The probe uses the seeded 80/20
/// split of `ds`.
pub fn evaluate(model: &Model, ds: &Dataset, probe_seed: u64) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(CoreError::Invalid("empty evaluation set".into()));
    }
    let p = model.predict(&ds.all().x)?;
    let cfg = &model.cfg;
    let task_error = task_metric(model, ds, &p)?;
    let c_sup = supervised_labels(ds);
    let concept_rmse = if cfg.d_ex > 0 && c_sup.cols() == cfg.d_ex {
        Some(concept_rmse(&p.c_ex, &c_sup)?)
    } else {
        None
    };
    let reference = ds.reference_concepts();
    let (probe_rmse, r_bar_sq) = if p.concepts.cols() > 0 && reference.cols() > 0 {
        (
            Some(linear_probe_split(&p.concepts, &reference, PROBE_TAU, probe_seed)?),
            Some(concept_correlation(&reference, &p.concepts)?),
        )
    } else {
        (None, None)
    };
    let f1 = match cfg.task_kind {
        TaskKind::Multilabel => Some(f1_suite(
            &binarize(&p.logits, 0.0),
            &multilabel_truth(ds)?,
            &binarize(&p.c_ex, 0.5),
            &binarize(&c_sup, 0.5),
        )?),
        TaskKind::Multiclass => None,
    };
    let shared = model.num_params();
    Ok(MetricsReport {
        model: cfg.model,
        num_examples: ds.len(),
        task_error,
        concept_rmse,
        probe_rmse,
        r_bar_sq,
        f1,
        accounting: accounting(cfg.d_h(), &cfg.input_shape, shared, reference_unshared_params(model))?,
        num_params: shared,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub d_ex: usize,
    pub model: ModelKind,
    pub seed: u64,
    pub task_error: f64,
    /// Zero when the model has no concept units.
    pub r_bar_sq: f64,
}

/// Supervised columns kept at a sweep point: a seeded uniform subset of
/// size `d_ex`, in increasing order.
pub fn kept_concepts(available: usize, d_ex: usize, seed: u64) -> Result<Vec<usize>> {
    if d_ex > available {
        return Err(CoreError::Invalid(format!("sweep value {d_ex} exceeds the {available} labeled concepts")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols = sample(&mut rng, available, d_ex).into_vec();
    cols.sort_unstable();
    Ok(cols)
}

/// Configurations compared at one sweep point. The concept total
/// `base.d_ex + base.d_im` is held fixed for the augmented model; with no
/// supervised concepts it is the unsupervised-only model.
pub fn sweep_configs(base: &ModelConfig, d_ex: usize) -> Result<[ModelConfig; 2]> {
    let total = base.d_ex + base.d_im;
    if d_ex > total {
        return Err(CoreError::Invalid(format!("sweep value {d_ex} exceeds the concept total {total}")));
    }
    let cbm = ModelConfig {
        model: ModelKind::Cbm,
        d_ex,
        d_im: 0,
        k: 0,
        ..base.clone()
    };
    let d_im = total - d_ex;
    let aug = ModelConfig {
        model: if d_ex == 0 { ModelKind::Msenn } else { ModelKind::Cbmauc },
        d_ex,
        d_im,
        k: base.k.min(d_im),
        ..base.clone()
    };
    Ok([cbm, aug])
}

/// Trains both models at every sweep point for `seeds` seeds and records
/// test task error and `r̄²`.
pub fn limited_supervision_sweep(
    train_set: &Dataset,
    val: &Dataset,
    test: &Dataset,
    base: &ModelConfig,
    d_ex_values: &[usize],
    seeds: usize,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let available = train_set.d_ex();
    let mut tasks = Vec::new();
    for &d in d_ex_values {
        let cfgs = sweep_configs(base, d)?;
        for s in 0..seeds as u64 {
            let seed = base.seed + s;
            let cols = kept_concepts(available, d, seed)?;
            for cfg in &cfgs {
                tasks.push((d, cols.clone(), ModelConfig { seed, ..cfg.clone() }));
            }
        }
    }
    let run = |(d, cols, cfg): &(usize, Vec<usize>, ModelConfig)| -> Result<SweepRow> {
        let tr = train_set.with_supervised(cols)?;
        let va = val.with_supervised(cols)?;
        let te = test.with_supervised(cols)?;
        let (model, _) = train(&tr, &va, cfg)?;
        let p = model.predict(&te.all().x)?;
        let task_error = task_metric(&model, &te, &p)?;
        let r_bar_sq = if p.concepts.cols() == 0 {
            0.0
        } else {
            concept_correlation(&te.reference_concepts(), &p.concepts)?
        };
        Ok(SweepRow {
            d_ex: *d,
            model: if cfg.model == ModelKind::Cbm { ModelKind::Cbm } else { ModelKind::Cbmauc },
            seed: cfg.seed,
            task_error,
            r_bar_sq,
        })
    };
    if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CoreError::Invalid(e.to_string()))?;
        pool.install(|| tasks.par_iter().map(run).collect())
    } else {
        tasks.iter().map(run).collect()
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CoreError::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CoreError::format(path, e.to_string()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<SweepRow>, _>>()
        .map_err(|e| CoreError::format(path, e.to_string()))
}

/// `(d_ex, model) → (mean, 2σ)` of task error and `r̄²`, in first-seen order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub d_ex: usize,
    pub model: ModelKind,
    pub task_error: (f64, f64),
    pub r_bar_sq: (f64, f64),
}

pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut keys: Vec<(usize, ModelKind)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.d_ex, r.model)) {
            keys.push((r.d_ex, r.model));
        }
    }
    keys.into_iter()
        .map(|(d_ex, model)| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.d_ex == d_ex && r.model == model).collect();
            let te: Vec<f64> = sel.iter().map(|r| r.task_error).collect();
            let rb: Vec<f64> = sel.iter().map(|r| r.r_bar_sq).collect();
            SweepSummary {
                d_ex,
                model,
                task_error: mean_two_sigma(&te),
                r_bar_sq: mean_two_sigma(&rb),
            }
        })
        .collect()
}

/// Probability outputs for multilabel logits.
pub fn sigmoid_tensor(t: &Tensor) -> Tensor {
    t.map(sigmoid)
}
