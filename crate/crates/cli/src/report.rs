//! Cross-run comparison tables.

use anyhow::{bail, Result};
use cbm_auc::evaluation::{mean_two_sigma, MetricsReport};
use cbm_auc::ModelKind;
use serde::{Deserialize, Serialize};

/// What `train` leaves behind in `summary.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: ModelKind,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    /// Absent when no epoch ran.
    pub best_val_metric: Option<f64>,
    pub epochs_run: usize,
    pub jacobian_evals: usize,
    /// Digest of the dataset files the run read.
    pub data_fingerprint: String,
    pub test: MetricsReport,
    pub config: cbm_auc::ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: ModelKind,
    pub metric: String,
    pub runs: usize,
    pub mean: f64,
    pub two_sigma: f64,
}

pub const SIGMA_NOTE: &str = "mean ± 2σ, σ = sample standard deviation (N−1); σ = 0 for a single run";

fn metrics(r: &MetricsReport) -> Vec<(&'static str, Option<f64>)> {
    let mut v = vec![
        ("task_error", Some(r.task_error)),
        ("concept_rmse", r.concept_rmse),
        ("probe_rmse", r.probe_rmse),
        ("r_bar_sq", r.r_bar_sq),
    ];
    if let Some(f) = &r.f1 {
        v.extend([
            ("mF1", Some(f.m_f1)),
            ("F1_all", Some(f.f1_all)),
            ("mF1_cpt", Some(f.m_f1_cpt)),
            ("F1_cpt_all", Some(f.f1_cpt_all)),
        ]);
    }
    v
}

/// Groups runs by model, in first-seen order. Refuses runs on different data.
pub fn aggregate(runs: &[RunSummary]) -> Result<Vec<ReportRow>> {
    let Some(first) = runs.first() else {
        bail!("report needs at least one run");
    };
    if let Some(other) = runs.iter().find(|r| r.data_fingerprint != first.data_fingerprint) {
        bail!(
            "runs were trained on different datasets ({} vs {})",
            &first.data_fingerprint[..12.min(first.data_fingerprint.len())],
            &other.data_fingerprint[..12.min(other.data_fingerprint.len())]
        );
    }
    let mut models: Vec<ModelKind> = Vec::new();
    for r in runs {
        if !models.contains(&r.model) {
            models.push(r.model);
        }
    }
    let mut rows = Vec::new();
    for model in models {
        let group: Vec<&RunSummary> = runs.iter().filter(|r| r.model == model).collect();
        let names: Vec<&str> = metrics(&group[0].test).iter().map(|(n, _)| *n).collect();
        for name in names {
            let vals: Vec<f64> = group
                .iter()
                .filter_map(|r| metrics(&r.test).into_iter().find(|(n, _)| *n == name).and_then(|(_, v)| v))
                .collect();
            if vals.is_empty() {
                continue;
            }
            let (mean, two_sigma) = mean_two_sigma(&vals);
            rows.push(ReportRow {
                model,
                metric: name.to_string(),
                runs: vals.len(),
                mean,
                two_sigma,
            });
        }
    }
    Ok(rows)
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let mut s = format!("# {SIGMA_NOTE}\n{:<8} {:<14} {:>4}  {:>10}  {:>10}\n", "model", "metric", "n", "mean", "2σ");
    for r in rows {
        s.push_str(&format!(
            "{:<8} {:<14} {:>4}  {:>10.4}  {:>10.4}\n",
            r.model.to_string(),
            r.metric,
            r.runs,
            r.mean,
            r.two_sigma
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbm_auc::evaluation::Accounting;

    fn run(model: ModelKind, err: f64, data: &str) -> RunSummary {
        RunSummary {
            model,
            seed: 0,
            best_epoch: Some(0),
            best_val_metric: Some(err),
            epochs_run: 1,
            jacobian_evals: 0,
            data_fingerprint: data.into(),
            test: MetricsReport {
                model,
                num_examples: 10,
                task_error: err,
                concept_rmse: Some(0.1),
                probe_rmse: None,
                r_bar_sq: None,
                f1: None,
                accounting: Accounting {
                    dh_over_d: 0.0,
                    param_reduction: 0.0,
                },
                num_params: 1,
            },
            config: cbm_auc::ModelConfig::default(),
        }
    }

    fn task(rows: &[ReportRow], model: ModelKind) -> &ReportRow {
        rows.iter().find(|r| r.model == model && r.metric == "task_error").unwrap()
    }

    #[test]
    fn three_runs_hand_value() {
        let runs: Vec<_> = [0.1, 0.2, 0.3].iter().map(|&e| run(ModelKind::Cbmauc, e, "d")).collect();
        let rows = aggregate(&runs).unwrap();
        let r = task(&rows, ModelKind::Cbmauc);
        assert!((r.mean - 0.2).abs() < 1e-12);
        assert!((r.two_sigma - 0.2).abs() < 1e-12);
        assert_eq!(r.runs, 3);
    }

    #[test]
    fn single_and_identical_runs_have_zero_sigma() {
        let rows = aggregate(&[run(ModelKind::Cbm, 0.4, "d")]).unwrap();
        assert_eq!(task(&rows, ModelKind::Cbm).two_sigma, 0.0);
        let same: Vec<_> = (0..3).map(|_| run(ModelKind::Cbm, 0.4, "d")).collect();
        let r = aggregate(&same).unwrap();
        assert_eq!((task(&r, ModelKind::Cbm).mean, task(&r, ModelKind::Cbm).two_sigma), (0.4, 0.0));
    }

    #[test]
    fn mixed_datasets_are_refused() {
        let err = aggregate(&[run(ModelKind::Cbm, 0.4, "aaaa"), run(ModelKind::Cbm, 0.4, "bbbb")]).unwrap_err();
        assert!(err.to_string().contains("different datasets"));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn models_are_grouped_separately() {
        let rows = aggregate(&[run(ModelKind::Cbm, 0.4, "d"), run(ModelKind::Cbmauc, 0.1, "d")]).unwrap();
        assert_eq!(task(&rows, ModelKind::Cbm).mean, 0.4);
        assert_eq!(task(&rows, ModelKind::Cbmauc).mean, 0.1);
        assert!(render_table(&rows).starts_with("# mean ± 2σ"));
    }
}
