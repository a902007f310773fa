use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cbm_auc::checkpoint;
use cbm_auc::config::SweepSpec;
use cbm_auc::data::{generate_synthetic_dataset, load_dataset, save_dataset, split_dataset, Dataset, SyntheticSpec};
use cbm_auc::evaluation::{
    evaluate, limited_supervision_sweep, read_sweep_csv, summarize_sweep, write_sweep_csv, MetricsReport,
};
use cbm_auc::plot::write_sweep_plot;
use cbm_auc::saliency::{saliency_report, CamTarget, OverlayOptions};
use cbm_auc::training::{run_grid, train_with_log, GridOptions};
use cbm_auc::{ModelConfig, ModelKind, RunConfig};
use serde::{Deserialize, Serialize};

use crate::manifest::{self, RunManifest, MANIFEST_FILE};
use crate::report::{aggregate, render_table, RunSummary, SIGMA_NOTE};
use crate::{Cli, Command};

pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.6, 0.2, 0.2);
const DATASET_FILE: &str = "dataset.json";

/// Provenance of a generated dataset directory.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetInfo {
    spec: SyntheticSpec,
    split_fractions: (f64, f64, f64),
    split_seed: u64,
    sizes: [usize; 3],
}

struct Splits {
    dir: PathBuf,
    train: Dataset,
    val: Dataset,
    test: Dataset,
    fingerprint: String,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig {
            data: Some(SyntheticSpec::default()),
            model: ModelConfig::default(),
            grid: None,
            sweep: None,
        }),
    }
}

fn write_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<()> {
    let data = generate_synthetic_dataset(spec)?;
    let (tr, va, te) = split_dataset(&data, SPLIT_FRACTIONS, spec.seed)?;
    for (name, part) in [("train", &tr), ("val", &va), ("test", &te)] {
        save_dataset(part, &dir.join(name))?;
    }
    let info = DatasetInfo {
        spec: spec.clone(),
        split_fractions: SPLIT_FRACTIONS,
        split_seed: spec.seed,
        sizes: [tr.len(), va.len(), te.len()],
    };
    manifest::write_json(&dir.join(DATASET_FILE), &info)
}

/// `--data` if given, else the cache entry for the [data] spec.
fn resolve_data(cli: &Cli, cfg: &RunConfig) -> Result<Splits> {
    let dir = match &cli.data {
        Some(d) => d.clone(),
        None => {
            let spec = cfg.data.clone().unwrap_or_default();
            let root = cli.cache.clone().unwrap_or_else(|| PathBuf::from(".cbmauc-cache"));
            let key = {
                use sha2::{Digest, Sha256};
                let text = serde_json::to_string(&(&spec, SPLIT_FRACTIONS))?;
                hex::encode(Sha256::digest(text.as_bytes()))
            };
            let dir = root.join(format!("data-{}", &key[..16]));
            if !dir.join(DATASET_FILE).exists() {
                log::info!("generating dataset into {}", dir.display());
                let tmp = root.join(format!("data-{}.tmp{}", &key[..16], std::process::id()));
                write_dataset(&spec, &tmp)?;
                if fs::rename(&tmp, &dir).is_err() {
                    // Another process won the race; its copy is identical.
                    fs::remove_dir_all(&tmp).ok();
                }
            }
            dir
        }
    };
    let part = |name: &str| -> Result<Dataset> {
        load_dataset(&dir.join(name)).with_context(|| format!("loading the {name} split of {}", dir.display()))
    };
    let files: Vec<PathBuf> = ["train", "val", "test"]
        .iter()
        .flat_map(|s| ["meta.json", "manifest.csv"].map(|f| dir.join(s).join(f)))
        .collect();
    Ok(Splits {
        train: part("train")?,
        val: part("val")?,
        test: part("test")?,
        fingerprint: manifest::fingerprint(&files)?,
        dir,
    })
}

fn check_compatible(cfg: &ModelConfig, ds: &Dataset) -> Result<()> {
    let m = &ds.meta;
    if cfg.input_shape != m.input_shape {
        bail!(cbm_auc::CoreError::Invalid(format!(
            "model input_shape {:?} differs from dataset {:?}",
            cfg.input_shape, m.input_shape
        )));
    }
    if cfg.num_targets != m.num_targets || cfg.task_kind != m.task_kind {
        bail!(cbm_auc::CoreError::Invalid(format!(
            "model predicts {} {:?} targets, dataset has {} {:?}",
            cfg.num_targets, cfg.task_kind, m.num_targets, m.task_kind
        )));
    }
    Ok(())
}

fn finish(cli: &Cli, command: &str, config: RunConfig, seed: u64, data: Option<PathBuf>, started: String) -> Result<()> {
    let files: Vec<String> = manifest::list_files(&cli.out)?
        .into_iter()
        .filter(|f| f != MANIFEST_FILE)
        .collect();
    let m = RunManifest {
        command: command.to_string(),
        argv: std::env::args().collect(),
        config,
        seed,
        data,
        started,
        finished: manifest::now(),
        outputs: manifest::checksums(&cli.out, &files)?,
    };
    manifest::write_json(&cli.out.join(MANIFEST_FILE), &m)
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn metrics_csv(r: &MetricsReport, path: &Path) -> Result<()> {
    let mut rows: Vec<(String, String)> = vec![
        ("model".into(), r.model.to_string()),
        ("num_examples".into(), r.num_examples.to_string()),
        ("task_error".into(), r.task_error.to_string()),
    ];
    for (k, v) in [("concept_rmse", r.concept_rmse), ("probe_rmse", r.probe_rmse), ("r_bar_sq", r.r_bar_sq)] {
        rows.push((k.into(), v.map_or(String::new(), |x| x.to_string())));
    }
    if let Some(f) = &r.f1 {
        for (k, v) in [("mF1", f.m_f1), ("F1_all", f.f1_all), ("mF1_cpt", f.m_f1_cpt), ("F1_cpt_all", f.f1_cpt_all)] {
            rows.push((k.into(), v.to_string()));
        }
    }
    rows.push(("dh_over_d".into(), r.accounting.dh_over_d.to_string()));
    rows.push(("param_reduction".into(), r.accounting.param_reduction.to_string()));
    rows.push(("num_params".into(), r.num_params.to_string()));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    for (k, v) in rows {
        w.write_record([k, v])?;
    }
    w.flush()?;
    Ok(())
}

fn write_metrics(r: &MetricsReport, out: &Path) -> Result<()> {
    manifest::write_json(&out.join("metrics.json"), r)?;
    metrics_csv(r, &out.join("metrics.csv"))
}

pub fn run(cli: &Cli) -> Result<()> {
    let started = manifest::now();
    let mut cfg = load_config(cli)?;
    match &cli.cmd {
        Command::GenData => {
            let mut spec = cfg.data.clone().unwrap_or_default();
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            create_out(&cli.out)?;
            write_dataset(&spec, &cli.out)?;
            let seed = spec.seed;
            cfg.data = Some(spec);
            finish(cli, "gen-data", cfg, seed, None, started)
        }
        Command::Train { model, epochs } => {
            if let Some(m) = model {
                cfg.model.model = *m;
                if *m == ModelKind::Cbm {
                    cfg.model.d_im = 0;
                    cfg.model.k = 0;
                }
            }
            if let Some(e) = epochs {
                cfg.model.epochs = *e;
            }
            if let Some(s) = cli.seed {
                cfg.model.seed = s;
            }
            let mc = cfg.model.clone();
            mc.validate().map_err(cbm_auc::CoreError::InvalidConfig)?;
            let data = resolve_data(cli, &cfg)?;
            check_compatible(&mc, &data.train)?;
            create_out(&cli.out)?;

            let log_path = cli.out.join("train_log.jsonl");
            let mut log = BufWriter::new(fs::File::create(&log_path).with_context(|| log_path.display().to_string())?);
            let mut log_err: Option<std::io::Error> = None;
            let result = train_with_log(&data.train, &data.val, &mc, &mut |rec| {
                if log_err.is_none() {
                    let line = serde_json::to_string(rec).expect("records serialize");
                    if let Err(e) = writeln!(log, "{line}") {
                        log_err = Some(e);
                    }
                }
            });
            log.flush()?;
            if let Some(e) = log_err {
                return Err(e).with_context(|| log_path.display().to_string());
            }
            let (model, state) = result?;

            checkpoint::save(&model, &cli.out.join("checkpoint.bin"))?;
            let mut hist = csv::Writer::from_path(cli.out.join("history.csv"))?;
            hist.write_record(["epoch", "total", "task", "concept", "dis", "theta_reg", "val_metric"])?;
            for h in &state.history {
                let l = &h.mean_loss;
                hist.write_record(
                    [h.epoch as f64, l.total, l.task, l.concept, l.dis, l.theta_reg, h.val_metric].map(|v| v.to_string()),
                )?;
            }
            hist.flush()?;

            let report = evaluate(&model, &data.test, mc.seed)?;
            write_metrics(&report, &cli.out)?;
            let summary = RunSummary {
                model: mc.model,
                seed: mc.seed,
                best_epoch: state.best_epoch,
                best_val_metric: state.best_epoch.map(|_| state.best_val_metric),
                epochs_run: state.epoch,
                jacobian_evals: state.jacobian_evals,
                data_fingerprint: data.fingerprint.clone(),
                test: report.clone(),
                config: mc.clone(),
            };
            manifest::write_json(&cli.out.join("summary.json"), &summary)?;
            log::info!(
                "{}: best epoch {:?}, test error {:.4}",
                mc.model,
                state.best_epoch,
                report.task_error
            );
            finish(cli, "train", cfg, mc.seed, Some(data.dir), started)
        }
        Command::Grid { seeds, max_runs } => {
            if let Some(s) = cli.seed {
                cfg.model.seed = s;
            }
            let grid = cfg.grid.clone().unwrap_or_default();
            cfg.grid = Some(grid.clone());
            let opts = GridOptions {
                seeds: *seeds,
                max_runs: *max_runs,
                jobs: cli.jobs,
            };
            let requested = grid.points().len() * seeds;
            if requested > *max_runs {
                bail!(cbm_auc::CoreError::ResourceCap {
                    requested,
                    limit: *max_runs
                });
            }
            let data = resolve_data(cli, &cfg)?;
            check_compatible(&cfg.model, &data.train)?;
            create_out(&cli.out)?;
            let rows = run_grid(&data.train, &data.val, &grid, &cfg.model, &opts)?;
            manifest::write_json(&cli.out.join("grid.json"), &rows)?;
            let mut w = csv::Writer::from_path(cli.out.join("grid.csv"))?;
            w.write_record(["rank", "optimizer", "lr", "lambda", "alpha", "beta", "mean", "two_sigma", "val_metrics"])?;
            for (rank, r) in rows.iter().enumerate() {
                let p = &r.point;
                let vals: Vec<String> = r.val_metrics.iter().map(|v| v.to_string()).collect();
                w.write_record([
                    (rank + 1).to_string(),
                    p.optimizer.to_string(),
                    p.lr.to_string(),
                    p.lambda.to_string(),
                    p.alpha.to_string(),
                    p.beta.to_string(),
                    r.mean.to_string(),
                    r.two_sigma.to_string(),
                    vals.join(";"),
                ])?;
            }
            w.flush()?;
            let seed = cfg.model.seed;
            finish(cli, "grid", cfg, seed, Some(data.dir), started)
        }
        Command::Sweep { d_ex, seeds, from_csv } => {
            create_out(&cli.out)?;
            if let Some(csv_path) = from_csv {
                let rows = read_sweep_csv(csv_path)?;
                write_sweep_plot(&rows, &cli.out.join("sweep.png"))?;
                let seed = cfg.model.seed;
                return finish(cli, "sweep", cfg, seed, None, started);
            }
            if let Some(s) = cli.seed {
                cfg.model.seed = s;
            }
            let base_sweep = cfg.sweep.clone().unwrap_or(SweepSpec {
                d_ex_values: vec![3, 2, 1, 0],
                seeds: 3,
            });
            let spec = SweepSpec {
                d_ex_values: d_ex.clone().unwrap_or(base_sweep.d_ex_values),
                seeds: seeds.unwrap_or(base_sweep.seeds),
            };
            cfg.sweep = Some(spec.clone());
            let data = resolve_data(cli, &cfg)?;
            check_compatible(&cfg.model, &data.train)?;
            let rows = limited_supervision_sweep(
                &data.train,
                &data.val,
                &data.test,
                &cfg.model,
                &spec.d_ex_values,
                spec.seeds,
                cli.jobs,
            )?;
            write_sweep_csv(&rows, &cli.out.join("sweep.csv"))?;
            write_sweep_plot(&rows, &cli.out.join("sweep.png"))?;
            manifest::write_json(&cli.out.join("sweep_summary.json"), &summarize_sweep(&rows))?;
            let seed = cfg.model.seed;
            finish(cli, "sweep", cfg, seed, Some(data.dir), started)
        }
        Command::Eval { checkpoint: ckpt, split } => {
            let model = checkpoint::load(ckpt)?;
            let data = resolve_data(cli, &cfg)?;
            let ds = match split.as_str() {
                "train" => &data.train,
                "val" => &data.val,
                "test" => &data.test,
                other => bail!(cbm_auc::CoreError::Invalid(format!("unknown split `{other}`"))),
            };
            check_compatible(&model.cfg, ds)?;
            create_out(&cli.out)?;
            let seed = cli.seed.unwrap_or(model.cfg.seed);
            let report = evaluate(&model, ds, seed)?;
            write_metrics(&report, &cli.out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            cfg.model = model.cfg.clone();
            finish(cli, "eval", cfg, seed, Some(data.dir), started)
        }
        Command::Saliency {
            checkpoint: ckpt,
            images,
            units,
            logits,
        } => {
            let model = checkpoint::load(ckpt)?;
            let data = resolve_data(cli, &cfg)?;
            check_compatible(&model.cfg, &data.test)?;
            let count = if *logits {
                model.cfg.num_targets
            } else {
                model.cfg.num_concepts()
            };
            let idx: Vec<usize> = units.clone().unwrap_or_else(|| (0..count).collect());
            let targets: Vec<CamTarget> = idx
                .iter()
                .map(|&u| if *logits { CamTarget::Logit(u) } else { CamTarget::Concept(u) })
                .collect();
            let imgs: Vec<usize> = (0..(*images).min(data.test.len())).collect();
            create_out(&cli.out)?;
            let rows = saliency_report(&model, &data.test, &imgs, &targets, &cli.out, OverlayOptions::default())?;
            log::info!("wrote {} saliency overlays", rows.len());
            let seed = model.cfg.seed;
            cfg.model = model.cfg.clone();
            finish(cli, "saliency", cfg, seed, Some(data.dir), started)
        }
        Command::Report { runs } => {
            let summaries = runs
                .iter()
                .map(|dir| {
                    let p = dir.join("summary.json");
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str::<RunSummary>(&text).with_context(|| format!("parsing {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let rows = aggregate(&summaries)?;
            let table = render_table(&rows);
            print!("{table}");
            create_out(&cli.out)?;
            manifest::write_atomic(&cli.out.join("report.txt"), table.as_bytes())?;
            manifest::write_json(
                &cli.out.join("report.json"),
                &serde_json::json!({ "sigma": SIGMA_NOTE, "rows": rows }),
            )?;
            let mut w = csv::Writer::from_path(cli.out.join("report.csv"))?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            let seed = cli.seed.unwrap_or(0);
            finish(cli, "report", cfg, seed, None, started)
        }
    }
}
