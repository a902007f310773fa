//! Trains the benchmark models once and prints test metrics.
//!
//! `cargo run --release -p cbm-auc --example benchmark -- [model] [seed] [epochs]`

use std::time::Instant;

use cbm_auc::data::{generate_synthetic_dataset, split_dataset, SyntheticSpec};
use cbm_auc::evaluation::evaluate;
use cbm_auc::training::train;
use cbm_auc::{ModelConfig, ModelKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let model: ModelKind = args.get(1).map_or("cbmauc", String::as_str).parse()?;
    let seed: u64 = args.get(2).map_or(Ok(0), |s| s.parse())?;
    let mut cfg = ModelConfig {
        model,
        seed,
        ..ModelConfig::default()
    };
    if let Some(e) = args.get(3) {
        cfg.epochs = e.parse()?;
    }
    if model == ModelKind::Cbm {
        cfg.d_im = 0;
        cfg.k = 0;
    }
    let data = generate_synthetic_dataset(&SyntheticSpec::default())?;
    let (tr, va, te) = split_dataset(&data, (0.6, 0.2, 0.2), 0)?;
    let start = Instant::now();
    let (m, state) = train(&tr, &va, &cfg)?;
    let report = evaluate(&m, &te, 0)?;
    println!(
        "{model} seed {seed}: best epoch {:?}, val {:.3}, test error {:.3}, rmse {:?}, r2 {:?}, {:.1}s",
        state.best_epoch,
        state.best_val_metric,
        report.task_error,
        report.concept_rmse,
        report.r_bar_sq,
        start.elapsed().as_secs_f64()
    );
    for h in state.history.iter().step_by(5) {
        println!("  epoch {:2} loss {:.4} task {:.4} val {:.3}", h.epoch, h.mean_loss.total, h.mean_loss.task, h.val_metric);
    }
    Ok(())
}
