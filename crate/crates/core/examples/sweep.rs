//! Runs the limited-supervision sweep on the benchmark data and prints the
//! per-point summary.
//!
//! `cargo run --release -p cbm-auc --example sweep -- [parity|threshold] [seeds]`

use cbm_auc::data::{generate_synthetic_dataset, split_dataset, Rule, SyntheticSpec};
use cbm_auc::evaluation::{limited_supervision_sweep, summarize_sweep};
use cbm_auc::ModelConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let rule = match args.get(1).map_or("threshold", String::as_str) {
        "parity" => Rule::Parity,
        _ => Rule::LinearThreshold {
            weights: vec![1.0; 6],
            bias: -2.5,
        },
    };
    let seeds: usize = args.get(2).map_or(Ok(3), |s| s.parse())?;
    let spec = SyntheticSpec {
        rule,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic_dataset(&spec)?;
    let (tr, va, te) = split_dataset(&data, (0.6, 0.2, 0.2), 0)?;
    let rows = limited_supervision_sweep(&tr, &va, &te, &ModelConfig::default(), &[3, 2, 1, 0], seeds, 1)?;
    for r in &rows {
        println!("{:?}", r);
    }
    for s in summarize_sweep(&rows) {
        println!(
            "d_ex {} {:6}: error {:.3} ± {:.3}, r2 {:.3} ± {:.3}",
            s.d_ex, s.model, s.task_error.0, s.task_error.1, s.r_bar_sq.0, s.r_bar_sq.1
        );
    }
    Ok(())
}
