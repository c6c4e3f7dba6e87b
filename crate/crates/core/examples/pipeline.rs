//! Runs the full pipeline for a handful of seeds and prints baseline vs. steered metrics.
//!
//!     cargo run --release -p steervec-core --example pipeline -- 0 1 2 3 4

use steervec_core::data::Group;
use steervec_core::eval::{layer_profile, render_table};
use steervec_core::experiment::{run_pipeline, RunConfig};

fn main() -> steervec_core::Result<()> {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .map(|s| s.parse().expect("seed must be an integer"))
        .collect();
    let seeds = if seeds.is_empty() { vec![0] } else { seeds };
    for seed in seeds {
        let mut cfg = RunConfig::with_seed(seed);
        let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<usize>().ok());
        if let Some(v) = env("D_MODEL") {
            cfg.model.d_model = v;
        }
        if let Some(v) = env("N_LAYERS") {
            cfg.model.n_layers = v;
        }
        if let Some(v) = env("N_HEADS") {
            cfg.model.n_heads = v;
        }
        if let Some(v) = env("D_FF") {
            cfg.model.d_ff = v;
        }
        if let Some(v) = env("EPOCHS") {
            cfg.train.epochs = v;
        }
        let out = run_pipeline(&cfg)?;
        let last = out.train_report.epochs.last().unwrap();
        println!(
            "seed {seed}: {:.1}s, train loss {:.4} acc {:.4}, chosen layer {}",
            out.elapsed.as_secs_f64(),
            last.loss,
            last.accuracy,
            out.sweep.chosen_layer
        );
        for g in 0..out.baseline.group_accuracy.len() {
            println!(
                "  {} n={} baseline {:.3} steered {:.3}",
                Group::from_id(g, 2),
                out.baseline.group_counts[g],
                out.baseline.group_accuracy[g],
                out.steered.group_accuracy[g]
            );
        }
        let profile = layer_profile(&out.params, &out.extraction.candidates, &out.splits.test)?;
        print!("{}", profile.render());
        print!(
            "{}",
            render_table(&[
                out.baseline.table_row("synthetic", "ERM"),
                out.steered.table_row("synthetic", "Best single layer"),
            ])
        );
    }
    Ok(())
}
