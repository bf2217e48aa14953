//! `sdnia eval`: score a checkpoint over one or more labeled test sets,
//! writing machine-readable reports and a plain-text summary table.

use std::path::PathBuf;

use clap::Args;

use sdnia_core::evaluation::ablation::evaluate_model;
use sdnia_core::evaluation::latency::compare_latency;
use sdnia_core::evaluation::LatencySummary;
use sdnia_core::imagery::load_dataset;
use sdnia_core::model::SdniaModel;
use sdnia_core::{Error, Result};

use crate::config::{require_exists, RunConfig};
use crate::output::{ensure_dir, ProducedFiles};
use crate::Outcome;

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to score (overrides the config file).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// Labeled test manifest; repeat for several columns.
    #[arg(long = "test-manifest")]
    pub test_manifests: Vec<PathBuf>,

    /// Also measure forward latency (full pipeline vs detector-only).
    #[arg(long)]
    pub latency: bool,
}

pub fn run(config: &RunConfig, args: EvalArgs) -> Result<Outcome> {
    let checkpoint = args
        .checkpoint
        .or_else(|| config.eval.checkpoint.clone())
        .ok_or_else(|| Error::Config("eval: checkpoint not set".into()))?;
    require_exists(&checkpoint, "checkpoint")?;
    let manifests = if args.test_manifests.is_empty() {
        config.data.test_manifests.clone()
    } else {
        args.test_manifests
    };
    if manifests.is_empty() {
        return Err(Error::Config("eval: no test manifests given".into()));
    }
    for m in &manifests {
        require_exists(m, "test manifest")?;
    }
    let conf = config
        .eval
        .conf_threshold
        .unwrap_or(config.train_config().map(|t| t.eval_conf_threshold).unwrap_or(0.05));
    let out_dir = config.output_dir();
    ensure_dir(&out_dir)?;

    let (model, _, _) = SdniaModel::load(&checkpoint)?;
    let mut produced = ProducedFiles::default();
    let mut summary_rows: Vec<(String, f64, f64)> = Vec::new();

    for path in &manifests {
        let loaded = load_dataset(path)?;
        for d in &loaded.diagnostics {
            eprintln!("warning: {d}");
        }
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "test".into());
        let mut report = evaluate_model(&model, &loaded.manifest, conf)?;

        if args.latency || config.eval.latency {
            let sizes = config
                .eval
                .latency_sizes
                .clone()
                .unwrap_or_else(|| vec![config.train.image_size.unwrap_or(64)]);
            let mut summaries: Vec<LatencySummary> = Vec::new();
            for size in sizes {
                let cmp = compare_latency(&model, size, 1, 5)?;
                println!(
                    "latency @{size}: full {:.2} ms (p95 {:.2}), detector-only {:.2} ms, \
                     adaptation overhead {:.2} ms",
                    cmp.full.mean_ms,
                    cmp.full.p95_ms,
                    cmp.detector_only.mean_ms,
                    cmp.adaptation_overhead_ms
                );
                summaries.push(cmp.full);
            }
            report.latency = Some(summaries);
        }

        let json_path = out_dir.join(format!("eval_{label}.json"));
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Eval(format!("report serialization: {e}")))?;
        std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        produced.add(&json_path);

        let table_path = out_dir.join(format!("eval_{label}.txt"));
        let table = report.render_table(&model.spec.class_names);
        std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
        produced.add(&table_path);

        println!("== {label}");
        print!("{table}");
        summary_rows.push((label, report.map_50, report.map_50_95));
    }

    if summary_rows.len() > 1 {
        println!("\n{:<20} {:>10} {:>12}", "test set", "mAP@.5", "mAP@.5:.95");
        for (label, m50, m5095) in &summary_rows {
            println!("{label:<20} {m50:>10.4} {m5095:>12.4}");
        }
    }
    produced.write(&out_dir)?;
    Ok(Outcome::Success)
}
