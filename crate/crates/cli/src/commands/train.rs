//! `sdnia train`: variant-aware training with checkpointing and
//! line-delimited history records.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, ValueEnum};

use sdnia_core::imagery::{load_dataset, DatasetManifest, Origin};
use sdnia_core::model::ModelSpec;
use sdnia_core::training::{
    save_outcome, split_train_val, train, EpochRecord, StopReason, TrainLogger,
};
use sdnia_core::{Error, Result};

use crate::config::{require_exists, RunConfig};
use crate::output::{ensure_dir, ProducedFiles};
use crate::Outcome;

#[derive(Args)]
pub struct TrainArgs {
    /// Component variant (matches the ablation grid rows).
    #[arg(long, value_enum, default_value_t = Variant::Sdnia)]
    pub variant: Variant,

    /// Continue a previous run from its checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,

    /// Overrides `train.max_epochs` from the config file.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Variant {
    /// Bare detector on original images only.
    Baseline,
    /// Stylized data, no adapter.
    Sd,
    /// Adapter, original images only.
    Nia,
    /// Stylized data plus adapter.
    Sdnia,
}

impl Variant {
    fn toggles(&self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::Sd => (true, false),
            Variant::Nia => (false, true),
            Variant::Sdnia => (true, true),
        }
    }
}

struct JsonlLogger {
    epochs: std::io::BufWriter<std::fs::File>,
    steps: Option<std::io::BufWriter<std::fs::File>>,
}

impl TrainLogger for JsonlLogger {
    fn on_step(&mut self, epoch: usize, step: usize, losses: &sdnia_core::losses::LossBreakdown) {
        if let Some(w) = &mut self.steps {
            let record = serde_json::json!({
                "epoch": epoch,
                "step": step,
                "losses": losses,
            });
            let _ = writeln!(w, "{record}");
        }
    }

    fn on_epoch(&mut self, record: &EpochRecord) {
        if let Ok(line) = serde_json::to_string(record) {
            let _ = writeln!(self.epochs, "{line}");
        }
        println!(
            "epoch {:>4}  total {:.4}  det {:.4}  res {:.4}  val mAP@.5 {:.4}",
            record.epoch,
            record.losses.l_total,
            record.losses.l_det,
            record.losses.l_res,
            record.val_map50
        );
    }

    fn on_warning(&mut self, message: &str) {
        eprintln!("warning: {message}");
    }
}

/// Drops stylized/synthetic entries when the variant trains on originals.
fn originals_only(manifest: &DatasetManifest) -> DatasetManifest {
    let mut out = manifest.clone();
    out.entries.retain(|e| e.origin == Origin::Original);
    out
}

pub fn run(config: &RunConfig, args: TrainArgs) -> Result<Outcome> {
    let manifest_path = config
        .data
        .train_manifest
        .clone()
        .ok_or_else(|| Error::Config("train: data.train_manifest not set".into()))?;
    require_exists(&manifest_path, "train manifest")?;
    let detector = config.detector_config()?;
    let mut train_config = config.train_config()?;
    if let Some(e) = args.epochs {
        train_config.max_epochs = e;
    }
    let (use_stylized, use_nia) = args.variant.toggles();
    train_config.use_stylized_data = use_stylized;
    train_config.use_nia = use_nia;
    if let Some(resume) = &args.resume {
        require_exists(resume, "resume checkpoint")?;
    }
    let out_dir = config.output_dir();
    ensure_dir(&out_dir)?;

    let loaded = load_dataset(&manifest_path)?;
    for d in &loaded.diagnostics {
        eprintln!("warning: {d}");
    }
    let pool = if use_stylized {
        loaded.manifest
    } else {
        originals_only(&loaded.manifest)
    };
    if pool.is_empty() {
        return Err(Error::Dataset("training pool is empty".into()));
    }
    let (train_m, val_m) = split_train_val(&pool, train_config.val_fraction, train_config.seed);

    let spec = ModelSpec {
        nia: use_nia.then(|| config.nia_config()),
        detector,
        class_names: pool.class_names.clone(),
    };

    let history_path = out_dir.join("history.jsonl");
    let steps_path = out_dir.join("steps.jsonl");
    let mut logger = JsonlLogger {
        epochs: std::io::BufWriter::new(
            std::fs::File::create(&history_path).map_err(|e| Error::io(&history_path, e))?,
        ),
        steps: if config.train.step_log {
            Some(std::io::BufWriter::new(
                std::fs::File::create(&steps_path).map_err(|e| Error::io(&steps_path, e))?,
            ))
        } else {
            None
        },
    };

    let outcome = train(
        &train_config,
        spec,
        &train_m,
        &val_m,
        &mut logger,
        args.resume.as_deref(),
    )?;

    let ckpt_path = out_dir.join("model.ckpt");
    save_outcome(&outcome, &ckpt_path)?;

    let mut produced = ProducedFiles::default();
    produced.add(&ckpt_path);
    produced.add(&history_path);
    if config.train.step_log {
        produced.add(&steps_path);
    }
    produced.write(&out_dir)?;

    println!(
        "finished at epoch {} ({:?}); best val mAP@.5 = {:.4} (epoch {}); checkpoint: {}",
        outcome.final_epoch,
        outcome.stop_reason,
        outcome.state.best_val_metric,
        outcome.state.best_epoch,
        ckpt_path.display()
    );
    match outcome.stop_reason {
        StopReason::Diverged => Err(Error::Dataset(
            "training diverged (non-finite loss); last good checkpoint kept".into(),
        )),
        _ => Ok(Outcome::Success),
    }
}
