//! `sdnia detect`: run reference-free inference on images, writing the
//! adapted image, a detection overlay, and line-delimited records.

use std::path::PathBuf;

use clap::Args;

use sdnia_core::evaluation::detections_to_records;
use sdnia_core::model::SdniaModel;
use sdnia_core::{Error, ImageTensor, Result};

use crate::config::{require_exists, RunConfig};
use crate::output::{draw_detections, ensure_dir, ProducedFiles};
use crate::Outcome;

#[derive(Args)]
pub struct DetectArgs {
    /// Checkpoint to run (overrides the config file).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// Confidence threshold override.
    #[arg(long)]
    pub conf: Option<f64>,

    /// Input images.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

pub fn run(config: &RunConfig, args: DetectArgs) -> Result<Outcome> {
    let checkpoint = args
        .checkpoint
        .or_else(|| config.eval.checkpoint.clone())
        .ok_or_else(|| Error::Config("detect: checkpoint not set".into()))?;
    require_exists(&checkpoint, "checkpoint")?;
    if let Some(c) = args.conf {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Config(format!("detect: conf {c} outside [0, 1]")));
        }
    }
    let out_dir = config.output_dir();
    ensure_dir(&out_dir)?;

    let (model, _, _) = SdniaModel::load(&checkpoint)?;
    let conf = args.conf.unwrap_or(model.spec.detector.conf_threshold);

    let mut produced = ProducedFiles::default();
    let mut records: Vec<(String, Vec<sdnia_core::detector::Detection>)> = Vec::new();
    let mut skipped = 0usize;

    for path in &args.images {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let image = match ImageTensor::load_png(path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let (adapted, dets) = model.infer_with_threshold(&image, conf)?;

        let adapted_path = out_dir.join(format!("{stem}_adapted.png"));
        adapted.save_png(&adapted_path)?;
        produced.add(&adapted_path);

        let overlay_path = out_dir.join(format!("{stem}_detections.png"));
        draw_detections(&image, &dets).save_png(&overlay_path)?;
        produced.add(&overlay_path);

        println!("{}: {} detections", path.display(), dets.len());
        for d in &dets {
            let name = model
                .spec
                .class_names
                .get(d.class_id)
                .map(|s| s.as_str())
                .unwrap_or("?");
            println!(
                "  {name} conf {:.3} at ({:.3}, {:.3}) size ({:.3}, {:.3})",
                d.confidence, d.box_.cx, d.box_.cy, d.box_.w, d.box_.h
            );
        }
        records.push((stem, dets));
    }

    let records_path = out_dir.join("detections.txt");
    std::fs::write(&records_path, detections_to_records(&records))
        .map_err(|e| Error::io(&records_path, e))?;
    produced.add(&records_path);
    produced.write(&out_dir)?;

    if skipped > 0 {
        Ok(Outcome::PartialFailure(format!(
            "{skipped} of {} images skipped",
            args.images.len()
        )))
    } else {
        Ok(Outcome::Success)
    }
}
