//! `sdnia stylize`: synthesize stylized copies of a content manifest,
//! writing images, label files, and an output manifest.

use std::path::PathBuf;

use clap::Args;

use sdnia_core::imagery::{load_dataset, save_dataset};
use sdnia_core::stylizer::{batch_stylize, ProceduralBackend, StyleImage, StylizerBackend};
use sdnia_core::{Error, ImageTensor, Result};

use crate::config::{require_exists, RunConfig};
use crate::output::{ensure_dir, ProducedFiles};
use crate::Outcome;

#[derive(Args)]
pub struct StylizeArgs {
    /// Content manifest (overrides the config file).
    #[arg(long)]
    pub contents: Option<PathBuf>,

    /// Style image paths (overrides the config file).
    #[arg(long)]
    pub styles: Vec<PathBuf>,

    /// Stylization strengths in [0, 1] (overrides the config file).
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
}

pub fn build_backend(name: &str) -> Result<Box<dyn StylizerBackend>> {
    match name {
        "procedural" => Ok(Box::new(ProceduralBackend::new())),
        other => Err(Error::Config(format!(
            "unknown stylizer backend '{other}' (available: procedural)"
        ))),
    }
}

/// Reads previously predicted style vectors from the cache directory, keyed
/// by backend and style id; predicts and persists on miss.
fn cached_style_note(config: &RunConfig, styles: &[StyleImage], backend_name: &str) -> Result<()> {
    let dir = config.cache_dir().join("style_vectors");
    ensure_dir(&dir)?;
    let backend = build_backend(backend_name)?;
    for s in styles {
        let path = dir.join(format!("{backend_name}_{}.json", s.id));
        if path.exists() {
            continue;
        }
        let v = backend.predict(&s.pixels)?;
        let json = serde_json::to_string(v.values())
            .map_err(|e| Error::Config(format!("style vector serialization: {e}")))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn run(config: &RunConfig, args: StylizeArgs) -> Result<Outcome> {
    // Full validation before any side effect.
    let contents_path = args
        .contents
        .or_else(|| config.stylize.content_manifest.clone())
        .ok_or_else(|| Error::Config("stylize: content manifest not set".into()))?;
    let style_paths = if args.styles.is_empty() {
        config.stylize.styles.clone()
    } else {
        args.styles
    };
    let alphas = if args.alphas.is_empty() {
        config.stylize.alphas.clone()
    } else {
        args.alphas
    };
    if style_paths.is_empty() {
        return Err(Error::Config("stylize: no style images given".into()));
    }
    if alphas.is_empty() {
        return Err(Error::Config("stylize: no alphas given".into()));
    }
    for a in &alphas {
        if !(0.0..=1.0).contains(a) {
            return Err(Error::Config(format!("stylize: alpha {a} outside [0, 1]")));
        }
    }
    require_exists(&contents_path, "content manifest")?;
    for p in &style_paths {
        require_exists(p, "style image")?;
    }
    let backend_name = config.stylize.backend.as_deref().unwrap_or("procedural");
    let backend = build_backend(backend_name)?;

    let loaded = load_dataset(&contents_path)?;
    for d in &loaded.diagnostics {
        eprintln!("warning: {d}");
    }
    let styles: Vec<StyleImage> = style_paths
        .iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "style".to_string());
            Ok(StyleImage {
                id,
                pixels: ImageTensor::load_png(p)?,
            })
        })
        .collect::<Result<_>>()?;
    cached_style_note(config, &styles, backend_name)?;

    let out_dir = config.output_dir().join("stylized");
    ensure_dir(&out_dir)?;
    let (manifest, failures) = batch_stylize(
        backend.as_ref(),
        &loaded.manifest,
        &styles,
        &alphas,
        Some(&out_dir),
    )?;

    let manifest_path = config.output_dir().join("stylized.json");
    save_dataset(&manifest, &manifest_path)?;

    let mut produced = ProducedFiles::default();
    produced.add(&manifest_path);
    produced.write(&config.output_dir())?;

    println!(
        "stylized {} images ({} contents x {} styles x {} alphas), manifest at {}",
        manifest.len(),
        loaded.manifest.len(),
        styles.len(),
        alphas.len(),
        manifest_path.display()
    );
    if failures.is_empty() {
        Ok(Outcome::Success)
    } else {
        for f in failures.iter().take(10) {
            eprintln!(
                "failed: content {} style {} alpha {}: {}",
                f.content_id, f.style_id, f.alpha, f.message
            );
        }
        Ok(Outcome::PartialFailure(format!(
            "{} stylizations failed",
            failures.len()
        )))
    }
}
