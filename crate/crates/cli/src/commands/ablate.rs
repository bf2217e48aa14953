//! `sdnia ablate`: run a named ablation grid, one trained cell at a time,
//! with per-cell resume.

use clap::Args;

use sdnia_core::evaluation::ablation::{
    grid_cells, run_cell, AblationContext, AblationReport, AblationRow, CellResult, GridKind,
};
use sdnia_core::imagery::load_dataset;
use sdnia_core::stylizer::ProceduralBackend;
use sdnia_core::{Error, ImageTensor, Result};

use crate::config::{require_exists, RunConfig};
use crate::output::{ensure_dir, ProducedFiles};
use crate::Outcome;

#[derive(Args)]
pub struct AblateArgs {
    /// Grid key: table5 (restoration loss), table6 (components),
    /// table7 (stylization-strength ranges).
    #[arg(long)]
    pub grid: Option<String>,

    /// Skip cells whose result file already exists in the output directory.
    #[arg(long)]
    pub resume: bool,
}

pub fn run(config: &RunConfig, args: AblateArgs) -> Result<Outcome> {
    let grid_key = args
        .grid
        .or_else(|| config.ablate.grid.clone())
        .ok_or_else(|| Error::Config("ablate: grid not set".into()))?;
    let kind = GridKind::parse(&grid_key)?;
    let originals_path = config
        .ablate
        .originals_manifest
        .clone()
        .or_else(|| config.data.train_manifest.clone())
        .ok_or_else(|| Error::Config("ablate: originals manifest not set".into()))?;
    require_exists(&originals_path, "originals manifest")?;
    if config.ablate.styles.is_empty() {
        return Err(Error::Config("ablate: no style images given".into()));
    }
    for p in &config.ablate.styles {
        require_exists(p, "style image")?;
    }
    let test_paths = if config.ablate.test_manifests.is_empty() {
        config.data.test_manifests.clone()
    } else {
        config.ablate.test_manifests.clone()
    };
    if test_paths.is_empty() {
        return Err(Error::Config("ablate: no test manifests given".into()));
    }
    for p in &test_paths {
        require_exists(p, "test manifest")?;
    }
    let detector = config.detector_config()?;
    let base_train = config.train_config()?;
    let out_dir = config.output_dir();
    ensure_dir(&out_dir)?;

    let originals = load_dataset(&originals_path)?.manifest;
    let styles: Vec<_> = config
        .ablate
        .styles
        .iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "style".into());
            Ok(sdnia_core::stylizer::StyleImage {
                id,
                pixels: ImageTensor::load_png(p)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut test_sets = Vec::new();
    for p in &test_paths {
        let label = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "test".into());
        test_sets.push((label, load_dataset(p)?.manifest));
    }

    let backend = ProceduralBackend::new();
    let ctx = AblationContext {
        originals: &originals,
        styles: &styles,
        backend: &backend,
        test_sets: test_sets.iter().map(|(l, m)| (l.clone(), m)).collect(),
        base_train,
        detector,
        nia: config.nia_config(),
        class_names: originals.class_names.clone(),
    };

    let mut produced = ProducedFiles::default();
    let mut rows = Vec::new();
    let mut failures = 0usize;
    for cell in grid_cells(kind, &ctx.base_train) {
        let cell_path = out_dir.join(format!("cell_{}.json", sanitize(&cell.name)));
        if args.resume && cell_path.exists() {
            let raw = std::fs::read_to_string(&cell_path)
                .map_err(|e| Error::io(&cell_path, e))?;
            let existing: CellResult = serde_json::from_str(&raw)
                .map_err(|e| Error::Eval(format!("{}: {e}", cell_path.display())))?;
            println!("cell '{}' already complete, skipping", cell.name);
            rows.push(AblationRow {
                name: cell.name,
                result: Some(existing),
                error: None,
            });
            continue;
        }
        println!("running cell '{}'", cell.name);
        match run_cell(&ctx, &cell) {
            Ok(result) => {
                let json = serde_json::to_string_pretty(&result)
                    .map_err(|e| Error::Eval(format!("cell serialization: {e}")))?;
                std::fs::write(&cell_path, json).map_err(|e| Error::io(&cell_path, e))?;
                produced.add(&cell_path);
                rows.push(AblationRow {
                    name: cell.name,
                    result: Some(result),
                    error: None,
                });
            }
            Err(e) => {
                eprintln!("cell '{}' failed: {e}", cell.name);
                failures += 1;
                rows.push(AblationRow {
                    name: cell.name,
                    result: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }

    let report = AblationReport {
        grid: kind.key().to_string(),
        rows,
    };
    let report_path = out_dir.join(format!("ablation_{}.json", kind.key()));
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Eval(format!("report serialization: {e}")))?;
    std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    produced.add(&report_path);

    let table_path = out_dir.join(format!("ablation_{}.txt", kind.key()));
    let table = report.render_table();
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    produced.add(&table_path);
    produced.write(&out_dir)?;

    println!("\n{table}");
    if failures > 0 {
        Ok(Outcome::PartialFailure(format!("{failures} cells failed")))
    } else {
        Ok(Outcome::Success)
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}
