//! Ablation grids: train/evaluate a variant per cell with a shared seed and
//! emit a table-shaped report (rows = variants, columns = test sets).
//!
//! Three grids are built in:
//! - `table5`: restoration-loss variants (MS-SSIM+l1, perceptual-only, both)
//! - `table6`: component toggles (baseline, stylized data only, adapter
//!   only, both)
//! - `table7`: stylization-strength ranges used to build the training data

use serde::{Deserialize, Serialize};

use super::{map_range, ApIntegration, EvalPair, EvalReport};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::imagery::{mix_datasets, DatasetManifest};
use crate::losses::LossWeights;
use crate::model::{ModelSpec, SdniaModel};
use crate::nia::NiaConfig;
use crate::stylizer::{batch_stylize, StyleImage, StylizerBackend};
use crate::training::{split_train_val, train, ExtractorKind, NoopLogger, TrainConfig};

use rayon::prelude::*;

/// Scores a model over a labeled manifest. The manifest's class universe
/// must match the checkpoint's.
pub fn evaluate_model(
    model: &SdniaModel,
    manifest: &DatasetManifest,
    conf_threshold: f64,
) -> Result<EvalReport> {
    if manifest.class_names != model.spec.class_names {
        return Err(Error::Eval(format!(
            "class universe mismatch: checkpoint has [{}], test set has [{}]",
            model.spec.class_names.join(", "),
            manifest.class_names.join(", ")
        )));
    }
    let pairs: Vec<EvalPair> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let pixels = e.load_pixels()?;
            let (_, dets) = model.infer_with_threshold(&pixels, conf_threshold)?;
            Ok(EvalPair {
                dets,
                gts: e.boxes.clone(),
            })
        })
        .collect::<Result<_>>()?;
    map_range(&pairs, model.spec.detector.num_classes, ApIntegration::Coco101)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    RestorationLoss,
    Components,
    AlphaRange,
}

impl GridKind {
    /// Grid key used on the command line.
    pub fn key(&self) -> &'static str {
        match self {
            GridKind::RestorationLoss => "table5",
            GridKind::Components => "table6",
            GridKind::AlphaRange => "table7",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "table5" => Ok(GridKind::RestorationLoss),
            "table6" => Ok(GridKind::Components),
            "table7" => Ok(GridKind::AlphaRange),
            other => Err(Error::Config(format!(
                "unknown ablation grid '{other}' (expected table5, table6, or table7)"
            ))),
        }
    }
}

/// One grid cell: which components run and how the training data is built.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSpec {
    pub name: String,
    pub use_stylized: bool,
    pub use_nia: bool,
    /// Stylization strengths used to synthesize the cell's training data.
    pub alphas: Vec<f64>,
    pub extractor: ExtractorKind,
    pub weights: LossWeights,
}

fn alpha_range(from_tenths: u32) -> Vec<f64> {
    // e.g. 6 -> [0.6, 0.8, 1.0]
    (from_tenths..=10)
        .step_by(2)
        .map(|t| t as f64 / 10.0)
        .collect()
}

/// The rows of a grid, in table order.
pub fn grid_cells(kind: GridKind, base: &TrainConfig) -> Vec<CellSpec> {
    let full = CellSpec {
        name: String::new(),
        use_stylized: true,
        use_nia: true,
        alphas: vec![1.0],
        extractor: base.extractor,
        weights: base.loss_weights,
    };
    match kind {
        GridKind::RestorationLoss => vec![
            CellSpec {
                name: "m+l1".into(),
                extractor: ExtractorKind::Null,
                ..full.clone()
            },
            CellSpec {
                name: "vgg_p".into(),
                weights: LossWeights {
                    alpha_res: 0.0,
                    beta_res: 0.0,
                    ..base.loss_weights
                },
                ..full.clone()
            },
            CellSpec {
                name: "m+l1+vgg_p".into(),
                ..full
            },
        ],
        GridKind::Components => vec![
            CellSpec {
                name: "baseline".into(),
                use_stylized: false,
                use_nia: false,
                ..full.clone()
            },
            CellSpec {
                name: "sd".into(),
                use_nia: false,
                ..full.clone()
            },
            CellSpec {
                name: "nia".into(),
                use_stylized: false,
                ..full.clone()
            },
            CellSpec {
                name: "sdnia".into(),
                ..full
            },
        ],
        GridKind::AlphaRange => [10u32, 8, 6, 4, 2]
            .iter()
            .map(|&from| CellSpec {
                name: if *&from == 10 {
                    "1.0".to_string()
                } else {
                    format!("[0.{from}:1.0]")
                },
                alphas: alpha_range(from),
                ..full.clone()
            })
            .collect(),
    }
}

/// Everything a cell run needs.
pub struct AblationContext<'a> {
    pub originals: &'a DatasetManifest,
    pub styles: &'a [StyleImage],
    pub backend: &'a dyn StylizerBackend,
    /// (label, manifest) evaluation columns.
    pub test_sets: Vec<(String, &'a DatasetManifest)>,
    pub base_train: TrainConfig,
    pub detector: DetectorConfig,
    pub nia: NiaConfig,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub map_50: f64,
    pub map_50_95: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub columns: Vec<(String, EvalSummary)>,
    pub epochs_run: usize,
    pub best_val_map50: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<CellResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub grid: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Plain-text table mirroring the row/column layout.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let columns: Vec<String> = self
            .rows
            .iter()
            .filter_map(|r| r.result.as_ref())
            .flat_map(|c| c.columns.iter().map(|(l, _)| l.clone()))
            .fold(Vec::new(), |mut acc, l| {
                if !acc.contains(&l) {
                    acc.push(l);
                }
                acc
            });
        out.push_str(&format!("{:<14}", "variant"));
        for c in &columns {
            out.push_str(&format!(" {c:>19}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<14}", row.name));
            match (&row.result, &row.error) {
                (Some(res), _) => {
                    for c in &columns {
                        match res.columns.iter().find(|(l, _)| l == c) {
                            Some((_, s)) => out.push_str(&format!(
                                " {:>9.4}/{:<9.4}",
                                s.map_50, s.map_50_95
                            )),
                            None => out.push_str(&format!(" {:>19}", "-")),
                        }
                    }
                }
                (None, Some(e)) => out.push_str(&format!(" failed: {e}")),
                (None, None) => out.push_str(" (not run)"),
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the cell's training data, trains, and scores every test column.
pub fn run_cell(ctx: &AblationContext<'_>, cell: &CellSpec) -> Result<CellResult> {
    let mixed;
    let train_pool: &DatasetManifest = if cell.use_stylized {
        let (stylized, failures) =
            batch_stylize(ctx.backend, ctx.originals, ctx.styles, &cell.alphas, None)?;
        if !failures.is_empty() {
            return Err(Error::Backend {
                backend: ctx.backend.name().to_string(),
                message: format!("{} stylization failures in cell data build", failures.len()),
            });
        }
        mixed = mix_datasets(ctx.originals, &stylized)?;
        &mixed
    } else {
        ctx.originals
    };

    let (train_m, val_m) =
        split_train_val(train_pool, ctx.base_train.val_fraction, ctx.base_train.seed);
    let config = TrainConfig {
        use_nia: cell.use_nia,
        use_stylized_data: cell.use_stylized,
        extractor: cell.extractor,
        loss_weights: cell.weights,
        ..ctx.base_train.clone()
    };
    let spec = ModelSpec {
        nia: cell.use_nia.then_some(ctx.nia),
        detector: ctx.detector.clone(),
        class_names: ctx.class_names.clone(),
    };
    let outcome = train(&config, spec, &train_m, &val_m, &mut NoopLogger, None)?;

    let mut columns = Vec::new();
    for (label, manifest) in &ctx.test_sets {
        let report = evaluate_model(
            &outcome.model,
            manifest,
            ctx.base_train.eval_conf_threshold,
        )?;
        columns.push((
            label.clone(),
            EvalSummary {
                map_50: report.map_50,
                map_50_95: report.map_50_95,
            },
        ));
    }
    Ok(CellResult {
        name: cell.name.clone(),
        columns,
        epochs_run: outcome.final_epoch,
        best_val_map50: outcome.state.best_val_metric,
    })
}

/// Runs every cell of a grid; per-cell failures are recorded and the grid
/// continues. `skip` lets a resuming caller bypass completed cells.
pub fn run_ablation(
    ctx: &AblationContext<'_>,
    kind: GridKind,
    skip: &dyn Fn(&str) -> Option<CellResult>,
) -> AblationReport {
    let mut rows = Vec::new();
    for cell in grid_cells(kind, &ctx.base_train) {
        if let Some(existing) = skip(&cell.name) {
            rows.push(AblationRow {
                name: cell.name,
                result: Some(existing),
                error: None,
            });
            continue;
        }
        match run_cell(ctx, &cell) {
            Ok(result) => rows.push(AblationRow {
                name: cell.name,
                result: Some(result),
                error: None,
            }),
            Err(e) => rows.push(AblationRow {
                name: cell.name,
                result: None,
                error: Some(e.to_string()),
            }),
        }
    }
    AblationReport {
        grid: kind.key().to_string(),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rows_match_table_structure() {
        let base = TrainConfig::default();
        let t5: Vec<String> = grid_cells(GridKind::RestorationLoss, &base)
            .into_iter()
            .map(|c| c.name)
            .collect();
        assert_eq!(t5, vec!["m+l1", "vgg_p", "m+l1+vgg_p"]);

        let t6: Vec<String> = grid_cells(GridKind::Components, &base)
            .into_iter()
            .map(|c| c.name)
            .collect();
        assert_eq!(t6, vec!["baseline", "sd", "nia", "sdnia"]);

        let t7 = grid_cells(GridKind::AlphaRange, &base);
        let names: Vec<&str> = t7.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(
            names,
            vec!["1.0", "[0.8:1.0]", "[0.6:1.0]", "[0.4:1.0]", "[0.2:1.0]"]
        );
        assert_eq!(t7[0].alphas, vec![1.0]);
        assert_eq!(t7[2].alphas, vec![0.6, 0.8, 1.0]);
        assert_eq!(t7[4].alphas, vec![0.2, 0.4, 0.6, 0.8, 1.0]);
    }

    #[test]
    fn grid_keys_round_trip() {
        for kind in [
            GridKind::RestorationLoss,
            GridKind::Components,
            GridKind::AlphaRange,
        ] {
            assert_eq!(GridKind::parse(kind.key()).unwrap(), kind);
        }
        assert!(GridKind::parse("table9").is_err());
    }

    #[test]
    fn component_grid_toggles() {
        let cells = grid_cells(GridKind::Components, &TrainConfig::default());
        assert_eq!(
            cells
                .iter()
                .map(|c| (c.use_stylized, c.use_nia))
                .collect::<Vec<_>>(),
            vec![(false, false), (true, false), (false, true), (true, true)]
        );
    }
}
