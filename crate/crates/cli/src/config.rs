//! Run configuration: one TOML file with per-command sections; command-line
//! flags override individual keys. Every command validates its full
//! configuration before doing any work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdnia_core::detector::DetectorConfig;
use sdnia_core::losses::LossWeights;
use sdnia_core::nia::NiaConfig;
use sdnia_core::training::{ExtractorKind, TrainConfig};
use sdnia_core::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub stylize: StylizeSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub nia: NiaSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_manifest: Option<PathBuf>,
    #[serde(default)]
    pub test_manifests: Vec<PathBuf>,
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StylizeSection {
    pub content_manifest: Option<PathBuf>,
    #[serde(default)]
    pub styles: Vec<PathBuf>,
    #[serde(default)]
    pub alphas: Vec<f64>,
    /// Backend key; `procedural` is the built-in deterministic backend.
    pub backend: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub num_classes: Option<usize>,
    pub width: Option<usize>,
    pub grid_scales: Option<Vec<usize>>,
    pub anchors: Option<Vec<Vec<(f64, f64)>>>,
    pub conf_threshold: Option<f64>,
    pub nms_iou_threshold: Option<f64>,
    pub ignore_iou_threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NiaSection {
    pub width1: Option<usize>,
    pub width2: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub image_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub extractor: Option<ExtractorKind>,
    pub use_nia: Option<bool>,
    pub use_stylized_data: Option<bool>,
    pub res_on_originals: Option<bool>,
    pub eval_conf_threshold: Option<f64>,
    /// Stream per-step loss records to `steps.jsonl`.
    #[serde(default)]
    pub step_log: bool,
    pub loss_weights: Option<LossWeights>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub conf_threshold: Option<f64>,
    #[serde(default)]
    pub latency: bool,
    pub latency_sizes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub grid: Option<String>,
    pub originals_manifest: Option<PathBuf>,
    #[serde(default)]
    pub styles: Vec<PathBuf>,
    #[serde(default)]
    pub test_manifests: Vec<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs/default"))
    }

    /// Cache directory for style vectors and extractor features.
    pub fn cache_dir(&self) -> PathBuf {
        match std::env::var_os("SDNIA_CACHE_DIR") {
            Some(dir) => PathBuf::from(dir),
            None => self.output_dir().join(".cache"),
        }
    }

    pub fn detector_config(&self) -> Result<DetectorConfig> {
        let num_classes = self.detector.num_classes.ok_or_else(|| {
            Error::Config("detector.num_classes is required (set it in the config file)".into())
        })?;
        let mut cfg = DetectorConfig::tiny(num_classes);
        if let Some(w) = self.detector.width {
            cfg.width = w;
        }
        if let Some(scales) = &self.detector.grid_scales {
            cfg.grid_scales = scales.clone();
        }
        if let Some(anchors) = &self.detector.anchors {
            cfg.anchors = anchors.clone();
        }
        if let Some(t) = self.detector.conf_threshold {
            cfg.conf_threshold = t;
        }
        if let Some(t) = self.detector.nms_iou_threshold {
            cfg.nms_iou_threshold = t;
        }
        if let Some(t) = self.detector.ignore_iou_threshold {
            cfg.ignore_iou_threshold = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn nia_config(&self) -> NiaConfig {
        let mut cfg = NiaConfig::standard();
        if let Some(w) = self.nia.width1 {
            cfg.width1 = w;
        }
        if let Some(w) = self.nia.width2 {
            cfg.width2 = w;
        }
        cfg
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig {
            seed: self.seed,
            ..TrainConfig::default()
        };
        let t = &self.train;
        if let Some(v) = t.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = t.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = t.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = t.image_size {
            cfg.image_size = v;
        }
        if let Some(v) = t.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = t.patience {
            cfg.patience = v;
        }
        if let Some(v) = t.extractor {
            cfg.extractor = v;
        }
        if let Some(v) = t.use_nia {
            cfg.use_nia = v;
        }
        if let Some(v) = t.use_stylized_data {
            cfg.use_stylized_data = v;
        }
        if let Some(v) = t.res_on_originals {
            cfg.res_on_originals = v;
        }
        if let Some(v) = t.eval_conf_threshold {
            cfg.eval_conf_threshold = v;
        }
        if let Some(v) = self.data.val_fraction {
            cfg.val_fraction = v;
        }
        if let Some(w) = t.loss_weights {
            cfg.loss_weights = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Checks that a path exists, for fail-fast validation.
pub fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "{what} does not exist: {}",
            path.display()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let toml_src = r#"
            seed = 42
            output_dir = "runs/x"

            [data]
            train_manifest = "data/train.json"
            test_manifests = ["data/a.json", "data/b.json"]
            val_fraction = 0.2

            [detector]
            num_classes = 3
            width = 4

            [train]
            learning_rate = 0.01
            max_epochs = 7
            extractor = "identity"

            [train.loss_weights]
            alpha_res = 0.25
            beta_res = 0.25
            gamma_res = 0.5
            p1 = 0.05
            p2 = 1.0
            p3 = 0.5
            p4 = 0.01
        "#;
        let cfg: RunConfig = toml::from_str(toml_src).unwrap();
        assert_eq!(cfg.seed, 42);
        let tc = cfg.train_config().unwrap();
        assert_eq!(tc.max_epochs, 7);
        assert_eq!(tc.extractor, ExtractorKind::Identity);
        assert_eq!(tc.val_fraction, 0.2);
        let dc = cfg.detector_config().unwrap();
        assert_eq!(dc.num_classes, 3);
        assert_eq!(dc.width, 4);
    }

    #[test]
    fn rejects_unknown_keys() {
        let toml_src = r#"
            seed = 1
            [train]
            learning_rat = 0.01
        "#;
        assert!(toml::from_str::<RunConfig>(toml_src).is_err());
    }

    #[test]
    fn missing_num_classes_is_config_error() {
        let cfg = RunConfig::default();
        assert!(cfg.detector_config().is_err());
    }
}
