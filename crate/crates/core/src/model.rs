//! The combined adaptation + detection model, its checkpoint schema, and the
//! reference-free inference path.

use std::path::Path;

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint, TensorMap};
use crate::detector::{decode_predictions, nms, Detection, DetectorConfig, DetectorModel};
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::nia::{NiaConfig, NiaNetwork};

/// Everything needed to rebuild the model skeleton.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    /// `None` means the bare detector (no adaptation stage).
    pub nia: Option<NiaConfig>,
    pub detector: DetectorConfig,
    pub class_names: Vec<String>,
}

/// Training bookkeeping persisted next to the weights so runs can resume.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainPersist {
    pub epoch: usize,
    pub best_val_metric: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    spec: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainPersist>,
}

pub struct SdniaModel {
    pub spec: ModelSpec,
    pub nia: Option<NiaNetwork>,
    pub detector: DetectorModel,
}

impl SdniaModel {
    pub fn new(spec: ModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.class_names.len() != spec.detector.num_classes {
            return Err(Error::Config(format!(
                "class name count {} != detector num_classes {}",
                spec.class_names.len(),
                spec.detector.num_classes
            )));
        }
        let nia = spec.nia.map(|cfg| NiaNetwork::new(cfg, rng));
        let detector = DetectorModel::new(spec.detector.clone(), rng)?;
        Ok(Self {
            spec,
            nia,
            detector,
        })
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// All trainable tensors, namespaced `nia/...` and `detector/...`.
    pub fn named_params(&self) -> Vec<(String, &ArrayD<f64>)> {
        let mut out = Vec::new();
        if let Some(nia) = &self.nia {
            for (name, p) in nia.named_params() {
                out.push((format!("nia/{name}"), p));
            }
        }
        for (name, p) in self.detector.named_params() {
            out.push((format!("detector/{name}"), p));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut ArrayD<f64>)> {
        let mut out = Vec::new();
        if let Some(nia) = &mut self.nia {
            for (name, p) in nia.named_params_mut() {
                out.push((format!("nia/{name}"), p));
            }
        }
        for (name, p) in self.detector.named_params_mut() {
            out.push((format!("detector/{name}"), p));
        }
        out
    }

    pub fn params_snapshot(&self) -> TensorMap {
        self.named_params()
            .into_iter()
            .map(|(n, p)| (n, p.clone()))
            .collect()
    }

    pub fn load_params(&mut self, tensors: &TensorMap) -> Result<()> {
        for (name, param) in self.named_params_mut() {
            let t = tensors.get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor '{name}' in checkpoint"))
            })?;
            if t.shape() != param.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' shape {:?} != model shape {:?}",
                    t.shape(),
                    param.shape()
                )));
            }
            param.assign(t);
        }
        Ok(())
    }

    /// Adaptation stage; identity when the model carries no adapter.
    pub fn adapt(&self, image: &ImageTensor) -> Result<ImageTensor> {
        match &self.nia {
            Some(nia) => nia.forward(image),
            None => Ok(image.clone()),
        }
    }

    /// Reference-free inference: adapt, detect, decode, suppress.
    /// Returns the adapted image and the surviving detections.
    pub fn infer(&self, image: &ImageTensor) -> Result<(ImageTensor, Vec<Detection>)> {
        self.infer_with_threshold(image, self.spec.detector.conf_threshold)
    }

    /// Inference with an explicit confidence threshold (evaluation uses a
    /// low one so the PR curve has support).
    pub fn infer_with_threshold(
        &self,
        image: &ImageTensor,
        conf_threshold: f64,
    ) -> Result<(ImageTensor, Vec<Detection>)> {
        let adapted = self.adapt(image)?;
        let raw = self.detector.forward(&adapted)?;
        let mut cfg = self.spec.detector.clone();
        cfg.conf_threshold = conf_threshold;
        let dets = decode_predictions(&raw, &cfg);
        Ok((adapted, nms(&dets, cfg.nms_iou_threshold)))
    }

    pub fn save(&self, path: &Path, train: Option<TrainPersist>, extra: TensorMap) -> Result<()> {
        let mut tensors = self.params_snapshot();
        tensors.extend(extra);
        let meta = ModelMeta {
            spec: self.spec.clone(),
            train,
        };
        let meta_json = serde_json::to_string(&meta)
            .map_err(|e| Error::Checkpoint(format!("meta serialization: {e}")))?;
        write_checkpoint(path, &tensors, &meta_json)
    }

    /// Rebuilds a model from a checkpoint. Extra tensors (optimizer state)
    /// are returned alongside.
    pub fn load(path: &Path) -> Result<(Self, Option<TrainPersist>, TensorMap)> {
        let (tensors, meta_json) = read_checkpoint(path)?;
        let meta: ModelMeta = serde_json::from_str(&meta_json)
            .map_err(|e| Error::Checkpoint(format!("meta parse: {e}")))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut model = SdniaModel::new(meta.spec, &mut rng)?;
        model.load_params(&tensors)?;
        let param_names: std::collections::HashSet<String> =
            model.named_params().into_iter().map(|(n, _)| n).collect();
        let extra: TensorMap = tensors
            .into_iter()
            .filter(|(n, _)| !param_names.contains(n))
            .collect();
        Ok((model, meta.train, extra))
    }
}
