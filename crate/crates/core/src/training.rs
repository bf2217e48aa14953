//! Joint end-to-end optimization of the adaptation network and detector:
//! after adaptation, one pipeline computes the restoration loss against the
//! clean reference and the other feeds the detector; a single backward pass
//! through the weighted total updates both parameter sets.
//!
//! Original (non-stylized) images use themselves as restoration reference,
//! regularizing the adapter toward identity on clean inputs; the
//! `res_on_originals` flag exposes the alternative. Inference never needs
//! the reference.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::detector::encode_targets;
use crate::error::{Error, Result};
use crate::evaluation::{map_range, ApIntegration, EvalPair};
use crate::image_tensor::ImageTensor;
use crate::imagery::{BoundingBox, DatasetManifest, Origin, Split};
use crate::losses::{
    detection_loss_on_tape, restoration_loss_on_tape, FeatureExtractor, IdentityExtractor,
    LossBreakdown, LossWeights, NullExtractor, RandomConvExtractor,
};
use crate::model::{ModelSpec, SdniaModel, TrainPersist};
use crate::nn::{GradientSet, SgdOptimizer};

/// Which perceptual feature extractor backs the restoration loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Identity,
    #[default]
    RandomConv,
    /// Disables the perceptual terms (restoration = MS-SSIM + l1).
    Null,
}

impl ExtractorKind {
    pub fn build(&self) -> Box<dyn FeatureExtractor> {
        match self {
            ExtractorKind::Identity => Box::new(IdentityExtractor),
            ExtractorKind::RandomConv => Box::new(RandomConvExtractor::default()),
            ExtractorKind::Null => Box::new(NullExtractor),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Expected square input size; informational for full runs, enforced
    /// nowhere since each image carries its own dimensions.
    pub image_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Data-level toggle applied by dataset assembly (kept here so variant
    /// configurations are self-describing).
    pub use_stylized_data: bool,
    pub use_nia: bool,
    /// Apply the restoration loss to original images (self-reference).
    pub res_on_originals: bool,
    pub extractor: ExtractorKind,
    /// Confidence floor used when scoring validation mAP.
    pub eval_conf_threshold: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 4,
            image_size: 544,
            max_epochs: 400,
            patience: 10,
            loss_weights: LossWeights::default(),
            seed: 0,
            use_stylized_data: true,
            use_nia: true,
            res_on_originals: true,
            extractor: ExtractorKind::RandomConv,
            eval_conf_threshold: 0.05,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and max epochs must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val fraction must be in [0, 1)".into()));
        }
        self.loss_weights.validate()
    }
}

/// A materialized training example with its resolved restoration reference
/// (`None` = the image itself).
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image_id: String,
    pub pixels: ImageTensor,
    pub reference: Option<ImageTensor>,
    pub boxes: Vec<BoundingBox>,
    pub origin: Origin,
}

/// Loads every entry and resolves references. Entries whose reference id
/// cannot be found are dropped with a warning message.
pub fn materialize(manifest: &DatasetManifest) -> Result<(Vec<TrainExample>, Vec<String>)> {
    let mut originals: HashMap<&str, usize> = HashMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.origin == Origin::Original {
            originals.insert(e.image_id.as_str(), i);
        }
    }
    let mut examples = Vec::with_capacity(manifest.len());
    let mut warnings = Vec::new();
    let mut reference_cache: HashMap<usize, ImageTensor> = HashMap::new();
    for e in &manifest.entries {
        let pixels = e.load_pixels()?;
        let reference = if e.origin == Origin::Original {
            None
        } else {
            match originals.get(e.reference_id.as_str()) {
                Some(&idx) => {
                    if !reference_cache.contains_key(&idx) {
                        reference_cache.insert(idx, manifest.entries[idx].load_pixels()?);
                    }
                    Some(reference_cache[&idx].clone())
                }
                None => {
                    warnings.push(format!(
                        "dropping '{}': reference '{}' not in manifest",
                        e.image_id, e.reference_id
                    ));
                    continue;
                }
            }
        };
        examples.push(TrainExample {
            image_id: e.image_id.clone(),
            pixels,
            reference,
            boxes: e.boxes.clone(),
            origin: e.origin,
        });
    }
    Ok((examples, warnings))
}

/// Seeded validation split, stratified by origin.
pub fn split_train_val(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> (DatasetManifest, DatasetManifest) {
    let mut groups: HashMap<Origin, Vec<usize>> = HashMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        groups.entry(e.origin).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_idx = Vec::new();
    let mut order: Vec<Origin> = groups.keys().copied().collect();
    order.sort_by_key(|o| o.to_string());
    for origin in order {
        let mut idx = groups.remove(&origin).expect("group exists");
        idx.sort_unstable();
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * fraction).round() as usize).min(idx.len().saturating_sub(1));
        val_idx.extend(idx.into_iter().take(n_val));
    }
    let val_set: std::collections::HashSet<usize> = val_idx.into_iter().collect();

    let mut train = DatasetManifest::new(
        format!("{}_train", manifest.name),
        Split::Train,
        manifest.class_names.clone(),
    );
    let mut val = DatasetManifest::new(
        format!("{}_val", manifest.name),
        Split::Val,
        manifest.class_names.clone(),
    );
    for (i, e) in manifest.entries.iter().enumerate() {
        if val_set.contains(&i) {
            val.entries.push(e.clone());
        } else {
            train.entries.push(e.clone());
        }
    }
    (train, val)
}

/// Forward + backward of one example through both pipelines; returns named
/// parameter gradients and the per-example loss breakdown.
pub fn joint_gradients(
    model: &SdniaModel,
    example: &TrainExample,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor,
    res_on_originals: bool,
) -> Result<(GradientSet, LossBreakdown)> {
    let mut tape = Tape::new();
    let mut bindings = crate::nn::ParamBindings::new();
    let input = tape.constant(example.pixels.data().clone().into_dyn());

    let (adapted, res_active) = match &model.nia {
        Some(nia) => {
            let a = nia.forward_on_tape(&mut tape, input, "nia/", Some(&mut bindings));
            let active = res_on_originals || example.origin != Origin::Original;
            (a, active)
        }
        None => (input, false),
    };

    let res_vars = if res_active {
        let reference = example
            .reference
            .as_ref()
            .unwrap_or(&example.pixels)
            .data()
            .clone()
            .into_dyn();
        let r = tape.constant(reference);
        Some(restoration_loss_on_tape(
            &mut tape, adapted, r, weights, extractor,
        )?)
    } else {
        None
    };

    let raw = model
        .detector
        .forward_on_tape(&mut tape, adapted, "detector/", Some(&mut bindings));
    let targets = encode_targets(
        &example.boxes,
        &model.spec.detector,
        example.pixels.height(),
        example.pixels.width(),
    )?;
    let det = detection_loss_on_tape(&mut tape, &raw, &targets, &model.spec.detector);

    let tb = tape.mul_scalar(det.l_box, weights.p1);
    let to = tape.mul_scalar(det.l_obj, weights.p2);
    let tc = tape.mul_scalar(det.l_cls, weights.p3);
    let tbo = tape.add(tb, to);
    let mut total = tape.add(tbo, tc);
    if let Some(res) = &res_vars {
        let tr = tape.mul_scalar(res.l_res, weights.p4);
        total = tape.add(total, tr);
    }

    let grads = tape.backward(total)?;
    let mut gset = GradientSet::default();
    for (name, var) in bindings.iter() {
        if let Some(g) = grads.get(var) {
            gset.accumulate(name, g);
        }
    }

    let (l1, ms, content, style) = match &res_vars {
        Some(r) => (
            tape.scalar_value(r.l1),
            tape.scalar_value(r.msssim_loss),
            tape.scalar_value(r.content),
            tape.scalar_value(r.style),
        ),
        None => (0.0, 0.0, 0.0, 0.0),
    };
    let breakdown = LossBreakdown::from_components(
        weights,
        tape.scalar_value(det.l_box),
        tape.scalar_value(det.l_obj),
        tape.scalar_value(det.l_cls),
        l1,
        ms,
        content,
        style,
    );
    Ok((gset, breakdown))
}

/// One optimization step over a batch: per-example tapes run in parallel,
/// gradients are averaged in batch order, and a single SGD update moves the
/// adapter and detector together. A non-finite batch applies no update.
pub fn joint_step(
    model: &mut SdniaModel,
    optimizer: &mut SgdOptimizer,
    batch: &[&TrainExample],
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor,
    res_on_originals: bool,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty image batch".into()));
    }
    let shared: &SdniaModel = model;
    let results: Vec<Result<(GradientSet, LossBreakdown)>> = batch
        .par_iter()
        .map(|ex| joint_gradients(shared, ex, weights, extractor, res_on_originals))
        .collect();

    let mut merged = GradientSet::default();
    let mut breakdowns = Vec::with_capacity(batch.len());
    for r in results {
        let (g, b) = r?;
        merged.merge(g);
        breakdowns.push(b);
    }
    merged.scale(1.0 / batch.len() as f64);
    let mean = LossBreakdown::mean_of(&breakdowns);
    if !mean.is_finite() || !merged.is_finite() {
        return Ok(mean); // caller aborts; parameters stay at the last good state
    }
    optimizer.step(model.named_params_mut().into_iter(), &merged);
    Ok(mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub best_val_metric: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
}

impl Default for TrainState {
    fn default() -> Self {
        Self {
            best_val_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
        }
    }
}

impl TrainState {
    /// Registers an epoch metric; improvement means strictly greater.
    pub fn observe(&mut self, epoch: usize, val_metric: f64) -> bool {
        if val_metric > self.best_val_metric {
            self.best_val_metric = val_metric;
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
            true
        } else {
            self.epochs_since_improvement += 1;
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stop once `patience` consecutive epochs brought no improvement.
pub fn early_stop_check(state: &TrainState, patience: usize) -> StopDecision {
    if state.epochs_since_improvement >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

/// Registers a metric and applies the patience rule in one call.
pub fn early_stop_step(
    state: &mut TrainState,
    epoch: usize,
    val_metric: f64,
    patience: usize,
) -> StopDecision {
    state.observe(epoch, val_metric);
    early_stop_check(state, patience)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    Diverged,
}

/// What an epoch closure reports back to the loop driver.
pub enum EpochSignal {
    Metric(f64),
    /// Non-finite loss: stop immediately, keep the best state so far.
    Abort,
}

/// Drives epochs `start..=max_epochs` with early stopping. The closure sees
/// the loop state before its metric is registered, so it can compare a fresh
/// metric against `state.best_val_metric` (strictly greater = improvement)
/// to decide when to snapshot.
pub fn run_epoch_loop<F>(
    start_epoch: usize,
    max_epochs: usize,
    patience: usize,
    state: &mut TrainState,
    mut epoch_fn: F,
) -> Result<(StopReason, usize)>
where
    F: FnMut(usize, &TrainState) -> Result<EpochSignal>,
{
    for epoch in start_epoch..=max_epochs {
        match epoch_fn(epoch, state)? {
            EpochSignal::Abort => return Ok((StopReason::Diverged, epoch)),
            EpochSignal::Metric(m) => {
                state.observe(epoch, m);
                if early_stop_check(state, patience) == StopDecision::Stop {
                    return Ok((StopReason::EarlyStop, epoch));
                }
            }
        }
    }
    Ok((StopReason::MaxEpochs, max_epochs))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub val_map50: f64,
}

/// Step/epoch observers; implementations stream line-delimited records.
pub trait TrainLogger {
    fn on_step(&mut self, _epoch: usize, _step: usize, _losses: &LossBreakdown) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
    fn on_warning(&mut self, _message: &str) {}
}

pub struct NoopLogger;

impl TrainLogger for NoopLogger {}

pub struct TrainOutcome {
    /// Model restored to the best-on-validation parameters.
    pub model: SdniaModel,
    pub optimizer: SgdOptimizer,
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
    pub stop_reason: StopReason,
    pub final_epoch: usize,
    pub persist: TrainPersist,
}

/// Optimizer state restored from / written to checkpoints.
fn momentum_prefix(name: &str) -> String {
    format!("opt_momentum/{name}")
}

/// Trains an adaptation + detection model on a mixed manifest.
///
/// Validation uses mAP@.5; the best checkpoint is retained and restored into
/// the returned model. `resume` continues a previous run (parameters,
/// optimizer momentum, RNG position, epoch counters).
pub fn train(
    config: &TrainConfig,
    spec: ModelSpec,
    train_manifest: &DatasetManifest,
    val_manifest: &DatasetManifest,
    logger: &mut dyn TrainLogger,
    resume: Option<&std::path::Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_manifest.is_empty() || val_manifest.is_empty() {
        return Err(Error::Dataset("training and validation sets must be non-empty".into()));
    }
    let spec = ModelSpec {
        nia: if config.use_nia { spec.nia } else { None },
        ..spec
    };

    let (train_examples, warnings) = materialize(train_manifest)?;
    let (val_examples, val_warnings) = materialize(val_manifest)?;
    for w in warnings.iter().chain(&val_warnings) {
        logger.on_warning(w);
    }
    if train_examples.is_empty() || val_examples.is_empty() {
        return Err(Error::Dataset("no usable examples after reference resolution".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = SdniaModel::new(spec, &mut rng)?;
    let mut optimizer = SgdOptimizer::new(config.learning_rate, config.momentum);
    let mut state = TrainState::default();
    let mut start_epoch = 1usize;

    if let Some(path) = resume {
        let (loaded, persist, extra) = SdniaModel::load(path)?;
        if loaded.spec != model.spec {
            return Err(Error::Checkpoint(
                "resume checkpoint was built for a different model configuration".into(),
            ));
        }
        model = loaded;
        for (name, tensor) in extra {
            if let Some(stripped) = name.strip_prefix("opt_momentum/") {
                optimizer.velocity.insert(stripped.to_string(), tensor);
            }
        }
        if let Some(p) = persist {
            rng = ChaCha8Rng::from_seed(p.rng_seed);
            rng.set_word_pos(p.rng_word_pos);
            state = TrainState {
                best_val_metric: p.best_val_metric,
                best_epoch: p.best_epoch,
                epochs_since_improvement: p.epochs_since_improvement,
            };
            start_epoch = p.epoch + 1;
        }
    }

    let extractor = config.extractor.build();
    let mut best_tensors = model.params_snapshot();
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut order: Vec<usize> = (0..train_examples.len()).collect();

    let (reason, final_epoch) = {
        let model_ref = &mut model;
        let optimizer_ref = &mut optimizer;
        let best_ref = &mut best_tensors;
        let history_ref = &mut history;
        let rng_ref = &mut rng;
        run_epoch_loop(
            start_epoch,
            config.max_epochs,
            config.patience,
            &mut state,
            |epoch, loop_state| {
                order.shuffle(rng_ref);
                let mut breakdowns = Vec::new();
                for (step, chunk) in order.chunks(config.batch_size).enumerate() {
                    let batch: Vec<&TrainExample> =
                        chunk.iter().map(|&i| &train_examples[i]).collect();
                    let bd = joint_step(
                        model_ref,
                        optimizer_ref,
                        &batch,
                        &config.loss_weights,
                        extractor.as_ref(),
                        config.res_on_originals,
                    )?;
                    logger.on_step(epoch, step, &bd);
                    if !bd.is_finite() {
                        return Ok(EpochSignal::Abort);
                    }
                    breakdowns.push(bd);
                }
                let val_map50 = validation_map50(
                    model_ref,
                    &val_examples,
                    config.eval_conf_threshold,
                )?;
                if val_map50 > loop_state.best_val_metric {
                    *best_ref = model_ref.params_snapshot();
                }
                let record = EpochRecord {
                    epoch,
                    losses: LossBreakdown::mean_of(&breakdowns),
                    val_map50,
                };
                logger.on_epoch(&record);
                history_ref.push(record);
                Ok(EpochSignal::Metric(val_map50))
            },
        )?
    };

    model.load_params(&best_tensors)?;
    let persist = TrainPersist {
        epoch: final_epoch,
        best_val_metric: state.best_val_metric,
        best_epoch: state.best_epoch,
        epochs_since_improvement: state.epochs_since_improvement,
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
    };
    Ok(TrainOutcome {
        model,
        optimizer,
        history,
        state,
        stop_reason: reason,
        final_epoch,
        persist,
    })
}

/// Saves a training outcome (model + optimizer momentum + loop state).
pub fn save_outcome(outcome: &TrainOutcome, path: &std::path::Path) -> Result<()> {
    let extra: crate::checkpoint::TensorMap = outcome
        .optimizer
        .velocity
        .iter()
        .map(|(n, t)| (momentum_prefix(n), t.clone()))
        .collect();
    outcome.model.save(path, Some(outcome.persist.clone()), extra)
}

/// mAP@.5 of the model over materialized examples.
pub fn validation_map50(
    model: &SdniaModel,
    examples: &[TrainExample],
    conf_threshold: f64,
) -> Result<f64> {
    let pairs: Vec<EvalPair> = examples
        .par_iter()
        .map(|ex| {
            let (_, dets) = model.infer_with_threshold(&ex.pixels, conf_threshold)?;
            Ok(EvalPair {
                dets,
                gts: ex.boxes.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let report = map_range(
        &pairs,
        model.spec.detector.num_classes,
        ApIntegration::Coco101,
    )?;
    Ok(report.map_50)
}
