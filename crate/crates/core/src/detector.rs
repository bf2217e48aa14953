//! A compact anchor-based one-stage detector: a reduced darknet-style
//! conv/residual backbone with grid heads at two (configurable) strides.
//!
//! Raw head output per scale is a `[A*(5+C), H/s, W/s]` grid; per anchor the
//! channel block is `[tx, ty, tw, th, obj, cls_0..cls_{C-1}]`. Decoding uses
//! sigmoid center offsets within cells and bounded square-sigmoid anchor
//! scaling, `w = anchor_w * (2*sigmoid(tw))^2`: zero raw values decode to
//! the anchor size at the cell center, and sizes cannot run away during
//! gradient descent the way exponential scaling does.

use ndarray::{Array3, ArrayD};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::imagery::BoundingBox;
use crate::nia::LEAKY_SLOPE;
use crate::nn::{Conv2dLayer, ParamBindings};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Normalized (w, h) anchor pairs, one list per grid scale.
    pub anchors: Vec<Vec<(f64, f64)>>,
    /// Downsampling factors, ascending powers of two (e.g. 16, 32).
    pub grid_scales: Vec<usize>,
    /// Detections below this combined confidence are dropped at decode time.
    pub conf_threshold: f64,
    pub nms_iou_threshold: f64,
    /// Unassigned anchor slots whose cell-centered anchor box overlaps a
    /// ground truth above this IoU are excluded from the objectness loss.
    pub ignore_iou_threshold: f64,
    /// Base channel width of the backbone.
    pub width: usize,
}

impl DetectorConfig {
    /// Full-size preset (backbone around 3M parameters at width 16).
    pub fn standard(num_classes: usize) -> Self {
        Self {
            num_classes,
            anchors: vec![
                vec![(0.08, 0.09), (0.16, 0.18), (0.25, 0.30)],
                vec![(0.35, 0.40), (0.55, 0.55), (0.80, 0.75)],
            ],
            grid_scales: vec![16, 32],
            conf_threshold: 0.25,
            nms_iou_threshold: 0.45,
            // 1.0 disables the objectness ignore band; slots next to a
            // ground truth train as background, which keeps low-confidence
            // duplicates out of the decoded set.
            ignore_iou_threshold: 1.0,
            width: 16,
        }
    }

    /// Narrow preset for desk-scale experiments.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            width: 4,
            ..Self::standard(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("detector needs at least one class".into()));
        }
        if self.grid_scales.is_empty() || self.anchors.len() != self.grid_scales.len() {
            return Err(Error::Config(
                "anchors must provide one list per grid scale".into(),
            ));
        }
        let mut prev = 1;
        for &s in &self.grid_scales {
            if !s.is_power_of_two() || s < 2 || s <= prev {
                return Err(Error::Config(format!(
                    "grid scales must be ascending powers of two >= 2, got {:?}",
                    self.grid_scales
                )));
            }
            prev = s;
        }
        for list in &self.anchors {
            if list.is_empty() {
                return Err(Error::Config("each scale needs at least one anchor".into()));
            }
            for &(w, h) in list {
                if !(w > 0.0 && h > 0.0) {
                    return Err(Error::Config(format!("anchor sides must be > 0: ({w}, {h})")));
                }
            }
        }
        for (name, t) in [
            ("conf_threshold", self.conf_threshold),
            ("nms_iou_threshold", self.nms_iou_threshold),
            ("ignore_iou_threshold", self.ignore_iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {t}")));
            }
        }
        if self.width == 0 {
            return Err(Error::Config("backbone width must be >= 1".into()));
        }
        Ok(())
    }

    pub fn max_scale(&self) -> usize {
        *self.grid_scales.iter().max().expect("non-empty scales")
    }

    /// Channels per anchor block: 4 box terms, objectness, class scores.
    pub fn anchor_channels(&self) -> usize {
        5 + self.num_classes
    }
}

/// One decoded detection in normalized image coordinates.
///
/// `confidence` is the combined score `P(obj) * max_c P(c)` used for
/// ranking and thresholding; `class_score` is `max_c P(c)` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub box_: BoundingBox,
    pub confidence: f64,
    pub class_id: usize,
    pub class_score: f64,
}

struct Stage {
    down: Conv2dLayer,
    squeeze: Conv2dLayer,
    expand: Conv2dLayer,
}

struct Head {
    mid: Conv2dLayer,
    out: Conv2dLayer,
}

pub struct DetectorModel {
    pub config: DetectorConfig,
    stem: Conv2dLayer,
    stages: Vec<Stage>,
    /// (stage index the head taps, head layers), one per grid scale.
    heads: Vec<(usize, Head)>,
}

fn stage_channels(width: usize, k: usize) -> usize {
    width << k.min(4)
}

impl DetectorModel {
    pub fn new(config: DetectorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let n_stages = config.max_scale().trailing_zeros() as usize;
        let w = config.width;
        let stem = Conv2dLayer::new(3, w, 3, 1, rng);
        let mut stages = Vec::new();
        for k in 1..=n_stages {
            let c_in = stage_channels(w, k - 1);
            let c_out = stage_channels(w, k);
            stages.push(Stage {
                down: Conv2dLayer::new(c_in, c_out, 3, 2, rng),
                squeeze: Conv2dLayer::new(c_out, c_out / 2, 1, 1, rng),
                expand: Conv2dLayer::new(c_out / 2, c_out, 3, 1, rng),
            });
        }
        let mut heads = Vec::new();
        for (si, &scale) in config.grid_scales.iter().enumerate() {
            let k = scale.trailing_zeros() as usize;
            let ch = stage_channels(w, k);
            let out_ch = config.anchors[si].len() * config.anchor_channels();
            let mut out = Conv2dLayer::new(ch, out_ch, 1, 1, rng);
            // Small output weights start every slot at its anchor geometry;
            // the objectness bias starts at the background prior.
            out.weight.mapv_inplace(|v| v * 0.01);
            let ac = config.anchor_channels();
            for a in 0..config.anchors[si].len() {
                out.bias[a * ac + 4] = -2.0;
            }
            heads.push((
                k,
                Head {
                    mid: Conv2dLayer::new(ch, ch, 3, 1, rng),
                    out,
                },
            ));
        }
        Ok(Self {
            config,
            stem,
            stages,
            heads,
        })
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &ArrayD<f64>)> {
        fn layer<'a>(out: &mut Vec<(String, &'a ArrayD<f64>)>, name: String, l: &'a Conv2dLayer) {
            out.push((format!("{name}/weight"), &l.weight));
            out.push((format!("{name}/bias"), &l.bias));
        }
        let mut out = Vec::new();
        layer(&mut out, "stem".into(), &self.stem);
        for (k, s) in self.stages.iter().enumerate() {
            layer(&mut out, format!("stage{}/down", k + 1), &s.down);
            layer(&mut out, format!("stage{}/squeeze", k + 1), &s.squeeze);
            layer(&mut out, format!("stage{}/expand", k + 1), &s.expand);
        }
        for (i, (_, h)) in self.heads.iter().enumerate() {
            layer(&mut out, format!("head{i}/mid"), &h.mid);
            layer(&mut out, format!("head{i}/out"), &h.out);
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut ArrayD<f64>)> {
        let mut out = Vec::new();
        out.push(("stem/weight".to_string(), &mut self.stem.weight));
        out.push(("stem/bias".to_string(), &mut self.stem.bias));
        for (k, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("stage{}/down/weight", k + 1), &mut s.down.weight));
            out.push((format!("stage{}/down/bias", k + 1), &mut s.down.bias));
            out.push((format!("stage{}/squeeze/weight", k + 1), &mut s.squeeze.weight));
            out.push((format!("stage{}/squeeze/bias", k + 1), &mut s.squeeze.bias));
            out.push((format!("stage{}/expand/weight", k + 1), &mut s.expand.weight));
            out.push((format!("stage{}/expand/bias", k + 1), &mut s.expand.bias));
        }
        for (i, (_, h)) in self.heads.iter_mut().enumerate() {
            out.push((format!("head{i}/mid/weight"), &mut h.mid.weight));
            out.push((format!("head{i}/mid/bias"), &mut h.mid.bias));
            out.push((format!("head{i}/out/weight"), &mut h.out.weight));
            out.push((format!("head{i}/out/bias"), &mut h.out.bias));
        }
        out
    }

    pub fn validate_input_dims(&self, height: usize, width: usize) -> Result<()> {
        let m = self.config.max_scale();
        if height % m != 0 || width % m != 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "input dimensions {height}x{width} must be positive multiples of {m}"
            )));
        }
        Ok(())
    }

    /// Records the backbone and heads on `tape`; returns one raw grid node
    /// per configured scale.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: Var,
        prefix: &str,
        bindings: Option<&mut ParamBindings>,
    ) -> Vec<Var> {
        let trainable = bindings.is_some();
        let mut binder = bindings;
        let record = |b: &mut Option<&mut ParamBindings>, name: String, w: Var, bias: Var| {
            if let Some(b) = b {
                b.bind(format!("{prefix}{name}/weight"), w);
                b.bind(format!("{prefix}{name}/bias"), bias);
            }
        };

        let (y, w, b) = self.stem.forward(tape, input, trainable);
        record(&mut binder, "stem".into(), w, b);
        let mut y = tape.leaky_relu(y, LEAKY_SLOPE);

        let mut taps: Vec<Var> = Vec::new();
        for (k, stage) in self.stages.iter().enumerate() {
            let (d, w, b) = stage.down.forward(tape, y, trainable);
            record(&mut binder, format!("stage{}/down", k + 1), w, b);
            let d = tape.leaky_relu(d, LEAKY_SLOPE);
            let (s, w, b) = stage.squeeze.forward(tape, d, trainable);
            record(&mut binder, format!("stage{}/squeeze", k + 1), w, b);
            let s = tape.leaky_relu(s, LEAKY_SLOPE);
            let (e, w, b) = stage.expand.forward(tape, s, trainable);
            record(&mut binder, format!("stage{}/expand", k + 1), w, b);
            let e = tape.leaky_relu(e, LEAKY_SLOPE);
            y = tape.add(d, e);
            taps.push(y);
        }

        let mut raws = Vec::new();
        for (i, (k, head)) in self.heads.iter().enumerate() {
            let tap = taps[*k - 1];
            let (m, w, b) = head.mid.forward(tape, tap, trainable);
            record(&mut binder, format!("head{i}/mid"), w, b);
            let m = tape.leaky_relu(m, LEAKY_SLOPE);
            let (o, w, b) = head.out.forward(tape, m, trainable);
            record(&mut binder, format!("head{i}/out"), w, b);
            raws.push(o);
        }
        raws
    }

    /// Plain inference: raw multi-scale grids.
    pub fn forward(&self, image: &ImageTensor) -> Result<Vec<Array3<f64>>> {
        self.validate_input_dims(image.height(), image.width())?;
        let mut tape = Tape::new();
        let x = tape.constant(image.data().clone().into_dyn());
        let raws = self.forward_on_tape(&mut tape, x, "", None);
        Ok(raws
            .into_iter()
            .map(|v| {
                tape.value(v)
                    .clone()
                    .into_dimensionality::<ndarray::Ix3>()
                    .expect("raw grid is 3-d")
            })
            .collect())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decodes raw grids to thresholded detections in normalized coordinates.
/// Boxes are clipped to the unit square; degenerate boxes are dropped.
pub fn decode_predictions(raw: &[Array3<f64>], config: &DetectorConfig) -> Vec<Detection> {
    let mut dets = Vec::new();
    for (si, grid) in raw.iter().enumerate() {
        let anchors = &config.anchors[si];
        let ac = config.anchor_channels();
        let (gh, gw) = (grid.shape()[1], grid.shape()[2]);
        for a in 0..anchors.len() {
            let base = a * ac;
            for gy in 0..gh {
                for gx in 0..gw {
                    let obj = sigmoid(grid[[base + 4, gy, gx]]);
                    let (mut best_c, mut best_p) = (0usize, f64::NEG_INFINITY);
                    for c in 0..config.num_classes {
                        let p = sigmoid(grid[[base + 5 + c, gy, gx]]);
                        if p > best_p {
                            best_p = p;
                            best_c = c;
                        }
                    }
                    let confidence = obj * best_p;
                    if confidence < config.conf_threshold {
                        continue;
                    }
                    let cx = (gx as f64 + sigmoid(grid[[base, gy, gx]])) / gw as f64;
                    let cy = (gy as f64 + sigmoid(grid[[base + 1, gy, gx]])) / gh as f64;
                    let sw = 2.0 * sigmoid(grid[[base + 2, gy, gx]]);
                    let sh = 2.0 * sigmoid(grid[[base + 3, gy, gx]]);
                    let w = anchors[a].0 * sw * sw;
                    let h = anchors[a].1 * sh * sh;
                    let Some(b) = clip_box(best_c, cx, cy, w, h) else {
                        continue;
                    };
                    dets.push(Detection {
                        box_: b,
                        confidence,
                        class_id: best_c,
                        class_score: best_p,
                    });
                }
            }
        }
    }
    dets
}

/// Clips a center-form box to the unit square; `None` when degenerate.
fn clip_box(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Option<BoundingBox> {
    if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
        return None;
    }
    let x1 = (cx - w / 2.0).clamp(0.0, 1.0);
    let y1 = (cy - h / 2.0).clamp(0.0, 1.0);
    let x2 = (cx + w / 2.0).clamp(0.0, 1.0);
    let y2 = (cy + h / 2.0).clamp(0.0, 1.0);
    let (w, h) = (x2 - x1, y2 - y1);
    if w <= 0.0 || h <= 0.0 {
        return None;
    }
    BoundingBox::new(class_id, (x1 + x2) / 2.0, (y1 + y2) / 2.0, w, h).ok()
}

/// Per-class greedy non-maximum suppression; output sorted by confidence
/// descending. Equal-confidence ties keep input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .expect("finite confidences")
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .filter(|k| k.class_id == d.class_id)
            .any(|k| k.box_.rect_iou(&d.box_) > iou_threshold);
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}

/// One ground-truth box assigned to its best (scale, anchor, cell) slot.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub scale_idx: usize,
    pub anchor_idx: usize,
    pub gy: usize,
    pub gx: usize,
    pub gt: BoundingBox,
    /// Raw-space regression targets reproducing `gt` through the decode
    /// equations.
    pub t_xywh: [f64; 4],
}

/// Grid-shaped training targets for one image.
#[derive(Debug, Clone)]
pub struct EncodedTargets {
    pub assignments: Vec<Assignment>,
    /// Per scale: `[A, gh, gw]` objectness target (1 at assigned slots).
    pub obj_target: Vec<Array3<f64>>,
    /// Per scale: `[A, gh, gw]`, true where the slot is excluded from the
    /// objectness loss (overlaps a ground truth without owning it).
    pub ignore: Vec<Array3<bool>>,
}

fn wh_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    inter / union
}

const OFFSET_EPS: f64 = 1e-7;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Assigns each ground truth to its best anchor by width-height IoU and
/// builds grid targets. Image dimensions fix the per-scale grid sizes.
pub fn encode_targets(
    boxes: &[BoundingBox],
    config: &DetectorConfig,
    height: usize,
    width: usize,
) -> Result<EncodedTargets> {
    let mut obj_target = Vec::new();
    let mut ignore = Vec::new();
    let mut grids = Vec::new();
    for (si, &scale) in config.grid_scales.iter().enumerate() {
        if height % scale != 0 || width % scale != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} not divisible by grid scale {scale}"
            )));
        }
        let (gh, gw) = (height / scale, width / scale);
        grids.push((gh, gw));
        obj_target.push(Array3::zeros((config.anchors[si].len(), gh, gw)));
        ignore.push(Array3::from_elem((config.anchors[si].len(), gh, gw), false));
    }

    // Largest gt/anchor side ratio the bounded size decode can represent,
    // with margin. Anchors outside it are ineligible unless nothing fits.
    const MAX_SIZE_RATIO: f64 = 3.9;

    let mut assignments: Vec<Assignment> = Vec::new();
    for gt in boxes {
        gt.validate()?;
        let mut best: Option<(usize, usize)> = None;
        let mut best_fallback = (0usize, 0usize);
        let (mut best_iou, mut best_fallback_iou) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (si, anchors) in config.anchors.iter().enumerate() {
            for (ai, &anchor) in anchors.iter().enumerate() {
                let iou = wh_iou((gt.w, gt.h), anchor);
                if iou > best_fallback_iou {
                    best_fallback_iou = iou;
                    best_fallback = (si, ai);
                }
                let representable =
                    gt.w / anchor.0 <= MAX_SIZE_RATIO && gt.h / anchor.1 <= MAX_SIZE_RATIO;
                if representable && iou > best_iou {
                    best_iou = iou;
                    best = Some((si, ai));
                }
            }
        }
        let (si, ai) = best.unwrap_or(best_fallback);
        let (gh, gw) = grids[si];
        let gx = ((gt.cx * gw as f64) as usize).min(gw - 1);
        let gy = ((gt.cy * gh as f64) as usize).min(gh - 1);
        if obj_target[si][[ai, gy, gx]] > 0.0 {
            // Slot already owned by an earlier box; the extra box is skipped.
            continue;
        }
        obj_target[si][[ai, gy, gx]] = 1.0;
        let dx = (gt.cx * gw as f64 - gx as f64).clamp(OFFSET_EPS, 1.0 - OFFSET_EPS);
        let dy = (gt.cy * gh as f64 - gy as f64).clamp(OFFSET_EPS, 1.0 - OFFSET_EPS);
        let anchor = config.anchors[si][ai];
        // Invert w = anchor * (2*sigmoid(t))^2; representable ratios are
        // (0, 4) times the anchor, which best-IoU assignment stays inside.
        let size_t = |ratio: f64| logit((ratio.sqrt() / 2.0).clamp(OFFSET_EPS, 1.0 - OFFSET_EPS));
        assignments.push(Assignment {
            scale_idx: si,
            anchor_idx: ai,
            gy,
            gx,
            gt: *gt,
            t_xywh: [
                logit(dx),
                logit(dy),
                size_t(gt.w / anchor.0),
                size_t(gt.h / anchor.1),
            ],
        });
    }

    // Ignore mask: unassigned slots whose cell-centered anchor box overlaps
    // some ground truth strongly are left out of the objectness loss.
    for (si, anchors) in config.anchors.iter().enumerate() {
        let (gh, gw) = grids[si];
        for (ai, &anchor) in anchors.iter().enumerate() {
            for gy in 0..gh {
                for gx in 0..gw {
                    if obj_target[si][[ai, gy, gx]] > 0.0 {
                        continue;
                    }
                    let cand = BoundingBox {
                        class_id: 0,
                        cx: (gx as f64 + 0.5) / gw as f64,
                        cy: (gy as f64 + 0.5) / gh as f64,
                        w: anchor.0.min(1.0),
                        h: anchor.1.min(1.0),
                    };
                    if boxes
                        .iter()
                        .any(|gt| gt.rect_iou(&cand) > config.ignore_iou_threshold)
                    {
                        ignore[si][[ai, gy, gx]] = true;
                    }
                }
            }
        }
    }

    Ok(EncodedTargets {
        assignments,
        obj_target,
        ignore,
    })
}

/// Decodes one assignment's raw targets back to a box (round-trip check and
/// single-cell reasoning helper).
pub fn decode_cell(
    t_xywh: [f64; 4],
    scale_idx: usize,
    anchor_idx: usize,
    gy: usize,
    gx: usize,
    config: &DetectorConfig,
    grid_h: usize,
    grid_w: usize,
) -> (f64, f64, f64, f64) {
    let anchor = config.anchors[scale_idx][anchor_idx];
    let cx = (gx as f64 + sigmoid(t_xywh[0])) / grid_w as f64;
    let cy = (gy as f64 + sigmoid(t_xywh[1])) / grid_h as f64;
    let sw = 2.0 * sigmoid(t_xywh[2]);
    let sh = 2.0 * sigmoid(t_xywh[3]);
    (cx, cy, anchor.0 * sw * sw, anchor.1 * sh * sh)
}
