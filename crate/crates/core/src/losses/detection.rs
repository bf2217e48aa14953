//! Detection loss on raw grid predictions: a complete-IoU regression term
//! for assigned boxes, binary cross-entropy objectness over all non-ignored
//! grid slots, and binary cross-entropy class terms at assigned slots.
//! Each term is a mean over its own population, combined across scales.

use ndarray::{Array1, Array3};

use crate::autodiff::{Tape, Var};
use crate::detector::{DetectorConfig, EncodedTargets};

const EPS: f64 = 1e-9;

pub struct DetectionLossVars {
    pub l_box: Var,
    pub l_obj: Var,
    pub l_cls: Var,
}

struct SumCount {
    sum: Option<Var>,
    count: usize,
}

impl SumCount {
    fn new() -> Self {
        Self { sum: None, count: 0 }
    }

    fn push(&mut self, tape: &mut Tape, sum: Var, count: usize) {
        self.sum = Some(match self.sum {
            Some(s) => tape.add(s, sum),
            None => sum,
        });
        self.count += count;
    }

    fn mean(self, tape: &mut Tape) -> Var {
        match self.sum {
            Some(s) if self.count > 0 => tape.mul_scalar(s, 1.0 / self.count as f64),
            _ => tape.scalar(0.0),
        }
    }
}

/// Records box / objectness / class losses for one image's raw grids.
///
/// With no assigned targets the box and class terms are zero and the
/// objectness term drives every slot toward background.
pub fn detection_loss_on_tape(
    tape: &mut Tape,
    raw: &[Var],
    targets: &EncodedTargets,
    config: &DetectorConfig,
) -> DetectionLossVars {
    let ac = config.anchor_channels();
    let mut obj = SumCount::new();
    let mut boxes = SumCount::new();
    let mut cls = SumCount::new();

    for (si, &grid_var) in raw.iter().enumerate() {
        let shape = tape.value(grid_var).shape().to_vec();
        let (gh, gw) = (shape[1], shape[2]);
        let n_anchors = config.anchors[si].len();
        debug_assert_eq!(shape[0], n_anchors * ac);
        let flat = |ch: usize, gy: usize, gx: usize| (ch * gh + gy) * gw + gx;

        // Objectness over every non-ignored slot.
        let mut obj_idx = Vec::new();
        let mut obj_t = Vec::new();
        for a in 0..n_anchors {
            for gy in 0..gh {
                for gx in 0..gw {
                    if targets.ignore[si][[a, gy, gx]] {
                        continue;
                    }
                    obj_idx.push(flat(a * ac + 4, gy, gx));
                    obj_t.push(targets.obj_target[si][[a, gy, gx]]);
                }
            }
        }
        if !obj_idx.is_empty() {
            let n = obj_idx.len();
            let logits = tape.gather(grid_var, obj_idx);
            let bce = tape.bce_with_logits(logits, Array1::from_vec(obj_t).into_dyn());
            let s = tape.sum(bce);
            obj.push(tape, s, n);
        }

        let assigned: Vec<_> = targets
            .assignments
            .iter()
            .filter(|a| a.scale_idx == si)
            .collect();
        if assigned.is_empty() {
            continue;
        }
        let n = assigned.len();

        let gather_coord = |tape: &mut Tape, offset: usize| {
            let idx: Vec<usize> = assigned
                .iter()
                .map(|a| flat(a.anchor_idx * ac + offset, a.gy, a.gx))
                .collect();
            tape.gather(grid_var, idx)
        };
        let tx = gather_coord(tape, 0);
        let ty = gather_coord(tape, 1);
        let tw = gather_coord(tape, 2);
        let th = gather_coord(tape, 3);

        let constv = |tape: &mut Tape, f: &dyn Fn(&crate::detector::Assignment) -> f64| {
            let v: Vec<f64> = assigned.iter().map(|a| f(a)).collect();
            tape.vector(v)
        };
        let cell_x = constv(tape, &|a| a.gx as f64);
        let cell_y = constv(tape, &|a| a.gy as f64);
        let anchor_w = constv(tape, &|a| config.anchors[si][a.anchor_idx].0);
        let anchor_h = constv(tape, &|a| config.anchors[si][a.anchor_idx].1);
        let gt_cx = constv(tape, &|a| a.gt.cx);
        let gt_cy = constv(tape, &|a| a.gt.cy);
        let gt_w = constv(tape, &|a| a.gt.w);
        let gt_h = constv(tape, &|a| a.gt.h);

        // Decode predictions in normalized coordinates (bounded size form:
        // w = anchor * (2*sigmoid(tw))^2).
        let sx = tape.sigmoid(tx);
        let sy = tape.sigmoid(ty);
        let cxs = tape.add(sx, cell_x);
        let px = tape.mul_scalar(cxs, 1.0 / gw as f64);
        let cys = tape.add(sy, cell_y);
        let py = tape.mul_scalar(cys, 1.0 / gh as f64);
        let sw = tape.sigmoid(tw);
        let sw2 = tape.mul_scalar(sw, 2.0);
        let sww = tape.square(sw2);
        let pw = tape.mul(sww, anchor_w);
        let sh = tape.sigmoid(th);
        let sh2 = tape.mul_scalar(sh, 2.0);
        let shh = tape.square(sh2);
        let ph = tape.mul(shh, anchor_h);

        let ciou = ciou_on_tape(tape, (px, py, pw, ph), (gt_cx, gt_cy, gt_w, gt_h));
        let neg = tape.neg(ciou);
        let one_minus = tape.add_scalar(neg, 1.0);
        let s = tape.sum(one_minus);
        boxes.push(tape, s, n);

        // Class logits against one-hot targets.
        let mut cls_idx = Vec::with_capacity(n * config.num_classes);
        let mut cls_t = Vec::with_capacity(n * config.num_classes);
        for a in &assigned {
            for c in 0..config.num_classes {
                cls_idx.push(flat(a.anchor_idx * ac + 5 + c, a.gy, a.gx));
                cls_t.push(if c == a.gt.class_id { 1.0 } else { 0.0 });
            }
        }
        let count = cls_idx.len();
        let logits = tape.gather(grid_var, cls_idx);
        let bce = tape.bce_with_logits(logits, Array1::from_vec(cls_t).into_dyn());
        let s = tape.sum(bce);
        cls.push(tape, s, count);
    }

    DetectionLossVars {
        l_box: boxes.mean(tape),
        l_obj: obj.mean(tape),
        l_cls: cls.mean(tape),
    }
}

/// Complete IoU of predicted vs ground-truth center-form boxes (1-d vectors):
/// IoU minus the normalized center distance minus the aspect-ratio penalty.
fn ciou_on_tape(
    tape: &mut Tape,
    (px, py, pw, ph): (Var, Var, Var, Var),
    (gx, gy, gw, gh): (Var, Var, Var, Var),
) -> Var {
    let half = |tape: &mut Tape, v: Var| tape.mul_scalar(v, 0.5);

    let pw2 = half(tape, pw);
    let ph2 = half(tape, ph);
    let gw2 = half(tape, gw);
    let gh2 = half(tape, gh);
    let px1 = tape.sub(px, pw2);
    let px2 = tape.add(px, pw2);
    let py1 = tape.sub(py, ph2);
    let py2 = tape.add(py, ph2);
    let gx1 = tape.sub(gx, gw2);
    let gx2 = tape.add(gx, gw2);
    let gy1 = tape.sub(gy, gh2);
    let gy2 = tape.add(gy, gh2);

    let ix2 = tape.min(px2, gx2);
    let ix1 = tape.max(px1, gx1);
    let iw_raw = tape.sub(ix2, ix1);
    let iw = tape.relu(iw_raw);
    let iy2 = tape.min(py2, gy2);
    let iy1 = tape.max(py1, gy1);
    let ih_raw = tape.sub(iy2, iy1);
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih);

    let area_p = tape.mul(pw, ph);
    let area_g = tape.mul(gw, gh);
    let areas = tape.add(area_p, area_g);
    let union = tape.sub(areas, inter);
    let union_safe = tape.add_scalar(union, EPS);
    let iou = tape.div(inter, union_safe);

    // Enclosing-box diagonal.
    let ex1 = tape.min(px1, gx1);
    let ex2 = tape.max(px2, gx2);
    let ey1 = tape.min(py1, gy1);
    let ey2 = tape.max(py2, gy2);
    let cw = tape.sub(ex2, ex1);
    let ch = tape.sub(ey2, ey1);
    let cw2 = tape.square(cw);
    let ch2 = tape.square(ch);
    let diag = tape.add(cw2, ch2);
    let diag_safe = tape.add_scalar(diag, EPS);

    let dx = tape.sub(px, gx);
    let dy = tape.sub(py, gy);
    let dx2 = tape.square(dx);
    let dy2 = tape.square(dy);
    let rho2 = tape.add(dx2, dy2);
    let center_term = tape.div(rho2, diag_safe);

    // Aspect-ratio consistency: v = 4/pi^2 * (atan(gw/gh) - atan(pw/ph))^2.
    let g_ratio = tape.div(gw, gh);
    let p_ratio = tape.div(pw, ph);
    let ga = tape.atan(g_ratio);
    let pa = tape.atan(p_ratio);
    let da = tape.sub(ga, pa);
    let da2 = tape.square(da);
    let v = tape.mul_scalar(da2, 4.0 / (std::f64::consts::PI * std::f64::consts::PI));

    let neg_iou = tape.neg(iou);
    let one_minus_iou = tape.add_scalar(neg_iou, 1.0);
    let denom = tape.add(one_minus_iou, v);
    let denom_safe = tape.add_scalar(denom, EPS);
    let alpha = tape.div(v, denom_safe);
    let av = tape.mul(alpha, v);

    let i1 = tape.sub(iou, center_term);
    tape.sub(i1, av)
}

/// Box / objectness / class losses on plain arrays (no gradients).
pub fn detection_loss_values(
    raw: &[Array3<f64>],
    targets: &EncodedTargets,
    config: &DetectorConfig,
) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = raw
        .iter()
        .map(|g| tape.constant(g.clone().into_dyn()))
        .collect();
    let out = detection_loss_on_tape(&mut tape, &vars, targets, config);
    (
        tape.scalar_value(out.l_box),
        tape.scalar_value(out.l_obj),
        tape.scalar_value(out.l_cls),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::encode_targets;
    use crate::imagery::BoundingBox;

    fn toy_config() -> DetectorConfig {
        DetectorConfig::tiny(3)
    }

    fn zero_grids(config: &DetectorConfig, h: usize, w: usize) -> Vec<Array3<f64>> {
        config
            .grid_scales
            .iter()
            .enumerate()
            .map(|(si, &s)| {
                Array3::zeros((
                    config.anchors[si].len() * config.anchor_channels(),
                    h / s,
                    w / s,
                ))
            })
            .collect()
    }

    /// Raw grids that reproduce the targets exactly, with saturated
    /// objectness and class logits.
    fn perfect_grids(
        config: &DetectorConfig,
        targets: &EncodedTargets,
        h: usize,
        w: usize,
    ) -> Vec<Array3<f64>> {
        let ac = config.anchor_channels();
        let mut grids = zero_grids(config, h, w);
        for g in grids.iter_mut() {
            let channels = g.shape()[0];
            for idx in 0..channels {
                // Background default: strongly negative objectness and class.
                if idx % ac >= 4 {
                    g.index_axis_mut(ndarray::Axis(0), idx).fill(-20.0);
                }
            }
        }
        for a in &targets.assignments {
            let g = &mut grids[a.scale_idx];
            let base = a.anchor_idx * ac;
            for (j, v) in a.t_xywh.iter().enumerate() {
                g[[base + j, a.gy, a.gx]] = *v;
            }
            g[[base + 4, a.gy, a.gx]] = 20.0;
            for c in 0..config.num_classes {
                g[[base + 5 + c, a.gy, a.gx]] = if c == a.gt.class_id { 20.0 } else { -20.0 };
            }
        }
        grids
    }

    #[test]
    fn perfect_predictions_drive_losses_to_zero() {
        let cfg = toy_config();
        let boxes = vec![
            BoundingBox::new(0, 0.3, 0.4, 0.2, 0.25).unwrap(),
            BoundingBox::new(2, 0.7, 0.6, 0.5, 0.5).unwrap(),
        ];
        let targets = encode_targets(&boxes, &cfg, 64, 64).unwrap();
        let raw = perfect_grids(&cfg, &targets, 64, 64);
        let (b, o, c) = detection_loss_values(&raw, &targets, &cfg);
        // The epsilon guard inside IoU keeps the box term a hair above zero.
        assert!(b < 1e-6, "box loss {b}");
        assert!(o < 1e-7, "objectness loss {o}");
        assert!(c < 1e-7, "class loss {c}");
    }

    #[test]
    fn no_targets_zeroes_box_and_cls() {
        let cfg = toy_config();
        let targets = encode_targets(&[], &cfg, 64, 64).unwrap();
        let raw = zero_grids(&cfg, 64, 64);
        let (b, o, c) = detection_loss_values(&raw, &targets, &cfg);
        assert_eq!(b, 0.0);
        assert_eq!(c, 0.0);
        // Zero logits on all-background targets: BCE = ln 2 per slot.
        assert!((o - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn unit_weight_combination() {
        let w = crate::losses::LossWeights::default();
        let l_det = w.detection(1.0, 1.0, 1.0);
        assert!((l_det - 1.55).abs() < 1e-12);
    }

    #[test]
    fn detection_loss_gradient_matches_fd() {
        let cfg = toy_config();
        let boxes = vec![BoundingBox::new(1, 0.45, 0.55, 0.3, 0.2).unwrap()];
        let targets = encode_targets(&boxes, &cfg, 32, 32).unwrap();
        let mut raw = zero_grids(&cfg, 32, 32);
        // Nudge away from zero so no min/max tie-breaking sits on a kink.
        for (i, g) in raw.iter_mut().enumerate() {
            g.mapv_inplace(|_| 0.1 + 0.01 * i as f64);
        }

        let eval = |raw: &[Array3<f64>]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = raw
                .iter()
                .map(|g| t.constant(g.clone().into_dyn()))
                .collect();
            let out = detection_loss_on_tape(&mut t, &vars, &targets, &cfg);
            let w = crate::losses::LossWeights::default();
            let b = t.mul_scalar(out.l_box, w.p1);
            let o = t.mul_scalar(out.l_obj, w.p2);
            let c = t.mul_scalar(out.l_cls, w.p3);
            let bo = t.add(b, o);
            let total = t.add(bo, c);
            t.scalar_value(total)
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = raw
            .iter()
            .map(|g| tape.leaf(g.clone().into_dyn(), true))
            .collect();
        let out = detection_loss_on_tape(&mut tape, &vars, &targets, &cfg);
        let w = crate::losses::LossWeights::default();
        let b = tape.mul_scalar(out.l_box, w.p1);
        let o = tape.mul_scalar(out.l_obj, w.p2);
        let c = tape.mul_scalar(out.l_cls, w.p3);
        let bo = tape.add(b, o);
        let total = tape.add(bo, c);
        let grads = tape.backward(total).unwrap();

        let h = 1e-6;
        let a = &targets.assignments[0];
        let ac = cfg.anchor_channels();
        let gh = 32 / cfg.grid_scales[a.scale_idx];
        let mut probes = vec![
            ((a.anchor_idx * ac) * gh * gh + a.gy * gh + a.gx, a.scale_idx), // tx
            ((a.anchor_idx * ac + 2) * gh * gh + a.gy * gh + a.gx, a.scale_idx), // tw
            ((a.anchor_idx * ac + 4) * gh * gh + a.gy * gh + a.gx, a.scale_idx), // obj
            ((a.anchor_idx * ac + 6) * gh * gh + a.gy * gh + a.gx, a.scale_idx), // some class
        ];
        probes.push((0, 1 - a.scale_idx)); // background slot on the other scale

        for (flat, si) in probes {
            let an = grads.get(vars[si]).unwrap().as_slice().unwrap()[flat];
            let mut plus = raw.clone();
            plus[si].as_slice_mut().unwrap()[flat] += h;
            let mut minus = raw.clone();
            minus[si].as_slice_mut().unwrap()[flat] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = an.abs().max(fd.abs()).max(1e-9);
            assert!(
                ((an - fd) / denom).abs() < 1e-4,
                "scale {si} flat {flat}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn worse_box_means_higher_loss() {
        let cfg = toy_config();
        let boxes = vec![BoundingBox::new(0, 0.5, 0.5, 0.3, 0.3).unwrap()];
        let targets = encode_targets(&boxes, &cfg, 64, 64).unwrap();
        let good = perfect_grids(&cfg, &targets, 64, 64);
        let mut bad = good.clone();
        let a = &targets.assignments[0];
        let ac = cfg.anchor_channels();
        // Shift the predicted center hard to one side.
        bad[a.scale_idx][[a.anchor_idx * ac, a.gy, a.gx]] = 4.0;
        let (b_good, _, _) = detection_loss_values(&good, &targets, &cfg);
        let (b_bad, _, _) = detection_loss_values(&bad, &targets, &cfg);
        assert!(b_bad > b_good + 1e-3);
    }
}
