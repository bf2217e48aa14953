//! Detection-quality metrics: IoU, average precision, mAP@.5 and
//! mAP@.5:.95, latency measurement, and the ablation runner.

pub mod ablation;
pub mod latency;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::imagery::BoundingBox;

/// The ten COCO-style IoU thresholds 0.50, 0.55, ..., 0.95, built from
/// integer hundredths so fixture IoU values compare exactly.
pub fn standard_thresholds() -> Vec<f64> {
    (50..=95).step_by(5).map(|p| p as f64 / 100.0).collect()
}

/// Intersection-over-union of two axis-aligned boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    for (name, bx) in [("first", a), ("second", b)] {
        bx.validate()
            .map_err(|e| Error::InvalidArgument(format!("{name} box degenerate: {e}")))?;
    }
    Ok(a.rect_iou(b))
}

/// Precision-recall integration convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApIntegration {
    /// Area under the interpolated precision envelope at every recall step.
    Exact,
    /// COCO-style 101-point interpolation (the reporting default).
    Coco101,
}

/// Detections and ground truths of one image.
#[derive(Debug, Clone, Default)]
pub struct EvalPair {
    pub dets: Vec<Detection>,
    pub gts: Vec<BoundingBox>,
}

/// Greedy confidence-ordered matching for one class on one image: each
/// detection may claim the highest-IoU unmatched ground truth at or above
/// the threshold. Returns (confidence, is_true_positive) labels.
fn match_image(
    dets: &[&Detection],
    gts: &[&BoundingBox],
    iou_threshold: f64,
) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // Stable sort: equal confidences keep detection input order.
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .expect("finite confidence")
    });
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for &di in &order {
        let d = dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let v = d.box_.rect_iou(gt);
            if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                out.push((d.confidence, true));
            }
            None => out.push((d.confidence, false)),
        }
    }
    out
}

/// AP from pooled (confidence, tp) labels and the ground-truth count.
fn ap_from_labels(labels: &mut [(f64, bool)], total_gts: usize, integration: ApIntegration) -> f64 {
    if total_gts == 0 {
        return 0.0;
    }
    // Stable by pooled order so cross-image ties stay deterministic.
    labels.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite confidence"));
    let mut precisions = Vec::with_capacity(labels.len());
    let mut recalls = Vec::with_capacity(labels.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, is_tp) in labels.iter() {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / total_gts as f64);
    }
    // Precision envelope: max precision at this rank or any later one.
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }

    match integration {
        ApIntegration::Exact => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for i in 0..envelope.len() {
                if recalls[i] > prev_recall {
                    ap += (recalls[i] - prev_recall) * envelope[i];
                    prev_recall = recalls[i];
                }
            }
            ap
        }
        ApIntegration::Coco101 => {
            let mut ap = 0.0;
            for k in 0..=100 {
                let r = k as f64 / 100.0;
                // First rank reaching recall >= r; envelope there is the max
                // precision at recall >= r.
                let p = recalls
                    .iter()
                    .position(|&rc| rc >= r - 1e-12)
                    .map(|i| envelope[i])
                    .unwrap_or(0.0);
                ap += p;
            }
            ap / 101.0
        }
    }
}

/// Average precision of one pooled detection set against one ground-truth
/// set at a single IoU threshold (single-image form).
pub fn average_precision(
    dets: &[Detection],
    gts: &[BoundingBox],
    iou_threshold: f64,
    integration: ApIntegration,
) -> f64 {
    let drefs: Vec<&Detection> = dets.iter().collect();
    let grefs: Vec<&BoundingBox> = gts.iter().collect();
    let mut labels = match_image(&drefs, &grefs, iou_threshold);
    ap_from_labels(&mut labels, gts.len(), integration)
}

/// Latency statistics attached to a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub input_size: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub runs: usize,
}

/// Per-class AP over a threshold sweep plus the summary means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// `per_class_ap[class][threshold index]`; `None` marks classes with no
    /// ground truths, which are excluded from the means.
    pub per_class_ap: Vec<Vec<Option<f64>>>,
    pub map_50: f64,
    pub map_50_95: f64,
    pub images: usize,
    pub gts: usize,
    pub dets: usize,
    pub integration: ApIntegration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<Vec<LatencySummary>>,
}

impl EvalReport {
    /// Plain-text table: classes as rows, AP@.5 / AP@.5:.95 columns.
    pub fn render_table(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>10} {:>12}\n",
            "class", "AP@.5", "AP@.5:.95"
        ));
        for (ci, row) in self.per_class_ap.iter().enumerate() {
            let name = class_names
                .get(ci)
                .map(|s| s.as_str())
                .unwrap_or("(unnamed)");
            match row[0] {
                Some(_) => {
                    let ap50 = row[0].unwrap_or(0.0);
                    let mean: f64 = row.iter().map(|v| v.unwrap_or(0.0)).sum::<f64>()
                        / row.len() as f64;
                    out.push_str(&format!("{name:<16} {ap50:>10.4} {mean:>12.4}\n"));
                }
                None => out.push_str(&format!("{name:<16} {:>10} {:>12}\n", "-", "-")),
            }
        }
        out.push_str(&format!(
            "{:<16} {:>10.4} {:>12.4}\n",
            "mAP", self.map_50, self.map_50_95
        ));
        out
    }
}

/// Evaluates per-image detections against ground truths over the standard
/// threshold sweep.
pub fn map_range(
    pairs: &[EvalPair],
    num_classes: usize,
    integration: ApIntegration,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    let thresholds = standard_thresholds();
    let mut per_class_ap: Vec<Vec<Option<f64>>> = Vec::with_capacity(num_classes);

    for class in 0..num_classes {
        let total_gts: usize = pairs
            .iter()
            .map(|p| p.gts.iter().filter(|g| g.class_id == class).count())
            .sum();
        if total_gts == 0 {
            per_class_ap.push(vec![None; thresholds.len()]);
            continue;
        }
        let mut row = Vec::with_capacity(thresholds.len());
        for &thr in &thresholds {
            let mut labels: Vec<(f64, bool)> = Vec::new();
            for pair in pairs {
                let dets: Vec<&Detection> =
                    pair.dets.iter().filter(|d| d.class_id == class).collect();
                let gts: Vec<&BoundingBox> =
                    pair.gts.iter().filter(|g| g.class_id == class).collect();
                labels.extend(match_image(&dets, &gts, thr));
            }
            row.push(Some(ap_from_labels(&mut labels, total_gts, integration)));
        }
        per_class_ap.push(row);
    }

    let class_means = |ti: usize| -> Option<f64> {
        let vals: Vec<f64> = per_class_ap.iter().filter_map(|row| row[ti]).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let map_50 = class_means(0)
        .ok_or_else(|| Error::Eval("no class has ground truths in the test set".into()))?;
    let mut sweep_sum = 0.0;
    for ti in 0..thresholds.len() {
        sweep_sum += class_means(ti).unwrap_or(0.0);
    }
    let map_50_95 = sweep_sum / thresholds.len() as f64;

    Ok(EvalReport {
        thresholds,
        per_class_ap,
        map_50,
        map_50_95,
        images: pairs.len(),
        gts: pairs.iter().map(|p| p.gts.len()).sum(),
        dets: pairs.iter().map(|p| p.dets.len()).sum(),
        integration,
        latency: None,
    })
}

/// Line-delimited detection records: `image_id class_id confidence cx cy w h`.
pub fn detections_to_records(per_image: &[(String, Vec<Detection>)]) -> String {
    let mut out = String::new();
    for (image_id, dets) in per_image {
        for d in dets {
            out.push_str(&format!(
                "{image_id} {} {} {} {} {} {}\n",
                d.class_id, d.confidence, d.box_.cx, d.box_.cy, d.box_.w, d.box_.h
            ));
        }
    }
    out
}

/// Parses the record format produced by [`detections_to_records`].
pub fn records_to_detections(text: &str) -> Result<HashMap<String, Vec<Detection>>> {
    let mut out: HashMap<String, Vec<Detection>> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                path: "<records>".into(),
                line: lineno + 1,
                message: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                path: "<records>".into(),
                line: lineno + 1,
                message: format!("bad number '{s}'"),
            })
        };
        let class_id: usize = fields[1].parse().map_err(|_| Error::Parse {
            path: "<records>".into(),
            line: lineno + 1,
            message: format!("bad class id '{}'", fields[1]),
        })?;
        let confidence = parse_f(fields[2])?;
        let b = BoundingBox::new(
            class_id,
            parse_f(fields[3])?,
            parse_f(fields[4])?,
            parse_f(fields[5])?,
            parse_f(fields[6])?,
        )?;
        out.entry(fields[0].to_string()).or_default().push(Detection {
            box_: b,
            confidence,
            class_id,
            class_score: confidence,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(class_id, cx, cy, w, h).unwrap()
    }

    fn det(b: BoundingBox, conf: f64) -> Detection {
        Detection {
            class_id: b.class_id,
            class_score: conf,
            box_: b,
            confidence: conf,
        }
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bx(0, 0.3, 0.3, 0.2, 0.2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = bx(0, 0.8, 0.8, 0.1, 0.1);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_one_seventh_fixture() {
        // Corners (0,0,2,2) vs (1,1,3,3), scaled into the unit square.
        let a = bx(0, 0.25, 0.25, 0.5, 0.5);
        let b = bx(0, 0.5, 0.5, 0.5, 0.5);
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 7.0);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = bx(0, 0.3, 0.3, 0.2, 0.2);
        let bad = BoundingBox {
            class_id: 0,
            cx: 0.5,
            cy: 0.5,
            w: 0.0,
            h: 0.2,
        };
        assert!(iou(&a, &bad).is_err());
    }

    #[test]
    fn iou_symmetric() {
        let a = bx(0, 0.4, 0.4, 0.3, 0.25);
        let b = bx(0, 0.5, 0.45, 0.2, 0.35);
        assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
    }

    #[test]
    fn ap_perfect_single_detection() {
        let g = bx(0, 0.5, 0.5, 0.2, 0.2);
        let d = det(g, 0.9);
        for integ in [ApIntegration::Exact, ApIntegration::Coco101] {
            assert_eq!(average_precision(&[d.clone()], &[g], 0.5, integ), 1.0);
        }
    }

    #[test]
    fn ap_zero_detections() {
        let g = bx(0, 0.5, 0.5, 0.2, 0.2);
        assert_eq!(
            average_precision(&[], &[g], 0.5, ApIntegration::Exact),
            0.0
        );
    }

    #[test]
    fn ap_three_detection_fixture_exact() {
        // 2 ground truths; detections ranked 1 and 3 are true matches.
        // Exact integration: 0.5 * 1.0 + 0.5 * (2/3) = 5/6.
        let g1 = bx(0, 0.2, 0.2, 0.2, 0.2);
        let g2 = bx(0, 0.7, 0.7, 0.2, 0.2);
        let dets = vec![
            det(g1, 0.9),
            det(bx(0, 0.45, 0.45, 0.05, 0.05), 0.8), // false positive
            det(g2, 0.7),
        ];
        let ap = average_precision(&dets, &[g1, g2], 0.5, ApIntegration::Exact);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "got {ap}");
        // 101-point integration counts 51 points at precision 1 and 50 at 2/3.
        let ap101 = average_precision(&dets, &[g1, g2], 0.5, ApIntegration::Coco101);
        let expected = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap101 - expected).abs() < 1e-12, "got {ap101}");
    }

    #[test]
    fn map_range_perfect_detector() {
        let pairs: Vec<EvalPair> = (0..3)
            .map(|i| {
                let g = bx(i % 2, 0.3 + 0.1 * i as f64, 0.4, 0.2, 0.2);
                EvalPair {
                    dets: vec![det(g, 0.9)],
                    gts: vec![g],
                }
            })
            .collect();
        let report = map_range(&pairs, 2, ApIntegration::Coco101).unwrap();
        assert_eq!(report.map_50, 1.0);
        assert_eq!(report.map_50_95, 1.0);
    }

    #[test]
    fn map_range_exact_iou_06_counts_three_thresholds() {
        // Detection at IoU exactly 0.6 with its GT: counted at thresholds
        // {0.5, 0.55, 0.6}, missed above -> mAP@.5:.95 = 3/10 of mAP@.5.
        let g = bx(0, 0.5, 0.5, 0.25, 0.25);
        // Shift by w/4 = 0.0625 in x: IoU = (3/16)/(5/16) = 0.6 exactly.
        let d = det(bx(0, 0.5 + 0.0625, 0.5, 0.25, 0.25), 0.9);
        assert_eq!(d.box_.rect_iou(&g), 0.6);
        let pairs = vec![EvalPair {
            dets: vec![d],
            gts: vec![g],
        }];
        let report = map_range(&pairs, 1, ApIntegration::Exact).unwrap();
        assert_eq!(report.map_50, 1.0);
        assert!((report.map_50_95 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn map_range_single_class_single_image_is_average_precision() {
        let g = bx(0, 0.4, 0.4, 0.3, 0.3);
        let dets = vec![det(g, 0.8), det(bx(0, 0.8, 0.8, 0.1, 0.1), 0.6)];
        let pairs = vec![EvalPair {
            dets: dets.clone(),
            gts: vec![g],
        }];
        let report = map_range(&pairs, 1, ApIntegration::Coco101).unwrap();
        let ap = average_precision(&dets, &[g], 0.5, ApIntegration::Coco101);
        assert_eq!(report.map_50, ap);
    }

    #[test]
    fn map_range_excludes_absent_classes() {
        let g = bx(0, 0.4, 0.4, 0.3, 0.3);
        let pairs = vec![EvalPair {
            dets: vec![det(g, 0.9)],
            gts: vec![g],
        }];
        // Class 1 has no ground truths: excluded, so mAP stays 1.0.
        let report = map_range(&pairs, 2, ApIntegration::Coco101).unwrap();
        assert_eq!(report.map_50, 1.0);
        assert!(report.per_class_ap[1].iter().all(|v| v.is_none()));
    }

    #[test]
    fn map_range_rejects_empty() {
        assert!(map_range(&[], 1, ApIntegration::Exact).is_err());
    }

    #[test]
    fn detection_records_round_trip() {
        let d1 = det(bx(0, 0.25, 0.25, 0.5, 0.5), 0.875);
        let d2 = det(bx(1, 0.5, 0.5, 0.25, 0.125), 0.5);
        let text = detections_to_records(&[
            ("img_a".to_string(), vec![d1.clone()]),
            ("img_b".to_string(), vec![d2.clone()]),
        ]);
        let parsed = records_to_detections(&text).unwrap();
        assert_eq!(parsed["img_a"][0].box_, d1.box_);
        assert_eq!(parsed["img_b"][0].box_, d2.box_);
        assert_eq!(parsed["img_b"][0].confidence, 0.5);
    }
}
