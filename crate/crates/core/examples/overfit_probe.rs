//! Scratch probe: overfit a handful of shapes images and print loss curves.

use sdnia_core::detector::DetectorConfig;
use sdnia_core::evaluation::ablation::evaluate_model;
use sdnia_core::model::ModelSpec;
use sdnia_core::synthdata::{generate_shapes, ShapesConfig};
use sdnia_core::training::{
    train, EpochRecord, ExtractorKind, TrainConfig, TrainLogger,
};

struct PrintLogger;

impl TrainLogger for PrintLogger {
    fn on_epoch(&mut self, r: &EpochRecord) {
        if r.epoch % 10 == 0 || r.epoch <= 5 {
            println!(
                "epoch {:>3}  box {:.4} obj {:.4} cls {:.4} total {:.4}  val mAP@.5 {:.4}",
                r.epoch, r.losses.l_box, r.losses.l_obj, r.losses.l_cls, r.losses.l_total, r.val_map50
            );
        }
    }
}

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(120);
    let lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let ignore: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let width: usize = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(4);

    let pool = generate_shapes(
        "ov",
        sdnia_core::imagery::Split::Train,
        n,
        &ShapesConfig::default(),
        13,
        None,
    )
    .unwrap();
    // Train and validate on the same tiny pool: pure overfit check.
    let config = TrainConfig {
        learning_rate: lr,
        max_epochs: epochs,
        patience: epochs,
        seed: 3,
        use_nia: false,
        use_stylized_data: false,
        extractor: ExtractorKind::Identity,
        ..TrainConfig::default()
    };
    let mut detector = DetectorConfig::tiny(3);
    detector.ignore_iou_threshold = ignore;
    detector.width = width;
    let spec = ModelSpec {
        nia: None,
        detector,
        class_names: sdnia_core::synthdata::SHAPE_CLASSES
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    let outcome = train(&config, spec, &pool, &pool, &mut PrintLogger, None).unwrap();
    let report = evaluate_model(&outcome.model, &pool, 0.05).unwrap();
    println!(
        "final: mAP@.5 {:.4}  mAP@.5:.95 {:.4} ({} dets / {} gts)",
        report.map_50, report.map_50_95, report.dets, report.gts
    );
}
