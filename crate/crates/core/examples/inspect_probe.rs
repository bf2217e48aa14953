//! Scratch probe: print decoded detections vs ground truth after a short
//! baseline training run.

use sdnia_core::detector::DetectorConfig;
use sdnia_core::model::ModelSpec;
use sdnia_core::synthdata::{generate_shapes, ShapesConfig};
use sdnia_core::training::{
    materialize, split_train_val, train, ExtractorKind, NoopLogger, TrainConfig,
};

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let pool = generate_shapes(
        "p",
        sdnia_core::imagery::Split::Train,
        200,
        &ShapesConfig::default(),
        41,
        None,
    )
    .unwrap();
    let test = generate_shapes(
        "t",
        sdnia_core::imagery::Split::Test,
        8,
        &ShapesConfig::default(),
        1041,
        None,
    )
    .unwrap();
    let config = TrainConfig {
        learning_rate: 0.01,
        max_epochs: epochs,
        patience: epochs,
        seed: 5,
        use_nia: false,
        use_stylized_data: false,
        extractor: ExtractorKind::Identity,
        loss_weights: sdnia_core::losses::LossWeights {
            p1: 0.5,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let (tr, va) = split_train_val(&pool, 0.1, 5);
    let spec = ModelSpec {
        nia: None,
        detector: DetectorConfig::tiny(3),
        class_names: sdnia_core::synthdata::SHAPE_CLASSES
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    let outcome = train(&config, spec, &tr, &va, &mut NoopLogger, None).unwrap();
    println!("best val {:.3}", outcome.state.best_val_metric);

    let (examples, _) = materialize(&test).unwrap();
    for ex in examples.iter().take(4) {
        println!("image {}:", ex.image_id);
        for gt in &ex.boxes {
            println!(
                "  GT  class {} at ({:.3},{:.3}) size ({:.3},{:.3})",
                gt.class_id, gt.cx, gt.cy, gt.w, gt.h
            );
        }
        let (_, dets) = outcome.model.infer_with_threshold(&ex.pixels, 0.05).unwrap();
        for d in dets.iter().take(6) {
            let best_iou = ex
                .boxes
                .iter()
                .map(|g| g.rect_iou(&d.box_))
                .fold(0.0f64, f64::max);
            println!(
                "  det class {} conf {:.3} at ({:.3},{:.3}) size ({:.3},{:.3}) best-IoU {:.3}",
                d.class_id, d.confidence, d.box_.cx, d.box_.cy, d.box_.w, d.box_.h, best_iou
            );
        }
    }
}
