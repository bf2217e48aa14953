//! Scratch probe: times the toy experiment end to end.
//! args: [variant] [epochs] [lr] [p1] [p4] [width]

use std::time::Instant;

use sdnia_core::detector::DetectorConfig;
use sdnia_core::evaluation::ablation::evaluate_model;
use sdnia_core::imagery::{degrade_manifest, mix_datasets, DegradeMode};
use sdnia_core::losses::LossWeights;
use sdnia_core::model::ModelSpec;
use sdnia_core::nia::NiaConfig;
use sdnia_core::stylizer::{batch_stylize, ProceduralBackend};
use sdnia_core::synthdata::{generate_shapes, style_image, ShapesConfig, StyleKind};
use sdnia_core::training::{
    split_train_val, train, EpochRecord, ExtractorKind, TrainConfig, TrainLogger,
};

struct EpochPrinter;

impl TrainLogger for EpochPrinter {
    fn on_epoch(&mut self, r: &EpochRecord) {
        if r.epoch % 4 == 0 {
            println!(
                "  epoch {:>3} box {:.3} obj {:.4} cls {:.4} res {:.3} val mAP@.5 {:.4}",
                r.epoch, r.losses.l_box, r.losses.l_obj, r.losses.l_cls, r.losses.l_res,
                r.val_map50
            );
        }
    }
}

fn main() {
    let variant = std::env::args().nth(1).unwrap_or_else(|| "sdnia".into());
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(40);
    let lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let p1: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let p4: f64 = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let width: usize = std::env::args().nth(6).and_then(|s| s.parse().ok()).unwrap_or(4);
    let (use_sd, use_nia) = match variant.as_str() {
        "baseline" => (false, false),
        "sd" => (true, false),
        "nia" => (false, true),
        _ => (true, true),
    };

    let t0 = Instant::now();
    let shapes_cfg = ShapesConfig::default();
    let train_pool = generate_shapes(
        "shapes_train",
        sdnia_core::imagery::Split::Train,
        200,
        &shapes_cfg,
        41,
        None,
    )
    .unwrap();
    let test_clean = generate_shapes(
        "shapes_test",
        sdnia_core::imagery::Split::Test,
        50,
        &shapes_cfg,
        1041,
        None,
    )
    .unwrap();
    let test_degraded = degrade_manifest(&test_clean, DegradeMode::Mixed, None, 7).unwrap();

    let mut detector = DetectorConfig::tiny(3);
    detector.width = width;
    let class_names: Vec<String> = sdnia_core::synthdata::SHAPE_CLASSES
        .iter()
        .map(|s| s.to_string())
        .collect();
    let base = TrainConfig {
        learning_rate: lr,
        max_epochs: epochs,
        patience: epochs,
        seed: 5,
        extractor: ExtractorKind::Identity,
        use_nia,
        use_stylized_data: use_sd,
        loss_weights: LossWeights {
            p1,
            p4,
            ..Default::default()
        },
        ..TrainConfig::default()
    };

    let mixed;
    let pool = if use_sd {
        let backend = ProceduralBackend::new();
        let styles = vec![
            style_image(StyleKind::Fog, 32, 1),
            style_image(StyleKind::Night, 32, 2),
        ];
        let (stylized, fails) =
            batch_stylize(&backend, &train_pool, &styles, &[1.0], None).unwrap();
        assert!(fails.is_empty());
        mixed = mix_datasets(&train_pool, &stylized).unwrap();
        &mixed
    } else {
        &train_pool
    };

    let t1 = Instant::now();
    let (tr, va) = split_train_val(pool, 0.1, base.seed);
    let spec = ModelSpec {
        nia: use_nia.then(NiaConfig::tiny),
        detector,
        class_names,
    };
    let outcome = train(&base, spec, &tr, &va, &mut EpochPrinter, None).unwrap();
    println!(
        "{variant} trained in {:.1?} ({} epochs, best val {:.3} at epoch {})",
        t1.elapsed(),
        outcome.final_epoch,
        outcome.state.best_val_metric,
        outcome.state.best_epoch,
    );

    for (label, manifest) in [("clean", &test_clean), ("degraded", &test_degraded)] {
        let r = evaluate_model(&outcome.model, manifest, 0.05).unwrap();
        println!("{label:>9}: mAP@.5 {:.4}  mAP@.5:.95 {:.4}", r.map_50, r.map_50_95);
    }
    println!("total {:.1?}", t0.elapsed());
}
