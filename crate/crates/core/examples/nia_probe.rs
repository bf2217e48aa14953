//! Scratch probe: does the restoration pipeline pull the adapter toward
//! identity at a given p4, and can the detector learn behind it?

use sdnia_core::detector::DetectorConfig;
use sdnia_core::evaluation::ablation::evaluate_model;
use sdnia_core::losses::{l1_loss, LossWeights};
use sdnia_core::model::ModelSpec;
use sdnia_core::nia::NiaConfig;
use sdnia_core::synthdata::{generate_shapes, ShapesConfig};
use sdnia_core::training::{
    materialize, train, EpochRecord, ExtractorKind, TrainConfig, TrainLogger,
};

struct P;

impl TrainLogger for P {
    fn on_epoch(&mut self, r: &EpochRecord) {
        if r.epoch % 5 == 0 {
            println!(
                "epoch {:>3} box {:.3} obj {:.4} cls {:.4} l1 {:.4} ms {:.4} res {:.3} val {:.4}",
                r.epoch,
                r.losses.l_box,
                r.losses.l_obj,
                r.losses.l_cls,
                r.losses.l_l1,
                r.losses.l_msssim,
                r.losses.l_res,
                r.val_map50
            );
        }
    }
}

fn main() {
    let p4: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(40);
    let pool = generate_shapes(
        "p",
        sdnia_core::imagery::Split::Train,
        64,
        &ShapesConfig::default(),
        21,
        None,
    )
    .unwrap();
    let config = TrainConfig {
        learning_rate: 0.01,
        max_epochs: epochs,
        patience: epochs,
        seed: 4,
        extractor: ExtractorKind::Identity,
        loss_weights: LossWeights {
            p4,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let spec = ModelSpec {
        nia: Some(NiaConfig::tiny()),
        detector: DetectorConfig::tiny(3),
        class_names: sdnia_core::synthdata::SHAPE_CLASSES
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    let outcome = train(&config, spec, &pool, &pool, &mut P, None).unwrap();
    let (examples, _) = materialize(&pool).unwrap();
    let mut d_in = 0.0;
    for ex in examples.iter().take(8) {
        let adapted = outcome.model.adapt(&ex.pixels).unwrap();
        d_in += l1_loss(&adapted, &ex.pixels).unwrap();
    }
    println!("mean l1(adapted, input) over 8 clean images: {:.4}", d_in / 8.0);
    let report = evaluate_model(&outcome.model, &pool, 0.05).unwrap();
    println!("train-set mAP@.5 {:.4}", report.map_50);
}
