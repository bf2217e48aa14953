//! Scratch probe: optimize only the box term on one example and watch the
//! raw values move.

use sdnia_core::detector::{decode_predictions, DetectorConfig, DetectorModel};
use sdnia_core::imagery::BoundingBox;
use sdnia_core::losses::LossWeights;
use sdnia_core::model::{ModelSpec, SdniaModel};
use sdnia_core::nn::SgdOptimizer;
use sdnia_core::training::{joint_step, TrainExample};
use sdnia_core::ImageTensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = ModelSpec {
        nia: None,
        detector: DetectorConfig::tiny(1),
        class_names: vec!["thing".into()],
    };
    let mut model = SdniaModel::new(spec, &mut rng).unwrap();
    let gt = BoundingBox::new(0, 0.55, 0.45, 0.3, 0.3).unwrap();
    let ex = TrainExample {
        image_id: "x".into(),
        pixels: ImageTensor::random(64, 64, &mut rng),
        reference: None,
        boxes: vec![gt],
        origin: sdnia_core::imagery::Origin::Original,
    };
    let weights = LossWeights {
        p1: 1.0,
        p2: 0.0,
        p3: 0.0,
        p4: 0.0,
        ..Default::default()
    };
    let mut opt = SgdOptimizer::new(0.01, 0.9);
    let enc = sdnia_core::detector::encode_targets(&[gt], &model.spec.detector, 64, 64).unwrap();
    let a = &enc.assignments[0];
    println!(
        "assignment: scale {} anchor {} cell ({},{}) targets {:?}",
        a.scale_idx, a.anchor_idx, a.gy, a.gx, a.t_xywh
    );
    for step in 0..600 {
        let bd = joint_step(
            &mut model,
            &mut opt,
            &[&ex],
            &weights,
            &sdnia_core::losses::IdentityExtractor,
            true,
        )
        .unwrap();
        if step % 60 == 0 {
            let raw = model.detector.forward(&ex.pixels).unwrap();
            let cfg = &model.spec.detector;
            let ac = cfg.anchor_channels();
            let g = &raw[a.scale_idx];
            let base = a.anchor_idx * ac;
            let vals: Vec<f64> = (0..4).map(|j| g[[base + j, a.gy, a.gx]]).collect();
            let mut dcfg = cfg.clone();
            dcfg.conf_threshold = 0.0;
            let best = decode_predictions(&raw, &dcfg)
                .into_iter()
                .max_by(|x, y| x.confidence.partial_cmp(&y.confidence).unwrap())
                .unwrap();
            println!(
                "step {step:>3} l_box {:.4} raw {vals:?} best box ({:.3},{:.3},{:.3},{:.3})",
                bd.l_box, best.box_.cx, best.box_.cy, best.box_.w, best.box_.h
            );
        }
    }
    println!("target {:?}", gt);
}
