//! Shared fixtures for the pipeline benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdnia_core::detector::{Detection, DetectorConfig, DetectorModel};
use sdnia_core::imagery::BoundingBox;
use sdnia_core::nia::{NiaConfig, NiaNetwork};
use sdnia_core::ImageTensor;

pub fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xBE7C)
}

pub fn image(size: usize) -> ImageTensor {
    ImageTensor::random(size, size, &mut rng())
}

pub fn nia_standard() -> NiaNetwork {
    NiaNetwork::new(NiaConfig::standard(), &mut rng())
}

pub fn nia_tiny() -> NiaNetwork {
    NiaNetwork::new(NiaConfig::tiny(), &mut rng())
}

pub fn detector_tiny(num_classes: usize) -> DetectorModel {
    DetectorModel::new(DetectorConfig::tiny(num_classes), &mut rng()).expect("valid config")
}

/// A jittered cloud of detections around a grid of ground truths.
pub fn detection_fixture(n: usize) -> (Vec<Detection>, Vec<BoundingBox>) {
    use rand::Rng;
    let mut r = rng();
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for i in 0..n {
        let cx = 0.1 + 0.8 * ((i % 5) as f64 / 5.0) + 0.05;
        let cy = 0.1 + 0.8 * ((i / 5 % 5) as f64 / 5.0) + 0.05;
        let gt = BoundingBox::new(i % 3, cx, cy, 0.12, 0.12).expect("valid box");
        gts.push(gt);
        for _ in 0..3 {
            let jitter = r.random_range(-0.03..0.03);
            let b = BoundingBox::new(
                gt.class_id,
                (cx + jitter).clamp(0.06, 0.94),
                (cy - jitter).clamp(0.06, 0.94),
                0.12,
                0.12,
            )
            .expect("valid box");
            dets.push(Detection {
                box_: b,
                confidence: r.random_range(0.05..1.0),
                class_id: gt.class_id,
                class_score: 0.9,
            });
        }
    }
    (dets, gts)
}
