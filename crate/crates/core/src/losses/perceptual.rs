//! Feature-space (perceptual) losses: a content term on feature maps and a
//! style term on channel Gram matrices.
//!
//! Extractors are pluggable. The identity extractor treats pixels as the
//! single feature map (so the content term is a mean squared pixel error);
//! the random-conv extractor runs a fixed, seeded four-block conv stack and
//! exposes content features at its third block and style Grams at all four —
//! no pretrained weights involved. The null extractor disables the terms,
//! degrading the restoration loss to MS-SSIM + l1, and warns loudly once.

use std::sync::Once;

use ndarray::{Array2, Array3, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::image_tensor::ImageTensor;
use crate::nn::Conv2dLayer;

/// Provides feature maps of an image at a configured set of layers.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// Feature maps, shallowest first. An empty result disables the
    /// perceptual terms.
    fn extract(&self, tape: &mut Tape, image: Var) -> Vec<Var>;

    /// Index into `extract`'s result used for the content term.
    fn content_layer(&self) -> usize;

    /// Indices used for the style (Gram) term.
    fn style_layers(&self) -> Vec<usize>;
}

/// Features = pixels.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn name(&self) -> &str {
        "identity"
    }

    fn extract(&self, _tape: &mut Tape, image: Var) -> Vec<Var> {
        vec![image]
    }

    fn content_layer(&self) -> usize {
        0
    }

    fn style_layers(&self) -> Vec<usize> {
        vec![0]
    }
}

/// Disables the perceptual terms (the MS-SSIM + l1 ablation).
pub struct NullExtractor;

static NULL_WARNING: Once = Once::new();

impl FeatureExtractor for NullExtractor {
    fn name(&self) -> &str {
        "null"
    }

    fn extract(&self, _tape: &mut Tape, _image: Var) -> Vec<Var> {
        NULL_WARNING.call_once(|| {
            eprintln!(
                "warning: perceptual feature extractor disabled; \
                 restoration loss degrades to MS-SSIM + l1"
            );
        });
        Vec::new()
    }

    fn content_layer(&self) -> usize {
        0
    }

    fn style_layers(&self) -> Vec<usize> {
        Vec::new()
    }
}

/// Four conv blocks (3->8->16->32->32, 3x3, ReLU, 2x2 average pooling
/// between blocks) with fixed seeded weights.
pub struct RandomConvExtractor {
    layers: [Conv2dLayer; 4],
}

impl RandomConvExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            layers: [
                Conv2dLayer::new(3, 8, 3, 1, &mut rng),
                Conv2dLayer::new(8, 16, 3, 1, &mut rng),
                Conv2dLayer::new(16, 32, 3, 1, &mut rng),
                Conv2dLayer::new(32, 32, 3, 1, &mut rng),
            ],
        }
    }
}

impl Default for RandomConvExtractor {
    fn default() -> Self {
        Self::new(0x5EED_FEA7)
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn name(&self) -> &str {
        "random-conv"
    }

    fn extract(&self, tape: &mut Tape, image: Var) -> Vec<Var> {
        let mut maps = Vec::with_capacity(4);
        let mut x = image;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, _, _) = layer.forward(tape, x, false);
            let y = tape.relu(y);
            maps.push(y);
            if i + 1 < self.layers.len() {
                let shape = tape.value(y).shape().to_vec();
                // Stop pooling once the map is a single row/column.
                if shape[1] >= 2 && shape[2] >= 2 {
                    x = tape.avg_pool2(y);
                } else {
                    x = y;
                }
            }
        }
        maps
    }

    fn content_layer(&self) -> usize {
        2
    }

    fn style_layers(&self) -> Vec<usize> {
        vec![0, 1, 2, 3]
    }
}

/// Channel Gram matrix `F F^T / (C*H*W)` of a feature map.
pub fn gram_matrix(features: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let f = features
        .view()
        .into_shape_with_order((c, h * w))
        .expect("gram reshape");
    f.dot(&f.t()) / (c * h * w) as f64
}

/// Records content and style losses between two `[3, H, W]` nodes.
/// Both are 0 when the inputs are identical; (0, 0) when the extractor
/// yields no features.
pub fn vgg_perceptual_on_tape(
    tape: &mut Tape,
    a: Var,
    b: Var,
    extractor: &dyn FeatureExtractor,
) -> (Var, Var) {
    let feats_a = extractor.extract(tape, a);
    let feats_b = extractor.extract(tape, b);
    if feats_a.is_empty() || feats_b.is_empty() {
        let zero = tape.scalar(0.0);
        return (zero, zero);
    }

    let cl = extractor.content_layer();
    let diff = tape.sub(feats_a[cl], feats_b[cl]);
    let sq = tape.square(diff);
    let content = tape.mean(sq);

    let style_layers = extractor.style_layers();
    let mut style: Option<Var> = None;
    for &l in &style_layers {
        let ga = tape.gram(feats_a[l]);
        let gb = tape.gram(feats_b[l]);
        let d = tape.sub(ga, gb);
        let sq = tape.square(d);
        let m = tape.mean(sq);
        style = Some(match style {
            Some(s) => tape.add(s, m),
            None => m,
        });
    }
    let style = match style {
        Some(s) if style_layers.len() > 1 => {
            tape.mul_scalar(s, 1.0 / style_layers.len() as f64)
        }
        Some(s) => s,
        None => tape.scalar(0.0),
    };
    (content, style)
}

/// Content and style losses on plain images.
pub fn vgg_perceptual(
    a: &ImageTensor,
    b: &ImageTensor,
    extractor: &dyn FeatureExtractor,
) -> (f64, f64) {
    let mut tape = Tape::new();
    let av = tape.constant(a.data().clone().into_dyn());
    let bv = tape.constant(b.data().clone().into_dyn());
    let (c, s) = vgg_perceptual_on_tape(&mut tape, av, bv, extractor);
    (tape.scalar_value(c), tape.scalar_value(s))
}

#[allow(dead_code)]
fn gram_of_dyn(features: &ArrayD<f64>) -> Array2<f64> {
    gram_matrix(
        &features
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("3-d features")
            .to_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn gram_zero_features() {
        let g = gram_matrix(&Array3::zeros((4, 3, 3)));
        assert!(g.iter().all(|v| *v == 0.0));
        assert_eq!(g.shape(), &[4, 4]);
    }

    #[test]
    fn gram_constant_single_channel() {
        // 1 channel, 4 pixels of value 2: G = (2*2*4) / (1*4) = 4.
        let f = Array3::from_elem((1, 2, 2), 2.0);
        let g = gram_matrix(&f);
        assert_eq!(g.shape(), &[1, 1]);
        assert!((g[[0, 0]] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn gram_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = Array3::from_shape_fn((5, 4, 6), |_| rng.random_range(-1.0..1.0));
        let g = gram_matrix(&f);
        for i in 0..5 {
            for j in 0..5 {
                assert!((g[[i, j]] - g[[j, i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_inputs_give_zero_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = ImageTensor::random(12, 12, &mut rng);
        for extractor in [
            &IdentityExtractor as &dyn FeatureExtractor,
            &RandomConvExtractor::default(),
        ] {
            let (c, s) = vgg_perceptual(&img, &img, extractor);
            assert_eq!((c, s), (0.0, 0.0), "{}", extractor.name());
        }
    }

    #[test]
    fn identity_extractor_content_is_pixel_mse() {
        let a = ImageTensor::zeros(8, 8);
        let b = ImageTensor::constant(8, 8, 1.0).unwrap();
        let (c, _) = vgg_perceptual(&a, &b, &IdentityExtractor);
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn style_ignores_spatial_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = ImageTensor::random(6, 6, &mut rng);
        let b = ImageTensor::random(6, 6, &mut rng);
        // Transpose the pixel grid of b: Grams are position-free, so the
        // style distance to `a` cannot change under the identity extractor.
        let bt = ImageTensor::from_chw(
            Array3::from_shape_fn((3, 6, 6), |(c, y, x)| b.get(c, x, y)),
        )
        .unwrap();
        let (_, s1) = vgg_perceptual(&a, &b, &IdentityExtractor);
        let (_, s2) = vgg_perceptual(&a, &bt, &IdentityExtractor);
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn null_extractor_disables_terms() {
        let a = ImageTensor::zeros(8, 8);
        let b = ImageTensor::constant(8, 8, 0.7).unwrap();
        let (c, s) = vgg_perceptual(&a, &b, &NullExtractor);
        assert_eq!((c, s), (0.0, 0.0));
    }

    #[test]
    fn random_conv_extractor_separates_different_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = ImageTensor::random(16, 16, &mut rng);
        let b = ImageTensor::random(16, 16, &mut rng);
        let (c, s) = vgg_perceptual(&a, &b, &RandomConvExtractor::default());
        assert!(c > 0.0);
        assert!(s > 0.0);
    }

    #[test]
    fn perceptual_gradient_reaches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = ImageTensor::random(12, 12, &mut rng);
        let b = ImageTensor::random(12, 12, &mut rng);
        let mut tape = Tape::new();
        let av = tape.leaf(a.data().clone().into_dyn(), true);
        let bv = tape.constant(b.data().clone().into_dyn());
        let (c, s) = vgg_perceptual_on_tape(&mut tape, av, bv, &RandomConvExtractor::default());
        let sum = tape.add(c, s);
        let grads = tape.backward(sum).unwrap();
        let g = grads.get(av).unwrap();
        assert!(g.iter().any(|v| v.abs() > 0.0));
    }
}
