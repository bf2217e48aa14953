//! Multi-scale structural similarity on the luminance plane.
//!
//! Per scale, an 11x11 Gaussian window (sigma 1.5, valid padding) produces
//! local mean / variance / covariance maps; the contrast-structure factor of
//! each scale enters the product through its standard exponent weight and
//! the luminance factor of the coarsest scale multiplies in linearly, so
//! the value collapses toward 0 when mean brightness differs grossly.
//! Scales are linked by 2x2 average pooling. Stability constants are
//! `C1 = (0.01*L)^2`, `C2 = (0.03*L)^2` with `L = 1`.

use ndarray::{ArrayD, IxDyn};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image_tensor::{ImageTensor, LUMA_WEIGHTS};

pub const MS_SSIM_WINDOW: usize = 11;
pub const MS_SSIM_SIGMA: f64 = 1.5;
pub const MS_SSIM_MAX_LEVELS: usize = 5;
/// Standard per-scale exponent weights.
pub const MS_SSIM_SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Smallest image side that supports `levels` scales.
pub fn min_side_for_levels(levels: usize) -> usize {
    (1usize << (levels - 1)) * MS_SSIM_WINDOW
}

/// Largest level count (capped at 5) an image supports.
pub fn max_levels_for(height: usize, width: usize) -> usize {
    let side = height.min(width);
    (1..=MS_SSIM_MAX_LEVELS)
        .take_while(|&l| min_side_for_levels(l) <= side)
        .last()
        .unwrap_or(0)
}

fn gaussian_window() -> ArrayD<f64> {
    let mut w = ArrayD::zeros(IxDyn(&[1, 1, MS_SSIM_WINDOW, MS_SSIM_WINDOW]));
    let center = (MS_SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..MS_SSIM_WINDOW {
        for x in 0..MS_SSIM_WINDOW {
            let dy = y as f64 - center;
            let dx = x as f64 - center;
            let v = (-(dy * dy + dx * dx) / (2.0 * MS_SSIM_SIGMA * MS_SSIM_SIGMA)).exp();
            w[IxDyn(&[0, 0, y, x])] = v;
            sum += v;
        }
    }
    w.mapv_inplace(|v| v / sum);
    w
}

fn luminance_on_tape(tape: &mut Tape, image: Var) -> Var {
    let mut w = ArrayD::zeros(IxDyn(&[1, 3, 1, 1]));
    for (c, coeff) in LUMA_WEIGHTS.iter().enumerate() {
        w[IxDyn(&[0, c, 0, 0])] = *coeff;
    }
    let wv = tape.constant(w);
    tape.conv2d(image, wv, None, 1, 0)
}

/// Luminance and contrast-structure factors of one scale (scalar nodes).
fn ssim_factors(tape: &mut Tape, a: Var, b: Var, window: Var) -> (Var, Var) {
    let mu1 = tape.conv2d(a, window, None, 1, 0);
    let mu2 = tape.conv2d(b, window, None, 1, 0);
    let mu1_sq = tape.square(mu1);
    let mu2_sq = tape.square(mu2);
    let mu1_mu2 = tape.mul(mu1, mu2);

    let a_sq = tape.square(a);
    let b_sq = tape.square(b);
    let ab = tape.mul(a, b);
    let e_a_sq = tape.conv2d(a_sq, window, None, 1, 0);
    let e_b_sq = tape.conv2d(b_sq, window, None, 1, 0);
    let e_ab = tape.conv2d(ab, window, None, 1, 0);
    let sigma1_sq = tape.sub(e_a_sq, mu1_sq);
    let sigma2_sq = tape.sub(e_b_sq, mu2_sq);
    let sigma12 = tape.sub(e_ab, mu1_mu2);

    // l = (2*mu1*mu2 + C1) / (mu1^2 + mu2^2 + C1)
    let two_mu = tape.mul_scalar(mu1_mu2, 2.0);
    let l_num = tape.add_scalar(two_mu, C1);
    let mu_sum = tape.add(mu1_sq, mu2_sq);
    let l_den = tape.add_scalar(mu_sum, C1);
    let l_map = tape.div(l_num, l_den);

    // cs = (2*sigma12 + C2) / (sigma1^2 + sigma2^2 + C2)
    let two_s12 = tape.mul_scalar(sigma12, 2.0);
    let cs_num = tape.add_scalar(two_s12, C2);
    let s_sum = tape.add(sigma1_sq, sigma2_sq);
    let cs_den = tape.add_scalar(s_sum, C2);
    let cs_map = tape.div(cs_num, cs_den);

    let l_mean = tape.mean(l_map);
    // Rare slightly negative cs values are floored before the exponent.
    let cs_pos = tape.relu(cs_map);
    let cs_mean = tape.mean(cs_pos);
    (l_mean, cs_mean)
}

/// Records MS-SSIM between two `[3, H, W]` nodes; result is a scalar node in
/// `[0, 1]`. `levels: None` picks the largest supported count (up to 5);
/// an explicit request the image cannot support is an error naming the
/// minimum size.
pub fn ms_ssim_on_tape(tape: &mut Tape, a: Var, b: Var, levels: Option<usize>) -> Result<Var> {
    let sa = tape.value(a).shape().to_vec();
    let sb = tape.value(b).shape().to_vec();
    if sa != sb {
        return Err(Error::ShapeMismatch(format!(
            "ms_ssim inputs differ: {sa:?} vs {sb:?}"
        )));
    }
    let (h, w) = (sa[1], sa[2]);
    let supported = max_levels_for(h, w);
    let levels = match levels {
        Some(l) => {
            if l == 0 || l > MS_SSIM_MAX_LEVELS {
                return Err(Error::InvalidArgument(format!(
                    "ms_ssim levels must be in 1..={MS_SSIM_MAX_LEVELS}, got {l}"
                )));
            }
            if l > supported {
                return Err(Error::InvalidArgument(format!(
                    "image {h}x{w} too small for {l} ms_ssim levels; needs min side {}",
                    min_side_for_levels(l)
                )));
            }
            l
        }
        None => {
            if supported == 0 {
                return Err(Error::InvalidArgument(format!(
                    "image {h}x{w} too small for ms_ssim; needs min side {MS_SSIM_WINDOW}"
                )));
            }
            supported
        }
    };

    let weight_sum: f64 = MS_SSIM_SCALE_WEIGHTS[..levels].iter().sum();
    let window = tape.constant(gaussian_window());
    let mut la = luminance_on_tape(tape, a);
    let mut lb = luminance_on_tape(tape, b);

    let mut result: Option<Var> = None;
    for level in 0..levels {
        let (l_mean, cs_mean) = ssim_factors(tape, la, lb, window);
        let w_norm = MS_SSIM_SCALE_WEIGHTS[level] / weight_sum;
        let cs_safe = tape.clamp_min(cs_mean, 1e-12);
        let cs_pow = tape.pow_scalar(cs_safe, w_norm);
        result = Some(match result {
            Some(r) => tape.mul(r, cs_pow),
            None => cs_pow,
        });
        if level + 1 == levels {
            let r = result.expect("at least one factor");
            result = Some(tape.mul(r, l_mean));
        } else {
            la = tape.avg_pool2(la);
            lb = tape.avg_pool2(lb);
        }
    }
    Ok(result.expect("levels >= 1"))
}

/// MS-SSIM of two images; the loss contribution is `1 - ms_ssim`.
pub fn ms_ssim(a: &ImageTensor, b: &ImageTensor, levels: Option<usize>) -> Result<f64> {
    let mut tape = Tape::new();
    let av = tape.constant(a.data().clone().into_dyn());
    let bv = tape.constant(b.data().clone().into_dyn());
    let v = ms_ssim_on_tape(&mut tape, av, bv, levels)?;
    Ok(tape.scalar_value(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn level_support_thresholds() {
        assert_eq!(max_levels_for(11, 11), 1);
        assert_eq!(max_levels_for(10, 64), 0);
        assert_eq!(max_levels_for(22, 22), 2);
        assert_eq!(max_levels_for(32, 32), 2);
        assert_eq!(max_levels_for(44, 44), 3);
        assert_eq!(max_levels_for(176, 176), 5);
        assert_eq!(max_levels_for(544, 544), 5);
    }

    #[test]
    fn identity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let img = ImageTensor::random(24, 30, &mut rng);
            let v = ms_ssim(&img, &img, None).unwrap();
            assert!((v - 1.0).abs() < 1e-9, "got {v}");
        }
    }

    #[test]
    fn symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = ImageTensor::random(24, 24, &mut rng);
        let b = ImageTensor::random(24, 24, &mut rng);
        let ab = ms_ssim(&a, &b, None).unwrap();
        let ba = ms_ssim(&b, &a, None).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn constant_black_vs_white_collapses() {
        // mu1 = 0, mu2 = 1, sigmas = 0: l = C1 / (1 + C1) ~ 1e-4, cs = 1.
        let a = ImageTensor::zeros(24, 24);
        let b = ImageTensor::constant(24, 24, 1.0).unwrap();
        let v = ms_ssim(&a, &b, None).unwrap();
        assert!(v < 0.01, "luminance term should collapse, got {v}");
        let expected = C1 / (1.0 + C1);
        assert!((v - expected).abs() < 1e-9);
    }

    #[test]
    fn bounded_by_one_and_distinct_below() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..8 {
            let a = ImageTensor::random(22, 22, &mut rng);
            let b = ImageTensor::random(22, 22, &mut rng);
            let v = ms_ssim(&a, &b, None).unwrap();
            assert!(v <= 1.0 + 1e-12);
            assert!(v < 1.0 - 1e-9, "independent noise should score below 1");
        }
    }

    #[test]
    fn explicit_levels_too_small_errors_with_min_size() {
        let a = ImageTensor::zeros(24, 24);
        let err = ms_ssim(&a, &a, Some(3)).unwrap_err().to_string();
        assert!(err.contains("44"), "should state minimum side, got: {err}");
    }

    #[test]
    fn tiny_image_rejected() {
        let a = ImageTensor::zeros(8, 8);
        assert!(ms_ssim(&a, &a, None).is_err());
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = ImageTensor::random(16, 16, &mut rng);
        let b = ImageTensor::random(16, 16, &mut rng);

        let eval = |img: &ArrayD<f64>| {
            let mut t = Tape::new();
            let av = t.constant(img.clone());
            let bv = t.constant(b.data().clone().into_dyn());
            let v = ms_ssim_on_tape(&mut t, av, bv, None).unwrap();
            t.scalar_value(v)
        };

        let mut tape = Tape::new();
        let av = tape.leaf(a.data().clone().into_dyn(), true);
        let bv = tape.constant(b.data().clone().into_dyn());
        let v = ms_ssim_on_tape(&mut tape, av, bv, None).unwrap();
        let grads = tape.backward(v).unwrap();
        let g = grads.get(av).unwrap();

        let h = 1e-5;
        let base = a.data().clone().into_dyn();
        for flat in [0usize, 100, 300, 500, 767] {
            let mut plus = base.clone();
            plus.as_slice_mut().unwrap()[flat] += h;
            let mut minus = base.clone();
            minus.as_slice_mut().unwrap()[flat] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = g.as_slice().unwrap()[flat];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((an - fd) / denom).abs() < 1e-4,
                "elem {flat}: analytic {an} vs fd {fd}"
            );
        }
    }
}
