//! Loss components and their weighted combinations.
//!
//! The restoration loss is `alpha*l1 + beta*(1 - ms_ssim) + gamma*(content +
//! style)` with defaults 0.25 / 0.25 / 0.5. The detection loss is
//! `p1*box + p2*obj + p3*cls` with defaults 0.05 / 1.0 / 0.5, and the total
//! adds `p4 * restoration` with `p4 = 0.01`. The combinations are pure
//! weighted sums and reproduce exactly from their components.

mod detection;
mod msssim;
mod perceptual;

pub use detection::{detection_loss_on_tape, detection_loss_values, DetectionLossVars};
pub use msssim::{
    max_levels_for, min_side_for_levels, ms_ssim, ms_ssim_on_tape, MS_SSIM_MAX_LEVELS,
    MS_SSIM_SCALE_WEIGHTS, MS_SSIM_WINDOW,
};
pub use perceptual::{
    gram_matrix, vgg_perceptual, vgg_perceptual_on_tape, FeatureExtractor, IdentityExtractor,
    NullExtractor, RandomConvExtractor,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;

/// Weights of the restoration, detection, and total losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_res: f64,
    pub beta_res: f64,
    pub gamma_res: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_res: 0.25,
            beta_res: 0.25,
            gamma_res: 0.5,
            p1: 0.05,
            p2: 1.0,
            p3: 0.5,
            p4: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha_res,
            self.beta_res,
            self.gamma_res,
            self.p1,
            self.p2,
            self.p3,
            self.p4,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn restoration(&self, l1: f64, msssim_loss: f64, content: f64, style: f64) -> f64 {
        self.alpha_res * l1 + self.beta_res * msssim_loss + self.gamma_res * (content + style)
    }

    pub fn detection(&self, l_box: f64, l_obj: f64, l_cls: f64) -> f64 {
        self.p1 * l_box + self.p2 * l_obj + self.p3 * l_cls
    }

    pub fn total(&self, l_box: f64, l_obj: f64, l_cls: f64, l_res: f64) -> f64 {
        self.p1 * l_box + self.p2 * l_obj + self.p3 * l_cls + self.p4 * l_res
    }
}

/// Every loss component plus the weighted combinations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_box: f64,
    pub l_obj: f64,
    pub l_cls: f64,
    pub l_l1: f64,
    pub l_msssim: f64,
    pub l_vgg_content: f64,
    pub l_vgg_style: f64,
    pub l_res: f64,
    pub l_det: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Builds the weighted combinations from raw components.
    #[allow(clippy::too_many_arguments)]
    pub fn from_components(
        weights: &LossWeights,
        l_box: f64,
        l_obj: f64,
        l_cls: f64,
        l_l1: f64,
        l_msssim: f64,
        l_vgg_content: f64,
        l_vgg_style: f64,
    ) -> Self {
        let l_res = weights.restoration(l_l1, l_msssim, l_vgg_content, l_vgg_style);
        Self {
            l_box,
            l_obj,
            l_cls,
            l_l1,
            l_msssim,
            l_vgg_content,
            l_vgg_style,
            l_res,
            l_det: weights.detection(l_box, l_obj, l_cls),
            l_total: weights.total(l_box, l_obj, l_cls, l_res),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_box,
            self.l_obj,
            self.l_cls,
            self.l_l1,
            self.l_msssim,
            self.l_vgg_content,
            self.l_vgg_style,
            self.l_res,
            self.l_det,
            self.l_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Mean of several breakdowns (batch averaging).
    pub fn mean_of(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.l_box += b.l_box;
            out.l_obj += b.l_obj;
            out.l_cls += b.l_cls;
            out.l_l1 += b.l_l1;
            out.l_msssim += b.l_msssim;
            out.l_vgg_content += b.l_vgg_content;
            out.l_vgg_style += b.l_vgg_style;
            out.l_res += b.l_res;
            out.l_det += b.l_det;
            out.l_total += b.l_total;
        }
        out.l_box /= n;
        out.l_obj /= n;
        out.l_cls /= n;
        out.l_l1 /= n;
        out.l_msssim /= n;
        out.l_vgg_content /= n;
        out.l_vgg_style /= n;
        out.l_res /= n;
        out.l_det /= n;
        out.l_total /= n;
        out
    }
}

fn check_same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::ShapeMismatch(format!(
            "images differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

/// L1 on the tape. `|x|` is built from `max(d, -d)` so the gradient is the
/// sign of the difference.
pub fn l1_on_tape(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let nd = tape.neg(d);
    let abs = tape.max(d, nd);
    tape.mean(abs)
}

/// Scalar restoration-loss nodes produced while building a training graph.
pub struct RestorationLossVars {
    pub l1: Var,
    pub msssim_loss: Var,
    pub content: Var,
    pub style: Var,
    pub l_res: Var,
}

/// Records `alpha*l1 + beta*(1 - ms_ssim) + gamma*(content + style)` between
/// two `[3, H, W]` nodes. MS-SSIM levels auto-reduce for small inputs.
pub fn restoration_loss_on_tape(
    tape: &mut Tape,
    adapted: Var,
    reference: Var,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor,
) -> Result<RestorationLossVars> {
    let l1 = l1_on_tape(tape, adapted, reference);
    let ms = ms_ssim_on_tape(tape, adapted, reference, None)?;
    let neg = tape.neg(ms);
    let msssim_loss = tape.add_scalar(neg, 1.0);
    let (content, style) = vgg_perceptual_on_tape(tape, adapted, reference, extractor);

    let t1 = tape.mul_scalar(l1, weights.alpha_res);
    let t2 = tape.mul_scalar(msssim_loss, weights.beta_res);
    let vgg = tape.add(content, style);
    let t3 = tape.mul_scalar(vgg, weights.gamma_res);
    let t12 = tape.add(t1, t2);
    let l_res = tape.add(t12, t3);
    Ok(RestorationLossVars {
        l1,
        msssim_loss,
        content,
        style,
        l_res,
    })
}

/// Convenience wrapper computing the restoration components on plain images.
pub fn restoration_loss(
    adapted: &ImageTensor,
    reference: &ImageTensor,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor,
) -> Result<LossBreakdown> {
    check_same_shape(adapted, reference)?;
    let mut tape = Tape::new();
    let a = tape.constant(adapted.data().clone().into_dyn());
    let r = tape.constant(reference.data().clone().into_dyn());
    let vars = restoration_loss_on_tape(&mut tape, a, r, weights, extractor)?;
    Ok(LossBreakdown::from_components(
        weights,
        0.0,
        0.0,
        0.0,
        tape.scalar_value(vars.l1),
        tape.scalar_value(vars.msssim_loss),
        tape.scalar_value(vars.content),
        tape.scalar_value(vars.style),
    ))
}
