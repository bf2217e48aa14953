//! The neural image-adaptation network: a shallow full-resolution CNN
//! mapping a degraded 3-channel image to an adapted 3-channel image.
//!
//! Layer stack (all stride 1, same padding, spatial size preserved):
//! Conv(3->w1, 3x3), Conv(w1->w2, 3x3), one residual block
//! [Conv(w2->w1, 1x1) then Conv(w1->w2, 3x3), added to the block input],
//! Conv(w2->3, 3x3). Leaky-ReLU (slope 0.1) follows every inner conv; a
//! sigmoid after the final conv bounds the output to `[0, 1]`. No
//! normalization layers. At the standard widths (32, 64) the network has
//! exactly 41,699 trainable scalars.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::nn::{Conv2dLayer, ParamBindings};

pub const LEAKY_SLOPE: f64 = 0.1;

/// Minimum spatial extent accepted by the forward pass.
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NiaConfig {
    /// Channels after the first conv (and inside the residual squeeze).
    pub width1: usize,
    /// Channels carried through the trunk.
    pub width2: usize,
}

impl NiaConfig {
    /// The standard widths (32, 64).
    pub fn standard() -> Self {
        Self {
            width1: 32,
            width2: 64,
        }
    }

    /// A narrow variant for desk-scale experiments.
    pub fn tiny() -> Self {
        Self {
            width1: 8,
            width2: 16,
        }
    }
}

impl Default for NiaConfig {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Debug, Clone)]
pub struct NiaNetwork {
    pub config: NiaConfig,
    conv_in: Conv2dLayer,
    conv_expand: Conv2dLayer,
    res_squeeze: Conv2dLayer,
    res_expand: Conv2dLayer,
    conv_out: Conv2dLayer,
}

impl NiaNetwork {
    pub fn new(config: NiaConfig, rng: &mut ChaCha8Rng) -> Self {
        let (w1, w2) = (config.width1, config.width2);
        Self {
            config,
            conv_in: Conv2dLayer::new(3, w1, 3, 1, rng),
            conv_expand: Conv2dLayer::new(w1, w2, 3, 1, rng),
            res_squeeze: Conv2dLayer::new(w2, w1, 1, 1, rng),
            res_expand: Conv2dLayer::new(w1, w2, 3, 1, rng),
            conv_out: Conv2dLayer::new(w2, 3, 3, 1, rng),
        }
    }

    /// Exact count of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    fn layers(&self) -> [&Conv2dLayer; 5] {
        [
            &self.conv_in,
            &self.conv_expand,
            &self.res_squeeze,
            &self.res_expand,
            &self.conv_out,
        ]
    }

    fn layer_names() -> [&'static str; 5] {
        ["conv_in", "conv_expand", "res_squeeze", "res_expand", "conv_out"]
    }

    pub fn named_params(&self) -> Vec<(String, &ArrayD<f64>)> {
        let mut out = Vec::new();
        for (name, layer) in Self::layer_names().iter().zip(self.layers()) {
            out.push((format!("{name}/weight"), &layer.weight));
            out.push((format!("{name}/bias"), &layer.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut ArrayD<f64>)> {
        let names = Self::layer_names();
        let layers = [
            &mut self.conv_in,
            &mut self.conv_expand,
            &mut self.res_squeeze,
            &mut self.res_expand,
            &mut self.conv_out,
        ];
        let mut out = Vec::new();
        for (name, layer) in names.iter().zip(layers) {
            out.push((format!("{name}/weight"), &mut layer.weight));
            out.push((format!("{name}/bias"), &mut layer.bias));
        }
        out
    }

    fn validate_input(image: &ImageTensor) -> Result<()> {
        if image.height() < MIN_SIDE || image.width() < MIN_SIDE {
            return Err(Error::InvalidArgument(format!(
                "adaptation input must be at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`; the input node is supplied by the
    /// caller so gradients can reach both pixels and parameters.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: Var,
        prefix: &str,
        bindings: Option<&mut ParamBindings>,
    ) -> Var {
        let trainable = bindings.is_some();
        let mut binder = bindings;
        let record = |b: &mut Option<&mut ParamBindings>, name: &str, w: Var, bias: Var| {
            if let Some(b) = b {
                b.bind(format!("{prefix}{name}/weight"), w);
                b.bind(format!("{prefix}{name}/bias"), bias);
            }
        };

        let (y, w, b) = self.conv_in.forward(tape, input, trainable);
        record(&mut binder, "conv_in", w, b);
        let y = tape.leaky_relu(y, LEAKY_SLOPE);

        let (y, w, b) = self.conv_expand.forward(tape, y, trainable);
        record(&mut binder, "conv_expand", w, b);
        let trunk = tape.leaky_relu(y, LEAKY_SLOPE);

        let (y, w, b) = self.res_squeeze.forward(tape, trunk, trainable);
        record(&mut binder, "res_squeeze", w, b);
        let y = tape.leaky_relu(y, LEAKY_SLOPE);
        let (y, w, b) = self.res_expand.forward(tape, y, trainable);
        record(&mut binder, "res_expand", w, b);
        let branch = tape.leaky_relu(y, LEAKY_SLOPE);
        let y = tape.add(trunk, branch);

        let (y, w, b) = self.conv_out.forward(tape, y, trainable);
        record(&mut binder, "conv_out", w, b);
        tape.sigmoid(y)
    }

    /// Plain inference: same `HxWx3` shape out, values in `[0, 1]`.
    pub fn forward(&self, image: &ImageTensor) -> Result<ImageTensor> {
        Self::validate_input(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.data().clone().into_dyn());
        let y = self.forward_on_tape(&mut tape, x, "", None);
        let out = tape
            .value(y)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("adaptation output is 3-d");
        ImageTensor::from_chw_clamped(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn standard_param_count_is_exact() {
        let net = NiaNetwork::new(NiaConfig::standard(), &mut rng(0));
        // 896 + 18,496 + 2,080 + 18,496 + 1,731
        assert_eq!(net.param_count(), 41_699);
    }

    #[test]
    fn per_layer_counts() {
        let net = NiaNetwork::new(NiaConfig::standard(), &mut rng(0));
        let counts: Vec<usize> = net.layers().iter().map(|l| l.param_count()).collect();
        assert_eq!(counts, vec![896, 18_496, 2_080, 18_496, 1_731]);
    }

    #[test]
    fn shape_preserved_for_arbitrary_sizes() {
        let net = NiaNetwork::new(NiaConfig::tiny(), &mut rng(1));
        let mut r = rng(2);
        for _ in 0..4 {
            let h = r.random_range(8..=33);
            let w = r.random_range(8..=33);
            let img = ImageTensor::random(h, w, &mut r);
            let out = net.forward(&img).unwrap();
            assert_eq!((out.height(), out.width()), (h, w));
        }
    }

    #[test]
    fn rejects_small_inputs() {
        let net = NiaNetwork::new(NiaConfig::tiny(), &mut rng(1));
        let img = ImageTensor::zeros(4, 16);
        assert!(net.forward(&img).is_err());
    }

    #[test]
    fn zeroed_tail_gives_constant_sigmoid_of_bias() {
        // Residual-branch and final-layer weights zeroed, final bias b:
        // the output must be the constant sigmoid(b) map.
        let mut net = NiaNetwork::new(NiaConfig::tiny(), &mut rng(3));
        net.res_squeeze.weight.fill(0.0);
        net.res_squeeze.bias.fill(0.0);
        net.res_expand.weight.fill(0.0);
        net.res_expand.bias.fill(0.0);
        net.conv_out.weight.fill(0.0);
        let b = 0.37;
        net.conv_out.bias.fill(b);
        let img = ImageTensor::random(10, 12, &mut rng(4));
        let out = net.forward(&img).unwrap();
        let expected = 1.0 / (1.0 + (-b as f64).exp());
        for v in out.data().iter() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_branch_is_block_identity() {
        let mut net = NiaNetwork::new(NiaConfig::tiny(), &mut rng(5));
        net.res_squeeze.weight.fill(0.0);
        net.res_squeeze.bias.fill(0.0);
        net.res_expand.weight.fill(0.0);
        net.res_expand.bias.fill(0.0);
        let img = ImageTensor::random(9, 9, &mut rng(6));

        // Reference: the same layers wired without the residual add.
        let mut tape = Tape::new();
        let x = tape.constant(img.data().clone().into_dyn());
        let (y, _, _) = net.conv_in.forward(&mut tape, x, false);
        let y = tape.leaky_relu(y, LEAKY_SLOPE);
        let (y, _, _) = net.conv_expand.forward(&mut tape, y, false);
        let y = tape.leaky_relu(y, LEAKY_SLOPE);
        let (y, _, _) = net.conv_out.forward(&mut tape, y, false);
        let y = tape.sigmoid(y);
        let expected = tape.value(y).clone();

        let out = net.forward(&img).unwrap();
        for (a, e) in out.data().iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_reaches_input() {
        let net = NiaNetwork::new(NiaConfig::tiny(), &mut rng(7));
        let img = ImageTensor::random(8, 8, &mut rng(8));
        let mut tape = Tape::new();
        let x = tape.leaf(img.data().clone().into_dyn(), true);
        let y = net.forward_on_tape(&mut tape, x, "", None);
        let m = tape.mean(y);
        let grads = tape.backward(m).unwrap();
        let gx = grads.get(x).unwrap();
        let norm: f64 = gx.iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "input gradient vanished");

        // Finite-difference spot check on one pixel.
        let eval = |data: ArrayD<f64>| {
            let mut t = Tape::new();
            let x = t.constant(data);
            let y = net.forward_on_tape(&mut t, x, "", None);
            let m = t.mean(y);
            t.scalar_value(m)
        };
        let h = 1e-5;
        let base = img.data().clone().into_dyn();
        let mut plus = base.clone();
        plus[IxDyn(&[1, 3, 3])] += h;
        let mut minus = base.clone();
        minus[IxDyn(&[1, 3, 3])] -= h;
        let fd = (eval(plus) - eval(minus)) / (2.0 * h);
        let an = gx[IxDyn(&[1, 3, 3])];
        assert!(
            (an - fd).abs() / an.abs().max(fd.abs()).max(1e-9) < 1e-4,
            "analytic {an} vs fd {fd}"
        );
    }

    #[test]
    fn named_params_cover_every_layer() {
        let net = NiaNetwork::new(NiaConfig::standard(), &mut rng(9));
        let params = net.named_params();
        assert_eq!(params.len(), 10);
        let total: usize = params.iter().map(|(_, p)| p.len()).sum();
        assert_eq!(total, net.param_count());
    }
}
