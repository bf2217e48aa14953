//! Convolution layers, parameter registry, and the SGD optimizer used to
//! train the adaptation network and the detector jointly.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};

/// A 2-d convolution layer with bias.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ArrayD<f64>,
    pub bias: ArrayD<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    /// Fan-in scaled normal init (He-style, adjusted for the leaky slope the
    /// layer feeds into). `pad = k / 2` gives same-padding at stride 1.
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let leaky = 0.1f64;
        let std = (2.0 / ((1.0 + leaky * leaky) * fan_in)).sqrt();
        let weight = ArrayD::from_shape_fn(IxDyn(&[c_out, c_in, kernel, kernel]), |_| {
            normal_sample(rng) * std
        });
        let bias = ArrayD::zeros(IxDyn(&[c_out]));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Records the layer on a tape, returning (output, weight var, bias var).
    pub fn forward(&self, tape: &mut Tape, x: Var, trainable: bool) -> (Var, Var, Var) {
        let w = tape.leaf(self.weight.clone(), trainable);
        let b = tape.leaf(self.bias.clone(), trainable);
        let y = tape.conv2d(x, w, Some(b), self.stride, self.pad);
        (y, w, b)
    }
}

/// Box-Muller standard normal draw.
fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Name -> tape variable bindings collected while building a training graph,
/// so per-parameter gradients can be read back after `backward`.
#[derive(Default)]
pub struct ParamBindings {
    entries: Vec<(String, Var)>,
}

impl ParamBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, var: Var) {
        self.entries.push((name.into(), var));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Accumulated named gradients for one batch.
#[derive(Default)]
pub struct GradientSet {
    pub grads: HashMap<String, ArrayD<f64>>,
}

impl GradientSet {
    pub fn accumulate(&mut self, name: &str, grad: &ArrayD<f64>) {
        match self.grads.get_mut(name) {
            Some(g) => *g += grad,
            None => {
                self.grads.insert(name.to_string(), grad.clone());
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn merge(&mut self, other: GradientSet) {
        for (name, grad) in other.grads {
            match self.grads.get_mut(&name) {
                Some(g) => *g += &grad,
                None => {
                    self.grads.insert(name, grad);
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Plain SGD with momentum; momentum buffers are keyed by parameter name so
/// they survive checkpointing.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: HashMap<String, ArrayD<f64>>,
}

impl SgdOptimizer {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// Applies one update to `params` (name -> tensor) from `grads`.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = (String, &'a mut ArrayD<f64>)>,
        grads: &GradientSet,
    ) {
        for (name, value) in params {
            let Some(grad) = grads.grads.get(&name) else {
                continue;
            };
            let vel = self
                .velocity
                .entry(name)
                .or_insert_with(|| ArrayD::zeros(value.raw_dim()));
            vel.zip_mut_with(grad, |v, g| *v = self.momentum * *v + g);
            value.zip_mut_with(vel, |p, v| *p -= self.learning_rate * v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_layer_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Conv2dLayer::new(3, 32, 3, 1, &mut rng);
        assert_eq!(layer.param_count(), 3 * 32 * 9 + 32);
        assert_eq!(layer.param_count(), 896);
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut opt = SgdOptimizer::new(0.5, 0.0);
        let mut p = ArrayD::from_elem(IxDyn(&[2]), 1.0);
        let mut grads = GradientSet::default();
        grads.accumulate("w", &ArrayD::from_elem(IxDyn(&[2]), 1.0));
        opt.step([("w".to_string(), &mut p)].into_iter(), &grads);
        assert!((p[[0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = SgdOptimizer::new(1.0, 0.9);
        let mut p = ArrayD::from_elem(IxDyn(&[1]), 0.0);
        let mut grads = GradientSet::default();
        grads.accumulate("w", &ArrayD::from_elem(IxDyn(&[1]), 1.0));
        opt.step([("w".to_string(), &mut p)].into_iter(), &grads);
        assert!((p[[0]] + 1.0).abs() < 1e-12); // v = 1
        opt.step([("w".to_string(), &mut p)].into_iter(), &grads);
        assert!((p[[0]] + 2.9).abs() < 1e-12); // v = 1.9
    }
}
