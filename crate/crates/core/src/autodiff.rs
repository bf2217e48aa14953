//! Reverse-mode automatic differentiation over dynamic-shaped `f64` arrays.
//!
//! A [`Tape`] records every intermediate value of a forward pass; calling
//! [`Tape::backward`] on a scalar result walks the recording in reverse and
//! accumulates gradients for every leaf created with `requires_grad = true`.
//! One tape per training example keeps the structure single-threaded;
//! batch parallelism happens above this layer.

use ndarray::{Array1, Array2, Array3, ArrayD, Ix1, Ix3, IxDyn};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    /// `x^c` for `x >= 0`; callers clamp first when `c < 1`.
    PowScalar(usize, f64),
    Exp(usize),
    Sigmoid(usize),
    LeakyRelu(usize, f64),
    Atan(usize),
    Min(usize, usize),
    Max(usize, usize),
    ClampMin(usize, f64),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    /// 2x2 average pooling with stride 2; trailing odd row/column dropped.
    AvgPool2(usize),
    Mean(usize),
    Sum(usize),
    /// Extracts `idx` (flat, row-major) entries into a 1-d vector.
    Gather(usize, Vec<usize>),
    /// Channel Gram matrix `F F^T / (C*H*W)` of a `[C, H, W]` input.
    Gram(usize),
    /// Elementwise binary cross-entropy from logits against a fixed target.
    BceWithLogits(usize, ArrayD<f64>),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if it participates.
    pub fn get(&self, var: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 0-d node as a plain float.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.ndim(), 0, "scalar_value on non-scalar node");
        *val.iter().next().expect("empty array")
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn vector(&mut self, values: Vec<f64>) -> Var {
        self.constant(Array1::from_vec(values).into_dyn())
    }

    fn assert_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Mul(a.0, b.0), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "div");
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Div(a.0, b.0), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v + c);
        let ng = self.needs(a.0);
        self.push(value, Op::AddScalar(a.0), ng)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        let ng = self.needs(a.0);
        self.push(value, Op::MulScalar(a.0, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn pow_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.powf(c));
        let ng = self.needs(a.0);
        self.push(value, Op::PowScalar(a.0, c), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        let ng = self.needs(a.0);
        self.push(value, Op::Exp(a.0), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(sigmoid);
        let ng = self.needs(a.0);
        self.push(value, Op::Sigmoid(a.0), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.needs(a.0);
        self.push(value, Op::LeakyRelu(a.0, slope), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn atan(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::atan);
        let ng = self.needs(a.0);
        self.push(value, Op::Atan(a.0), ng)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "min");
        let mut value = self.nodes[a.0].value.clone();
        value.zip_mut_with(&self.nodes[b.0].value, |x, y| *x = x.min(*y));
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Min(a.0, b.0), ng)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "max");
        let mut value = self.nodes[a.0].value.clone();
        value.zip_mut_with(&self.nodes[b.0].value, |x, y| *x = x.max(*y));
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Max(a.0, b.0), ng)
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.max(min));
        let ng = self.needs(a.0);
        self.push(value, Op::ClampMin(a.0, min), ng)
    }

    /// 2-d convolution of a `[Cin, H, W]` input with a `[Cout, Cin, kh, kw]`
    /// kernel and optional `[Cout]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let wv = self.nodes[w.0].value.view();
        let wsh = wv.shape();
        assert_eq!(wsh.len(), 4, "conv2d weight must be 4-d");
        let (c_out, c_in, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
        assert_eq!(xv.shape()[0], c_in, "conv2d channel mismatch");
        let (h, wid) = (xv.shape()[1], xv.shape()[2]);
        assert!(
            h + 2 * pad >= kh && wid + 2 * pad >= kw,
            "conv2d input smaller than kernel"
        );
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (wid + 2 * pad - kw) / stride + 1;

        let cols = im2col(&xv, kh, kw, stride, pad);
        let w_mat = wv
            .to_shape((c_out, c_in * kh * kw))
            .expect("weight reshape")
            .to_owned();
        let mut y = w_mat.dot(&cols);
        if let Some(bv) = b {
            let bias = self.nodes[bv.0]
                .value
                .view()
                .into_dimensionality::<Ix1>()
                .expect("bias must be 1-d");
            for (mut row, bb) in y.rows_mut().into_iter().zip(bias.iter()) {
                row.mapv_inplace(|v| v + bb);
            }
        }
        let value = reshape_owned(y, &[c_out, h_out, w_out]);
        let ng = self.needs(x.0) || self.needs(w.0) || b.is_some_and(|bv| self.needs(bv.0));
        self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                pad,
            },
            ng,
        )
    }

    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let xv = as3(&self.nodes[a.0].value);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (ho, wo) = (h / 2, w / 2);
        assert!(ho >= 1 && wo >= 1, "avg_pool2 input too small");
        let mut out = Array3::zeros((c, ho, wo));
        for ci in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    out[[ci, y, x]] = 0.25
                        * (xv[[ci, 2 * y, 2 * x]]
                            + xv[[ci, 2 * y, 2 * x + 1]]
                            + xv[[ci, 2 * y + 1, 2 * x]]
                            + xv[[ci, 2 * y + 1, 2 * x + 1]]);
                }
            }
        }
        let ng = self.needs(a.0);
        self.push(out.into_dyn(), Op::AvgPool2(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum() / n);
        let ng = self.needs(a.0);
        self.push(value, Op::Mean(a.0), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        let ng = self.needs(a.0);
        self.push(value, Op::Sum(a.0), ng)
    }

    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let flat = flat_view(&self.nodes[a.0].value);
        let value = Array1::from_iter(idx.iter().map(|&i| flat[i])).into_dyn();
        let ng = self.needs(a.0);
        self.push(value, Op::Gather(a.0, idx), ng)
    }

    /// Channel Gram matrix of a `[C, H, W]` feature map: `F F^T / (C*H*W)`.
    pub fn gram(&mut self, a: Var) -> Var {
        let xv = as3(&self.nodes[a.0].value);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let f = xv
            .to_shape((c, h * w))
            .expect("gram reshape")
            .to_owned();
        let norm = (c * h * w) as f64;
        let value = (f.dot(&f.t()) / norm).into_dyn();
        let ng = self.needs(a.0);
        self.push(value, Op::Gram(a.0), ng)
    }

    /// Numerically stable elementwise BCE from logits:
    /// `max(x, 0) - x*t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, target: ArrayD<f64>) -> Var {
        assert_eq!(
            self.nodes[logits.0].value.shape(),
            target.shape(),
            "bce_with_logits: target shape differs"
        );
        let mut value = self.nodes[logits.0].value.clone();
        value.zip_mut_with(&target, |x, t| {
            *x = x.max(0.0) - *x * t + (-x.abs()).exp().ln_1p();
        });
        let ng = self.needs(logits.0);
        self.push(value, Op::BceWithLogits(logits.0, target), ng)
    }

    /// Accumulates gradients of a scalar `root` into every grad-enabled leaf.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.ndim() != 0 {
            return Err(Error::InvalidArgument(
                "backward root must be a scalar (0-d) node".into(),
            ));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone(), self.needs(*a));
                    accum(&mut grads, *b, g, self.needs(*b));
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, g.clone(), self.needs(*a));
                    accum(&mut grads, *b, -g, self.needs(*b));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        accum(&mut grads, a, &g * &self.nodes[b].value, true);
                    }
                    if self.needs(b) {
                        accum(&mut grads, b, &g * &self.nodes[a].value, true);
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        accum(&mut grads, a, &g / &self.nodes[b].value, true);
                    }
                    if self.needs(b) {
                        let bv = &self.nodes[b].value;
                        let da = &self.nodes[a].value;
                        let gb = -&(&g * da) / &(bv * bv);
                        accum(&mut grads, b, gb, true);
                    }
                }
                Op::AddScalar(a) => accum(&mut grads, *a, g, self.needs(*a)),
                Op::MulScalar(a, c) => {
                    let c = *c;
                    accum(&mut grads, *a, g.mapv(|v| v * c), self.needs(*a));
                }
                Op::PowScalar(a, c) => {
                    let (a, c) = (*a, *c);
                    if self.needs(a) {
                        let mut ga = self.nodes[a].value.mapv(|v| c * v.powf(c - 1.0));
                        ga.zip_mut_with(&g, |x, gg| *x *= gg);
                        accum(&mut grads, a, ga, true);
                    }
                }
                Op::Exp(a) => {
                    let a = *a;
                    if self.needs(a) {
                        accum(&mut grads, a, &g * &self.nodes[i].value, true);
                    }
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let mut ga = self.nodes[i].value.mapv(|s| s * (1.0 - s));
                        ga.zip_mut_with(&g, |x, gg| *x *= gg);
                        accum(&mut grads, a, ga, true);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let (a, slope) = (*a, *slope);
                    if self.needs(a) {
                        let mut ga = self.nodes[a].value.mapv(|v| if v > 0.0 { 1.0 } else { slope });
                        ga.zip_mut_with(&g, |x, gg| *x *= gg);
                        accum(&mut grads, a, ga, true);
                    }
                }
                Op::Atan(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let mut ga = self.nodes[a].value.mapv(|v| 1.0 / (1.0 + v * v));
                        ga.zip_mut_with(&g, |x, gg| *x *= gg);
                        accum(&mut grads, a, ga, true);
                    }
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(self.nodes[i].op, Op::Min(..));
                    let (a, b) = (*a, *b);
                    let av = &self.nodes[a].value;
                    let bv = &self.nodes[b].value;
                    // Ties route to the first operand.
                    let pick_a = |x: f64, y: f64| if is_min { x <= y } else { x >= y };
                    if self.needs(a) {
                        let mut ga = g.clone();
                        ga.zip_mut_with(av, |gg, _| *gg *= 1.0);
                        let mask = ndarray::Zip::from(av).and(bv).map_collect(|&x, &y| {
                            if pick_a(x, y) {
                                1.0
                            } else {
                                0.0
                            }
                        });
                        ga.zip_mut_with(&mask, |gg, m| *gg *= m);
                        accum(&mut grads, a, ga, true);
                    }
                    if self.needs(b) {
                        let mask = ndarray::Zip::from(av).and(bv).map_collect(|&x, &y| {
                            if pick_a(x, y) {
                                0.0
                            } else {
                                1.0
                            }
                        });
                        let mut gb = g.clone();
                        gb.zip_mut_with(&mask, |gg, m| *gg *= m);
                        accum(&mut grads, b, gb, true);
                    }
                }
                Op::ClampMin(a, min) => {
                    let (a, min) = (*a, *min);
                    if self.needs(a) {
                        let mut ga = self.nodes[a].value.mapv(|v| if v >= min { 1.0 } else { 0.0 });
                        ga.zip_mut_with(&g, |x, gg| *x *= gg);
                        accum(&mut grads, a, ga, true);
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                    let xv = as3(&self.nodes[x].value);
                    let wv = &self.nodes[w].value;
                    let wsh = wv.shape().to_vec();
                    let (c_out, c_in, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
                    let gy = as3(&g);
                    let l = gy.shape()[1] * gy.shape()[2];
                    let gy_mat = gy.to_shape((c_out, l)).expect("grad reshape").to_owned();

                    if let Some(b) = b {
                        if self.needs(b) {
                            let db = gy_mat.sum_axis(ndarray::Axis(1)).into_dyn();
                            accum(&mut grads, b, db, true);
                        }
                    }
                    if self.needs(w) {
                        // im2col is recomputed instead of cached; it is cheap
                        // next to the matrix products.
                        let cols = im2col(&xv, kh, kw, stride, pad);
                        let dw = gy_mat.dot(&cols.t());
                        let dw = reshape_owned(dw, &[c_out, c_in, kh, kw]);
                        accum(&mut grads, w, dw, true);
                    }
                    if self.needs(x) {
                        let w_mat = wv
                            .view()
                            .into_dimensionality::<ndarray::Ix4>()
                            .expect("weight 4d")
                            .to_shape((c_out, c_in * kh * kw))
                            .expect("w reshape")
                            .to_owned();
                        let dcols = w_mat.t().dot(&gy_mat);
                        let dx = col2im(
                            &dcols,
                            (xv.shape()[0], xv.shape()[1], xv.shape()[2]),
                            kh,
                            kw,
                            stride,
                            pad,
                        );
                        accum(&mut grads, x, dx.into_dyn(), true);
                    }
                }
                Op::AvgPool2(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let gy = as3(&g);
                        let xs = self.nodes[a].value.shape().to_vec();
                        let mut dx = Array3::<f64>::zeros((xs[0], xs[1], xs[2]));
                        for c in 0..gy.shape()[0] {
                            for y in 0..gy.shape()[1] {
                                for x in 0..gy.shape()[2] {
                                    let v = 0.25 * gy[[c, y, x]];
                                    dx[[c, 2 * y, 2 * x]] += v;
                                    dx[[c, 2 * y, 2 * x + 1]] += v;
                                    dx[[c, 2 * y + 1, 2 * x]] += v;
                                    dx[[c, 2 * y + 1, 2 * x + 1]] += v;
                                }
                            }
                        }
                        accum(&mut grads, a, dx.into_dyn(), true);
                    }
                }
                Op::Mean(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let n = self.nodes[a].value.len() as f64;
                        let gv = *g.iter().next().expect("scalar grad") / n;
                        let da = ArrayD::from_elem(self.nodes[a].value.raw_dim(), gv);
                        accum(&mut grads, a, da, true);
                    }
                }
                Op::Sum(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let gv = *g.iter().next().expect("scalar grad");
                        let da = ArrayD::from_elem(self.nodes[a].value.raw_dim(), gv);
                        accum(&mut grads, a, da, true);
                    }
                }
                Op::Gather(a, idx) => {
                    let a = *a;
                    if self.needs(a) {
                        let mut da = ArrayD::zeros(self.nodes[a].value.raw_dim());
                        {
                            let flat = da.as_slice_mut().expect("gather grad layout");
                            for (k, &j) in idx.iter().enumerate() {
                                flat[j] += g[[k]];
                            }
                        }
                        accum(&mut grads, a, da, true);
                    }
                }
                Op::Gram(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let xv = as3(&self.nodes[a].value);
                        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                        let f = xv.to_shape((c, h * w)).expect("gram reshape").to_owned();
                        let gm = g
                            .view()
                            .into_dimensionality::<ndarray::Ix2>()
                            .expect("gram grad 2d")
                            .to_owned();
                        // d/dF of tr(G' generic): (G_grad + G_grad^T) F / norm
                        let norm = (c * h * w) as f64;
                        let sym = &gm + &gm.t();
                        let df = sym.dot(&f) / norm;
                        let dx = reshape_owned(df, &[c, h, w]);
                        accum(&mut grads, a, dx, true);
                    }
                }
                Op::BceWithLogits(a, target) => {
                    let a = *a;
                    if self.needs(a) {
                        let mut da = self.nodes[a].value.mapv(sigmoid);
                        da.zip_mut_with(target, |s, t| *s -= t);
                        da.zip_mut_with(&g, |x, gg| *x *= gg);
                        accum(&mut grads, a, da, true);
                    }
                }
            }
            if !matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Reshapes an owned matrix to `shape`, tolerating non-standard layouts
/// (ndarray's `dot` returns F-order arrays on outer-product shapes).
fn reshape_owned(a: Array2<f64>, shape: &[usize]) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a.into_shape_with_order(IxDyn(shape)).expect("reshape").into_dyn()
    } else {
        let v: Vec<f64> = a.iter().copied().collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).expect("reshape")
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accum(grads: &mut [Option<ArrayD<f64>>], target: usize, g: ArrayD<f64>, needs: bool) {
    if !needs {
        return;
    }
    match &mut grads[target] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn as3(a: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("expected 3-d array")
}

fn flat_view(a: &ArrayD<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h_out = (h + 2 * pad - kh) / stride + 1;
    let w_out = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::zeros((c_in * kh * kw, h_out * w_out));
    for c in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * w_out + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    xshape: (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (c_in, h, w) = xshape;
    let h_out = (h + 2 * pad - kh) / stride + 1;
    let w_out = (w + 2 * pad - kw) / stride + 1;
    let mut dx = Array3::zeros((c_in, h, w));
    for c in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[c, iy as usize, ix as usize]] += dcols[[row, oy * w_out + ox]];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite-difference check of a scalar-valued graph builder.
    fn check_grad(
        shapes: &[&[usize]],
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        seed: u64,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<ArrayD<f64>> = shapes.iter().map(|s| rand_array(s, &mut rng)).collect();

        let eval = |inputs: &[ArrayD<f64>]| -> f64 {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|a| t.leaf(a.clone(), true)).collect();
            let out = build(&mut t, &vars);
            t.scalar_value(out)
        };

        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| t.leaf(a.clone(), true)).collect();
        let out = build(&mut t, &vars);
        let grads = t.backward(out).unwrap();

        let h = 1e-5;
        for (vi, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).expect("missing grad").clone();
            let n = inputs[vi].len();
            for flat in 0..n {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                {
                    let p = plus[vi].as_slice_mut().unwrap();
                    p[flat] += h;
                    let m = minus[vi].as_slice_mut().unwrap();
                    m[flat] -= h;
                }
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[flat];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / denom).abs() < tol,
                    "input {vi} elem {flat}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        check_grad(
            &[&[2, 3], &[2, 3]],
            |t, v| {
                let s = t.add(v[0], v[1]);
                let m = t.mul(s, v[0]);
                let e = t.exp(m);
                let lr = t.leaky_relu(e, 0.1);
                t.mean(lr)
            },
            1,
            1e-6,
        );
    }

    #[test]
    fn grad_div_sigmoid_atan() {
        check_grad(
            &[&[4], &[4]],
            |t, v| {
                let b = t.add_scalar(v[1], 3.0); // keep denominator away from zero
                let d = t.div(v[0], b);
                let s = t.sigmoid(d);
                let a = t.atan(s);
                t.sum(a)
            },
            2,
            1e-6,
        );
    }

    #[test]
    fn grad_min_max_clamp() {
        check_grad(
            &[&[5], &[5]],
            |t, v| {
                let lo = t.min(v[0], v[1]);
                let hi = t.max(v[0], v[1]);
                let d = t.sub(hi, lo);
                let c = t.clamp_min(d, 0.05);
                let p = t.pow_scalar(c, 1.7);
                t.mean(p)
            },
            3,
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d_all_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_array(&[2, 6, 5], &mut rng);
        let w = rand_array(&[3, 2, 3, 3], &mut rng);
        let b = rand_array(&[3], &mut rng);
        let inputs = [x, w, b];

        let eval = |inp: &[ArrayD<f64>]| {
            let mut t = Tape::new();
            let xv = t.leaf(inp[0].clone(), true);
            let wv = t.leaf(inp[1].clone(), true);
            let bv = t.leaf(inp[2].clone(), true);
            let y = t.conv2d(xv, wv, Some(bv), 1, 1);
            let sq = t.square(y);
            let out = t.mean(sq);
            (t, xv, wv, bv, out)
        };

        let (mut t, xv, wv, bv, out) = eval(&inputs);
        let grads = t.backward(out).unwrap();
        let h = 1e-5;
        for (vi, var) in [(0, xv), (1, wv), (2, bv)] {
            let analytic = grads.get(var).unwrap().clone();
            for flat in 0..inputs[vi].len() {
                let mut plus = inputs.to_vec();
                plus[vi].as_slice_mut().unwrap()[flat] += h;
                let mut minus = inputs.to_vec();
                minus[vi].as_slice_mut().unwrap()[flat] -= h;
                let (tp, _, _, _, op) = eval(&plus);
                let (tm, _, _, _, om) = eval(&minus);
                let fd = (tp.scalar_value(op) - tm.scalar_value(om)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[flat];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / denom).abs() < 1e-5,
                    "operand {vi} elem {flat}: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn grad_conv2d_strided() {
        check_grad(
            &[&[1, 7, 7], &[2, 1, 3, 3]],
            |t, v| {
                let y = t.conv2d(v[0], v[1], None, 2, 1);
                let s = t.square(y);
                t.sum(s)
            },
            5,
            1e-5,
        );
    }

    #[test]
    fn grad_pool_gather_gram_bce() {
        check_grad(
            &[&[2, 4, 6]],
            |t, v| {
                let p = t.avg_pool2(v[0]);
                let g = t.gram(p);
                let gm = t.mean(g);
                let picked = t.gather(v[0], vec![0, 7, 13, 40]);
                let target = ndarray::Array1::from_vec(vec![1.0, 0.0, 1.0, 0.0]).into_dyn();
                let bce = t.bce_with_logits(picked, target);
                let bm = t.mean(bce);
                t.add(gm, bm)
            },
            6,
            1e-5,
        );
    }

    #[test]
    fn conv2d_same_padding_preserves_shape() {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = t.leaf(rand_array(&[3, 10, 13], &mut rng), false);
        let w = t.leaf(rand_array(&[8, 3, 3, 3], &mut rng), false);
        let y = t.conv2d(x, w, None, 1, 1);
        assert_eq!(t.value(y).shape(), &[8, 10, 13]);
    }

    #[test]
    fn conv2d_known_values() {
        // 1x3x3 input, single 1x1x2x2 kernel of ones, no pad: output sums 2x2 windows.
        let mut t = Tape::new();
        let x = ndarray::Array3::from_shape_vec(
            (1, 3, 3),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap()
        .into_dyn();
        let w = ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.0);
        let xv = t.leaf(x, false);
        let wv = t.leaf(w, false);
        let y = t.conv2d(xv, wv, None, 1, 0);
        let v = t.value(y);
        assert_eq!(v.shape(), &[1, 2, 2]);
        assert_eq!(v[[0, 0, 0]], 12.0);
        assert_eq!(v[[0, 0, 1]], 16.0);
        assert_eq!(v[[0, 1, 0]], 24.0);
        assert_eq!(v[[0, 1, 1]], 28.0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::zeros(IxDyn(&[2, 2])), true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[3]), 2.0), true);
        let c = t.constant(ArrayD::from_elem(IxDyn(&[3]), 5.0));
        let y = t.mul(x, c);
        let m = t.mean(y);
        let grads = t.backward(m).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }
}
