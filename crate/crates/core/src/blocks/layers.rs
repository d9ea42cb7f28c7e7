use mogan_autograd::{DeformGeometry, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, Module};

pub(crate) fn check_rank3(x: &Tensor, channels: usize) -> Result<()> {
    if x.rank() != 3 || x.shape()[0] != channels {
        return Err(Error::ShapeMismatch { expected: vec![channels, 0, 0], actual: x.shape().to_vec() });
    }
    Ok(())
}

/// Square-kernel convolution with "same" padding at stride 1.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Conv2d { weight: init.conv_weight(c_out, c_in, kernel), bias: init.zeros(&[c_out]), stride, padding: kernel / 2 }
    }

    pub fn zeroed(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Conv2d {
            weight: Tensor::param(vec![0.0; c_out * c_in * kernel * kernel], &[c_out, c_in, kernel, kernel]),
            bias: Tensor::param(vec![0.0; c_out], &[c_out]),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_rank3(x, self.in_channels())?;
        Ok(x.conv2d(&self.weight, Some(&self.bias), self.stride, self.padding))
    }

    fn from_cols(&self, cols: &Tensor, oh: usize, ow: usize) -> Tensor {
        Tensor::conv_from_cols(cols, &self.weight, Some(&self.bias), oh, ow)
    }
}

impl Module for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// `feature(x) * sigmoid(gate(x))`, both convolutions reading one patch matrix.
#[derive(Clone, Debug)]
pub struct GatedConv2d {
    pub feature: Conv2d,
    pub gate: Conv2d,
}

impl GatedConv2d {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, kernel: usize) -> Self {
        GatedConv2d { feature: Conv2d::new(init, c_in, c_out, kernel, 1), gate: Conv2d::new(init, c_in, c_out, kernel, 1) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_rank3(x, self.feature.in_channels())?;
        let (k, s, p) = (self.feature.kernel(), self.feature.stride, self.feature.padding);
        let cols = x.conv_cols(k, s, p);
        let (oh, ow) = x.conv_out_dims(k, s, p);
        let feature = self.feature.from_cols(&cols, oh, ow);
        let gate = self.gate.from_cols(&cols, oh, ow).sigmoid();
        Ok(feature.mul(&gate))
    }
}

impl Module for GatedConv2d {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.feature.visit(f);
        self.gate.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.feature.visit_mut(f);
        self.gate.visit_mut(f);
    }
}

/// Deformable convolution: a zero-initialized plain convolution predicts
/// `(dy, dx)` for every kernel tap at every output position, and the main
/// kernel reads the input bilinearly at the shifted points.
#[derive(Clone, Debug)]
pub struct DeformConv2d {
    pub offset: Conv2d,
    pub main: Conv2d,
}

impl DeformConv2d {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, kernel: usize) -> Self {
        DeformConv2d {
            offset: Conv2d::zeroed(c_in, 2 * kernel * kernel, kernel, 1),
            main: Conv2d::new(init, c_in, c_out, kernel, 1),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_rank3(x, self.main.in_channels())?;
        let offsets = self.offset.forward(x)?;
        let g = DeformGeometry {
            channels: x.shape()[0],
            height: x.shape()[1],
            width: x.shape()[2],
            kernel: self.main.kernel(),
            padding: self.main.padding,
        };
        let cols = x.deform_im2col(&offsets, &g);
        Ok(self.main.from_cols(&cols, g.out_height(), g.out_width()))
    }
}

impl Module for DeformConv2d {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.offset.visit(f);
        self.main.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.offset.visit_mut(f);
        self.main.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub enum ConvLayer {
    Plain(Conv2d),
    Gated(GatedConv2d),
    Deform(DeformConv2d),
}

impl ConvLayer {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            ConvLayer::Plain(c) => c.forward(x),
            ConvLayer::Gated(c) => c.forward(x),
            ConvLayer::Deform(c) => c.forward(x),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ConvLayer::Plain(_) => "conv",
            ConvLayer::Gated(_) => "gated_conv",
            ConvLayer::Deform(_) => "deform_conv",
        }
    }
}

impl Module for ConvLayer {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        match self {
            ConvLayer::Plain(c) => c.visit(f),
            ConvLayer::Gated(c) => c.visit(f),
            ConvLayer::Deform(c) => c.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        match self {
            ConvLayer::Plain(c) => c.visit_mut(f),
            ConvLayer::Gated(c) => c.visit_mut(f),
            ConvLayer::Deform(c) => c.visit_mut(f),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    /// Batch statistics; with one image per batch these are the per-channel
    /// spatial statistics.
    Batch,
    Instance,
}

/// Per-channel normalization over the spatial axes with a learned affine.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub kind: NormKind,
}

impl Norm {
    const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, channels: usize, kind: NormKind) -> Self {
        Norm { gamma: init.norm_gamma(channels), beta: init.zeros(&[channels]), kind }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_rank3(x, self.gamma.numel())?;
        let rest = &x.shape()[1..];
        let centered = x.sub(&x.channel_mean().channel_expand(rest));
        let std = centered.square().channel_mean().add_scalar(Self::EPS).sqrt();
        Ok(centered.div(&std.channel_expand(rest)).mul_channel(&self.gamma).add_channel_bias(&self.beta))
    }
}

impl Module for Norm {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu(f64),
    Elu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::LeakyRelu(slope) => x.leaky_relu(slope),
            Activation::Elu => x.elu(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::check_module_gradients;

    fn input(c: usize, h: usize, w: usize, phase: f64) -> Tensor {
        Tensor::new((0..c * h * w).map(|i| (i as f64 * 0.37 + phase).sin()).collect(), &[c, h, w])
    }

    #[test]
    fn zero_offsets_reduce_to_plain_conv() {
        let mut init = Init::new(1);
        let d = DeformConv2d::new(&mut init, 3, 4, 3);
        let x = input(3, 7, 6, 0.2);
        let a = d.forward(&x).unwrap();
        let b = d.main.forward(&x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn deform_constant_input_gives_constant_output() {
        let mut init = Init::new(2);
        let mut d = DeformConv2d::new(&mut init, 2, 3, 3);
        d.offset = Conv2d::new(&mut init, 2, 18, 3, 1);
        d.offset.weight = d.offset.weight.mul_scalar(3.0);
        // Padding introduces zeros, so only look at positions whose samples
        // all land well inside the image.
        let x = Tensor::full(&[2, 12, 12], 0.7);
        let y = d.forward(&x).unwrap();
        let off = d.offset.forward(&x).unwrap();
        assert!(off.data().iter().all(|v| v.abs() < 2.0));
        let centre = |c: usize, i: usize, j: usize| y.data()[(c * 12 + i) * 12 + j];
        for c in 0..3 {
            let v = centre(c, 3, 3);
            for i in 3..9 {
                for j in 3..9 {
                    assert!((centre(c, i, j) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deform_unit_shift_moves_impulse() {
        let mut d = DeformConv2d::new(&mut Init::new(0), 1, 1, 3);
        // Main kernel: centre tap only. Offsets: dy = +1 on every tap.
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        d.main.weight = Tensor::new(w, &[1, 1, 3, 3]);
        d.main.bias = Tensor::zeros(&[1]);
        let bias: Vec<f64> = (0..18).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        d.offset.bias = Tensor::new(bias, &[18]);
        let mut x = vec![0.0; 64];
        x[4 * 8 + 5] = 1.0;
        let x = Tensor::new(x, &[1, 8, 8]);
        let y = d.forward(&x).unwrap();
        // Direct gather: out(i, j) = x(i + 1, j).
        for i in 0..8 {
            for j in 0..8 {
                let expect = if i + 1 < 8 { x.data()[(i + 1) * 8 + j] } else { 0.0 };
                assert_eq!(y.data()[i * 8 + j], expect, "({i},{j})");
            }
        }
        assert_eq!(y.data()[3 * 8 + 5], 1.0);
    }

    #[test]
    fn gated_conv_hand_values() {
        let g = GatedConv2d {
            feature: Conv2d { weight: Tensor::new(vec![3.0], &[1, 1, 1, 1]), bias: Tensor::zeros(&[1]), stride: 1, padding: 0 },
            gate: Conv2d { weight: Tensor::new(vec![0.0], &[1, 1, 1, 1]), bias: Tensor::zeros(&[1]), stride: 1, padding: 0 },
        };
        let y = g.forward(&Tensor::new(vec![2.0], &[1, 1, 1])).unwrap();
        assert_eq!(y.data(), &[3.0]);

        let mut open = g.clone();
        open.gate.bias = Tensor::new(vec![50.0], &[1]);
        let x = Tensor::new(vec![2.0, -1.0, 0.5, 4.0], &[1, 2, 2]);
        let y = open.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
        let mut shut = g;
        shut.gate.bias = Tensor::new(vec![-50.0], &[1]);
        assert!(shut.forward(&x).unwrap().data().iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn norm_standardizes_channels() {
        let mut n = Norm::new(&mut Init::new(0), 2, NormKind::Instance);
        n.gamma = Tensor::ones(&[2]);
        let y = n.forward(&input(2, 5, 5, 1.0)).unwrap();
        for ch in y.data().chunks(25) {
            let m: f64 = ch.iter().sum::<f64>() / 25.0;
            let v: f64 = ch.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 25.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut init = Init::new(5);
        let x = input(2, 6, 6, 0.4);
        let probe = input(3, 6, 6, 2.0);
        let conv = Conv2d::new(&mut init, 2, 3, 3, 1);
        let r = check_module_gradients(&conv, |m| m.forward(&x).unwrap().dot(&probe));
        assert!(r.max_rel_error < 1e-3, "conv {r:?}");

        let gated = GatedConv2d::new(&mut init, 2, 3, 3);
        let r = check_module_gradients(&gated, |m| m.forward(&x).unwrap().dot(&probe));
        assert!(r.max_rel_error < 1e-3, "gated {r:?}");

        let mut deform = DeformConv2d::new(&mut init, 2, 3, 3);
        // Non-zero offsets keep sample points off the integer grid, where
        // bilinear interpolation has kinks.
        deform.offset = Conv2d::new(&mut init, 2, 18, 3, 1);
        deform.offset.bias = Tensor::param((0..18).map(|i| 0.13 + 0.05 * i as f64).collect(), &[18]);
        let r = check_module_gradients(&deform, |m| m.forward(&x).unwrap().dot(&probe));
        assert!(r.max_rel_error < 1e-3, "deform {r:?}");

        let norm = Norm::new(&mut init, 2, NormKind::Batch);
        let probe2 = input(2, 6, 6, 3.0);
        let r = check_module_gradients(&norm, |m| m.forward(&x).unwrap().dot(&probe2));
        assert!(r.max_rel_error < 1e-3, "norm {r:?}");
    }
}
