use mogan_autograd::Tensor;

use super::layers::{check_rank3, Conv2d};
use crate::error::{Error, Result};
use crate::params::{Init, Module};

/// Multiplicative and additive maps applied to a `[C, H, W]` feature map.
#[derive(Clone, Debug)]
pub struct StyleParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl StyleParams {
    pub fn identity(shape: &[usize]) -> Self {
        StyleParams { w: Tensor::ones(shape), b: Tensor::zeros(shape) }
    }
}

/// `w * x + b`, elementwise.
pub fn modulate(x: &Tensor, s: &StyleParams) -> Result<Tensor> {
    for t in [&s.w, &s.b] {
        if t.shape() != x.shape() {
            return Err(Error::ShapeMismatch { expected: x.shape().to_vec(), actual: t.shape().to_vec() });
        }
    }
    Ok(x.mul(&s.w).add(&s.b))
}

/// Lightweight encoder: two stride-2 stages, then a residual refinement,
/// then bilinear resize to the target resolution.
#[derive(Clone, Debug)]
pub struct Bypass {
    pub down1: Conv2d,
    pub down2: Conv2d,
    pub refine: Conv2d,
}

impl Bypass {
    fn new(init: &mut Init, channels: usize, kernel: usize) -> Self {
        Bypass {
            down1: Conv2d::new(init, 3, channels, kernel, 2),
            down2: Conv2d::new(init, channels, channels, kernel, 2),
            refine: Conv2d::new(init, channels, channels, kernel, 1),
        }
    }

    fn forward(&self, image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        let e1 = self.down1.forward(image)?.leaky_relu(0.2);
        let e2 = self.down2.forward(&e1)?.leaky_relu(0.2);
        let e3 = e2.add(&self.refine.forward(&e2)?);
        Ok(e3.resize_bilinear(height, width))
    }
}

impl Module for Bypass {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.down1.visit(f);
        self.down2.visit(f);
        self.refine.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.down1.visit_mut(f);
        self.down2.visit_mut(f);
        self.refine.visit_mut(f);
    }
}

/// Encodes an augmented image into [`StyleParams`] through two independent
/// bypasses, one for the weight and one for the bias.
#[derive(Clone, Debug)]
pub struct StyleInjector {
    pub weight: Bypass,
    pub bias: Bypass,
    pub damping: f64,
}

impl StyleInjector {
    pub fn new(init: &mut Init, channels: usize, kernel: usize, damping: f64) -> Self {
        StyleInjector { weight: Bypass::new(init, channels, kernel), bias: Bypass::new(init, channels, kernel), damping }
    }

    pub fn channels(&self) -> usize {
        self.weight.refine.out_channels()
    }

    /// `aug_image` is `[3, H, W]`; `target` is the `(C, H, W)` of the
    /// feature map to modulate.
    pub fn forward(&self, aug_image: &Tensor, target: (usize, usize, usize)) -> Result<StyleParams> {
        check_rank3(aug_image, 3)?;
        let (c, h, w) = target;
        if c != self.channels() {
            return Err(Error::ShapeMismatch { expected: vec![self.channels(), h, w], actual: vec![c, h, w] });
        }
        let w_raw = self.weight.forward(aug_image, h, w)?;
        let b_raw = self.bias.forward(aug_image, h, w)?;
        let w_map = w_raw.mul_scalar(self.damping).add_scalar(1.0);
        let b_map = b_raw.mul_scalar(self.damping);
        if w_map.shape() != [c, h, w] {
            return Err(Error::ShapeMismatch { expected: vec![c, h, w], actual: w_map.shape().to_vec() });
        }
        Ok(StyleParams { w: w_map, b: b_map })
    }
}

impl Module for StyleInjector {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.weight.visit(f);
        self.bias.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.weight.visit_mut(f);
        self.bias.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{check_module_gradients, digest};

    fn image(h: usize, w: usize, phase: f64) -> Tensor {
        Tensor::new((0..3 * h * w).map(|i| (i as f64 * 0.41 + phase).sin() * 0.9).collect(), &[3, h, w])
    }

    #[test]
    fn modulate_hand_values() {
        let x = Tensor::new(vec![1.0, 2.0], &[1, 1, 2]);
        let s = StyleParams { w: Tensor::new(vec![2.0, 3.0], &[1, 1, 2]), b: Tensor::new(vec![1.0, -1.0], &[1, 1, 2]) };
        assert_eq!(modulate(&x, &s).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(modulate(&x, &StyleParams::identity(&[1, 1, 2])).unwrap().data(), x.data());
        let flat = StyleParams { w: Tensor::zeros(&[1, 1, 2]), b: Tensor::full(&[1, 1, 2], 0.25) };
        assert_eq!(modulate(&x, &flat).unwrap().data(), &[0.25, 0.25]);
        assert!(modulate(&x, &StyleParams::identity(&[1, 2, 1])).is_err());
    }

    #[test]
    fn zero_injector_is_identity() {
        let mut inj = StyleInjector::new(&mut Init::new(0), 4, 3, 1.0);
        inj.visit_mut(&mut |t| *t = Tensor::zeros(t.shape()));
        let s = inj.forward(&image(9, 11, 0.0), (4, 9, 11)).unwrap();
        let x = Tensor::new((0..4 * 99).map(|i| i as f64).collect(), &[4, 9, 11]);
        assert_eq!(modulate(&x, &s).unwrap().data(), x.data());
    }

    #[test]
    fn different_images_give_different_params() {
        let inj = StyleInjector::new(&mut Init::new(7), 4, 3, 1.0);
        let a = inj.forward(&image(8, 8, 0.0), (4, 8, 8)).unwrap();
        let b = inj.forward(&image(8, 8, 1.3), (4, 8, 8)).unwrap();
        assert_ne!(a.w.data(), b.w.data());
        assert_ne!(a.b.data(), b.b.data());
        // The two bypasses share nothing.
        assert_ne!(digest(&inj.weight), digest(&inj.bias));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let inj = StyleInjector::new(&mut Init::new(1), 4, 3, 1.0);
        assert!(inj.forward(&image(8, 8, 0.0), (5, 8, 8)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut init = Init::new(11);
        let mut inj = StyleInjector::new(&mut init, 3, 3, 0.7);
        // Larger weights keep activations away from the LeakyReLU kink scale.
        inj.visit_mut(&mut |t| *t = t.mul_scalar(20.0).detach_param());
        let img = image(8, 8, 0.3);
        let probe_w = image(8, 8, 2.1);
        let probe_b = image(8, 8, 4.2);
        let r = check_module_gradients(&inj, |m| {
            let s = m.forward(&img, (3, 8, 8)).unwrap();
            s.w.dot(&probe_w).add(&s.b.dot(&probe_b))
        });
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
