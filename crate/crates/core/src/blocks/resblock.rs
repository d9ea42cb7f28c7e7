use mogan_autograd::Tensor;

use super::attention::ChannelAttention;
use super::layers::{Activation, Conv2d, ConvLayer, DeformConv2d, GatedConv2d, Norm, NormKind};
use super::BlockConfig;
use crate::error::Result;
use crate::params::{Init, Module};

/// `x + attention(conv2(act(norm2(conv1(act(norm1(x)))))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: Norm,
    pub conv1: ConvLayer,
    pub norm2: Norm,
    pub conv2: ConvLayer,
    pub attention: Option<ChannelAttention>,
    pub activation: Activation,
}

impl ResBlock {
    /// BatchNorm and LeakyReLU; the second convolution is deformable when enabled.
    pub fn roi(init: &mut Init, cfg: &BlockConfig) -> Self {
        let (c, k) = (cfg.base_channels, cfg.kernel_size);
        let norm1 = Norm::new(init, c, NormKind::Batch);
        let conv1 = ConvLayer::Plain(Conv2d::new(init, c, c, k, 1));
        let norm2 = Norm::new(init, c, NormKind::Batch);
        let conv2 = if cfg.deform_enabled {
            ConvLayer::Deform(DeformConv2d::new(init, c, c, k))
        } else {
            ConvLayer::Plain(Conv2d::new(init, c, c, k, 1))
        };
        let attention = cfg.attention_enabled.then(|| ChannelAttention::new(init, c));
        ResBlock { norm1, conv1, norm2, conv2, attention, activation: Activation::LeakyRelu(0.2) }
    }

    /// InstanceNorm and ELU; both convolutions gated when enabled.
    pub fn background(init: &mut Init, cfg: &BlockConfig) -> Self {
        let (c, k) = (cfg.base_channels, cfg.kernel_size);
        let conv = |init: &mut Init| {
            if cfg.gated_enabled {
                ConvLayer::Gated(GatedConv2d::new(init, c, c, k))
            } else {
                ConvLayer::Plain(Conv2d::new(init, c, c, k, 1))
            }
        };
        let norm1 = Norm::new(init, c, NormKind::Instance);
        let conv1 = conv(init);
        let norm2 = Norm::new(init, c, NormKind::Instance);
        let conv2 = conv(init);
        let attention = cfg.attention_enabled.then(|| ChannelAttention::new(init, c));
        ResBlock { norm1, conv1, norm2, conv2, attention, activation: Activation::Elu }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.activation.apply(&self.norm1.forward(x)?))?;
        let mut h = self.conv2.forward(&self.activation.apply(&self.norm2.forward(&h)?))?;
        if let Some(att) = &self.attention {
            h = att.forward(&h)?;
        }
        Ok(x.add(&h))
    }
}

impl Module for ResBlock {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.norm1.visit(f);
        self.conv1.visit(f);
        self.norm2.visit(f);
        self.conv2.visit(f);
        self.attention.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.norm1.visit_mut(f);
        self.conv1.visit_mut(f);
        self.norm2.visit_mut(f);
        self.conv2.visit_mut(f);
        self.attention.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::check_module_gradients;

    fn cfg() -> BlockConfig {
        BlockConfig { base_channels: 3, ..BlockConfig::default() }
    }

    fn feature(phase: f64) -> Tensor {
        Tensor::new((0..3 * 36).map(|i| (i as f64 * 0.61 + phase).sin()).collect(), &[3, 6, 6])
    }

    #[test]
    fn composition_follows_branch() {
        let mut init = Init::new(0);
        let roi = ResBlock::roi(&mut init, &cfg());
        assert_eq!((roi.conv1.kind(), roi.conv2.kind()), ("conv", "deform_conv"));
        assert_eq!(roi.norm1.kind, NormKind::Batch);
        assert!(roi.attention.is_some());
        let bg = ResBlock::background(&mut init, &cfg());
        assert_eq!((bg.conv1.kind(), bg.conv2.kind()), ("gated_conv", "gated_conv"));
        assert_eq!(bg.activation, Activation::Elu);
        let plain = ResBlock::roi(&mut init, &BlockConfig { deform_enabled: false, attention_enabled: false, ..cfg() });
        assert_eq!(plain.conv2.kind(), "conv");
        assert!(plain.attention.is_none());
    }

    #[test]
    fn output_shape_is_preserved() {
        let b = ResBlock::background(&mut Init::new(2), &cfg());
        let x = Tensor::new(vec![0.1; 3 * 5 * 7], &[3, 5, 7]);
        assert_eq!(b.forward(&x).unwrap().shape(), &[3, 5, 7]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut init = Init::new(4);
        let x = feature(0.0);
        let probe = feature(1.7);
        for mut block in [ResBlock::roi(&mut init, &cfg()), ResBlock::background(&mut init, &cfg())] {
            if let ConvLayer::Deform(d) = &mut block.conv2 {
                d.offset.bias = Tensor::param((0..18).map(|i| 0.21 + 0.03 * i as f64).collect(), &[18]);
            }
            block.visit_mut(&mut |t| *t = t.mul_scalar(3.0).detach_param());
            let r = check_module_gradients(&block, |m| m.forward(&x).unwrap().dot(&probe));
            assert!(r.max_rel_error < 1e-3, "{r:?}");
        }
    }
}
