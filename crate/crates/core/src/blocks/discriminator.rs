use mogan_autograd::Tensor;

use super::layers::Conv2d;
use super::BlockConfig;
use crate::error::{Error, Result};
use crate::params::{Init, Module};

/// Fully convolutional patch critic: `layers` same-padded convolutions with
/// LeakyReLU between them and a single-channel score map at the end.
#[derive(Clone, Debug)]
pub struct MarkovianDiscriminator {
    pub convs: Vec<Conv2d>,
}

impl MarkovianDiscriminator {
    pub fn new(init: &mut Init, cfg: &BlockConfig) -> Self {
        let (c, k, n) = (cfg.base_channels, cfg.kernel_size, cfg.discriminator_layers);
        let convs = (0..n)
            .map(|i| {
                let c_in = if i == 0 { 3 } else { c };
                let c_out = if i + 1 == n { 1 } else { c };
                Conv2d::new(init, c_in, c_out, k, 1)
            })
            .collect();
        MarkovianDiscriminator { convs }
    }

    /// Side of the input square that influences one output score.
    pub fn receptive_field(&self) -> usize {
        1 + self.convs.iter().map(|c| c.kernel() - 1).sum::<usize>()
    }

    /// Score map `[1, H, W]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let field = self.receptive_field();
        let size = x.shape().get(1..3).map(|s| s[0].min(s[1])).unwrap_or(0);
        if size < field {
            return Err(Error::BelowReceptiveField { size, field });
        }
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i + 1 < self.convs.len() {
                h = h.leaky_relu(0.2);
            }
        }
        Ok(h)
    }

    /// Mean of the score map.
    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.mean_all())
    }
}

impl Module for MarkovianDiscriminator {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.convs.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.convs.visit_mut(f);
    }
}
