//! Network building blocks shared by both branches.
//!
//! Every block works on a single `[C, H, W]` feature map; there is no batch
//! axis because training always sees one image.

mod attention;
mod discriminator;
mod injector;
mod layers;
mod resblock;

pub use attention::ChannelAttention;
pub use discriminator::MarkovianDiscriminator;
pub use injector::{modulate, Bypass, StyleInjector, StyleParams};
pub use layers::{Activation, Conv2d, ConvLayer, DeformConv2d, GatedConv2d, Norm, NormKind};
pub use resblock::ResBlock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub base_channels: usize,
    pub kernel_size: usize,
    pub num_resblocks: usize,
    pub attention_enabled: bool,
    pub deform_enabled: bool,
    pub gated_enabled: bool,
    pub injector_enabled: bool,
    /// Scales `(w - 1)` and `b` before modulation.
    pub injector_damping: f64,
    pub discriminator_layers: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            base_channels: 32,
            kernel_size: 3,
            num_resblocks: 3,
            attention_enabled: true,
            deform_enabled: true,
            gated_enabled: true,
            injector_enabled: true,
            injector_damping: 1.0,
            discriminator_layers: 5,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_resblocks == 0 {
            return Err(Error::InvalidArgument("num_resblocks must be at least 1".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("kernel_size {} must be odd", self.kernel_size)));
        }
        if self.base_channels == 0 || self.discriminator_layers < 2 {
            return Err(Error::InvalidArgument("need channels > 0 and at least 2 discriminator layers".into()));
        }
        if !(self.injector_damping > 0.0 && self.injector_damping <= 1.0) {
            return Err(Error::InvalidArgument(format!("injector damping {} outside (0, 1]", self.injector_damping)));
        }
        Ok(())
    }
}
