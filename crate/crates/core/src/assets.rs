//! Small bundled images for examples and tests.

use crate::error::Result;
use crate::imaging::{Image, RoiBox};

/// 64x64 scene: an orange on grass under a sky.
pub const TOY64_PNG: &[u8] = include_bytes!("../assets/toy64.png");

/// The same scene downsampled to 32x32.
pub const TOY32_PNG: &[u8] = include_bytes!("../assets/toy32.png");

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    Image::decode(bytes)
}

pub fn toy64() -> Image {
    decode_png(TOY64_PNG).expect("bundled image decodes")
}

/// Box around the orange in [`toy64`].
pub fn toy64_roi() -> RoiBox {
    RoiBox::new(14, 16, 50, 52)
}

pub fn toy32() -> Image {
    decode_png(TOY32_PNG).expect("bundled image decodes")
}

/// Box around the orange in [`toy32`].
pub fn toy32_roi() -> RoiBox {
    RoiBox::new(3, 4, 29, 30)
}
