//! Images, pyramids, ROI boxes, background masks and ROI/background fusion.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use mogan_autograd::{SparseMap, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB image with channel values in `[0, 1]`, stored channel-planar.
#[derive(Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{})", self.height, self.width)
    }
}

impl Image {
    /// Wraps planar `[3, height, width]` data, validating range and finiteness.
    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!("empty image {height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {height}x{width}, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidImage(format!("value {v} outside [0, 1]")));
        }
        Ok(Image { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        Image { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |_, _, c| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    /// `[3, H, W]` tensor in the generator's `[-1, 1]` value range.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.data.iter().map(|v| v * 2.0 - 1.0).collect(), &[3, self.height, self.width])
    }

    /// Inverse of [`Image::to_tensor`], clamping into range.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::ShapeMismatch { expected: vec![3, 0, 0], actual: s.to_vec() });
        }
        if !t.all_finite() {
            return Err(Error::InvalidImage("non-finite generator output".into()));
        }
        let data = t.data().iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
        Ok(Image { height: s[1], width: s[2], data })
    }

    /// Rounds every value to the nearest `f32`, so that a float32 round trip
    /// through a checkpoint is lossless.
    pub fn quantized_f32(&self) -> Self {
        Image { height: self.height, width: self.width, data: self.data.iter().map(|&v| v as f32 as f64).collect() }
    }

    /// Bilinear resize; antialiased when shrinking.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let map = SparseMap::resize(self.height, self.width, height, width, true);
        let data = map.apply_raw(&self.data).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image { height, width, data }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_rgb8(&image::load_from_memory(bytes)?.to_rgb8()))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self::from_fn(h as usize, w as usize, |y, x, c| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(y as usize, x as usize, c) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        Ok(s / self.data.len() as f64)
    }
}

/// A rectangular region of interest in pixel coordinates, min-inclusive and
/// max-exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoiBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl fmt::Display for RoiBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

impl FromStr for RoiBox {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::RoiParse(s.to_string()))?;
        match parts[..] {
            [x_min, y_min, x_max, y_max] => Ok(RoiBox { x_min, y_min, x_max, y_max }),
            _ => Err(Error::RoiParse(s.to_string())),
        }
    }
}

impl RoiBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        RoiBox { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> usize {
        self.x_max.saturating_sub(self.x_min)
    }

    pub fn height(&self) -> usize {
        self.y_max.saturating_sub(self.y_min)
    }

    /// Checks the box is non-degenerate and fits an image of `height x width`.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::DegenerateRoi(*self));
        }
        if self.x_max > width {
            return Err(Error::RoiOutOfBounds { roi: *self, bound: "x_max <= width" });
        }
        if self.y_max > height {
            return Err(Error::RoiOutOfBounds { roi: *self, bound: "y_max <= height" });
        }
        Ok(())
    }

    pub fn overlaps(&self, other: &RoiBox) -> bool {
        self.x_min < other.x_max && other.x_min < self.x_max && self.y_min < other.y_max && other.y_min < self.y_max
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y_min..self.y_max).contains(&y) && (self.x_min..self.x_max).contains(&x)
    }

    /// Coordinates divided by `factor` and rounded, clamped to the target
    /// image and to at least one pixel of extent.
    pub fn rescaled(&self, factor: f64, height: usize, width: usize) -> RoiBox {
        let fit = |lo: usize, hi: usize, limit: usize| {
            let a = ((lo as f64 / factor).round() as usize).min(limit - 1);
            let b = ((hi as f64 / factor).round() as usize).clamp(a + 1, limit);
            (a, b)
        };
        let (x_min, x_max) = fit(self.x_min, self.x_max, width);
        let (y_min, y_max) = fit(self.y_min, self.y_max, height);
        RoiBox { x_min, y_min, x_max, y_max }
    }
}

/// Rejects invalid or pairwise-overlapping boxes.
pub fn validate_boxes(boxes: &[RoiBox], height: usize, width: usize) -> Result<()> {
    for (i, a) in boxes.iter().enumerate() {
        a.validate(height, width)?;
        if let Some(b) = boxes[..i].iter().find(|b| b.overlaps(a)) {
            return Err(Error::OverlappingRois(*b, *a));
        }
    }
    Ok(())
}

/// Downsampling schedule of the image pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub rescale_factor: f64,
    /// Number of downsamplings; derived from `min_coarse_dim` when absent.
    pub num_scales: Option<usize>,
    pub min_coarse_dim: usize,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        PyramidSpec { rescale_factor: 4.0 / 3.0, num_scales: None, min_coarse_dim: 25 }
    }
}

impl PyramidSpec {
    /// Dimensions of level `n` for a finest image of `height x width`.
    pub fn level_dims(&self, height: usize, width: usize, n: usize) -> (usize, usize) {
        let s = self.rescale_factor.powi(n as i32);
        ((height as f64 / s).round() as usize, (width as f64 / s).round() as usize)
    }

    /// Largest admissible number of downsamplings for the given size.
    pub fn max_scales(&self, height: usize, width: usize) -> Result<usize> {
        self.check_factor()?;
        let fits = |n| {
            let (h, w) = self.level_dims(height, width, n);
            h.min(w) >= self.min_coarse_dim
        };
        if !fits(0) {
            return Err(Error::Pyramid(format!(
                "{height}x{width} is below the minimum dimension {}",
                self.min_coarse_dim
            )));
        }
        let mut n = 0;
        while fits(n + 1) {
            n += 1;
        }
        Ok(n)
    }

    /// The number of downsamplings to use for the given size.
    pub fn resolve(&self, height: usize, width: usize) -> Result<usize> {
        let max = self.max_scales(height, width)?;
        match self.num_scales {
            None => Ok(max),
            Some(n) if n <= max => Ok(n),
            Some(n) => {
                let (h, w) = self.level_dims(height, width, n);
                Err(Error::Pyramid(format!(
                    "{n} downsamplings of {height}x{width} give {h}x{w}, below {}",
                    self.min_coarse_dim
                )))
            }
        }
    }

    fn check_factor(&self) -> Result<()> {
        if !(self.rescale_factor.is_finite() && self.rescale_factor > 1.0) {
            return Err(Error::Pyramid(format!("rescale factor {} must exceed 1", self.rescale_factor)));
        }
        Ok(())
    }
}

/// Levels `[I_0 .. I_N]`, finest first; each level is resampled from the input.
pub fn build_pyramid(image: &Image, spec: &PyramidSpec) -> Result<Vec<Image>> {
    let n = spec.resolve(image.height, image.width)?;
    Ok((0..=n)
        .map(|i| {
            let (h, w) = spec.level_dims(image.height, image.width, i);
            image.resize(h, w)
        })
        .collect())
}

pub fn crop_roi(image: &Image, roi: &RoiBox) -> Result<Image> {
    roi.validate(image.height, image.width)?;
    let (h, w) = (roi.height(), roi.width());
    Ok(Image::from_fn(h, w, |y, x, c| image.get(y + roi.y_min, x + roi.x_min, c)))
}

/// Writes `patch` into `target` at `roi`.
pub fn paste_roi(target: &Image, patch: &Image, roi: &RoiBox) -> Result<Image> {
    roi.validate(target.height, target.width)?;
    if patch.dims() != (roi.height(), roi.width()) {
        return Err(Error::DimensionMismatch(format!("patch {:?} for box {roi}", patch.dims())));
    }
    let mut out = target.clone();
    for c in 0..3 {
        for y in 0..roi.height() {
            for x in 0..roi.width() {
                out.set(y + roi.y_min, x + roi.x_min, c, patch.get(y, x, c));
            }
        }
    }
    Ok(out)
}

/// Binary mask: `true` marks visible background, `false` hidden ROI pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    visible: Vec<bool>,
}

impl Mask {
    /// Background mask for `boxes`, which may touch or overlap.
    pub fn from_boxes(height: usize, width: usize, boxes: &[RoiBox]) -> Self {
        let mut visible = vec![true; height * width];
        for b in boxes {
            for y in b.y_min..b.y_max.min(height) {
                for x in b.x_min..b.x_max.min(width) {
                    visible[y * width + x] = false;
                }
            }
        }
        Mask { height, width, visible }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_visible(&self, y: usize, x: usize) -> bool {
        self.visible[y * self.width + x]
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    pub fn hidden_count(&self) -> usize {
        self.visible.len() - self.visible_count()
    }

    /// `[3, H, W]` tensor of ones (visible) and zeros (hidden).
    pub fn to_tensor(&self) -> Tensor {
        let plane: Vec<f64> = self.visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let data = [plane.as_slice(), plane.as_slice(), plane.as_slice()].concat();
        Tensor::new(data, &[3, self.height, self.width])
    }

    /// Zeroes hidden pixels of `image`.
    pub fn apply(&self, image: &Image) -> Result<Image> {
        if image.dims() != self.dims() {
            return Err(Error::DimensionMismatch(format!("mask {:?} vs image {:?}", self.dims(), image.dims())));
        }
        let mut out = image.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    if !self.is_visible(y, x) {
                        out.set(y, x, c, 0.0);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Single-channel PNG with 255 for visible and 0 for hidden pixels.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.is_visible(y as usize, x as usize) { 255 } else { 0 }])
        });
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let visible = img.pixels().map(|p| p[0] >= 128).collect();
        Ok(Mask { height: h as usize, width: w as usize, visible })
    }
}

/// An image with its background mask; hidden pixels are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedImage {
    pub image: Image,
    pub mask: Mask,
}

pub fn mask_background(image: &Image, boxes: &[RoiBox]) -> Result<MaskedImage> {
    validate_boxes(boxes, image.height, image.width)?;
    let mask = Mask::from_boxes(image.height, image.width, boxes);
    Ok(MaskedImage { image: mask.apply(image)?, mask })
}

/// Weight of the ROI sample at `(y, x)` inside an `h x w` box: a linear ramp
/// from `1 / (band + 1)` at the border to 1 at depth `band`.
pub fn fuse_weight(y: usize, x: usize, h: usize, w: usize, band_px: usize) -> f64 {
    let depth = y.min(h - 1 - y).min(x).min(w - 1 - x);
    ((depth + 1) as f64 / (band_px + 1) as f64).min(1.0)
}

/// Composites ROI samples over the background, cross-fading a band of
/// `band_px` pixels along each box border.
pub fn fuse(roi_samples: &[(Image, RoiBox)], background: &Image, band_px: usize) -> Result<Image> {
    let mut out = background.clone();
    for (sample, roi) in roi_samples {
        roi.validate(background.height, background.width)?;
        if sample.dims() != (roi.height(), roi.width()) {
            return Err(Error::DimensionMismatch(format!("ROI sample {:?} for box {roi}", sample.dims())));
        }
        let (h, w) = sample.dims();
        for y in 0..h {
            for x in 0..w {
                let a = fuse_weight(y, x, h, w, band_px);
                for c in 0..3 {
                    let bg = background.get(y + roi.y_min, x + roi.x_min, c);
                    out.set(y + roi.y_min, x + roi.x_min, c, a * sample.get(y, x, c) + (1.0 - a) * bg);
                }
            }
        }
    }
    Ok(out)
}
