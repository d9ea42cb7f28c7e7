//! Structure-preserving augmentations fed to the style injectors, each with a
//! continuous `level` in `[0, 1]`.
//!
//! A descriptor's `level` sets the magnitude of its transform; its `seed`
//! fixes the secondary random choices (rotation direction, shear axes,
//! perspective corners, erased rectangle placement). Holding the seed fixed
//! while sweeping the level therefore moves smoothly through one family of
//! transforms, which is what animation relies on.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Identity,
    Vflip,
    Hflip,
    Rotation,
    Affine,
    Perspective,
    Erasing,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 7] = [
        AugmentKind::Identity,
        AugmentKind::Vflip,
        AugmentKind::Hflip,
        AugmentKind::Rotation,
        AugmentKind::Affine,
        AugmentKind::Perspective,
        AugmentKind::Erasing,
    ];

    /// The transforms used while training the ROI branch.
    pub const TRAINING: [AugmentKind; 6] = [
        AugmentKind::Vflip,
        AugmentKind::Hflip,
        AugmentKind::Rotation,
        AugmentKind::Affine,
        AugmentKind::Perspective,
        AugmentKind::Erasing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Identity => "identity",
            AugmentKind::Vflip => "vflip",
            AugmentKind::Hflip => "hflip",
            AugmentKind::Rotation => "rotation",
            AugmentKind::Affine => "affine",
            AugmentKind::Perspective => "perspective",
            AugmentKind::Erasing => "erasing",
        }
    }

    pub fn is_geometric(self) -> bool {
        matches!(self, AugmentKind::Rotation | AugmentKind::Affine | AugmentKind::Perspective)
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownAugmentKind(s.to_string()))
    }
}

/// One concrete augmentation. Serializes as `{kind, level, seed}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentDescriptor {
    pub kind: AugmentKind,
    pub level: f64,
    pub seed: u64,
}

impl AugmentDescriptor {
    pub fn identity() -> Self {
        AugmentDescriptor { kind: AugmentKind::Identity, level: 0.0, seed: 0 }
    }

    pub fn new(kind: AugmentKind, level: f64, seed: u64) -> Result<Self> {
        let d = AugmentDescriptor { kind, level, seed };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.level) {
            return Err(Error::InvalidArgument(format!("augmentation level {} outside [0, 1]", self.level)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.kind == AugmentKind::Identity || self.level == 0.0
    }
}

/// Maximum magnitudes reached at level 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentMagnitudes {
    pub rotation_deg: f64,
    /// Shear factor and translation as a fraction of the image size.
    pub affine: f64,
    /// Corner displacement as a fraction of the half-size.
    pub perspective: f64,
    pub erase_fraction: f64,
}

impl Default for AugmentMagnitudes {
    fn default() -> Self {
        AugmentMagnitudes { rotation_deg: 30.0, affine: 0.1, perspective: 0.2, erase_fraction: 0.2 }
    }
}

/// A descriptor resolved into explicit transform parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    Identity,
    Vflip,
    Hflip,
    /// Counter-clockwise in display coordinates, about the image center.
    Rotate { degrees: f64 },
    /// Shear then translate, about the image center.
    Affine { shear_x: f64, shear_y: f64, tx: f64, ty: f64 },
    /// Maps the image corners (tl, tr, br, bl) to these points.
    Perspective { corners: [(f64, f64); 4] },
    /// Zero-fills rows `y0..y1`, columns `x0..x1`.
    Erase { y0: usize, x0: usize, y1: usize, x1: usize },
}

impl AugmentDescriptor {
    pub fn resolve(&self, height: usize, width: usize, mag: &AugmentMagnitudes) -> Transform {
        if self.is_identity() {
            return Transform::Identity;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let l = self.level;
        match self.kind {
            AugmentKind::Identity => Transform::Identity,
            AugmentKind::Vflip if l >= 0.5 => Transform::Vflip,
            AugmentKind::Hflip if l >= 0.5 => Transform::Hflip,
            AugmentKind::Vflip | AugmentKind::Hflip => Transform::Identity,
            AugmentKind::Rotation => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                Transform::Rotate { degrees: sign * l * mag.rotation_deg }
            }
            AugmentKind::Affine => {
                let mut u = || rng.random_range(-1.0..=1.0);
                let a = l * mag.affine;
                Transform::Affine {
                    shear_x: a * u(),
                    shear_y: a * u(),
                    tx: a * u() * width as f64,
                    ty: a * u() * height as f64,
                }
            }
            AugmentKind::Perspective => {
                let (hw, hh) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
                let d = l * mag.perspective;
                let mut u = || rng.random_range(0.0..=1.0);
                let (w1, h1) = (width as f64 - 1.0, height as f64 - 1.0);
                let corners = [
                    (d * hw * u(), d * hh * u()),
                    (w1 - d * hw * u(), d * hh * u()),
                    (w1 - d * hw * u(), h1 - d * hh * u()),
                    (d * hw * u(), h1 - d * hh * u()),
                ];
                Transform::Perspective { corners }
            }
            AugmentKind::Erasing => {
                let area = l * mag.erase_fraction * (height * width) as f64;
                let aspect = (rng.random_range(0.5f64.ln()..=2.0f64.ln())).exp();
                let eh = ((area * aspect).sqrt().round() as usize).min(height);
                let ew = ((area / aspect).sqrt().round() as usize).min(width);
                let y0 = ((height - eh) as f64 * rng.random::<f64>()).round() as usize;
                let x0 = ((width - ew) as f64 * rng.random::<f64>()).round() as usize;
                Transform::Erase { y0, x0, y1: y0 + eh, x1: x0 + ew }
            }
        }
    }
}

/// Applies the descriptor with default magnitudes.
pub fn apply(image: &Image, desc: &AugmentDescriptor) -> Result<Image> {
    apply_with(image, desc, &AugmentMagnitudes::default())
}

pub fn apply_with(image: &Image, desc: &AugmentDescriptor, mag: &AugmentMagnitudes) -> Result<Image> {
    desc.validate()?;
    let (h, w) = image.dims();
    Ok(match desc.resolve(h, w, mag) {
        Transform::Identity => image.clone(),
        Transform::Vflip => Image::from_fn(h, w, |y, x, c| image.get(h - 1 - y, x, c)),
        Transform::Hflip => Image::from_fn(h, w, |y, x, c| image.get(y, w - 1 - x, c)),
        Transform::Rotate { degrees } => {
            let (s, co) = degrees.to_radians().sin_cos();
            let (cx, cy) = center(h, w);
            // Inverse rotation of the destination pixel.
            warp(image, |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                (co * dx - s * dy + cx, s * dx + co * dy + cy)
            })
        }
        Transform::Affine { shear_x, shear_y, tx, ty } => {
            let (cx, cy) = center(h, w);
            let det = 1.0 - shear_x * shear_y;
            warp(image, |x, y| {
                let (dx, dy) = (x - cx - tx, y - cy - ty);
                ((dx - shear_x * dy) / det + cx, (dy - shear_y * dx) / det + cy)
            })
        }
        Transform::Perspective { corners } => {
            let (w1, h1) = (w as f64 - 1.0, h as f64 - 1.0);
            let src = [(0.0, 0.0), (w1, 0.0), (w1, h1), (0.0, h1)];
            // Homography from output positions back to source positions.
            let hm = homography(&corners, &src)
                .ok_or_else(|| Error::InvalidArgument("degenerate perspective corners".into()))?;
            warp(image, |x, y| {
                let d = hm[6] * x + hm[7] * y + 1.0;
                ((hm[0] * x + hm[1] * y + hm[2]) / d, (hm[3] * x + hm[4] * y + hm[5]) / d)
            })
        }
        Transform::Erase { y0, x0, y1, x1 } => {
            Image::from_fn(h, w, |y, x, c| if (y0..y1).contains(&y) && (x0..x1).contains(&x) { 0.0 } else { image.get(y, x, c) })
        }
    })
}

fn center(h: usize, w: usize) -> (f64, f64) {
    ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
}

/// Resamples `image` at `inverse(x, y)` for every destination pixel, with
/// bilinear interpolation. Points outside the source rectangle become zero.
pub(crate) fn warp(image: &Image, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let (h, w) = image.dims();
    let mut out = Image::filled(h, w, [0.0; 3]);
    let (wf, hf) = (w as f64 - 1.0, h as f64 - 1.0);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inverse(x as f64, y as f64);
            if !(sx >= 0.0 && sy >= 0.0 && sx <= wf && sy <= hf) {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..3 {
                let v = (1.0 - fy) * ((1.0 - fx) * image.get(y0, x0, c) + fx * image.get(y0, x1, c))
                    + fy * ((1.0 - fx) * image.get(y1, x0, c) + fx * image.get(y1, x1, c));
                out.set(y, x, c, v);
            }
        }
    }
    out
}

/// Solves for the 8 homography coefficients taking each `from[i]` to `to[i]`.
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Option<[f64; 8]> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let ((x, y), (u, v)) = (from[i], to[i]);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gauss-Jordan with partial pivoting on the augmented matrix.
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        let p = a[col][col];
        a[col].iter_mut().for_each(|v| *v /= p);
        for row in 0..8 {
            if row != col {
                let f = a[row][col];
                if f != 0.0 {
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    let mut h = [0.0; 8];
    for (i, hv) in h.iter_mut().enumerate() {
        *hv = a[i][8];
    }
    Some(h)
}

/// Draws a kind uniformly from `allowed` and a level uniformly from `[0, 1]`.
pub fn sample_descriptor(rng_seed: u64, allowed_kinds: &[AugmentKind]) -> Result<AugmentDescriptor> {
    if allowed_kinds.is_empty() {
        return Err(Error::InvalidArgument("no augmentation kinds allowed".into()));
    }
    let mut kinds = allowed_kinds.to_vec();
    kinds.sort();
    kinds.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let kind = kinds[rng.random_range(0..kinds.len())];
    let level = rng.random::<f64>();
    let seed = rng.random::<u64>();
    if kind == AugmentKind::Identity {
        return Ok(AugmentDescriptor::identity());
    }
    Ok(AugmentDescriptor { kind, level, seed })
}

/// `num_frames` descriptors of one kind with levels evenly spaced over
/// `[0, level_max]` and a shared seed.
pub fn level_schedule(kind: AugmentKind, num_frames: usize, level_max: f64, seed: u64) -> Result<Vec<AugmentDescriptor>> {
    if num_frames < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 frames, got {num_frames}")));
    }
    if !(0.0..=1.0).contains(&level_max) {
        return Err(Error::InvalidArgument(format!("level_max {level_max} outside [0, 1]")));
    }
    let last = (num_frames - 1) as f64;
    Ok((0..num_frames)
        .map(|i| AugmentDescriptor { kind, level: level_max * i as f64 / last, seed })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| 0.2 + 0.8 * (0.5 + 0.5 * ((x as f64 * 0.3 + c as f64).sin() * (y as f64 * 0.2).cos())))
    }

    #[test]
    fn identity_and_level_zero() {
        let img = textured(20, 24);
        assert_eq!(apply(&img, &AugmentDescriptor::identity()).unwrap(), img);
        for kind in AugmentKind::ALL {
            assert_eq!(apply(&img, &AugmentDescriptor { kind, level: 0.0, seed: 9 }).unwrap(), img, "{kind}");
        }
    }

    #[test]
    fn flips_are_involutions() {
        let img = textured(13, 17);
        for kind in [AugmentKind::Hflip, AugmentKind::Vflip] {
            let d = AugmentDescriptor { kind, level: 1.0, seed: 3 };
            let once = apply(&img, &d).unwrap();
            assert_ne!(once, img);
            assert_eq!(apply(&once, &d).unwrap(), img);
        }
    }

    #[test]
    fn rotation_zero_fill_matches_rasterized_corners() {
        let img = textured(64, 64);
        let d = AugmentDescriptor { kind: AugmentKind::Rotation, level: 1.0 / 3.0, seed: 1 };
        let Transform::Rotate { degrees } = d.resolve(64, 64, &AugmentMagnitudes::default()) else { panic!() };
        assert!((degrees.abs() - 10.0).abs() < 1e-12);
        let out = apply(&img, &d).unwrap();
        let zeros = (0..64).flat_map(|y| (0..64).map(move |x| (y, x))).filter(|&(y, x)| out.get(y, x, 0) == 0.0).count();
        // Rasterize: a destination pixel is vacant when its pre-image lies
        // outside the source square.
        let t = (-degrees).to_radians();
        let c = 31.5;
        let mut expect = 0;
        for y in 0..64 {
            for x in 0..64 {
                let (px, py) = (x as f64 - c, y as f64 - c);
                let sx = px * t.cos() + py * t.sin() + c;
                let sy = -px * t.sin() + py * t.cos() + c;
                if !(0.0..=63.0).contains(&sx) || !(0.0..=63.0).contains(&sy) {
                    expect += 1;
                }
            }
        }
        assert!(expect > 100);
        assert_eq!(zeros, expect);
    }

    #[test]
    fn geometric_transforms_are_deterministic_and_change_pixels() {
        let img = textured(32, 40);
        for kind in [AugmentKind::Rotation, AugmentKind::Affine, AugmentKind::Perspective, AugmentKind::Erasing] {
            let d = AugmentDescriptor { kind, level: 0.8, seed: 42 };
            let a = apply(&img, &d).unwrap();
            assert_eq!(a, apply(&img, &d).unwrap());
            assert_eq!(a.dims(), img.dims());
            assert!(a.mean_abs_diff(&img).unwrap() > 1e-3, "{kind}");
        }
    }

    #[test]
    fn erasing_area_follows_level() {
        let img = textured(50, 50);
        let d = AugmentDescriptor { kind: AugmentKind::Erasing, level: 0.5, seed: 7 };
        let Transform::Erase { y0, x0, y1, x1 } = d.resolve(50, 50, &AugmentMagnitudes::default()) else { panic!() };
        let frac = ((y1 - y0) * (x1 - x0)) as f64 / 2500.0;
        assert!((frac - 0.1).abs() < 0.02, "{frac}");
        assert!(y1 <= 50 && x1 <= 50);
        let _ = apply(&img, &d).unwrap();
    }

    #[test]
    fn perspective_identity_corners_reproduce_image() {
        let img = textured(16, 16);
        let src = [(0.0, 0.0), (15.0, 0.0), (15.0, 15.0), (0.0, 15.0)];
        let h = homography(&src, &src).unwrap();
        let expect = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        for (a, b) in h.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let out = warp(&img, |x, y| (x, y));
        assert_eq!(out, img);
    }

    #[test]
    fn sample_descriptor_cases() {
        assert!(sample_descriptor(1, &[]).is_err());
        for seed in 0..20 {
            assert!(sample_descriptor(seed, &[AugmentKind::Identity]).unwrap().is_identity());
        }
        assert_eq!(
            sample_descriptor(5, &AugmentKind::TRAINING).unwrap(),
            sample_descriptor(5, &AugmentKind::TRAINING).unwrap()
        );
    }

    #[test]
    fn kind_frequencies_are_balanced() {
        let n = 10_000;
        let kinds = [AugmentKind::Hflip, AugmentKind::Rotation];
        let hits = (0..n).filter(|&s| sample_descriptor(s, &kinds).unwrap().kind == AugmentKind::Hflip).count();
        // Binomial(n, 1/2): three standard deviations is 1.5 * sqrt(n).
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((hits as f64 - n as f64 * 0.5).abs() < 3.0 * sigma, "{hits}");
    }

    #[test]
    fn schedules() {
        let s = level_schedule(AugmentKind::Rotation, 2, 0.7, 0).unwrap();
        assert_eq!(s.iter().map(|d| d.level).collect::<Vec<_>>(), vec![0.0, 0.7]);
        let s = level_schedule(AugmentKind::Affine, 5, 1.0, 0).unwrap();
        assert_eq!(s.iter().map(|d| d.level).collect::<Vec<_>>(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(level_schedule(AugmentKind::Affine, 1, 1.0, 0).is_err());
        assert!(level_schedule(AugmentKind::Affine, 3, 1.5, 0).is_err());

        let s = level_schedule(AugmentKind::Rotation, 9, 2.0 / 3.0, 11).unwrap();
        let mag = AugmentMagnitudes::default();
        let angles: Vec<f64> = s
            .iter()
            .map(|d| match d.resolve(32, 32, &mag) {
                Transform::Rotate { degrees } => degrees.abs(),
                Transform::Identity => 0.0,
                t => panic!("{t:?}"),
            })
            .collect();
        assert!(angles.windows(2).all(|w| w[1] > w[0]));
        assert!((angles[8] - 20.0).abs() < 1e-9);
    }

    #[test]
    fn consecutive_frames_get_closer_with_more_frames() {
        let img = textured(32, 32);
        let step_diff = |frames: usize| -> f64 {
            let s = level_schedule(AugmentKind::Rotation, frames, 1.0, 2).unwrap();
            let imgs: Vec<Image> = s.iter().map(|d| apply(&img, d).unwrap()).collect();
            imgs.windows(2).map(|p| p[0].mean_abs_diff(&p[1]).unwrap()).fold(0.0, f64::max)
        };
        let (coarse, fine) = (step_diff(4), step_diff(16));
        assert!(fine < coarse, "{fine} vs {coarse}");
        assert!(coarse < 0.5);
    }

    #[test]
    fn descriptor_json_shape() {
        let d = AugmentDescriptor { kind: AugmentKind::Perspective, level: 0.25, seed: 17 };
        let j = serde_json::to_value(d).unwrap();
        assert_eq!(j, serde_json::json!({"kind": "perspective", "level": 0.25, "seed": 17}));
        assert!("spin".parse::<AugmentKind>().is_err());
        assert_eq!("HFLIP".parse::<AugmentKind>().unwrap(), AugmentKind::Hflip);
    }
}
