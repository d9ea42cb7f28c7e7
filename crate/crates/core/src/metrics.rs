//! Sample quality metrics: single-image Fréchet distance over internal
//! features, pixelwise coefficient-of-variation diversity and their ratio.

use std::fmt;

use mogan_autograd::{no_grad, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::blocks::Conv2d;
use crate::error::{Error, Result};
use crate::imaging::{crop_roi, Image, Mask};
use crate::model::MoganModel;
use crate::params::{decode_tensors, digest, Init, Module};
use crate::seed::derive_seed;

/// Added to both covariance diagonals before the matrix square root.
pub const COVARIANCE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    InceptionEarlyLayer,
    FixedRandomConvnet,
    RawPatches,
}

/// Point cloud of feature vectors: `samples` rows of `dim` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Metrics(format!("{} values do not form rows of {dim}", data.len())));
        }
        Ok(Features { dim, data })
    }

    /// Spatial positions of a `[C, H, W]` map as samples of dimension `C`.
    pub fn from_map(map: &Tensor) -> Result<Self> {
        let s = map.shape();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch { expected: vec![0, 0, 0], actual: s.to_vec() });
        }
        let (c, p) = (s[0], s[1] * s[2]);
        let d = map.data();
        Features::new(c, (0..p).flat_map(|i| (0..c).map(move |k| d[k * p + i])).collect())
    }

    pub fn samples(&self) -> usize {
        self.data.len() / self.dim
    }

    /// Mean vector and unbiased covariance.
    pub fn statistics(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.samples();
        if n < 2 {
            return Err(Error::Metrics(format!("need at least 2 feature samples, got {n}")));
        }
        let m = DMatrix::from_row_slice(n, self.dim, &self.data);
        let mean = m.row_mean().transpose();
        let centered = DMatrix::from_fn(n, self.dim, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok((mean, cov))
    }
}

pub trait FeatureExtractor: Send + Sync {
    fn kind(&self) -> ExtractorKind;
    /// Identifies the extractor's parameters.
    fn digest(&self) -> String;
    fn features(&self, image: &Image) -> Result<Features>;
}

/// A stack of convolutions with leaky-ReLU activations between layers; the
/// features are the last layer's activations.
#[derive(Clone, Debug)]
pub struct ConvStackExtractor {
    pub layers: Vec<Conv2d>,
    pub negative_slope: f64,
    pub kind: ExtractorKind,
}

impl ConvStackExtractor {
    /// 3 -> 32 -> 32 channels, 3x3 kernels, He-scaled Gaussian weights
    /// drawn from `seed`.
    pub fn random(seed: u64) -> Self {
        let mut init = Init::new(seed);
        let mut layers = Vec::new();
        for (ci, co) in [(3, 32), (32, 32)] {
            let std = (2.0 / (ci * 9) as f64).sqrt();
            let mut conv = Conv2d::new(&mut init, ci, co, 3, 1);
            conv.weight = init.normal(&[co, ci, 3, 3], 0.0, std);
            conv.bias = init.zeros(&[co]);
            layers.push(conv);
        }
        let mut ex = ConvStackExtractor { layers, negative_slope: 0.2, kind: ExtractorKind::FixedRandomConvnet };
        crate::params::freeze(&mut ex);
        ex
    }

    /// Loads `(weight, bias)` pairs from a tensor blob, e.g. the first
    /// layers of a pretrained classifier.
    pub fn from_blob(bytes: &[u8], strides: &[usize], negative_slope: f64, kind: ExtractorKind) -> Result<Self> {
        let tensors = decode_tensors(bytes)?;
        if tensors.len() != 2 * strides.len() {
            return Err(Error::Metrics(format!("{} tensors for {} layers", tensors.len(), strides.len())));
        }
        let mut layers = Vec::new();
        for (pair, &stride) in tensors.chunks(2).zip(strides) {
            let (ws, wd) = &pair[0];
            let (bs, bd) = &pair[1];
            if ws.len() != 4 || ws[2] != ws[3] || bs != &[ws[0]] {
                return Err(Error::Metrics(format!("bad layer shapes {ws:?} / {bs:?}")));
            }
            if layers.last().is_some_and(|l: &Conv2d| l.out_channels() != ws[1]) {
                return Err(Error::Metrics("layer channels do not chain".into()));
            }
            layers.push(Conv2d {
                weight: Tensor::new(wd.clone(), ws),
                bias: Tensor::new(bd.clone(), bs),
                stride,
                padding: ws[2] / 2,
            });
        }
        if layers.first().is_none_or(|l| l.in_channels() != 3) {
            return Err(Error::Metrics("first layer must take 3 channels".into()));
        }
        Ok(ConvStackExtractor { layers, negative_slope, kind })
    }
}

impl Module for ConvStackExtractor {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.layers.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.layers.visit_mut(f);
    }
}

impl FeatureExtractor for ConvStackExtractor {
    fn kind(&self) -> ExtractorKind {
        self.kind
    }

    fn digest(&self) -> String {
        digest(self)
    }

    fn features(&self, image: &Image) -> Result<Features> {
        no_grad(|| {
            let mut x = image.to_tensor();
            for (i, layer) in self.layers.iter().enumerate() {
                x = layer.forward(&x)?;
                if i + 1 < self.layers.len() {
                    x = x.leaky_relu(self.negative_slope);
                }
            }
            Features::from_map(&x)
        })
    }
}

/// Every `size x size` patch (valid positions only) flattened into one
/// feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawPatches {
    pub size: usize,
}

impl FeatureExtractor for RawPatches {
    fn kind(&self) -> ExtractorKind {
        ExtractorKind::RawPatches
    }

    fn digest(&self) -> String {
        format!("raw_patches_{}", self.size)
    }

    fn features(&self, image: &Image) -> Result<Features> {
        let (h, w) = image.dims();
        let k = self.size;
        if k == 0 || h < k || w < k {
            return Err(Error::Metrics(format!("{h}x{w} image smaller than {k}x{k} patches")));
        }
        let mut data = Vec::with_capacity((h - k + 1) * (w - k + 1) * 3 * k * k);
        for y in 0..=h - k {
            for x in 0..=w - k {
                for c in 0..3 {
                    for dy in 0..k {
                        for dx in 0..k {
                            data.push(image.get(y + dy, x + dx, c));
                        }
                    }
                }
            }
        }
        Features::new(3 * k * k, data)
    }
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from rounding are clamped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))` between two Gaussians,
/// with both covariances regularized by [`COVARIANCE_EPS`].
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::Metrics("feature statistics of different dimension".into()));
    }
    let eye = DMatrix::<f64>::identity(d, d) * COVARIANCE_EPS;
    let (s1, s2) = (s1 + &eye, s2 + &eye);
    // tr (S1 S2)^(1/2) = tr (R S2 R)^(1/2) with R = S1^(1/2), which keeps
    // the argument symmetric.
    let r = sqrtm_psd(&s1);
    let cross = sqrtm_psd(&(&r * &s2 * &r)).trace();
    let value = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Metrics("non-finite Fréchet distance".into()));
    }
    Ok(value.max(0.0))
}

pub fn frechet_between(a: &Features, b: &Features) -> Result<f64> {
    let (m1, s1) = a.statistics()?;
    let (m2, s2) = b.statistics()?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

pub fn sifid(real: &Image, fake: &Image, fx: &dyn FeatureExtractor) -> Result<f64> {
    frechet_between(&fx.features(real)?, &fx.features(fake)?)
}

/// Mean over pixels and channels of the across-sample coefficient of
/// variation (population standard deviation over mean).
pub fn diversity(samples: &[Image]) -> Result<f64> {
    diversity_masked(samples, None)
}

/// [`diversity`] restricted to the pixels visible in `mask`.
pub fn diversity_masked(samples: &[Image], mask: Option<&Mask>) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Metrics(format!("diversity needs at least 2 samples, got {}", samples.len())));
    }
    let (h, w) = samples[0].dims();
    if let Some(s) = samples.iter().find(|s| s.dims() != (h, w)) {
        return Err(Error::DimensionMismatch(format!("sample is {:?}, expected {:?}", s.dims(), (h, w))));
    }
    if let Some(m) = mask {
        if m.dims() != (h, w) {
            return Err(Error::DimensionMismatch(format!("mask is {:?}, samples are {:?}", m.dims(), (h, w))));
        }
    }
    let k = samples.len() as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask.is_some_and(|m| !m.is_visible(y, x)) {
                continue;
            }
            for c in 0..3 {
                // Deviations from the first sample, so identical samples give exactly 0.
                let first = samples[0].get(y, x, c);
                let (sum, sq) = samples.iter().fold((0.0, 0.0), |(a, b), s| {
                    let d = s.get(y, x, c) - first;
                    (a + d, b + d * d)
                });
                let mean = first + sum / k;
                if mean != 0.0 {
                    let var = (sq / k - (sum / k).powi(2)).max(0.0);
                    total += var.sqrt() / mean;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / count as f64)
}

/// Generation quality index: diversity per unit of SIFID. Zero SIFID
/// (memorized output) gives infinity.
pub fn gqi(sifid: f64, diversity: f64) -> f64 {
    if diversity == 0.0 {
        return 0.0;
    }
    if sifid == 0.0 {
        log::warn!("SIFID is 0; reporting an infinite quality index (likely memorization)");
        return f64::INFINITY;
    }
    diversity / sifid
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    Whole,
    RoiOnly,
    BackgroundOnly,
}

impl EvalTarget {
    pub const ALL: [EvalTarget; 3] = [EvalTarget::Whole, EvalTarget::RoiOnly, EvalTarget::BackgroundOnly];

    pub fn label(self) -> &'static str {
        match self {
            EvalTarget::Whole => "whole",
            EvalTarget::RoiOnly => "ROI-only",
            EvalTarget::BackgroundOnly => "background-only",
        }
    }
}

impl fmt::Display for EvalTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

mod maybe_infinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub target: EvalTarget,
    pub sifid: f64,
    pub diversity: f64,
    #[serde(with = "maybe_infinite")]
    pub gqi: f64,
    pub sample_count: usize,
    pub extractor: ExtractorKind,
    pub extractor_digest: String,
}

/// Generates `num_samples` samples (seeds derived from `seed`) and scores
/// them for each target. SIFID is averaged over samples and, for ROI-only,
/// over boxes.
pub fn evaluate(
    model: &MoganModel,
    num_samples: usize,
    targets: &[EvalTarget],
    seed: u64,
    fx: &dyn FeatureExtractor,
) -> Result<Vec<MetricsReport>> {
    if num_samples < 2 {
        return Err(Error::Metrics(format!("evaluation needs at least 2 samples, got {num_samples}")));
    }
    let samples = (0..num_samples)
        .map(|k| model.sample(derive_seed(seed, "evaluate", &[k as u64])))
        .collect::<Result<Vec<_>>>()?;
    let mean_sifid = |real: &Image, fakes: &mut dyn Iterator<Item = &Image>| -> Result<f64> {
        let real_f = fx.features(real)?;
        let (mut total, mut n) = (0.0, 0);
        for f in fakes {
            total += frechet_between(&real_f, &fx.features(f)?)?;
            n += 1;
        }
        Ok(total / n as f64)
    };

    targets
        .iter()
        .map(|&target| {
            let (sifid_v, diversity_v) = match target {
                EvalTarget::Whole => {
                    let fakes: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
                    (mean_sifid(&model.source, &mut fakes.iter())?, diversity(&fakes)?)
                }
                EvalTarget::RoiOnly => {
                    let (mut s_sum, mut d_sum) = (0.0, 0.0);
                    for (i, b) in model.boxes.iter().enumerate() {
                        let fakes: Vec<Image> = samples.iter().map(|s| s.rois[i].clone()).collect();
                        s_sum += mean_sifid(&crop_roi(&model.source, b)?, &mut fakes.iter())?;
                        d_sum += diversity(&fakes)?;
                    }
                    let k = model.boxes.len().max(1) as f64;
                    (s_sum / k, d_sum / k)
                }
                EvalTarget::BackgroundOnly => {
                    let (h, w) = model.source.dims();
                    let mask = Mask::from_boxes(h, w, &model.boxes);
                    let fakes = samples.iter().map(|s| mask.apply(&s.image)).collect::<Result<Vec<_>>>()?;
                    (mean_sifid(&mask.apply(&model.source)?, &mut fakes.iter())?, diversity_masked(&fakes, Some(&mask))?)
                }
            };
            Ok(MetricsReport {
                target,
                sifid: sifid_v,
                diversity: diversity_v,
                gqi: gqi(sifid_v, diversity_v),
                sample_count: num_samples,
                extractor: fx.kind(),
                extractor_digest: fx.digest(),
            })
        })
        .collect()
}

/// Markdown table with one row per metric and target and one column per
/// named report set.
pub fn render_markdown(columns: &[(&str, &[MetricsReport])]) -> String {
    let mut out = String::from("| Metrics |");
    for (name, _) in columns {
        out.push_str(&format!(" {name} |"));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(columns.len()));
    out.push('\n');
    for target in EvalTarget::ALL {
        let rows: [(&str, fn(&MetricsReport) -> f64); 3] =
            [("SIFID", |r| r.sifid), ("Diversity", |r| r.diversity), ("GQI", |r| r.gqi)];
        for (metric, get) in rows {
            if !columns.iter().any(|(_, reports)| reports.iter().any(|r| r.target == target)) {
                continue;
            }
            out.push_str(&format!("| {metric} ({target}) |"));
            for (_, reports) in columns {
                match reports.iter().find(|r| r.target == target) {
                    Some(r) => out.push_str(&format!(" {:.2} |", get(r))),
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
    }
    out
}
