//! Foreground/background intensity model.
//!
//! Both classes are modeled nonparametrically by 1-D Gaussian kernel
//! density estimates with Scott's-rule bandwidth. Densities used in path
//! scores are clamped to `[alpha_floor, 1]`: the upper cap keeps every
//! per-voxel likelihood at most one, which is what makes the most-probable
//! path a shortest path over nonnegative weights.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::dist;
use crate::volume::{voxel_to_physical, BinaryMask, Index3, Volume, VolumeError};

pub const DEFAULT_ALPHA_FLOOR: f64 = 1e-12;
/// Bandwidth fallback (intensity units) for constant training samples.
pub const MIN_BANDWIDTH: f64 = 0.5;
/// Kernel support is truncated at this many bandwidths; φ(9) ≈ 1e-18.
const KERNEL_CUTOFF: f64 = 9.0;
/// Quadrature extends this many bandwidths beyond the samples.
const QUADRATURE_MARGIN: f64 = 6.0;

#[derive(Debug, Error)]
pub enum AppearanceError {
    #[error("KDE needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("samples have zero spread; bandwidth is degenerate")]
    DegenerateBandwidth,
    #[error("non-finite sample value")]
    NonFinite,
    #[error("bandwidth must be finite and > 0, got {0}")]
    InvalidBandwidth(f64),
    #[error("mask must contain at least 2 voxels and n_samples >= 2")]
    TooFewVoxels,
    #[error("bin edges must be strictly increasing with at least 2 entries")]
    InvalidBins,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Standard normal density.
#[inline]
fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Sample standard deviation (n - 1 denominator).
fn sample_std(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// One-dimensional Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    /// Sorted ascending.
    samples: Vec<f64>,
    bandwidth: f64,
}

impl Kde {
    /// Fit with Scott's rule `h = σ̂ · n^(-1/5)`. Constant samples are an error.
    pub fn fit(samples: &[f64]) -> Result<Self, AppearanceError> {
        Self::fit_inner(samples, None)
    }

    /// Like [`Kde::fit`] but never returns a bandwidth below `min_bandwidth`.
    pub fn fit_with_min_bandwidth(
        samples: &[f64],
        min_bandwidth: f64,
    ) -> Result<Self, AppearanceError> {
        Self::fit_inner(samples, Some(min_bandwidth))
    }

    fn fit_inner(samples: &[f64], floor: Option<f64>) -> Result<Self, AppearanceError> {
        if samples.len() < 2 {
            return Err(AppearanceError::TooFewSamples(samples.len()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(AppearanceError::NonFinite);
        }
        let h = sample_std(samples) * (samples.len() as f64).powf(-0.2);
        let h = match floor {
            Some(f) => h.max(f),
            None if h > 0.0 => h,
            None => return Err(AppearanceError::DegenerateBandwidth),
        };
        Self::from_parts(samples.to_vec(), h)
    }

    /// Rebuild from stored samples and bandwidth.
    pub fn from_parts(mut samples: Vec<f64>, bandwidth: f64) -> Result<Self, AppearanceError> {
        if samples.len() < 2 {
            return Err(AppearanceError::TooFewSamples(samples.len()));
        }
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(AppearanceError::InvalidBandwidth(bandwidth));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(AppearanceError::NonFinite);
        }
        samples.sort_by(f64::total_cmp);
        Ok(Self { samples, bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(1/(n h)) Σ φ((x - xᵢ)/h)`, unclamped.
    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let lo = self.samples.partition_point(|&s| s < x - KERNEL_CUTOFF * h);
        let hi = self
            .samples
            .partition_point(|&s| s <= x + KERNEL_CUTOFF * h);
        let sum: f64 = self.samples[lo..hi].iter().map(|&s| phi((x - s) / h)).sum();
        sum / (self.samples.len() as f64 * h)
    }

    /// Sample range extended by the quadrature margin.
    pub fn support(&self) -> (f64, f64) {
        let m = QUADRATURE_MARGIN * self.bandwidth;
        (
            self.samples[0] - m,
            self.samples[self.samples.len() - 1] + m,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Class {
    #[serde(rename = "fg")]
    Foreground,
    #[serde(rename = "bg")]
    Background,
}

/// Clamp a raw density into `[floor, 1]`.
#[inline]
pub fn clamp_alpha(raw: f64, floor: f64) -> f64 {
    if raw.is_nan() {
        floor
    } else {
        raw.clamp(floor, 1.0)
    }
}

/// Fitted foreground (α₁) and background (α₀) intensity densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct IntensityModel {
    fg: Kde,
    bg: Kde,
    alpha_floor: f64,
}

/// JSON form of [`IntensityModel`].
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    fg_samples: Vec<f64>,
    bg_samples: Vec<f64>,
    h_fg: f64,
    h_bg: f64,
    #[serde(default = "default_floor")]
    alpha_floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_ALPHA_FLOOR
}

impl TryFrom<ModelFile> for IntensityModel {
    type Error = AppearanceError;
    fn try_from(f: ModelFile) -> Result<Self, Self::Error> {
        Ok(Self {
            fg: Kde::from_parts(f.fg_samples, f.h_fg)?,
            bg: Kde::from_parts(f.bg_samples, f.h_bg)?,
            alpha_floor: f.alpha_floor,
        })
    }
}

impl From<IntensityModel> for ModelFile {
    fn from(m: IntensityModel) -> Self {
        Self {
            h_fg: m.fg.bandwidth,
            h_bg: m.bg.bandwidth,
            fg_samples: m.fg.samples,
            bg_samples: m.bg.samples,
            alpha_floor: m.alpha_floor,
        }
    }
}

/// Labeled training voxels, `{"fg": [[i,j,k],...], "bg": [...]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSidecar {
    pub fg: Vec<Index3>,
    pub bg: Vec<Index3>,
}

impl IntensityModel {
    /// Fit both classes; constant classes fall back to [`MIN_BANDWIDTH`].
    pub fn fit(fg_samples: &[f64], bg_samples: &[f64]) -> Result<Self, AppearanceError> {
        Ok(Self {
            fg: Kde::fit_with_min_bandwidth(fg_samples, MIN_BANDWIDTH)?,
            bg: Kde::fit_with_min_bandwidth(bg_samples, MIN_BANDWIDTH)?,
            alpha_floor: DEFAULT_ALPHA_FLOOR,
        })
    }

    pub fn fit_from_labels(
        volume: &Volume,
        labels: &LabelSidecar,
    ) -> Result<Self, AppearanceError> {
        let gather = |idx: &[Index3]| -> Result<Vec<f64>, AppearanceError> {
            idx.iter()
                .map(|&i| Ok(f64::from(volume.data()[volume.checked_offset(i)?])))
                .collect()
        };
        Self::fit(&gather(&labels.fg)?, &gather(&labels.bg)?)
    }

    pub fn from_kdes(fg: Kde, bg: Kde) -> Self {
        Self {
            fg,
            bg,
            alpha_floor: DEFAULT_ALPHA_FLOOR,
        }
    }

    pub fn with_alpha_floor(mut self, floor: f64) -> Self {
        self.alpha_floor = floor;
        self
    }

    pub fn kde(&self, class: Class) -> &Kde {
        match class {
            Class::Foreground => &self.fg,
            Class::Background => &self.bg,
        }
    }

    pub fn alpha_floor(&self) -> f64 {
        self.alpha_floor
    }

    /// α₁ or α₀ at `intensity`, clamped to `[alpha_floor, 1]`.
    pub fn eval_alpha(&self, intensity: f64, class: Class) -> f64 {
        clamp_alpha(self.kde(class).density(intensity), self.alpha_floor)
    }

    /// Σ log α₁(I_y) over `voxels`.
    pub fn log_alpha1_sum(
        &self,
        volume: &Volume,
        voxels: &[Index3],
    ) -> Result<f64, AppearanceError> {
        self.log_alpha_sum(volume, voxels, Class::Foreground)
    }

    pub fn log_alpha_sum(
        &self,
        volume: &Volume,
        voxels: &[Index3],
        class: Class,
    ) -> Result<f64, AppearanceError> {
        voxels.iter().try_fold(0.0, |acc, &v| {
            let i = volume.data()[volume.checked_offset(v)?];
            Ok(acc + self.eval_alpha(f64::from(i), class).ln())
        })
    }

    /// D(α₁‖α₀) in nats by trapezoid quadrature; α₀ is floored inside the log.
    pub fn kl_divergence(&self) -> f64 {
        let (a0, b0) = self.fg.support();
        let (a1, b1) = self.bg.support();
        let (lo, hi) = (a0.min(a1), b0.max(b1));
        let step = self.fg.bandwidth.min(self.bg.bandwidth) / 8.0;
        let floor = self.alpha_floor;
        trapezoid(
            |x| {
                let p = self.fg.density(x);
                if p <= 0.0 {
                    0.0
                } else {
                    p * (p / self.bg.density(x).max(floor)).ln()
                }
            },
            lo,
            hi,
            step,
        )
    }
}

/// Composite trapezoid rule on `[lo, hi]` with spacing at most `max_step`.
pub(crate) fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, max_step: f64) -> f64 {
    const MAX_INTERVALS: usize = 2_000_000;
    let n = (((hi - lo) / max_step).ceil() as usize).clamp(1, MAX_INTERVALS);
    let h = (hi - lo) / n as f64;
    let inner: f64 = (1..n).map(|i| f(lo + i as f64 * h)).sum();
    h * (0.5 * (f(lo) + f(hi)) + inner)
}

/// Per-intensity cache of clamped log α for the values present in a volume.
#[derive(Debug, Clone)]
pub struct LogAlphaTable {
    offset: u16,
    values: Vec<f64>,
}

impl LogAlphaTable {
    pub fn new(model: &IntensityModel, class: Class, volume: &Volume) -> Self {
        use rayon::prelude::*;
        let (lo, hi) = volume
            .data()
            .iter()
            .fold((u16::MAX, u16::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let mut present = vec![false; usize::from(hi) - usize::from(lo) + 1];
        for &v in volume.data() {
            present[usize::from(v - lo)] = true;
        }
        let values = present
            .par_iter()
            .enumerate()
            .map(|(i, &p)| {
                if p {
                    model.eval_alpha(f64::from(lo) + i as f64, class).ln()
                } else {
                    f64::NAN
                }
            })
            .collect();
        Self { offset: lo, values }
    }

    /// Clamped log α; `None` if the intensity never occurs in the source volume.
    #[inline]
    pub fn get(&self, intensity: u16) -> Option<f64> {
        let i = usize::from(intensity.checked_sub(self.offset)?);
        self.values.get(i).copied().filter(|v| !v.is_nan())
    }
}

// ---------------------------------------------------------------------------
// Autocorrelation

/// Pearson correlation of voxel intensities as a function of distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutocorrCurve {
    pub bin_centers: Vec<f64>,
    /// `None` for bins with fewer than 4 pairs.
    pub rho: Vec<Option<f64>>,
    /// Fisher-z standard error `1/√(n_pairs − 3)`.
    pub se: Vec<Option<f64>>,
    pub n_pairs: Vec<usize>,
}

#[derive(Default, Clone, Copy)]
struct PairMoments {
    n: usize,
    sum: f64,
    sum_sq: f64,
    sum_cross: f64,
}

/// Intensity autocorrelation of `n_samples` voxels drawn uniformly from `class_mask`.
///
/// Every unordered pair is binned by physical distance (`[edge_k, edge_k+1)`).
/// Each pair contributes both `(a, b)` and `(b, a)`, so the two margins share
/// mean and variance.
pub fn autocorrelation(
    volume: &Volume,
    class_mask: &BinaryMask,
    n_samples: usize,
    bin_edges: &[f64],
    seed: u64,
) -> Result<AutocorrCurve, AppearanceError> {
    volume.same_geometry(class_mask)?;
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(AppearanceError::InvalidBins);
    }
    let members: Vec<usize> = class_mask
        .data()
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if members.len() < 2 || n_samples < 2 {
        return Err(AppearanceError::TooFewVoxels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amount = n_samples.min(members.len());
    let mut picked: Vec<usize> = sample_indices(&mut rng, members.len(), amount)
        .into_iter()
        .map(|i| members[i])
        .collect();
    picked.sort_unstable();

    let spacing = volume.spacing();
    let points: Vec<_> = picked
        .iter()
        .map(|&o| voxel_to_physical(volume.index_of(o), spacing))
        .collect();
    let mean = picked
        .iter()
        .map(|&o| f64::from(volume.data()[o]))
        .sum::<f64>()
        / amount as f64;
    let values: Vec<f64> = picked
        .iter()
        .map(|&o| f64::from(volume.data()[o]) - mean)
        .collect();

    let n_bins = bin_edges.len() - 1;
    let mut moments = vec![PairMoments::default(); n_bins];
    let (first, last) = (bin_edges[0], bin_edges[n_bins]);
    for a in 0..amount {
        for b in (a + 1)..amount {
            let d = dist(points[a], points[b]);
            if d < first || d >= last {
                continue;
            }
            let bin = bin_edges.partition_point(|&e| e <= d) - 1;
            let (x, y) = (values[a], values[b]);
            let m = &mut moments[bin];
            m.n += 1;
            m.sum += x + y;
            m.sum_sq += x * x + y * y;
            m.sum_cross += 2.0 * x * y;
        }
    }

    let mut curve = AutocorrCurve {
        bin_centers: bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect(),
        rho: Vec::with_capacity(n_bins),
        se: Vec::with_capacity(n_bins),
        n_pairs: Vec::with_capacity(n_bins),
    };
    for m in moments {
        curve.n_pairs.push(m.n);
        let obs = 2.0 * m.n as f64;
        let mu = m.sum / obs;
        let var = m.sum_sq / obs - mu * mu;
        let cov = m.sum_cross / obs - mu * mu;
        if m.n < 4 || var <= 0.0 {
            curve.rho.push(None);
            curve.se.push(None);
        } else {
            curve.rho.push(Some((cov / var).clamp(-1.0, 1.0)));
            curve.se.push(Some(1.0 / ((m.n - 3) as f64).sqrt()));
        }
    }
    Ok(curve)
}
