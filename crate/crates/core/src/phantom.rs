//! Synthetic tube phantoms with known centerlines.
//!
//! A parametric curve is rasterized as a tube; tube voxels draw intensities
//! from the foreground normal and everything else from the background one.
//! The probability map stands in for a pixel classifier: high values on the
//! visible tube, low elsewhere. Censored arc-length intervals make a stretch
//! of tube look like background in both the image and the probability map,
//! while the ground-truth centerline still runs through it.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appearance::LabelSidecar;
use crate::geom::{dist, lerp, Point3};
use crate::metrics::{
    export_swc, resample_polyline, MetricsError, Polyline, DEFAULT_SWC_RADIUS_UM,
};
use crate::volume::{save_grid, Grid, Index3, ProbabilityMap, Volume, VolumeError};

/// Arc-length step used to sweep the tube.
const SWEEP_STEP_UM: f64 = 0.05;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Curve {
    /// Axis parallel to z through `center` (x, y in µm).
    Helix {
        center: [f64; 2],
        radius_um: f64,
        pitch_um: f64,
        z_start_um: f64,
        z_end_um: f64,
    },
    Polyline {
        points: Vec<Point3>,
    },
}

impl Curve {
    /// Dense vertex list tracing the curve.
    fn vertices(&self) -> Vec<Point3> {
        self.vertices_with(|turns| ((turns * 2000.0).abs().ceil() as usize).max(2))
    }

    /// Points at most `step` µm apart along the curve, ends included. Helix
    /// speed is constant, so uniform parameter steps are uniform in arc length.
    fn centerline(&self, step: f64) -> Result<Polyline, MetricsError> {
        match self {
            Curve::Polyline { points } => resample_polyline(&Polyline::new(points.clone())?, step),
            Curve::Helix {
                radius_um,
                pitch_um,
                z_start_um,
                z_end_um,
                ..
            } => {
                let turns = (z_end_um - z_start_um) / pitch_um;
                let len = turns.abs() * (TAU * radius_um).hypot(*pitch_um);
                Polyline::new(self.vertices_with(|_| ((len / step).ceil() as usize).max(1)))
            }
        }
    }

    fn vertices_with(&self, segments: impl Fn(f64) -> usize) -> Vec<Point3> {
        match self {
            Curve::Polyline { points } => points.clone(),
            Curve::Helix {
                center,
                radius_um,
                pitch_um,
                z_start_um,
                z_end_um,
            } => {
                let turns = (z_end_um - z_start_um) / pitch_um;
                let n = segments(turns);
                (0..=n)
                    .map(|k| {
                        let t = k as f64 / n as f64;
                        let theta = TAU * turns * t;
                        [
                            center[0] + radius_um * theta.cos(),
                            center[1] + radius_um * theta.sin(),
                            z_start_um + (z_end_um - z_start_um) * t,
                        ]
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub curve: Curve,
    pub tube_radius_um: f64,
    pub fg_mean: f64,
    pub fg_std: f64,
    pub bg_mean: f64,
    pub bg_std: f64,
    /// Visible-tube probabilities are uniform on this range.
    pub prob_fg: [f64; 2],
    /// Probabilities everywhere else.
    pub prob_bg: [f64; 2],
    /// Arc-length intervals (µm from the curve start) rendered as background.
    pub censor_um: Vec<[f64; 2]>,
    /// Labeled voxels drawn per class for the sidecar.
    pub label_samples: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    /// A four-turn helix in 256³ voxels whose class intensities are two
    /// normals two standard deviations apart (KL = 2 nats).
    fn default() -> Self {
        Self {
            dims: [256, 256, 256],
            spacing: [0.3, 0.3, 1.0],
            curve: Curve::Helix {
                center: [38.4, 38.4],
                radius_um: 20.0,
                pitch_um: 60.0,
                z_start_um: 10.0,
                z_end_um: 245.0,
            },
            tube_radius_um: 1.0,
            fg_mean: 1400.0,
            fg_std: 200.0,
            bg_mean: 1000.0,
            bg_std: 200.0,
            prob_fg: [0.92, 1.0],
            prob_bg: [0.0, 0.6],
            censor_um: Vec::new(),
            label_samples: 5000,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: &str| Err(PhantomError::Invalid(m.to_string()));
        if self.dims.contains(&0) {
            return bad("dims must be positive");
        }
        if self.spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("spacing must be positive");
        }
        if !(self.tube_radius_um > 0.0) {
            return bad("tube radius must be positive");
        }
        if !(self.fg_std > 0.0 && self.bg_std > 0.0) {
            return bad("intensity standard deviations must be positive");
        }
        for r in [self.prob_fg, self.prob_bg] {
            if !(0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0) {
                return bad("probability ranges must satisfy 0 <= lo <= hi <= 1");
            }
        }
        if let Curve::Helix { pitch_um, .. } = self.curve {
            if !(pitch_um.abs() > 0.0) {
                return bad("helix pitch must be nonzero");
            }
        }
        if self.curve.vertices().len() < 2 {
            return bad("curve needs at least two points");
        }
        Ok(())
    }
}

/// Generated volumes plus ground truth.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub volume: Volume,
    pub probability: ProbabilityMap,
    pub labels: LabelSidecar,
    /// Centerline at 1 µm spacing, censored stretches included.
    pub centerline: Polyline,
    /// Tube voxels, censored or not, in scan order.
    pub tube: Vec<Index3>,
    /// Tube voxels rendered as foreground, in scan order.
    pub visible: Vec<Index3>,
}

/// Points along the curve every `step` µm, with their arc length.
fn sweep(vertices: &[Point3], step: f64) -> Vec<(Point3, f64)> {
    let mut out = vec![(vertices[0], 0.0)];
    let mut arc = 0.0;
    for w in vertices.windows(2) {
        let len = dist(w[0], w[1]);
        if len == 0.0 {
            continue;
        }
        let pieces = (len / step).ceil() as usize;
        for k in 1..=pieces {
            let t = k as f64 / pieces as f64;
            out.push((lerp(w[0], w[1], t), arc + len * t));
        }
        arc += len;
    }
    out
}

/// Nearest centerline arc length for every voxel within `radius` of the curve.
fn rasterize_tube(
    samples: &[(Point3, f64)],
    dims: [usize; 3],
    spacing: [f64; 3],
    radius: f64,
) -> HashMap<Index3, (f64, f64)> {
    let mut hit: HashMap<Index3, (f64, f64)> = HashMap::new();
    for &(c, arc) in samples {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut empty = false;
        for a in 0..3 {
            let l = ((c[a] - radius) / spacing[a]).ceil().max(0.0);
            let h = ((c[a] + radius) / spacing[a])
                .floor()
                .min(dims[a] as f64 - 1.0);
            if h < l {
                empty = true;
            }
            lo[a] = l as usize;
            hi[a] = h.max(0.0) as usize;
        }
        if empty {
            continue;
        }
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    let p = [
                        i as f64 * spacing[0],
                        j as f64 * spacing[1],
                        k as f64 * spacing[2],
                    ];
                    let d = dist(p, c);
                    if d <= radius {
                        let e = hit.entry([i, j, k]).or_insert((f64::INFINITY, arc));
                        if d < e.0 {
                            *e = (d, arc);
                        }
                    }
                }
            }
        }
    }
    hit
}

fn scan_key(v: &Index3) -> (usize, usize, usize) {
    (v[2], v[1], v[0])
}

/// Fill `grid` slice by slice, each z-slice from its own RNG stream.
fn fill_slices<T: Send>(
    grid: &mut Grid<T>,
    seed: u64,
    stream_base: u64,
    f: impl Fn(&mut ChaCha8Rng) -> T + Sync,
) {
    let [nx, ny, _] = grid.dims();
    grid.data_mut()
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(k, slice)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_base + k as u64);
            for v in slice.iter_mut() {
                *v = f(&mut rng);
            }
        });
}

fn to_u16(x: f64) -> u16 {
    x.round().clamp(0.0, f64::from(u16::MAX)) as u16
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    spec.validate()?;
    let dims = spec.dims;
    let nz = dims[2] as u64;
    let vertices = spec.curve.vertices();
    let samples = sweep(&vertices, SWEEP_STEP_UM);
    let hits = rasterize_tube(&samples, dims, spec.spacing, spec.tube_radius_um);

    let censored = |arc: f64| spec.censor_um.iter().any(|r| r[0] <= arc && arc <= r[1]);
    let mut tube: Vec<Index3> = hits.keys().copied().collect();
    tube.sort_by_key(scan_key);
    let visible: Vec<Index3> = tube
        .iter()
        .copied()
        .filter(|v| !censored(hits[v].1))
        .collect();

    let bg =
        Normal::new(spec.bg_mean, spec.bg_std).map_err(|e| PhantomError::Invalid(e.to_string()))?;
    let fg =
        Normal::new(spec.fg_mean, spec.fg_std).map_err(|e| PhantomError::Invalid(e.to_string()))?;
    let (p_lo, p_hi) = (spec.prob_bg[0], spec.prob_bg[1]);

    let mut volume = Grid::filled(dims, spec.spacing, 0u16)?;
    fill_slices(&mut volume, spec.seed, 0, |rng| to_u16(bg.sample(rng)));
    let mut probability = Grid::filled(dims, spec.spacing, 0f32)?;
    fill_slices(&mut probability, spec.seed, nz, |rng| {
        rng.random_range(p_lo..=p_hi) as f32
    });

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2 * nz);
    let (f_lo, f_hi) = (spec.prob_fg[0], spec.prob_fg[1]);
    for &v in &visible {
        volume.set(v, to_u16(fg.sample(&mut rng)))?;
        probability.set(v, rng.random_range(f_lo..=f_hi) as f32)?;
    }

    let labels = draw_labels(spec, &visible, &hits, &mut rng);
    let centerline = spec.curve.centerline(1.0)?;
    Ok(Phantom {
        spec: spec.clone(),
        volume,
        probability,
        labels,
        centerline,
        tube,
        visible,
    })
}

fn draw_labels(
    spec: &PhantomSpec,
    visible: &[Index3],
    tube: &HashMap<Index3, (f64, f64)>,
    rng: &mut ChaCha8Rng,
) -> LabelSidecar {
    let n_fg = spec.label_samples.min(visible.len());
    let mut fg: Vec<Index3> = sample_indices(rng, visible.len(), n_fg)
        .into_iter()
        .map(|i| visible[i])
        .collect();
    fg.sort_by_key(scan_key);

    let total: usize = spec.dims.iter().product();
    let n_bg = spec.label_samples.min(total - tube.len());
    let mut bg = Vec::with_capacity(n_bg);
    let mut taken = std::collections::HashSet::new();
    while bg.len() < n_bg {
        let v = [
            rng.random_range(0..spec.dims[0]),
            rng.random_range(0..spec.dims[1]),
            rng.random_range(0..spec.dims[2]),
        ];
        if !tube.contains_key(&v) && taken.insert(v) {
            bg.push(v);
        }
    }
    bg.sort_by_key(scan_key);
    LabelSidecar { fg, bg }
}

/// File names written by [`Phantom::write`].
pub struct PhantomFiles;

impl PhantomFiles {
    pub const VOLUME: &'static str = "volume";
    pub const PROBABILITY: &'static str = "probability";
    pub const LABELS: &'static str = "labels.json";
    pub const TRUTH: &'static str = "truth.swc";
    pub const SPEC: &'static str = "phantom.json";
}

impl Phantom {
    /// Write the volume, probability map, label sidecar, ground-truth SWC
    /// and the generating spec into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), PhantomError> {
        std::fs::create_dir_all(dir)?;
        save_grid(&self.volume, &dir.join(PhantomFiles::VOLUME))?;
        save_grid(&self.probability, &dir.join(PhantomFiles::PROBABILITY))?;
        std::fs::write(
            dir.join(PhantomFiles::LABELS),
            serde_json::to_vec(&self.labels)?,
        )?;
        export_swc(
            &self.centerline,
            DEFAULT_SWC_RADIUS_UM,
            &dir.join(PhantomFiles::TRUTH),
        )?;
        std::fs::write(
            dir.join(PhantomFiles::SPEC),
            serde_json::to_vec_pretty(&self.spec)?,
        )?;
        Ok(())
    }
}
