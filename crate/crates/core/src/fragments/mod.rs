//! Fragment generation: threshold → components → ball covering →
//! endpoints and tangents.

mod bresenham;
mod components;

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bresenham::bresenham3d;
pub use components::{connected_components, Components};

use crate::geom::{dist, dist_sq, neg, normalized, sub, Point3};
use crate::volume::{
    load_grid, save_grid, threshold_probability, voxel_to_physical, Grid, Index3, LabelVolume,
    ProbabilityMap, VolumeError,
};

pub const DEFAULT_THRESHOLD: f64 = 0.9;
pub const DEFAULT_RADIUS_UM: f64 = 7.0;
pub const DEFAULT_MIN_VOXELS: usize = 5;

#[derive(Debug, Error)]
pub enum FragmentError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("endpoint estimation needs at least 2 voxels, got {0}")]
    TooFewVoxels(usize),
    #[error("endpoints coincide; tangent undefined")]
    CoincidentEndpoints,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed fragment file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("fragment {0} has no voxels in the label volume")]
    MissingVoxels(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FragmentParams {
    pub threshold: f64,
    pub min_voxels: usize,
    pub radius_um: f64,
}

impl Default for FragmentParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            min_voxels: DEFAULT_MIN_VOXELS,
            radius_um: DEFAULT_RADIUS_UM,
        }
    }
}

/// A supervoxel: a piece of one component, with its simplified line segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    /// 1-based; matches the label volume.
    pub id: u32,
    /// Covering-ball center that generated this fragment.
    pub center: Index3,
    /// Sorted in x-fastest scan order.
    pub voxels: Vec<Index3>,
    pub x0: Point3,
    pub x1: Point3,
    pub tau0: Point3,
    pub tau1: Point3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragmentSet {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub fragments: Vec<Fragment>,
}

/// One cell of a ball-covering split.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverCell {
    pub center: Index3,
    pub voxels: Vec<Index3>,
}

fn lex(a: &Index3, b: &Index3) -> Ordering {
    a.cmp(b)
}

fn scan_order(a: &Index3, b: &Index3) -> Ordering {
    (a[2], a[1], a[0]).cmp(&(b[2], b[1], b[0]))
}

/// Split one component into pieces no larger than a ball of `radius_um`.
///
/// Centers are chosen greedily: the uncovered voxel with the highest
/// foreground probability (ties to the lexicographically smallest `(i,j,k)`)
/// becomes a center and covers every voxel within `radius_um`. Afterwards
/// every voxel joins its nearest center (ties to the earlier center).
/// Cells come back in center order.
pub fn split_component(
    voxels: &[Index3],
    prob: &ProbabilityMap,
    radius_um: f64,
) -> Result<Vec<CoverCell>, FragmentError> {
    let spacing = prob.spacing();
    let mut order: Vec<(f32, Index3)> = voxels
        .iter()
        .map(|&v| Ok((prob.data()[prob.checked_offset(v)?], v)))
        .collect::<Result<_, VolumeError>>()?;
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| lex(&a.1, &b.1)));
    let points: Vec<Point3> = order
        .iter()
        .map(|&(_, v)| voxel_to_physical(v, spacing))
        .collect();

    let r2 = radius_um * radius_um;
    let mut covered = vec![false; order.len()];
    let mut centers: Vec<usize> = Vec::new();
    for c in 0..order.len() {
        if covered[c] {
            continue;
        }
        centers.push(c);
        for (i, p) in points.iter().enumerate() {
            if !covered[i] && dist_sq(*p, points[c]) <= r2 {
                covered[i] = true;
            }
        }
    }

    let mut cells: Vec<CoverCell> = centers
        .iter()
        .map(|&c| CoverCell {
            center: order[c].1,
            voxels: Vec::new(),
        })
        .collect();
    for (i, p) in points.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (slot, &c) in centers.iter().enumerate() {
            let d = dist_sq(*p, points[c]);
            if d < best_d {
                best_d = d;
                best = slot;
            }
        }
        cells[best].voxels.push(order[i].1);
    }
    for cell in &mut cells {
        cell.voxels.sort_by(scan_order);
    }
    Ok(cells)
}

/// Endpoints `(x0, x1)` in µm from the neighborhood-count rule.
///
/// `R` is half the physical bounding-box diagonal; `N_y` counts fragment
/// voxels within `R` of `y`. `x0` minimizes `|N_y|`; `x1` minimizes `|N_y|`
/// among voxels farther than `R` from `x0`, falling back to the voxel
/// farthest from `x0` when none is. Ties go to the lexicographically
/// smallest `(i,j,k)`.
pub fn estimate_endpoints(
    voxels: &[Index3],
    spacing: [f64; 3],
) -> Result<(Point3, Point3), FragmentError> {
    if voxels.len() < 2 {
        return Err(FragmentError::TooFewVoxels(voxels.len()));
    }
    let mut sorted = voxels.to_vec();
    sorted.sort_by(lex);
    let pts: Vec<Point3> = sorted
        .iter()
        .map(|&v| voxel_to_physical(v, spacing))
        .collect();

    let mut lo = pts[0];
    let mut hi = pts[0];
    for p in &pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let radius = 0.5 * dist(lo, hi);
    let r2 = radius * radius;
    let counts: Vec<usize> = pts
        .iter()
        .map(|p| pts.iter().filter(|q| dist_sq(*p, **q) <= r2).count())
        .collect();

    let first = (0..pts.len())
        .min_by_key(|&i| (counts[i], i))
        .expect("nonempty");
    let x0 = pts[first];
    let second = (0..pts.len())
        .filter(|&i| dist_sq(pts[i], x0) > r2)
        .min_by_key(|&i| (counts[i], i))
        .unwrap_or_else(|| {
            (0..pts.len())
                .max_by(|&a, &b| {
                    dist_sq(pts[a], x0)
                        .total_cmp(&dist_sq(pts[b], x0))
                        .then(b.cmp(&a))
                })
                .expect("nonempty")
        });
    Ok((x0, pts[second]))
}

/// `τ⁰ = (x0 − x1)/‖x0 − x1‖`, `τ¹ = −τ⁰`.
pub fn estimate_tangents(x0: Point3, x1: Point3) -> Result<(Point3, Point3), FragmentError> {
    let tau0 = normalized(sub(x0, x1)).ok_or(FragmentError::CoincidentEndpoints)?;
    Ok((tau0, neg(tau0)))
}

impl FragmentSet {
    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }

    /// Fragment by 1-based id.
    pub fn get(&self, id: u32) -> Option<&Fragment> {
        self.index_of(id).map(|i| &self.fragments[i])
    }

    /// Position of a fragment id in `fragments`.
    pub fn index_of(&self, id: u32) -> Option<usize> {
        match self.fragments.get((id as usize).wrapping_sub(1)) {
            Some(f) if f.id == id => Some(id as usize - 1),
            _ => self.fragments.iter().position(|f| f.id == id),
        }
    }

    /// Per-voxel fragment ids (0 = background).
    pub fn label_volume(&self) -> LabelVolume {
        let mut labels = Grid::filled(self.dims, self.spacing, 0u32).expect("valid geometry");
        for f in &self.fragments {
            for &v in &f.voxels {
                let off = labels.offset(v);
                labels.data_mut()[off] = f.id;
            }
        }
        labels
    }

    /// Write the fragment JSON and `<labels_stem>.{json,raw}`.
    pub fn save(&self, json_path: &Path, labels_stem: &Path) -> Result<(), FragmentError> {
        save_grid(&self.label_volume(), labels_stem)?;
        let file = FragmentFile {
            spacing: self.spacing,
            label_volume: labels_stem
                .file_name()
                .map(|n| n.to_string_lossy().into_owned()),
            fragments: self
                .fragments
                .iter()
                .map(|f| FragmentRecord {
                    id: f.id,
                    x0: f.x0,
                    x1: f.x1,
                    tau0: f.tau0,
                    tau1: f.tau1,
                    n_voxels: f.voxels.len(),
                    center: Some(f.center),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        fs::write(json_path, text).map_err(|source| FragmentError::Io {
            path: json_path.to_path_buf(),
            source,
        })
    }

    /// Read a fragment JSON. Voxels come from the label volume, which is
    /// `labels_stem` if given, else the name recorded in the JSON (resolved
    /// next to it).
    pub fn load(json_path: &Path, labels_stem: Option<&Path>) -> Result<Self, FragmentError> {
        let text = fs::read_to_string(json_path).map_err(|source| FragmentError::Io {
            path: json_path.to_path_buf(),
            source,
        })?;
        let file: FragmentFile = serde_json::from_str(&text)?;
        let stem = match (labels_stem, &file.label_volume) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(name)) => json_path.with_file_name(name),
            (None, None) => json_path.with_file_name("fragment_labels"),
        };
        let labels: LabelVolume = load_grid(&stem)?;
        let max_id = file.fragments.iter().map(|f| f.id).max().unwrap_or(0) as usize;
        let mut by_id: Vec<Vec<Index3>> = vec![Vec::new(); max_id + 1];
        for (off, &l) in labels.data().iter().enumerate() {
            if l != 0 && (l as usize) <= max_id {
                by_id[l as usize].push(labels.index_of(off));
            }
        }
        let fragments = file
            .fragments
            .into_iter()
            .map(|r| {
                let voxels = std::mem::take(&mut by_id[r.id as usize]);
                if voxels.is_empty() {
                    return Err(FragmentError::MissingVoxels(r.id));
                }
                Ok(Fragment {
                    id: r.id,
                    center: r.center.unwrap_or(voxels[0]),
                    voxels,
                    x0: r.x0,
                    x1: r.x1,
                    tau0: r.tau0,
                    tau1: r.tau1,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            dims: labels.dims(),
            spacing: file.spacing,
            fragments,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FragmentRecord {
    id: u32,
    x0: Point3,
    x1: Point3,
    tau0: Point3,
    tau1: Point3,
    n_voxels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    center: Option<Index3>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FragmentFile {
    spacing: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_volume: Option<String>,
    fragments: Vec<FragmentRecord>,
}

/// Full fragment pipeline over a probability map.
///
/// Cells smaller than `min_voxels` (and always single voxels, whose endpoints
/// would coincide) are discarded as dust. Ids are assigned in
/// (component label, center order).
pub fn generate_fragments(
    prob: &ProbabilityMap,
    params: &FragmentParams,
) -> Result<FragmentSet, FragmentError> {
    let mask = threshold_probability(prob, params.threshold)?;
    let comps = connected_components(&mask);
    let spacing = prob.spacing();
    let min_voxels = params.min_voxels.max(2);

    let per_component: Vec<Vec<(CoverCell, (Point3, Point3, Point3, Point3))>> = comps
        .voxel_lists()
        .par_iter()
        .map(|voxels| {
            let cells = split_component(voxels, prob, params.radius_um)?;
            cells
                .into_iter()
                .filter(|c| c.voxels.len() >= min_voxels)
                .map(|c| {
                    let (x0, x1) = estimate_endpoints(&c.voxels, spacing)?;
                    let (t0, t1) = estimate_tangents(x0, x1)?;
                    Ok((c, (x0, x1, t0, t1)))
                })
                .collect::<Result<Vec<_>, FragmentError>>()
        })
        .collect::<Result<_, _>>()?;

    let fragments = per_component
        .into_iter()
        .flatten()
        .enumerate()
        .map(|(i, (cell, (x0, x1, tau0, tau1)))| Fragment {
            id: i as u32 + 1,
            center: cell.center,
            voxels: cell.voxels,
            x0,
            x1,
            tau0,
            tau1,
        })
        .collect();
    Ok(FragmentSet {
        dims: prob.dims(),
        spacing,
        fragments,
    })
}
