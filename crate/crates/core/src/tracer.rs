//! A loaded tracing session: image, appearance model, fragments and the
//! transition graph, plus the request/response types shared by the CLI,
//! the HTTP service and its client.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appearance::{AppearanceError, IntensityModel, LabelSidecar};
use crate::fragments::{generate_fragments, FragmentError, FragmentParams, FragmentSet};
use crate::geom::dist;
use crate::hmm_graph::{
    build_graph, make_states, state_id, GraphError, Hyperparams, Orientation, TransitionGraph,
};
use crate::solver::{
    path_log_prob, sequence_to_polyline, shortest_path, Algorithm, SolveError, TracePath,
};
use crate::volume::{
    load_probability_map, load_volume, project_point, Axis, LabelVolume, Volume, VolumeError,
};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("unknown fragment {0}")]
    UnknownFragment(u32),
    #[error("no path from fragment {start} to fragment {end}")]
    NoPath { start: u32, end: u32 },
    #[error(transparent)]
    Solve(#[from] SolveError),
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Appearance(#[from] AppearanceError),
    #[error(transparent)]
    Fragments(#[from] FragmentError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, SessionError> {
    let bytes = std::fs::read(path).map_err(|source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| SessionError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Inputs and parameters for a pipeline run. Relative paths resolve
/// against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Intensity volume container (`.json` header or stem).
    pub volume: Option<PathBuf>,
    pub probability: Option<PathBuf>,
    /// `{"fg": [...], "bg": [...]}` labeled voxels for the KDE fit.
    pub labels: Option<PathBuf>,
    /// Previously fitted model; takes precedence over `labels`.
    pub model: Option<PathBuf>,
    /// Previously generated fragments; otherwise built from `probability`.
    pub fragments: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub hyperparams: Hyperparams,
    pub threshold: f64,
    pub min_voxels: usize,
    pub radius_um: f64,
    pub step_um: f64,
    pub swc_radius_um: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let f = FragmentParams::default();
        Self {
            volume: None,
            probability: None,
            labels: None,
            model: None,
            fragments: None,
            out_dir: PathBuf::from("out"),
            hyperparams: Hyperparams::default(),
            threshold: f.threshold,
            min_voxels: f.min_voxels,
            radius_um: f.radius_um,
            step_um: 1.0,
            swc_radius_um: crate::metrics::DEFAULT_SWC_RADIUS_UM,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, SessionError> {
        let mut cfg: Self = read_json(path)?;
        if let Some(base) = path.parent() {
            cfg.resolve_against(base);
        }
        Ok(cfg)
    }

    pub fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.volume,
            &mut self.probability,
            &mut self.labels,
            &mut self.model,
            &mut self.fragments,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.out_dir);
    }

    pub fn fragment_params(&self) -> FragmentParams {
        FragmentParams {
            threshold: self.threshold,
            min_voxels: self.min_voxels,
            radius_um: self.radius_um,
        }
    }

    fn require<'a>(&self, p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, SessionError> {
        p.as_deref()
            .ok_or_else(|| SessionError::Config(format!("`{what}` path is required")))
    }

    pub fn load_volume(&self) -> Result<Volume, SessionError> {
        Ok(load_volume(self.require(&self.volume, "volume")?)?)
    }

    /// The stored model if configured, else a fit on the labeled voxels.
    pub fn load_model(&self, volume: &Volume) -> Result<IntensityModel, SessionError> {
        if let Some(p) = &self.model {
            return read_json(p);
        }
        let labels: LabelSidecar = read_json(self.require(&self.labels, "labels")?)?;
        Ok(IntensityModel::fit_from_labels(volume, &labels)?)
    }

    /// Stored fragments if configured, else generated from the probability map.
    pub fn load_fragments(&self) -> Result<FragmentSet, SessionError> {
        if let Some(p) = &self.fragments {
            return Ok(FragmentSet::load(p, None)?);
        }
        let prob = load_probability_map(self.require(&self.probability, "probability")?)?;
        Ok(generate_fragments(&prob, &self.fragment_params())?)
    }

    pub fn load_tracer(&self) -> Result<Tracer, SessionError> {
        let volume = self.load_volume()?;
        let model = self.load_model(&volume)?;
        let fragments = self.load_fragments()?;
        Tracer::new(volume, model, fragments, self.hyperparams)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRequest {
    pub start_fragment: u32,
    #[serde(default)]
    pub start_orientation: Orientation,
    pub end_fragment: u32,
    #[serde(default)]
    pub end_orientation: Orientation,
}

/// A solved trace with the fragments it visits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceResult {
    pub request: TraceRequest,
    pub fragment_ids: Vec<u32>,
    #[serde(flatten)]
    pub path: TracePath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub fragment_count: usize,
    pub state_count: usize,
    pub edge_count: usize,
    pub hyperparams: Hyperparams,
}

/// A fragment's end points projected onto a MIP, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedFragment {
    pub id: u32,
    pub x0_px: [f64; 2],
    pub x1_px: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PickRequest {
    pub x_px: f64,
    pub y_px: f64,
    #[serde(default)]
    pub axis: Axis,
    #[serde(default)]
    pub radius_px: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PickResponse {
    pub fragment_id: u32,
    pub distance_px: f64,
}

pub const DEFAULT_PICK_RADIUS_PX: f64 = 5.0;

/// Body of a trace creation request: the trace endpoints plus an optional label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateTrace {
    #[serde(flatten)]
    pub request: TraceRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// A trace kept by a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTrace {
    pub id: u64,
    pub name: String,
    #[serde(flatten)]
    pub result: TraceResult,
}

/// Fragment label overlay for one projection axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentOverlay {
    pub axis: Axis,
    pub width: usize,
    pub height: usize,
    /// RGBA PNG, transparent where no fragment projects.
    pub overlay_png_base64: String,
    pub fragments: Vec<ProjectedFragment>,
}

/// Machine-readable error payload used by the service and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

/// Everything needed to answer trace queries. Immutable once built.
#[derive(Debug)]
pub struct Tracer {
    pub volume: Volume,
    pub model: IntensityModel,
    pub fragments: FragmentSet,
    /// Per-voxel fragment ids.
    pub labels: LabelVolume,
    pub graph: TransitionGraph,
}

impl Tracer {
    pub fn new(
        volume: Volume,
        model: IntensityModel,
        fragments: FragmentSet,
        hyper: Hyperparams,
    ) -> Result<Self, SessionError> {
        let labels = fragments.label_volume();
        volume.same_geometry(&labels)?;
        let graph = build_graph(
            make_states(&fragments),
            &fragments,
            &model,
            &volume,
            &labels,
            &hyper,
        )?;
        Ok(Self {
            volume,
            model,
            fragments,
            labels,
            graph,
        })
    }

    pub fn info(&self) -> SessionInfo {
        SessionInfo {
            dims: self.volume.dims(),
            spacing: self.volume.spacing(),
            fragment_count: self.fragments.len(),
            state_count: self.graph.states.len(),
            edge_count: self.graph.graph.num_edges(),
            hyperparams: self.graph.hyper,
        }
    }

    pub fn state_of(
        &self,
        fragment_id: u32,
        orientation: Orientation,
    ) -> Result<usize, TraceError> {
        let idx = self
            .fragments
            .index_of(fragment_id)
            .ok_or(TraceError::UnknownFragment(fragment_id))?;
        Ok(state_id(idx, orientation))
    }

    pub fn trace(&self, req: &TraceRequest) -> Result<TraceResult, TraceError> {
        let start = self.state_of(req.start_fragment, req.start_orientation)?;
        let end = self.state_of(req.end_fragment, req.end_orientation)?;
        let sp = shortest_path(&self.graph.graph, start, end, Algorithm::Dijkstra)?.ok_or(
            TraceError::NoPath {
                start: req.start_fragment,
                end: req.end_fragment,
            },
        )?;
        let log_prob = path_log_prob(&sp.states, &self.graph.graph)?;
        let states = &self.graph.states;
        Ok(TraceResult {
            request: *req,
            fragment_ids: sp.states.iter().map(|&s| states[s].fragment_id).collect(),
            path: TracePath {
                polyline_um: sequence_to_polyline(&sp.states, states),
                states: sp.states,
                weight: sp.weight,
                log_prob,
            },
        })
    }

    pub fn projected_fragments(&self, axis: Axis) -> Vec<ProjectedFragment> {
        let spacing = self.volume.spacing();
        let px = |p| {
            let (u, v) = project_point(p, spacing, axis);
            [u, v]
        };
        self.fragments
            .fragments
            .iter()
            .map(|f| ProjectedFragment {
                id: f.id,
                x0_px: px(f.x0),
                x1_px: px(f.x1),
            })
            .collect()
    }

    /// Fragment whose projected end lies nearest the click, within the
    /// pick radius; ties go to the smaller id.
    pub fn pick(&self, req: &PickRequest) -> Option<PickResponse> {
        let radius = req.radius_px.unwrap_or(DEFAULT_PICK_RADIUS_PX);
        let click = [req.x_px, req.y_px, 0.0];
        self.projected_fragments(req.axis)
            .into_iter()
            .map(|f| {
                let d = [f.x0_px, f.x1_px]
                    .iter()
                    .map(|p| dist([p[0], p[1], 0.0], click))
                    .fold(f64::INFINITY, f64::min);
                PickResponse {
                    fragment_id: f.id,
                    distance_px: d,
                }
            })
            .filter(|p| p.distance_px <= radius)
            .min_by(|a, b| {
                a.distance_px
                    .total_cmp(&b.distance_px)
                    .then(a.fragment_id.cmp(&b.fragment_id))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fragments::{estimate_endpoints, estimate_tangents, Fragment};
    use crate::volume::{Grid, Index3};

    fn rod(id: u32, xs: std::ops::Range<usize>) -> Fragment {
        let voxels: Vec<Index3> = xs.map(|i| [i, 2, 2]).collect();
        let (x0, x1) = estimate_endpoints(&voxels, [1.0; 3]).unwrap();
        let (tau0, tau1) = estimate_tangents(x0, x1).unwrap();
        Fragment {
            id,
            center: voxels[0],
            voxels,
            x0,
            x1,
            tau0,
            tau1,
        }
    }

    fn tracer() -> Tracer {
        let dims = [60, 5, 5];
        let mut vol = Grid::filled(dims, [1.0; 3], 100u16).unwrap();
        for i in 0..60 {
            vol.set([i, 2, 2], 200).unwrap();
        }
        let frags = FragmentSet {
            dims,
            spacing: [1.0; 3],
            fragments: vec![rod(1, 0..6), rod(2, 8..14), rod(3, 16..22), rod(4, 50..56)],
        };
        let model = IntensityModel::fit(&[190.0, 200.0, 210.0], &[90.0, 100.0, 110.0]).unwrap();
        Tracer::new(vol, model, frags, Hyperparams::default()).unwrap()
    }

    fn req(a: u32, ao: Orientation, b: u32, bo: Orientation) -> TraceRequest {
        TraceRequest {
            start_fragment: a,
            start_orientation: ao,
            end_fragment: b,
            end_orientation: bo,
        }
    }

    #[test]
    fn traces_along_the_rod() {
        let t = tracer();
        // Endpoint selection picks the lower-index end as x0, so forward heads +x.
        assert!(t.fragments.fragments[0].x0[0] < t.fragments.fragments[0].x1[0]);
        let r = t
            .trace(&req(1, Orientation::Forward, 3, Orientation::Forward))
            .unwrap();
        assert_eq!(r.fragment_ids, vec![1, 2, 3]);
        assert!((r.path.log_prob + r.path.weight).abs() < 1e-9);
        assert_eq!(r.path.polyline_um.len(), 6);
    }

    #[test]
    fn same_fragment_is_a_single_state() {
        let t = tracer();
        let r = t
            .trace(&req(2, Orientation::Forward, 2, Orientation::Forward))
            .unwrap();
        assert_eq!(r.path.states.len(), 1);
        assert_eq!(r.path.weight, 0.0);
    }

    #[test]
    fn errors() {
        let t = tracer();
        assert!(matches!(
            t.trace(&req(9, Orientation::Forward, 1, Orientation::Forward)),
            Err(TraceError::UnknownFragment(9))
        ));
        assert!(matches!(
            t.trace(&req(1, Orientation::Forward, 4, Orientation::Forward)),
            Err(TraceError::NoPath { start: 1, end: 4 })
        ));
    }

    #[test]
    fn picking() {
        let t = tracer();
        let p = |x: f64, y: f64| PickRequest {
            x_px: x,
            y_px: y,
            axis: Axis::Z,
            radius_px: None,
        };
        assert_eq!(t.pick(&p(8.5, 2.0)).unwrap().fragment_id, 2);
        assert_eq!(t.pick(&p(13.0, 3.0)).unwrap().fragment_id, 2);
        // Equidistant from fragment 1's head (5) and fragment 2's tail (8).
        assert_eq!(t.pick(&p(6.5, 2.0)).unwrap().fragment_id, 1);
        assert!(t.pick(&p(35.0, 2.0)).is_none());
    }

    #[test]
    fn config_paths_resolve_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"volume": "v.json", "out_dir": "o", "hyperparams": {"alpha_d": 5}}"#,
        )
        .unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.volume.unwrap(), dir.path().join("v.json"));
        assert_eq!(cfg.out_dir, dir.path().join("o"));
        assert_eq!(cfg.hyperparams.alpha_d, 5.0);
        assert_eq!(cfg.hyperparams.alpha_kappa, 1000.0);
        std::fs::write(&path, r#"{"bogus": 1}"#).unwrap();
        assert!(PipelineConfig::load(&path).is_err());
    }
}
