//! HMM state space and the weighted transition graph.
//!
//! Every fragment yields two oriented states. Transitions follow a Boltzmann
//! prior with energy `U = α_d ‖gap‖² + α_κ κ²` normalized over the allowed
//! successors; the image term is the clamped foreground log-likelihood of the
//! successor fragment plus the rasterized gap between the two fragments.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appearance::{Class, IntensityModel, LogAlphaTable};
use crate::fragments::{bresenham3d, FragmentSet};
use crate::geom::{dot, norm, normalized, sub, Point3};
use crate::volume::{Index3, LabelVolume, Volume, VolumeError};

/// Gaps shorter than this (µm) are treated as touching.
pub const DEGENERATE_GAP_UM: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("state {0} out of range")]
    UnknownState(usize),
    #[error("fragment {0} out of range")]
    UnknownFragment(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    #[default]
    Forward,
    Reversed,
}

impl Orientation {
    pub fn bit(self) -> usize {
        match self {
            Orientation::Forward => 0,
            Orientation::Reversed => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Orientation::Forward => Orientation::Reversed,
            Orientation::Reversed => Orientation::Forward,
        }
    }
}

impl std::str::FromStr for Orientation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "forward" | "fwd" | "f" | "0" => Ok(Orientation::Forward),
            "reversed" | "reverse" | "rev" | "r" | "1" => Ok(Orientation::Reversed),
            other => Err(format!("unknown orientation {other:?}")),
        }
    }
}

/// An oriented fragment: tail `x0`, head `x1`, and the outward unit
/// tangents at each end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub id: usize,
    /// Position of the fragment in its [`FragmentSet`].
    pub fragment: usize,
    pub fragment_id: u32,
    pub orientation: Orientation,
    pub x0: Point3,
    pub x1: Point3,
    pub tau0: Point3,
    pub tau1: Point3,
}

/// `2 · fragment_index + orientation bit`.
pub fn state_id(fragment_index: usize, orientation: Orientation) -> usize {
    2 * fragment_index + orientation.bit()
}

impl State {
    /// The same fragment traversed the other way: endpoints swap and each
    /// tangent moves with its endpoint, so tangents stay outward-pointing.
    pub fn reversed(&self) -> State {
        let orientation = self.orientation.flipped();
        State {
            id: state_id(self.fragment, orientation),
            orientation,
            x0: self.x1,
            x1: self.x0,
            tau0: self.tau1,
            tau1: self.tau0,
            ..*self
        }
    }
}

/// Two states per fragment, forward first.
pub fn make_states(frags: &FragmentSet) -> Vec<State> {
    frags
        .fragments
        .iter()
        .enumerate()
        .flat_map(|(i, f)| {
            let fwd = State {
                id: state_id(i, Orientation::Forward),
                fragment: i,
                fragment_id: f.id,
                orientation: Orientation::Forward,
                x0: f.x0,
                x1: f.x1,
                tau0: f.tau0,
                tau1: f.tau1,
            };
            [fwd, fwd.reversed()]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Weight of the squared gap, 1/µm².
    pub alpha_d: f64,
    /// Weight of the squared discrete curvature.
    pub alpha_kappa: f64,
    pub d_max_um: f64,
    pub theta_max_deg: f64,
    /// Also prune on the angle at the successor's tail.
    pub prune_successor_angle: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha_d: 10.0,
            alpha_kappa: 1000.0,
            d_max_um: 15.0,
            theta_max_deg: 150.0,
            prune_successor_angle: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: &str| Err(GraphError::InvalidHyperparams(m.to_string()));
        if !(self.alpha_d >= 0.0 && self.alpha_d.is_finite()) {
            return bad("alpha_d must be finite and >= 0");
        }
        if !(self.alpha_kappa >= 0.0 && self.alpha_kappa.is_finite()) {
            return bad("alpha_kappa must be finite and >= 0");
        }
        if !(self.d_max_um > 0.0 && self.d_max_um.is_finite()) {
            return bad("d_max_um must be > 0");
        }
        if !(self.theta_max_deg > 0.0 && self.theta_max_deg <= 180.0) {
            return bad("theta_max_deg must lie in (0, 180]");
        }
        Ok(())
    }
}

fn connecting_direction(prev: &State, next: &State) -> Point3 {
    let gap = sub(next.x0, prev.x1);
    if norm(gap) < DEGENERATE_GAP_UM {
        prev.tau1
    } else {
        normalized(gap).unwrap_or(prev.tau1)
    }
}

/// Mean of the two discrete squared curvatures at the join.
pub fn curvature_sq(prev: &State, next: &State) -> f64 {
    let tau_c = connecting_direction(prev, next);
    let k1 = 1.0 - dot(prev.tau1, tau_c);
    let k2 = 1.0 + dot(tau_c, next.tau0);
    0.5 * (k1 + k2)
}

pub fn energy(prev: &State, next: &State, hyper: &Hyperparams) -> f64 {
    let gap = sub(next.x0, prev.x1);
    hyper.alpha_d * dot(gap, gap) + hyper.alpha_kappa * curvature_sq(prev, next)
}

fn angle_deg(cos: f64) -> f64 {
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Transition support: distinct fragments, gap within `d_max`, bend within `theta_max`.
pub fn allowed(prev: &State, next: &State, hyper: &Hyperparams) -> bool {
    if prev.id == next.id || prev.fragment == next.fragment {
        return false;
    }
    if norm(sub(next.x0, prev.x1)) > hyper.d_max_um {
        return false;
    }
    let tau_c = connecting_direction(prev, next);
    if angle_deg(dot(prev.tau1, tau_c)) > hyper.theta_max_deg {
        return false;
    }
    if hyper.prune_successor_angle && angle_deg(-dot(tau_c, next.tau0)) > hyper.theta_max_deg {
        return false;
    }
    true
}

/// Boltzmann log-probabilities over the allowed members of `candidates`,
/// as `(state id, log p)` in candidate order. Empty when `prev` is a sink.
pub fn transition_log_probs(
    prev: &State,
    candidates: &[&State],
    hyper: &Hyperparams,
) -> Vec<(usize, f64)> {
    let energies: Vec<(usize, f64)> = candidates
        .iter()
        .filter(|s| allowed(prev, s, hyper))
        .map(|s| (s.id, energy(prev, s, hyper)))
        .collect();
    if energies.is_empty() {
        return energies;
    }
    let u_min = energies.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let log_z = -u_min
        + energies
            .iter()
            .map(|e| (u_min - e.1).exp())
            .sum::<f64>()
            .ln();
    energies
        .into_iter()
        .map(|(id, u)| (id, -u - log_z))
        .collect()
}

// ---------------------------------------------------------------------------
// Abstract scored graph

/// One outgoing transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub to: usize,
    /// log p(to | from), ≤ 0.
    pub log_prior: f64,
    /// Log-likelihood of the imputed gap voxels, ≤ 0.
    pub log_gap: f64,
}

/// Scored directed graph over states with fragment membership.
///
/// The image term of entering state `s` splits into the fragment part
/// (`fragment_log_lik` of `s`'s fragment, counted only on first visit) and
/// the per-edge gap part. Self-transitions are representable; the graph
/// builder never creates them.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGraph {
    fragment_of: Vec<usize>,
    fragment_log_lik: Vec<f64>,
    adjacency: Vec<Vec<Edge>>,
}

impl StateGraph {
    pub fn new(
        fragment_of: Vec<usize>,
        fragment_log_lik: Vec<f64>,
        mut adjacency: Vec<Vec<Edge>>,
    ) -> Result<Self, GraphError> {
        let n = fragment_of.len();
        if adjacency.len() != n {
            return Err(GraphError::UnknownState(adjacency.len().min(n)));
        }
        if let Some(&f) = fragment_of.iter().find(|&&f| f >= fragment_log_lik.len()) {
            return Err(GraphError::UnknownFragment(f));
        }
        for edges in &mut adjacency {
            if let Some(e) = edges.iter().find(|e| e.to >= n) {
                return Err(GraphError::UnknownState(e.to));
            }
            edges.sort_by_key(|e| e.to);
            edges.dedup_by_key(|e| e.to);
        }
        Ok(Self {
            fragment_of,
            fragment_log_lik,
            adjacency,
        })
    }

    pub fn num_states(&self) -> usize {
        self.fragment_of.len()
    }

    pub fn num_fragments(&self) -> usize {
        self.fragment_log_lik.len()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    pub fn fragment_of(&self, state: usize) -> usize {
        self.fragment_of[state]
    }

    /// log α₁ of the state's whole fragment.
    pub fn fragment_log_lik(&self, state: usize) -> f64 {
        self.fragment_log_lik[self.fragment_of[state]]
    }

    pub fn successors(&self, state: usize) -> &[Edge] {
        &self.adjacency[state]
    }

    pub fn edge(&self, from: usize, to: usize) -> Option<&Edge> {
        let edges = self.adjacency.get(from)?;
        edges
            .binary_search_by_key(&to, |e| e.to)
            .ok()
            .map(|i| &edges[i])
    }

    /// Fresh-visit log-likelihood of entering `e.to` along `e`.
    pub fn edge_log_lik(&self, e: &Edge) -> f64 {
        self.fragment_log_lik(e.to) + e.log_gap
    }

    /// Shortest-path weight `−log α₁(F_next) − log α₁(gap) − log p`.
    pub fn edge_weight(&self, e: &Edge) -> f64 {
        -(self.edge_log_lik(e) + e.log_prior)
    }

    /// Copy with one edge removed.
    pub fn without_edge(&self, from: usize, to: usize) -> Self {
        let mut g = self.clone();
        if let Some(edges) = g.adjacency.get_mut(from) {
            edges.retain(|e| e.to != to);
        }
        g
    }
}

// ---------------------------------------------------------------------------
// Image likelihood and graph construction

/// Voxels on the rasterized line from `prev`'s head to `next`'s tail,
/// excluding voxels of either fragment and voxels outside the volume.
pub fn imputed_voxels(prev: &State, next: &State, labels: &LabelVolume) -> Vec<Index3> {
    let a = labels.physical_to_voxel(prev.x1);
    let b = labels.physical_to_voxel(next.x0);
    bresenham3d(a, b)
        .into_iter()
        .filter(|&p| labels.contains_signed(p))
        .map(|p| p.map(|c| c as usize))
        .filter(|&v| {
            let l = labels[v];
            l != prev.fragment_id && l != next.fragment_id
        })
        .collect()
}

/// Clamped foreground log-likelihoods over one volume.
pub struct ImageLikelihood<'a> {
    volume: &'a Volume,
    labels: &'a LabelVolume,
    table: LogAlphaTable,
    model: &'a IntensityModel,
}

impl<'a> ImageLikelihood<'a> {
    pub fn new(
        model: &'a IntensityModel,
        volume: &'a Volume,
        labels: &'a LabelVolume,
    ) -> Result<Self, GraphError> {
        volume.same_geometry(labels)?;
        Ok(Self {
            volume,
            labels,
            table: LogAlphaTable::new(model, Class::Foreground, volume),
            model,
        })
    }

    #[inline]
    fn log_alpha1(&self, v: Index3) -> f64 {
        let i = self.volume[v];
        self.table
            .get(i)
            .unwrap_or_else(|| self.model.eval_alpha(f64::from(i), Class::Foreground).ln())
    }

    pub fn sum(&self, voxels: &[Index3]) -> f64 {
        voxels.iter().map(|&v| self.log_alpha1(v)).sum()
    }

    pub fn gap_log_lik(&self, prev: &State, next: &State) -> f64 {
        self.sum(&imputed_voxels(prev, next, self.labels))
    }
}

/// States plus the scored graph built from them.
#[derive(Debug, Clone)]
pub struct TransitionGraph {
    pub states: Vec<State>,
    pub graph: StateGraph,
    pub hyper: Hyperparams,
}

/// Tail points bucketed on a grid of `d_max`-sized cells.
struct TailIndex {
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl TailIndex {
    fn new(states: &[State], cell: f64) -> Self {
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for s in states {
            buckets.entry(Self::key(s.x0, cell)).or_default().push(s.id);
        }
        Self { cell, buckets }
    }

    fn key(p: Point3, cell: f64) -> [i64; 3] {
        p.map(|c| (c / cell).floor() as i64)
    }

    /// Ids of tails in the 27 cells around `p`, ascending.
    fn near(&self, p: Point3) -> Vec<usize> {
        let k = Self::key(p, self.cell);
        let mut out = Vec::new();
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(b) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend_from_slice(b);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Build every allowed transition with its prior and image terms.
pub fn build_graph(
    states: Vec<State>,
    frags: &FragmentSet,
    model: &IntensityModel,
    volume: &Volume,
    labels: &LabelVolume,
    hyper: &Hyperparams,
) -> Result<TransitionGraph, GraphError> {
    hyper.validate()?;
    for (i, s) in states.iter().enumerate() {
        if s.id != i {
            return Err(GraphError::UnknownState(s.id));
        }
        if s.fragment >= frags.len() {
            return Err(GraphError::UnknownFragment(s.fragment));
        }
    }
    let lik = ImageLikelihood::new(model, volume, labels)?;
    let fragment_log_lik: Vec<f64> = frags
        .fragments
        .par_iter()
        .map(|f| lik.sum(&f.voxels))
        .collect();

    let index = TailIndex::new(&states, hyper.d_max_um);
    let adjacency: Vec<Vec<Edge>> = states
        .par_iter()
        .map(|prev| {
            let near = index.near(prev.x1);
            let candidates: Vec<&State> = near.iter().map(|&i| &states[i]).collect();
            transition_log_probs(prev, &candidates, hyper)
                .into_iter()
                .map(|(to, log_prior)| Edge {
                    to,
                    log_prior,
                    log_gap: lik.gap_log_lik(prev, &states[to]),
                })
                .collect()
        })
        .collect();

    let fragment_of = states.iter().map(|s| s.fragment).collect();
    Ok(TransitionGraph {
        graph: StateGraph::new(fragment_of, fragment_log_lik, adjacency)?,
        states,
        hyper: *hyper,
    })
}

#[derive(Serialize)]
struct EdgeLine {
    from: usize,
    to: usize,
    log_prior: f64,
    log_lik: f64,
    w: f64,
}

impl TransitionGraph {
    /// Debug dump, one JSON edge per line.
    pub fn write_edges_jsonl(&self, mut out: impl Write) -> Result<(), GraphError> {
        for from in 0..self.graph.num_states() {
            for e in self.graph.successors(from) {
                let line = EdgeLine {
                    from,
                    to: e.to,
                    log_prior: e.log_prior,
                    log_lik: self.graph.edge_log_lik(e),
                    w: self.graph.edge_weight(e),
                };
                serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}
