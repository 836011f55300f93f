//! Most-probable state sequences.
//!
//! With every α₁ capped at 1 all edge weights are nonnegative, so the best
//! sequence between two fixed states is a shortest path. The exhaustive and
//! naive-trellis solvers exist to check that claim.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point3;
use crate::hmm_graph::{Edge, State, StateGraph};

/// Relative tolerance under which two path weights count as tied.
const TIE_RTOL: f64 = 1e-12;

pub const BRUTE_FORCE_MAX_STATES: usize = 12;
pub const BRUTE_FORCE_MAX_LEN: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("state {0} out of range")]
    UnknownState(usize),
    #[error("negative edge weight {weight} on {from} -> {to}")]
    NegativeWeight { from: usize, to: usize, weight: f64 },
    #[error("negative cycle reachable from the start state")]
    NegativeCycle,
    #[error("no transition {from} -> {to}")]
    NotAnEdge { from: usize, to: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("exhaustive search limited to {max_states} states and length {max_len}")]
    TooLarge { max_states: usize, max_len: usize },
    #[error("expected {expected} per-fragment values, got {got}")]
    FragmentCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Dijkstra,
    /// Tolerates negative edges; reports negative cycles.
    BellmanFord,
}

/// A minimum-weight state sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortestPath {
    pub states: Vec<usize>,
    pub weight: f64,
}

/// A solved trace as reported to users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePath {
    pub states: Vec<usize>,
    pub weight: f64,
    /// Log path probability without the constant initial term.
    pub log_prob: f64,
    pub polyline_um: Vec<Point3>,
}

fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_RTOL * a.abs().max(b.abs()).max(1.0)
}

/// Parent-pointer path bookkeeping shared by both algorithms.
struct Labels {
    dist: Vec<f64>,
    parent: Vec<Option<usize>>,
}

impl Labels {
    fn new(n: usize, start: usize) -> Self {
        let mut dist = vec![f64::INFINITY; n];
        dist[start] = 0.0;
        Self {
            dist,
            parent: vec![None; n],
        }
    }

    fn path(&self, mut v: usize) -> Vec<usize> {
        let mut out = vec![v];
        // Bounded so a transient parent cycle (negative cycles under
        // Bellman–Ford) cannot hang us.
        while let Some(p) = self.parent[v].filter(|_| out.len() <= self.parent.len()) {
            out.push(p);
            v = p;
        }
        out.reverse();
        out
    }

    /// Try to reach `v` through `u`. Returns true when `v`'s label changed.
    fn relax(&mut self, u: usize, v: usize, w: f64) -> bool {
        let cand = self.dist[u] + w;
        let cur = self.dist[v];
        if cur.is_finite() && tied(cand, cur) {
            // Equal weight: keep the lexicographically smaller sequence.
            let via = self.path(u);
            if via.contains(&v) {
                return false;
            }
            let mut cand_path = via;
            cand_path.push(v);
            if cand_path < self.path(v) {
                self.parent[v] = Some(u);
                self.dist[v] = cand.min(cur);
                return true;
            }
            false
        } else if cand < cur {
            self.dist[v] = cand;
            self.parent[v] = Some(u);
            true
        } else {
            false
        }
    }
}

#[derive(PartialEq)]
struct HeapItem {
    dist: f64,
    state: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.state.cmp(&self.state))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn check_state(graph: &StateGraph, s: usize) -> Result<(), SolveError> {
    if s < graph.num_states() {
        Ok(())
    } else {
        Err(SolveError::UnknownState(s))
    }
}

/// Minimum-weight path from `start` to `end`; `Ok(None)` when unreachable.
///
/// Ties within a relative 1e-12 go to the lexicographically smaller
/// state-id sequence.
pub fn shortest_path(
    graph: &StateGraph,
    start: usize,
    end: usize,
    algorithm: Algorithm,
) -> Result<Option<ShortestPath>, SolveError> {
    check_state(graph, start)?;
    check_state(graph, end)?;
    if start == end {
        return Ok(Some(ShortestPath {
            states: vec![start],
            weight: 0.0,
        }));
    }
    let labels = match algorithm {
        Algorithm::Dijkstra => dijkstra(graph, start, end)?,
        Algorithm::BellmanFord => bellman_ford(graph, start)?,
    };
    if !labels.dist[end].is_finite() {
        return Ok(None);
    }
    Ok(Some(ShortestPath {
        states: labels.path(end),
        weight: labels.dist[end],
    }))
}

fn dijkstra(graph: &StateGraph, start: usize, end: usize) -> Result<Labels, SolveError> {
    let mut labels = Labels::new(graph.num_states(), start);
    let mut heap = BinaryHeap::from([HeapItem {
        dist: 0.0,
        state: start,
    }]);
    while let Some(HeapItem { dist, state: u }) = heap.pop() {
        if dist > labels.dist[u] {
            continue;
        }
        if u == end
            && heap
                .peek()
                .is_none_or(|top| !tied(top.dist, dist) && top.dist > dist)
        {
            break;
        }
        for e in graph.successors(u) {
            let w = graph.edge_weight(e);
            if w < 0.0 {
                return Err(SolveError::NegativeWeight {
                    from: u,
                    to: e.to,
                    weight: w,
                });
            }
            if labels.relax(u, e.to, w) {
                heap.push(HeapItem {
                    dist: labels.dist[e.to],
                    state: e.to,
                });
            }
        }
    }
    Ok(labels)
}

fn bellman_ford(graph: &StateGraph, start: usize) -> Result<Labels, SolveError> {
    let n = graph.num_states();
    let mut labels = Labels::new(n, start);
    for round in 0..=n {
        let mut changed = false;
        for u in 0..n {
            if !labels.dist[u].is_finite() {
                continue;
            }
            for e in graph.successors(u) {
                let cand = labels.dist[u] + graph.edge_weight(e);
                if round == n && cand < labels.dist[e.to] && !tied(cand, labels.dist[e.to]) {
                    return Err(SolveError::NegativeCycle);
                }
                changed |= labels.relax(u, e.to, graph.edge_weight(e));
            }
        }
        if !changed {
            break;
        }
    }
    Ok(labels)
}

fn edge(graph: &StateGraph, from: usize, to: usize) -> Result<&Edge, SolveError> {
    graph
        .edge(from, to)
        .ok_or(SolveError::NotAnEdge { from, to })
}

/// Log path probability: every transition contributes its prior and gap
/// terms, each fragment's likelihood counts on first appearance only, and
/// the start state's fragment counts as already seen.
pub fn path_log_prob(seq: &[usize], graph: &StateGraph) -> Result<f64, SolveError> {
    let (&first, _) = seq.split_first().ok_or(SolveError::EmptySequence)?;
    check_state(graph, first)?;
    let mut seen = vec![false; graph.num_fragments()];
    seen[graph.fragment_of(first)] = true;
    let mut total = 0.0;
    for w in seq.windows(2) {
        let e = edge(graph, w[0], w[1])?;
        let f = graph.fragment_of(w[1]);
        if !seen[f] {
            seen[f] = true;
            total += graph.fragment_log_lik(w[1]);
        }
        total += e.log_gap + e.log_prior;
    }
    Ok(total)
}

/// Full-image joint log-probability up to the constant initial term: each
/// fresh fragment contributes `log α₁ − log α₀` summed over its voxels, each
/// transition its log prior. `log_alpha0` is indexed by fragment.
pub fn joint_log_prob_full(
    seq: &[usize],
    graph: &StateGraph,
    log_alpha0: &[f64],
) -> Result<f64, SolveError> {
    if log_alpha0.len() != graph.num_fragments() {
        return Err(SolveError::FragmentCount {
            expected: graph.num_fragments(),
            got: log_alpha0.len(),
        });
    }
    let (&first, _) = seq.split_first().ok_or(SolveError::EmptySequence)?;
    check_state(graph, first)?;
    let mut seen = vec![false; graph.num_fragments()];
    seen[graph.fragment_of(first)] = true;
    let mut total = 0.0;
    for w in seq.windows(2) {
        let e = edge(graph, w[0], w[1])?;
        let f = graph.fragment_of(w[1]);
        if !seen[f] {
            seen[f] = true;
            total += graph.fragment_log_lik(w[1]) - log_alpha0[f];
        }
        total += e.log_prior;
    }
    Ok(total)
}

/// Best sequence found by exhaustive search, with its log probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    pub states: Vec<usize>,
    pub log_prob: f64,
}

fn guard(graph: &StateGraph, len: usize) -> Result<(), SolveError> {
    if graph.num_states() > BRUTE_FORCE_MAX_STATES || len > BRUTE_FORCE_MAX_LEN {
        return Err(SolveError::TooLarge {
            max_states: BRUTE_FORCE_MAX_STATES,
            max_len: BRUTE_FORCE_MAX_LEN,
        });
    }
    Ok(())
}

/// Is `a` preferred over `b`: higher probability, then shorter, then
/// lexicographically smaller.
fn preferred(a: &ScoredSequence, b: &ScoredSequence) -> bool {
    if tied(a.log_prob, b.log_prob) {
        (a.states.len(), &a.states) < (b.states.len(), &b.states)
    } else {
        a.log_prob > b.log_prob
    }
}

/// Walk every sequence that follows graph edges, starting at `start`,
/// and score those ending at `end` whose length is accepted by `keep`.
fn enumerate(
    graph: &StateGraph,
    start: usize,
    end: usize,
    max_len: usize,
    keep: impl Fn(usize) -> bool,
) -> Result<Option<ScoredSequence>, SolveError> {
    check_state(graph, start)?;
    check_state(graph, end)?;
    let mut best: Option<ScoredSequence> = None;
    let mut stack = vec![start];
    fn walk(
        graph: &StateGraph,
        end: usize,
        max_len: usize,
        keep: &dyn Fn(usize) -> bool,
        stack: &mut Vec<usize>,
        best: &mut Option<ScoredSequence>,
    ) -> Result<(), SolveError> {
        let last = *stack.last().expect("nonempty");
        if last == end && keep(stack.len()) {
            let cand = ScoredSequence {
                log_prob: path_log_prob(stack, graph)?,
                states: stack.clone(),
            };
            if best.as_ref().is_none_or(|b| preferred(&cand, b)) {
                *best = Some(cand);
            }
        }
        if stack.len() == max_len {
            return Ok(());
        }
        for e in graph.successors(last) {
            stack.push(e.to);
            walk(graph, end, max_len, keep, stack, best)?;
            stack.pop();
        }
        Ok(())
    }
    walk(graph, end, max_len, &keep, &mut stack, &mut best)?;
    Ok(best)
}

/// Exhaustive maximum of [`path_log_prob`] over all sequences (repeats
/// allowed) of length `1..=n_max` from `start` to `end`.
pub fn brute_force_best(
    graph: &StateGraph,
    start: usize,
    end: usize,
    n_max: usize,
) -> Result<Option<ScoredSequence>, SolveError> {
    guard(graph, n_max)?;
    enumerate(graph, start, end, n_max, |_| true)
}

/// As [`brute_force_best`], restricted to sequences of exactly `n` states.
pub fn brute_force_best_of_length(
    graph: &StateGraph,
    start: usize,
    end: usize,
    n: usize,
) -> Result<Option<ScoredSequence>, SolveError> {
    guard(graph, n)?;
    enumerate(graph, start, end, n, |len| len == n)
}

/// Classic trellis over exactly `n` steps keeping one survivor per
/// (state, step). Each survivor decides fresh-versus-repeat from its own
/// history only, so a survivor discarded early can never be recovered even
/// if it would have made later fragments cheaper. Deliberately not exact.
pub fn naive_viterbi(graph: &StateGraph, start: usize, end: usize, n: usize) -> Option<Vec<usize>> {
    if start >= graph.num_states() || end >= graph.num_states() || n == 0 {
        return None;
    }
    let ns = graph.num_states();
    // (score, survivor path) per state.
    let mut layer: Vec<Option<(f64, Vec<usize>)>> = vec![None; ns];
    layer[start] = Some((0.0, vec![start]));
    for _ in 1..n {
        let mut next: Vec<Option<(f64, Vec<usize>)>> = vec![None; ns];
        for (u, cell) in layer.iter().enumerate() {
            let Some((score, path)) = cell else { continue };
            for e in graph.successors(u) {
                let f = graph.fragment_of(e.to);
                let fresh = !path.iter().any(|&s| graph.fragment_of(s) == f);
                let term = e.log_prior
                    + e.log_gap
                    + if fresh {
                        graph.fragment_log_lik(e.to)
                    } else {
                        0.0
                    };
                let cand = score + term;
                let better = match &next[e.to] {
                    None => true,
                    Some((cur, cur_path)) => {
                        cand > *cur && !tied(cand, *cur) || tied(cand, *cur) && path < cur_path
                    }
                };
                if better {
                    let mut p = path.clone();
                    p.push(e.to);
                    next[e.to] = Some((cand, p));
                }
            }
        }
        layer = next;
    }
    layer[end].take().map(|(_, p)| p)
}

/// `[s₁.x0, s₁.x1, s₂.x0, s₂.x1, …]` with consecutive duplicates merged.
pub fn sequence_to_polyline(seq: &[usize], states: &[State]) -> Vec<Point3> {
    let mut out: Vec<Point3> = Vec::with_capacity(2 * seq.len());
    for &s in seq {
        for p in [states[s].x0, states[s].x1] {
            if out.last() != Some(&p) {
                out.push(p);
            }
        }
    }
    out
}
