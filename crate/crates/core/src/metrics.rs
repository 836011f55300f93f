//! Reconstruction comparison and SWC interchange.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geom::{dist, lerp, Point3};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("polyline is empty")]
    Empty,
    #[error("step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("swc line {line}: {reason}")]
    Swc { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Ordered points in µm; never empty, no consecutive duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline(Vec<Point3>);

impl Polyline {
    /// Consecutive duplicate points are merged.
    pub fn new(mut points: Vec<Point3>) -> Result<Self, MetricsError> {
        points.dedup();
        if points.is_empty() {
            return Err(MetricsError::Empty);
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[Point3] {
        &self.0
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn arc_length(&self) -> f64 {
        self.0.windows(2).map(|w| dist(w[0], w[1])).sum()
    }
}

/// Resample so that consecutive points are at most `step_um` apart.
///
/// Each segment is split into `ceil(len/step)` equal pieces, so every
/// original vertex survives and the arc length is unchanged. A segment
/// shorter than `step_um` keeps just its endpoints.
pub fn resample_polyline(p: &Polyline, step_um: f64) -> Result<Polyline, MetricsError> {
    if !(step_um > 0.0 && step_um.is_finite()) {
        return Err(MetricsError::InvalidStep(step_um));
    }
    let pts = p.points();
    let mut out = vec![pts[0]];
    for w in pts.windows(2) {
        let pieces = (dist(w[0], w[1]) / step_um - 1e-12).ceil().max(1.0) as usize;
        for k in 1..pieces {
            out.push(lerp(w[0], w[1], k as f64 / pieces as f64));
        }
        out.push(w[1]);
    }
    Polyline::new(out)
}

/// Discrete Frechet distance by the standard coupling DP, O(|P|·|Q|).
pub fn frechet_discrete(p: &Polyline, q: &Polyline) -> f64 {
    let (p, q) = (p.points(), q.points());
    let m = q.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for (i, &a) in p.iter().enumerate() {
        for (j, &b) in q.iter().enumerate() {
            let d = dist(a, b);
            let reach = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = d.max(reach);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

/// Mean over `p` of the distance to the nearest point of `q`.
pub fn directed_divergence(p: &Polyline, q: &Polyline) -> f64 {
    let total: f64 = p
        .points()
        .iter()
        .map(|&a| {
            q.points()
                .iter()
                .map(|&b| dist(a, b))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / p.len() as f64
}

/// Symmetrized directed divergence.
pub fn spatial_distance(p: &Polyline, q: &Polyline) -> f64 {
    0.5 * (directed_divergence(p, q) + directed_divergence(q, p))
}

pub const DEFAULT_SWC_RADIUS_UM: f64 = 1.0;
const SWC_AXON: u32 = 2;

/// Unbranched SWC chain: ids from 1, each parented to the previous row.
pub fn swc_string(p: &Polyline, radius_um: f64) -> String {
    let mut s = String::from("# id type x y z radius parent\n");
    for (i, q) in p.points().iter().enumerate() {
        let parent = if i == 0 { -1 } else { i as i64 };
        writeln!(
            s,
            "{} {SWC_AXON} {} {} {} {radius_um} {parent}",
            i + 1,
            q[0],
            q[1],
            q[2]
        )
        .expect("writing to a String");
    }
    s
}

pub fn export_swc(p: &Polyline, radius_um: f64, path: &Path) -> Result<(), MetricsError> {
    std::fs::write(path, swc_string(p, radius_um))?;
    Ok(())
}

/// Parse an unbranched chain; anything else is rejected.
pub fn parse_swc(text: &str) -> Result<Polyline, MetricsError> {
    let mut points = Vec::new();
    let mut last_id: Option<i64> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| MetricsError::Swc {
            line: n + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, got {}", fields.len())));
        }
        let int = |s: &str| s.parse::<i64>().map_err(|e| err(format!("{s:?}: {e}")));
        let num = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("{s:?} is not a finite number")))
        };
        let id = int(fields[0])?;
        int(fields[1])?;
        let xyz = [num(fields[2])?, num(fields[3])?, num(fields[4])?];
        num(fields[5])?;
        let parent = int(fields[6])?;
        let expect_parent = last_id.unwrap_or(-1);
        if parent != expect_parent {
            return Err(err(format!(
                "parent {parent} breaks the chain (expected {expect_parent})"
            )));
        }
        if last_id.is_some_and(|l| id <= l) {
            return Err(err(format!("id {id} is not increasing")));
        }
        last_id = Some(id);
        points.push(xyz);
    }
    Polyline::new(points)
}

pub fn import_swc(path: &Path) -> Result<Polyline, MetricsError> {
    parse_swc(&std::fs::read_to_string(path)?)
}
