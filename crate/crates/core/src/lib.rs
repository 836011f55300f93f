//! Most-probable-path tracing of thin neuronal processes.
//!
//! A probability map is thresholded and cut into small fragments; each
//! fragment becomes two oriented hidden states, and the best state sequence
//! between two user-chosen fragments is found as a shortest path whose edge
//! weights combine a curvature/gap prior with an intensity likelihood.

pub mod appearance;
pub mod fragments;
pub mod geom;
pub mod hmm_graph;
pub mod metrics;
pub mod phantom;
pub mod solver;
pub mod tracer;
pub mod volume;

pub use appearance::{IntensityModel, Kde, LabelSidecar};
pub use fragments::{generate_fragments, Fragment, FragmentParams, FragmentSet};
pub use hmm_graph::{Hyperparams, Orientation, State, StateGraph, TransitionGraph};
pub use metrics::Polyline;
pub use solver::TracePath;
pub use tracer::{PipelineConfig, TraceRequest, TraceResult, Tracer};
pub use volume::{Axis, Grid, Volume};
