use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use fragtrace::metrics::{
    export_swc, frechet_discrete, import_swc, resample_polyline, spatial_distance,
};
use fragtrace::phantom::{generate_phantom, PhantomFiles, PhantomSpec};
use fragtrace::tracer::{SessionError, TraceError, TraceRequest, TraceResult};
use fragtrace::{generate_fragments, Orientation, PipelineConfig, Polyline, Tracer};
use fragtrace_client::{Client, ClientError};
use fragtrace_service::Session;

const MODEL_FILE: &str = "model.json";
const FRAGMENTS_FILE: &str = "fragments.json";
const FRAGMENT_LABELS_STEM: &str = "fragment_labels";
const TRACE_JSON: &str = "trace.json";
const TRACE_SWC: &str = "trace.swc";
const CONFIG_FILE: &str = "config.json";

/// Trace axons through a fluorescence volume by chaining segmentation
/// fragments along the most probable path.
#[derive(Debug, Parser)]
#[command(name = "fragtrace", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Pipeline config JSON; relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic volume, probability map, label sidecar, ground-truth
    /// SWC and a ready-to-use config.json.
    Phantom {
        /// Phantom spec JSON; defaults to the 256³ helix.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Fit the two-class intensity model and print its KL divergence.
    Kde,
    /// Threshold the probability map and split it into fragments.
    Fragments,
    /// Most probable fragment chain between two fragment ends.
    Trace {
        /// Start fragment as ID or ID:forward|reversed.
        #[arg(long)]
        start: Endpoint,
        /// End fragment as ID or ID:forward|reversed.
        #[arg(long)]
        end: Endpoint,
        /// Ask a running service instead of solving in-process.
        #[arg(long)]
        server: Option<String>,
    },
    /// Frechet and spatial distance between two SWC chains.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Resampling step before comparison.
        #[arg(long, default_value_t = 1.0)]
        step_um: f64,
    },
    /// Serve the session over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// 0 picks a free port; the bound address is printed on stdout.
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Debug, Clone, Copy)]
struct Endpoint {
    fragment: u32,
    orientation: Orientation,
}

impl std::str::FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (id, o) = match s.split_once(':') {
            Some((id, o)) => (id, o.parse::<Orientation>().map_err(|e| e.to_string())?),
            None => (s, Orientation::Forward),
        };
        Ok(Self {
            fragment: id.parse().map_err(|_| format!("bad fragment id {id:?}"))?,
            orientation: o,
        })
    }
}

#[derive(Debug)]
enum Failure {
    NoPath(String),
    Other(&'static str, String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::NoPath(_) => 3,
            Failure::Other(..) => 1,
        }
    }

    fn body(&self) -> serde_json::Value {
        match self {
            Failure::NoPath(m) => json!({"error": "no_path", "message": m}),
            Failure::Other(kind, m) => json!({"error": kind, "message": m}),
        }
    }
}

macro_rules! failure_from {
    ($ty:ty, $kind:literal) => {
        impl From<$ty> for Failure {
            fn from(e: $ty) -> Self {
                Failure::Other($kind, e.to_string())
            }
        }
    };
}

failure_from!(SessionError, "session");
failure_from!(std::io::Error, "io");
failure_from!(serde_json::Error, "json");
failure_from!(fragtrace::phantom::PhantomError, "phantom");
failure_from!(fragtrace::metrics::MetricsError, "metrics");
failure_from!(fragtrace::fragments::FragmentError, "fragments");

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::NoPath { .. } => Failure::NoPath(e.to_string()),
            TraceError::UnknownFragment(_) => Failure::Other("unknown_fragment", e.to_string()),
            TraceError::Solve(_) => Failure::Other("solve", e.to_string()),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        if e.is_no_path() {
            return Failure::NoPath(e.to_string());
        }
        match &e {
            ClientError::Api { body, .. } => {
                Failure::Other("service", format!("{}: {}", body.error, body.message))
            }
            ClientError::Transport(_) => Failure::Other("transport", e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.body());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Phantom { spec } => cmd_phantom(g, spec.as_deref()),
        Command::Kde => cmd_kde(&config(g)?),
        Command::Fragments => cmd_fragments(&config(g)?),
        Command::Trace { start, end, server } => {
            let req = TraceRequest {
                start_fragment: start.fragment,
                start_orientation: start.orientation,
                end_fragment: end.fragment,
                end_orientation: end.orientation,
            };
            cmd_trace(&config(g)?, req, server)
        }
        Command::Compare { a, b, step_um } => cmd_compare(&a, &b, step_um),
        Command::Serve { host, port } => cmd_serve(&config(g)?, &host, port),
    }
}

/// The config file (or defaults) with command-line overrides applied.
fn config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.out_dir = out.clone();
    }
    // Earlier `kde` / `fragments` runs feed later commands.
    let model = cfg.out_dir.join(MODEL_FILE);
    if cfg.model.is_none() && model.exists() {
        cfg.model = Some(model);
    }
    let frags = cfg.out_dir.join(FRAGMENTS_FILE);
    if cfg.fragments.is_none() && frags.exists() {
        cfg.fragments = Some(frags);
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_phantom(g: &Global, spec_path: Option<&Path>) -> Result<()> {
    let mut spec: PhantomSpec = match spec_path {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => PhantomSpec::default(),
    };
    if let Some(seed) = g.seed {
        spec.seed = seed;
    }
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("phantom"));
    let ph = generate_phantom(&spec)?;
    ph.write(&dir)?;
    let cfg = PipelineConfig {
        volume: Some(PhantomFiles::VOLUME.into()),
        probability: Some(PhantomFiles::PROBABILITY.into()),
        labels: Some(PhantomFiles::LABELS.into()),
        out_dir: ".".into(),
        seed: spec.seed,
        ..Default::default()
    };
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    print_json(&json!({
        "dir": dir,
        "dims": spec.dims,
        "tube_voxels": ph.tube.len(),
        "visible_voxels": ph.visible.len(),
        "truth_length_um": ph.centerline.arc_length(),
    }))
}

fn cmd_kde(cfg: &PipelineConfig) -> Result<()> {
    let volume = cfg.load_volume()?;
    // Always refit: a stored model would make this a no-op.
    let cfg = PipelineConfig {
        model: None,
        ..cfg.clone()
    };
    let model = cfg.load_model(&volume)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(MODEL_FILE);
    write_json(&path, &model)?;
    print_json(&json!({"model": path, "kl_nats": model.kl_divergence()}))
}

fn cmd_fragments(cfg: &PipelineConfig) -> Result<()> {
    let prob = fragtrace::volume::load_probability_map(
        cfg.probability
            .as_deref()
            .ok_or_else(|| Failure::Other("config", "`probability` path is required".into()))?,
    )
    .map_err(SessionError::from)?;
    let set = generate_fragments(&prob, &cfg.fragment_params())?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(FRAGMENTS_FILE);
    set.save(&path, &cfg.out_dir.join(FRAGMENT_LABELS_STEM))?;
    let voxels: usize = set.fragments.iter().map(|f| f.voxels.len()).sum();
    print_json(&json!({"fragments": path, "count": set.len(), "voxels": voxels}))
}

fn cmd_trace(cfg: &PipelineConfig, req: TraceRequest, server: Option<String>) -> Result<()> {
    let result: TraceResult = match server {
        Some(url) => {
            runtime()?
                .block_on(Client::new(url).trace(req, None))?
                .result
        }
        None => {
            if cfg.fragments.is_none() && cfg.probability.is_none() {
                return Err(Failure::Other(
                    "config",
                    "trace needs fragments: run `fragments` first or set `fragments`".into(),
                ));
            }
            cfg.load_tracer()?.trace(&req)?
        }
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join(TRACE_JSON), &result)?;
    let line = Polyline::new(result.path.polyline_um.clone())?;
    export_swc(&line, cfg.swc_radius_um, &cfg.out_dir.join(TRACE_SWC))?;
    print_json(&result)
}

fn cmd_compare(a: &Path, b: &Path, step_um: f64) -> Result<()> {
    let p = resample_polyline(&import_swc(a)?, step_um)?;
    let q = resample_polyline(&import_swc(b)?, step_um)?;
    print_json(&json!({
        "frechet_um": frechet_discrete(&p, &q),
        "sd_um": spatial_distance(&p, &q),
    }))
}

fn cmd_serve(cfg: &PipelineConfig, host: &str, port: u16) -> Result<()> {
    let tracer: Tracer = cfg.load_tracer()?;
    let session = Arc::new(Session::new(tracer).with_swc_radius(cfg.swc_radius_um));
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        let addr = listener.local_addr()?;
        println!("{}", json!({"listening": format!("http://{addr}")}));
        fragtrace_service::serve(listener, session).await?;
        Ok(())
    })
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?)
}
