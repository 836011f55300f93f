//! HTTP/JSON front end for one loaded tracing session.
//!
//! The session's image, fragments and graph are immutable and shared by all
//! handlers; only the list of stored traces is mutable. Tracing is CPU bound
//! and runs on the blocking pool.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use image::{ImageBuffer, ImageFormat, Luma, Rgba};
use serde::Deserialize;
use tokio::sync::RwLock;
use tower_http::cors::CorsLayer;

use fragtrace::metrics::{swc_string, Polyline, DEFAULT_SWC_RADIUS_UM};
use fragtrace::tracer::{
    CreateTrace, ErrorBody, FragmentOverlay, PickRequest, SessionInfo, StoredTrace, TraceError,
    Tracer,
};
use fragtrace::volume::{mip, Axis};

/// Shared state of a running service.
pub struct Session {
    tracer: Arc<Tracer>,
    traces: RwLock<BTreeMap<u64, StoredTrace>>,
    next_id: AtomicU64,
    swc_radius_um: f64,
}

impl Session {
    pub fn new(tracer: Tracer) -> Self {
        Self {
            tracer: Arc::new(tracer),
            traces: RwLock::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            swc_radius_um: DEFAULT_SWC_RADIUS_UM,
        }
    }

    pub fn with_swc_radius(mut self, radius_um: f64) -> Self {
        self.swc_radius_um = radius_um;
        self
    }

    pub fn tracer(&self) -> &Tracer {
        &self.tracer
    }
}

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route("/session/info", get(session_info))
        .route("/mip", get(mip_png))
        .route("/fragments", get(fragments))
        .route("/trace", post(create_trace))
        .route("/traces", get(list_traces))
        .route("/trace/{id}", get(get_trace).delete(delete_trace))
        .route("/trace/{id}/swc", get(trace_swc))
        .route("/pick", post(pick))
        .layer(CorsLayer::permissive())
        .with_state(session)
}

/// Serve until the listener fails.
pub async fn serve(
    listener: tokio::net::TcpListener,
    session: Arc<Session>,
) -> std::io::Result<()> {
    axum::serve(listener, router(session)).await
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.to_string(),
                message: message.into(),
            },
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<TraceError> for ApiError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::UnknownFragment(_) => {
                Self::new(StatusCode::NOT_FOUND, "unknown_fragment", e.to_string())
            }
            TraceError::NoPath { .. } => Self::new(StatusCode::CONFLICT, "no_path", e.to_string()),
            TraceError::Solve(_) => Self::internal(e.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

// ---------------------------------------------------------------------------
// Images

fn png_bytes<P, C>(img: &ImageBuffer<P, C>) -> ApiResult<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(out.into_inner())
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], Bytes::from(bytes)).into_response()
}

/// Maximum intensity projection stretched to 8 bits.
pub fn render_mip(tracer: &Tracer, axis: Axis) -> ImageBuffer<Luma<u8>, Vec<u8>> {
    let img = mip(&tracer.volume, axis);
    let lo = img.data.iter().copied().min().unwrap_or(0);
    let hi = img.data.iter().copied().max().unwrap_or(0);
    let span = f64::from(hi.saturating_sub(lo)).max(1.0);
    let pixels = img
        .data
        .iter()
        .map(|&v| (f64::from(v - lo) / span * 255.0).round() as u8)
        .collect();
    ImageBuffer::from_raw(img.width as u32, img.height as u32, pixels).expect("buffer matches size")
}

/// A stable, saturated color for a fragment id.
pub fn fragment_color(id: u32) -> [u8; 3] {
    // Golden-ratio hue steps keep neighbouring ids apart.
    let hue = (f64::from(id) * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let c = |v: f64| (55.0 + 200.0 * v).round() as u8;
    [c(r), c(g), c(b)]
}

/// Projected fragment labels (largest id along each ray), transparent background.
pub fn render_overlay(tracer: &Tracer, axis: Axis) -> ImageBuffer<Rgba<u8>, Vec<u8>> {
    let img = mip(&tracer.labels, axis);
    let mut out = ImageBuffer::new(img.width as u32, img.height as u32);
    for (i, &id) in img.data.iter().enumerate() {
        let (u, v) = ((i % img.width) as u32, (i / img.width) as u32);
        let px = if id == 0 {
            [0, 0, 0, 0]
        } else {
            let [r, g, b] = fragment_color(id);
            [r, g, b, 255]
        };
        out.put_pixel(u, v, Rgba(px));
    }
    out
}

// ---------------------------------------------------------------------------
// Handlers

#[derive(Debug, Deserialize)]
struct AxisQuery {
    #[serde(default)]
    axis: Axis,
    #[serde(default)]
    format: Option<String>,
}

async fn session_info(State(s): State<Arc<Session>>) -> Json<SessionInfo> {
    Json(s.tracer.info())
}

async fn mip_png(State(s): State<Arc<Session>>, Query(q): Query<AxisQuery>) -> ApiResult<Response> {
    let tracer = s.tracer.clone();
    let bytes = tokio::task::spawn_blocking(move || png_bytes(&render_mip(&tracer, q.axis)))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(png_response(bytes))
}

async fn fragments(
    State(s): State<Arc<Session>>,
    Query(q): Query<AxisQuery>,
) -> ApiResult<Response> {
    let tracer = s.tracer.clone();
    let axis = q.axis;
    let png = tokio::task::spawn_blocking(move || png_bytes(&render_overlay(&tracer, axis)))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    match q.format.as_deref() {
        Some("png") => Ok(png_response(png)),
        None | Some("json") => {
            let (u, v) = axis.plane();
            let dims = s.tracer.volume.dims();
            Ok(Json(FragmentOverlay {
                axis,
                width: dims[u],
                height: dims[v],
                overlay_png_base64: base64::engine::general_purpose::STANDARD.encode(png),
                fragments: s.tracer.projected_fragments(axis),
            })
            .into_response())
        }
        Some(other) => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_request",
            format!("unknown format {other:?}"),
        )),
    }
}

async fn create_trace(
    State(s): State<Arc<Session>>,
    body: Result<Json<CreateTrace>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<StoredTrace>)> {
    let Json(body) = body?;
    let tracer = s.tracer.clone();
    let request = body.request;
    let result = tokio::task::spawn_blocking(move || tracer.trace(&request))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let id = s.next_id.fetch_add(1, Ordering::Relaxed);
    let stored = StoredTrace {
        id,
        name: body.name.unwrap_or_else(|| format!("trace-{id}")),
        result,
    };
    s.traces.write().await.insert(id, stored.clone());
    tracing::debug!(id, "trace stored");
    Ok((StatusCode::CREATED, Json(stored)))
}

async fn list_traces(State(s): State<Arc<Session>>) -> Json<Vec<StoredTrace>> {
    Json(s.traces.read().await.values().cloned().collect())
}

async fn lookup(s: &Session, id: u64) -> ApiResult<StoredTrace> {
    s.traces
        .read()
        .await
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no trace {id}")))
}

async fn get_trace(
    State(s): State<Arc<Session>>,
    Path(id): Path<u64>,
) -> ApiResult<Json<StoredTrace>> {
    Ok(Json(lookup(&s, id).await?))
}

async fn delete_trace(State(s): State<Arc<Session>>, Path(id): Path<u64>) -> ApiResult<StatusCode> {
    match s.traces.write().await.remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(format!("no trace {id}"))),
    }
}

async fn trace_swc(State(s): State<Arc<Session>>, Path(id): Path<u64>) -> ApiResult<Response> {
    let t = lookup(&s, id).await?;
    let line =
        Polyline::new(t.result.path.polyline_um).map_err(|e| ApiError::internal(e.to_string()))?;
    let text = swc_string(&line, s.swc_radius_um);
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response())
}

async fn pick(
    State(s): State<Arc<Session>>,
    body: Result<Json<PickRequest>, JsonRejection>,
) -> ApiResult<Json<fragtrace::tracer::PickResponse>> {
    let Json(req) = body?;
    if !(req.x_px.is_finite() && req.y_px.is_finite()) || req.radius_px.is_some_and(|r| !(r >= 0.0))
    {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_request",
            "coordinates must be finite",
        ));
    }
    s.tracer
        .pick(&req)
        .map(Json)
        .ok_or_else(|| ApiError::not_found("no fragment within the pick radius"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colors_are_stable_and_distinct_for_neighbours() {
        assert_eq!(fragment_color(7), fragment_color(7));
        for id in 1..200 {
            assert_ne!(fragment_color(id), fragment_color(id + 1));
        }
    }
}
