use std::sync::Arc;

use base64::Engine;
use fragtrace::fragments::generate_fragments;
use fragtrace::phantom::{generate_phantom, Curve, PhantomSpec};
use fragtrace::tracer::{PickRequest, TraceError, TraceRequest};
use fragtrace::{FragmentParams, Hyperparams, IntensityModel, Orientation, Tracer};
use fragtrace_client::Client;
use fragtrace_service::{serve, Session};

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// A straight tube along x with a 20 µm hole in the middle, so the two
/// halves cannot be joined.
fn tracer() -> Tracer {
    let spec = PhantomSpec {
        dims: [120, 20, 20],
        spacing: [0.5, 0.5, 1.0],
        curve: Curve::Polyline {
            points: vec![[2.0, 5.0, 10.0], [58.0, 5.0, 10.0]],
        },
        censor_um: vec![[18.0, 38.0]],
        label_samples: 400,
        seed: 11,
        ..Default::default()
    };
    let ph = generate_phantom(&spec).unwrap();
    let model = IntensityModel::fit_from_labels(&ph.volume, &ph.labels).unwrap();
    let frags = generate_fragments(&ph.probability, &FragmentParams::default()).unwrap();
    Tracer::new(ph.volume, model, frags, Hyperparams::default()).unwrap()
}

async fn start() -> (Client, Arc<Session>) {
    let session = Arc::new(Session::new(tracer()));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, session.clone()));
    (Client::new(format!("http://{addr}")), session)
}

/// Fragment ids ordered by the x coordinate of their centroid-ish end.
fn ids_along_x(t: &Tracer) -> Vec<u32> {
    let mut f: Vec<_> = t
        .fragments
        .fragments
        .iter()
        .map(|f| (f.x0[0].min(f.x1[0]), f.id))
        .collect();
    f.sort_by(|a, b| a.0.total_cmp(&b.0));
    f.into_iter().map(|(_, id)| id).collect()
}

fn req(a: u32, b: u32) -> TraceRequest {
    TraceRequest {
        start_fragment: a,
        start_orientation: Orientation::Forward,
        end_fragment: b,
        end_orientation: Orientation::Forward,
    }
}

/// A pair that traces locally, and one that has no path.
fn pairs(t: &Tracer) -> (TraceRequest, TraceRequest) {
    let ids = ids_along_x(t);
    let mut ok = None;
    let mut none = None;
    for &a in &ids {
        for &b in &ids {
            for (oa, ob) in [
                (Orientation::Forward, Orientation::Forward),
                (Orientation::Forward, Orientation::Reversed),
                (Orientation::Reversed, Orientation::Forward),
                (Orientation::Reversed, Orientation::Reversed),
            ] {
                let r = TraceRequest {
                    start_orientation: oa,
                    end_orientation: ob,
                    ..req(a, b)
                };
                match t.trace(&r) {
                    Ok(res) if ok.is_none() && res.fragment_ids.len() >= 3 => ok = Some(r),
                    Err(TraceError::NoPath { .. }) if none.is_none() => none = Some(r),
                    _ => {}
                }
            }
        }
    }
    (
        ok.expect("some multi-fragment trace"),
        none.expect("some unreachable pair"),
    )
}

#[tokio::test]
async fn info_matches_session() {
    let (client, session) = start().await;
    let info = client.info().await.unwrap();
    assert_eq!(info, session.tracer().info());
    assert!(info.fragment_count >= 4);
}

#[tokio::test]
async fn trace_over_http_equals_in_process() {
    let (client, session) = start().await;
    let (ok, _) = pairs(session.tracer());
    let local = session.tracer().trace(&ok).unwrap();
    let remote = client.trace(ok, Some("a".into())).await.unwrap();
    assert_eq!(remote.name, "a");
    assert_eq!(remote.result, local);
    assert_eq!(client.get_trace(remote.id).await.unwrap(), remote);
}

#[tokio::test]
async fn concurrent_traces_equal_serial_ones() {
    let (client, session) = start().await;
    let ids = ids_along_x(session.tracer());
    let reqs: Vec<_> = ids
        .iter()
        .flat_map(|&a| ids.iter().map(move |&b| req(a, b)))
        .take(24)
        .collect();
    let serial: Vec<_> = reqs
        .iter()
        .map(|r| session.tracer().trace(r).ok())
        .collect();
    let handles: Vec<_> = reqs
        .iter()
        .map(|&r| {
            let c = client.clone();
            tokio::spawn(async move { c.trace(r, None).await })
        })
        .collect();
    let mut ids_seen = Vec::new();
    for (h, want) in handles.into_iter().zip(serial) {
        match (h.await.unwrap(), want) {
            (Ok(got), Some(want)) => {
                assert_eq!(got.result, want);
                ids_seen.push(got.id);
            }
            (Err(e), None) => assert!(e.is_no_path(), "{e}"),
            (got, want) => panic!("mismatch: {got:?} vs {want:?}"),
        }
    }
    ids_seen.sort();
    ids_seen.dedup();
    assert_eq!(client.traces().await.unwrap().len(), ids_seen.len());
}

#[tokio::test]
async fn same_fragment_trace_is_a_single_state() {
    let (client, session) = start().await;
    let id = ids_along_x(session.tracer())[0];
    let t = client.trace(req(id, id), None).await.unwrap();
    assert_eq!(t.result.fragment_ids, vec![id]);
    assert_eq!(t.result.path.weight, 0.0);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let (client, session) = start().await;
    let (_, none) = pairs(session.tracer());
    let e = client.trace(none, None).await.unwrap_err();
    assert!(e.is_no_path(), "{e}");

    let e = client.trace(req(999_999, 1), None).await.unwrap_err();
    assert!(e.is_not_found(), "{e}");
    let e = client.get_trace(12345).await.unwrap_err();
    assert!(e.is_not_found(), "{e}");
    let e = client.delete_trace(12345).await.unwrap_err();
    assert!(e.is_not_found(), "{e}");
}

#[tokio::test]
async fn malformed_bodies_are_bad_requests() {
    let (client, _session) = start().await;
    let base = client.base_url().to_string();
    let http = reqwest_like_post(&base, "/trace", "{\"start_fragment\": \"x\"}").await;
    assert_eq!(http.0, 400);
    let body: serde_json::Value = serde_json::from_str(&http.1).unwrap();
    assert_eq!(body["error"], "bad_request");
    let http = reqwest_like_post(&base, "/pick", "not json").await;
    assert_eq!(http.0, 400);
}

#[tokio::test]
async fn swc_and_delete() {
    let (client, session) = start().await;
    let (ok, _) = pairs(session.tracer());
    let t = client.trace(ok, None).await.unwrap();
    let swc = client.trace_swc(t.id).await.unwrap();
    let rows: Vec<_> = swc
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .collect();
    assert_eq!(rows.len(), t.result.path.polyline_um.len());
    assert!(rows[0].split_whitespace().last() == Some("-1"));

    client.delete_trace(t.id).await.unwrap();
    assert!(client.get_trace(t.id).await.unwrap_err().is_not_found());
    assert!(client.traces().await.unwrap().is_empty());
}

#[tokio::test]
async fn images_and_overlay() {
    let (client, session) = start().await;
    for axis in [fragtrace::Axis::X, fragtrace::Axis::Y, fragtrace::Axis::Z] {
        let png = client.mip_png(axis).await.unwrap();
        assert!(png.starts_with(PNG_MAGIC));
        let ov = client.fragments(axis).await.unwrap();
        assert_eq!(ov.fragments, session.tracer().projected_fragments(axis));
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&ov.overlay_png_base64)
            .unwrap();
        assert!(bytes.starts_with(PNG_MAGIC));
    }
}

#[tokio::test]
async fn pick_finds_fragment_ends() {
    let (client, session) = start().await;
    let f = &session.tracer().projected_fragments(fragtrace::Axis::Z)[0];
    let hit = client
        .pick(&PickRequest {
            x_px: f.x0_px[0],
            y_px: f.x0_px[1],
            axis: fragtrace::Axis::Z,
            radius_px: Some(0.5),
        })
        .await
        .unwrap();
    assert_eq!(hit.distance_px, 0.0);
    assert_eq!(
        session.tracer().pick(&PickRequest {
            x_px: f.x0_px[0],
            y_px: f.x0_px[1],
            axis: fragtrace::Axis::Z,
            radius_px: Some(0.5),
        }),
        Some(hit)
    );

    let miss = client
        .pick(&PickRequest {
            x_px: -500.0,
            y_px: -500.0,
            axis: fragtrace::Axis::Z,
            radius_px: None,
        })
        .await
        .unwrap_err();
    assert!(miss.is_not_found());
}

/// Raw POST so malformed bodies reach the server untouched.
async fn reqwest_like_post(base: &str, path: &str, body: &str) -> (u16, String) {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let addr = base.trim_start_matches("http://");
    let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
    let msg = format!(
        "POST {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    s.write_all(msg.as_bytes()).await.unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).await.unwrap();
    let status = out[9..12].parse().unwrap();
    let body = out.split("\r\n\r\n").nth(1).unwrap_or("").to_string();
    (status, body)
}
