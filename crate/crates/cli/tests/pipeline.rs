use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fragtrace"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    if !out.status.success() && out.status.code() != Some(3) {
        panic!(
            "fragtrace {args:?} failed: {}\n{}",
            out.status,
            String::from_utf8_lossy(&out.stderr)
        );
    }
    out
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A straight tube along x, 2–58 µm, with a 20 µm hole at 18–38 µm so the
/// right part is an island beyond the gap limit.
fn phantom_spec() -> Value {
    json!({
        "dims": [120, 20, 20],
        "spacing": [0.5, 0.5, 1.0],
        "curve": {"kind": "polyline", "points": [[2.0, 5.0, 10.0], [58.0, 5.0, 10.0]]},
        "censor_um": [[18.0, 38.0]],
        "label_samples": 400,
        "seed": 5
    })
}

/// Phantom + kde + fragments into `dir`; returns the config path.
fn pipeline(dir: &Path) -> PathBuf {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, phantom_spec().to_string()).unwrap();
    run(&["phantom", "--spec", s(&spec), "--out", s(dir)]);
    let cfg = dir.join("config.json");
    let kde = stdout_json(&run(&["kde", "--config", s(&cfg)]));
    assert!(kde["kl_nats"].as_f64().unwrap() > 0.5);
    let frags = stdout_json(&run(&["fragments", "--config", s(&cfg)]));
    assert!(frags["count"].as_u64().unwrap() >= 4);
    cfg
}

/// Fragment ids sorted by their leftmost end.
fn ids_along_x(dir: &Path) -> Vec<(f64, u64)> {
    let v: Value =
        serde_json::from_slice(&std::fs::read(dir.join("fragments.json")).unwrap()).unwrap();
    let mut ids: Vec<(f64, u64)> = v["fragments"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| {
            let x = f["x0"][0]
                .as_f64()
                .unwrap()
                .min(f["x1"][0].as_f64().unwrap());
            (x, f["id"].as_u64().unwrap())
        })
        .collect();
    ids.sort_by(|a, b| a.0.total_cmp(&b.0));
    ids
}

fn trace(cfg: &Path, out: &Path, start: &str, end: &str, server: Option<&str>) -> Output {
    let mut args = vec![
        "trace",
        "--config",
        s(cfg),
        "--out",
        s(out),
        "--start",
        start,
        "--end",
        end,
    ];
    if let Some(url) = server {
        args.extend(["--server", url]);
    }
    run(&args)
}

/// Any start/end orientation pair joining the two fragments.
fn trace_any(cfg: &Path, out: &Path, a: u64, b: u64, server: Option<&str>) -> Option<Output> {
    for oa in ["forward", "reversed"] {
        for ob in ["forward", "reversed"] {
            let o = trace(cfg, out, &format!("{a}:{oa}"), &format!("{b}:{ob}"), server);
            if o.status.success() {
                return Some(o);
            }
        }
    }
    None
}

#[test]
fn pipeline_traces_left_part_and_reports_island_unreachable() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = pipeline(dir);
    let ids = ids_along_x(dir);
    let left: Vec<_> = ids.iter().filter(|(x, _)| *x < 18.0).collect();
    let right: Vec<_> = ids.iter().filter(|(x, _)| *x > 30.0).collect();
    assert!(left.len() >= 2 && !right.is_empty());

    let (a, b) = (left[0].1, left[left.len() - 1].1);
    let out = trace_any(&cfg, dir, a, b, None).expect("left part is connected");
    let result = stdout_json(&out);
    let frs = result["fragment_ids"].as_array().unwrap();
    assert_eq!(frs.first().unwrap().as_u64(), Some(a));
    assert_eq!(frs.last().unwrap().as_u64(), Some(b));
    let on_disk: Value =
        serde_json::from_slice(&std::fs::read(dir.join("trace.json")).unwrap()).unwrap();
    assert_eq!(on_disk, result);
    assert!(dir.join("trace.swc").exists());

    // Every orientation combination into the island fails with exit code 3.
    let island = right[0].1;
    for oa in ["forward", "reversed"] {
        for ob in ["forward", "reversed"] {
            let o = trace(
                &cfg,
                dir,
                &format!("{a}:{oa}"),
                &format!("{island}:{ob}"),
                None,
            );
            assert_eq!(o.status.code(), Some(3));
            let err: Value = serde_json::from_slice(&o.stderr).unwrap();
            assert_eq!(err["error"], "no_path");
        }
    }
}

#[test]
fn reruns_are_byte_identical() {
    let t1 = tempfile::tempdir().unwrap();
    let t2 = tempfile::tempdir().unwrap();
    pipeline(t1.path());
    pipeline(t2.path());
    for f in [
        "volume.raw",
        "probability.raw",
        "labels.json",
        "truth.swc",
        "model.json",
        "fragments.json",
        "fragment_labels.raw",
    ] {
        let a = std::fs::read(t1.path().join(f)).unwrap();
        let b = std::fs::read(t2.path().join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn compare_same_file_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let swc = tmp.path().join("a.swc");
    std::fs::write(&swc, "1 0 0 0 0 1 -1\n2 0 3 4 0 1 1\n3 0 3 4 7 1 2\n").unwrap();
    let v = stdout_json(&run(&["compare", s(&swc), s(&swc)]));
    assert_eq!(v, json!({"frechet_um": 0.0, "sd_um": 0.0}));
}

#[test]
fn compare_shifted_copy() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.swc");
    let b = tmp.path().join("b.swc");
    std::fs::write(&a, "1 0 0 0 0 1 -1\n2 0 10 0 0 1 1\n").unwrap();
    std::fs::write(&b, "1 0 0 2 0 1 -1\n2 0 10 2 0 1 1\n").unwrap();
    let v = stdout_json(&run(&["compare", s(&a), s(&b)]));
    assert!((v["frechet_um"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert!((v["sd_um"].as_f64().unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn missing_input_is_error_json_with_exit_1() {
    let out = bin()
        .args(["compare", "/nonexistent/a.swc", "/nonexistent/b.swc"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].is_string() && err["message"].is_string());
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn trace_via_server_equals_local() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = pipeline(dir);
    let mut child = bin()
        .args(["serve", "--config", s(&cfg), "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let _server = Server(child);
    let url: Value = serde_json::from_str(&line).unwrap();
    let url = url["listening"].as_str().unwrap().to_string();

    let ids = ids_along_x(dir);
    let (a, b) = (ids[0].1, ids[1].1);
    let local_dir = dir.join("local");
    let remote_dir = dir.join("remote");
    let local = trace_any(&cfg, &local_dir, a, b, None).unwrap();
    let remote = trace_any(&cfg, &remote_dir, a, b, Some(&url)).unwrap();
    assert_eq!(local.stdout, remote.stdout);
    for f in ["trace.json", "trace.swc"] {
        assert_eq!(
            std::fs::read(local_dir.join(f)).unwrap(),
            std::fs::read(remote_dir.join(f)).unwrap()
        );
    }

    let island = ids.iter().find(|(x, _)| *x > 30.0).unwrap().1;
    let o = trace(
        &cfg,
        &remote_dir,
        &a.to_string(),
        &island.to_string(),
        Some(&url),
    );
    assert_eq!(o.status.code(), Some(3));
}
