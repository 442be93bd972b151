use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use tower::ServiceExt;

const GUIDING: &str = "C>D,A>B,B>C,E>F,D>E|A>F";

fn horncircuit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_horncircuit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Small dataset plus a two-epoch d16 model.
fn trained(dir: &Path) {
    ok(horncircuit(&["gen", "--count", "64", "--seed", "4", "--out", "data"], dir));
    ok(horncircuit(
        &["train", "--data", "data", "--epochs", "2", "--seed", "4", "--ckpt-dir", "ckpt", "--d-model", "16"],
        dir,
    ));
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok(horncircuit(&["gen", "--count", "40", "--seed", "9", "--out", "a"], dir.path()));
    ok(horncircuit(&["gen", "--count", "40", "--seed", "9", "--out", "b"], dir.path()));
    assert_eq!(files(&dir.path().join("a")), files(&dir.path().join("b")));
    // the resolved settings are echoed
    let echoed = String::from_utf8(a.stderr).unwrap();
    assert!(echoed.contains("\"seed\":9") && echoed.contains("\"count\":40"));
    ok(horncircuit(&["gen", "--count", "40", "--seed", "10", "--out", "c"], dir.path()));
    assert_ne!(files(&dir.path().join("a")), files(&dir.path().join("c")));
}

#[test]
fn train_eval_inspect_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for dir in [a.path(), b.path()] {
        trained(dir);
        let eval = ok(horncircuit(&["eval", "--ckpt", "ckpt/seed4-final.tmlm", "--data", "data"], dir));
        let mut texts = vec![eval.stdout];
        for format in ["json", "svg", "text"] {
            let out = ok(horncircuit(
                &["inspect", "--ckpt", "ckpt/seed4-final.tmlm", "--prompt", GUIDING, "--threshold", "0.1", "--format", format],
                dir,
            ));
            texts.push(out.stdout);
        }
        outputs.push((files(&dir.join("ckpt")), texts));
    }
    let names: Vec<_> = outputs[0].0.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["seed4-final.tmlm", "seed4-metrics.csv"]);
    assert_eq!(outputs[0], outputs[1]);
    let eval = String::from_utf8(outputs[0].1[0].clone()).unwrap();
    for key in ["full_seq_acc", "acc_excl_last_token", "last_token_acc"] {
        assert!(eval.contains(key), "{eval}");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn inspect_json_is_the_served_body() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let args = [
        "inspect",
        "--ckpt",
        "ckpt/seed4-final.tmlm",
        "--prompt",
        GUIDING,
        "--threshold",
        "0.2",
        "--dst-positions",
        "25,29,33",
        "--sk-q",
        "0.75",
        "--format",
        "json",
    ];
    let cli = ok(horncircuit(&args, dir.path())).stdout;

    let app = horncircuit_serve::router(horncircuit_serve::AppState::new(dir.path().join("ckpt")));
    let body = serde_json::json!({
        "ckpt": "seed4-final",
        "prompt": GUIDING,
        "thresholds": {"link": 0.2, "s_q": 0.75, "s_k": 0.97, "s_v": 0.8},
        "dst_filter": [25, 29, 33]
    });
    let req = Request::post("/run")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.status().is_success());
    let served = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(String::from_utf8(cli).unwrap(), String::from_utf8(served.to_vec()).unwrap());
}

#[test]
fn export_and_average() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let p = dir.path();
    ok(horncircuit(
        &["inspect", "--ckpt", "ckpt/seed4-final.tmlm", "--prompt", GUIDING, "--format", "json", "--out", "trace.json"],
        p,
    ));
    ok(horncircuit(&["export", "--report", "trace.json", "--out", "trace.svg"], p));
    let svg = fs::read_to_string(p.join("trace.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("layer 2"));

    let avg = ok(horncircuit(
        &[
            "inspect", "--ckpt", "ckpt/seed4-final.tmlm", "--average", "positive", "--data", "data", "--dst-positions", "-",
            "--threshold", "0.1", "--format", "json",
        ],
        p,
    ));
    let v: serde_json::Value = serde_json::from_slice(&avg.stdout).unwrap();
    assert_eq!(v["subset"], "positive");
    assert!(v["links"].as_array().unwrap().iter().all(|l| l["dst"] == 43));
    fs::write(p.join("avg.json"), &avg.stdout).unwrap();
    ok(horncircuit(&["export", "--report", "avg.json", "--out", "avg.svg"], p));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(horncircuit(&["--help"], p).status.code(), Some(0));
    assert_eq!(horncircuit(&["gen", "--bogus"], p).status.code(), Some(1));
    assert_eq!(horncircuit(&["frobnicate"], p).status.code(), Some(1));
    let missing = horncircuit(&["eval", "--ckpt", "nope.tmlm", "--data", "nope"], p);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.tmlm"));
    trained(p);
    let bad = horncircuit(&["inspect", "--ckpt", "ckpt/seed4-final.tmlm", "--prompt", "A>b"], p);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("position 2"));
}

#[test]
fn sweep_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    ok(horncircuit(
        &["sweep", "--seeds", "1..2", "--epochs", "1", "--count", "32", "--d-model", "8", "--out", "sw"],
        dir.path(),
    ));
    let names: Vec<_> = files(&dir.path().join("sw")).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["averaged.csv", "runs.csv", "seed1-metrics.csv", "seed2-metrics.csv"]);
    let runs = fs::read_to_string(dir.path().join("sw/runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 3);
}
