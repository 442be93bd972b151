use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use horncircuit::explore::{self, RunRequest, RunThresholds};
use horncircuit::interp::PinvCache;
use horncircuit::model::{ModelConfig, ModelParams};
use horncircuit::persist::{save_checkpoint, CheckpointMeta};
use horncircuit::taskgen::gen_dataset;
use horncircuit::vocab::Supervision;
use horncircuit_serve::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const GUIDING: &str = "C>D,A>B,B>C,E>F,D>E|A>F";

fn params() -> ModelParams<f32> {
    ModelParams::init(&ModelConfig::default(), 5).unwrap()
}

fn setup(with_data: bool) -> (tempfile::TempDir, Router) {
    let dir = tempfile::tempdir().unwrap();
    let p = params();
    save_checkpoint(&p, &CheckpointMeta::new("t1", 4), dir.path().join("s0-t1.tmlm")).unwrap();
    save_checkpoint(&p, &CheckpointMeta::new("final", 9), dir.path().join("s0-final.tmlm")).unwrap();
    let mut state = AppState::with_capacity(dir.path(), 1);
    if with_data {
        state = state.with_dataset(gen_dataset(12, 20, 5, 3, Supervision::Cot).unwrap());
    }
    (dir, router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn parse(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn lists_checkpoints() {
    let (_dir, app) = setup(false);
    let (status, body) = call(&app, "GET", "/checkpoints", None).await;
    assert_eq!(status, StatusCode::OK);
    let list = parse(&body);
    assert_eq!(list[0]["id"], "s0-final");
    assert_eq!(list[1]["id"], "s0-t1");
    assert_eq!(list[1]["epoch"], 4);

    let empty = tempfile::tempdir().unwrap();
    let (_, body) = call(&router(AppState::new(empty.path())), "GET", "/checkpoints", None).await;
    assert_eq!(parse(&body), json!([]));
}

#[tokio::test]
async fn run_matches_the_library_bytes() {
    let (_dir, app) = setup(false);
    let (status, body) = call(&app, "POST", "/run", Some(json!({"ckpt": "s0-final", "prompt": GUIDING}))).await;
    assert_eq!(status, StatusCode::OK);
    let req = RunRequest {
        ckpt: "s0-final".into(),
        prompt: GUIDING.into(),
        thresholds: RunThresholds::default(),
        dst_filter: None,
        layer: None,
    };
    let direct = explore::run(&params(), &req, &mut PinvCache::new()).unwrap();
    assert_eq!(String::from_utf8(body.clone()).unwrap(), explore::to_json(&direct).unwrap());

    // identical requests give identical bodies, also after cache eviction
    let (status, _) = call(&app, "POST", "/run", Some(json!({"ckpt": "s0-t1", "prompt": GUIDING}))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, b) = call(&app, "POST", "/run", Some(json!({"ckpt": "s0-final", "prompt": GUIDING}))).await;
    let (_, c) = call(&app, "POST", "/run", Some(json!({"ckpt": "s0-final", "prompt": GUIDING}))).await;
    assert_eq!(body, b);
    assert_eq!(b, c);
}

#[tokio::test]
async fn run_payload_shape() {
    let (_dir, app) = setup(false);
    let body = json!({
        "ckpt": "s0-final",
        "prompt": format!("@{GUIDING}"),
        "thresholds": {"link": 1.01, "s_q": 0.8, "s_k": 0.97, "s_v": 0.8},
        "dst_filter": [25, 29]
    });
    let (status, body) = call(&app, "POST", "/run", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let v = parse(&body);
    assert_eq!(v["schema"], explore::TRACE_SCHEMA);
    assert_eq!(v["links"], json!([]));
    assert_eq!(v["tokens"].as_array().unwrap().len(), 45);
    for layer in v["attention"].as_array().unwrap() {
        for row in layer[0].as_array().unwrap() {
            let sum: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
        }
    }
}

#[tokio::test]
async fn run_errors() {
    let (_dir, app) = setup(false);
    let (status, body) = call(&app, "POST", "/run", Some(json!({"ckpt": "s0-final", "prompt": "A>B,c>D|A>D"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(parse(&body)["position"], 4);

    for id in ["nope", "../s0-final", ""] {
        let (status, _) = call(&app, "POST", "/run", Some(json!({"ckpt": id, "prompt": GUIDING}))).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{id}");
    }
    let (status, _) = call(&app, "POST", "/run", Some(json!({"prompt": GUIDING}))).await;
    assert!(status.is_client_error());
}

#[tokio::test]
async fn average_needs_a_dataset() {
    let (_dir, app) = setup(false);
    let (status, _) = call(&app, "POST", "/average", Some(json!({"ckpt": "s0-final", "subset": "all", "threshold": 0.1}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn average_subsets_partition_the_dataset() {
    let (_dir, app) = setup(true);
    let mut counts = Vec::new();
    for subset in ["all", "positive", "negative"] {
        let (status, body) = call(
            &app,
            "POST",
            "/average",
            Some(json!({"ckpt": "s0-final", "subset": subset, "threshold": 0.1})),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        let v = parse(&body);
        assert_eq!(v["schema"], explore::AVERAGE_SCHEMA);
        counts.push(v["count"].as_u64().unwrap());
    }
    assert_eq!(counts[0], counts[1] + counts[2]);
    assert_eq!(counts[0], 12);
}
