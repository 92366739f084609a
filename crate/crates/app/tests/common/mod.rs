#![allow(dead_code)]

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use lymphdet::config::AppConfig;
use lymphdet::service::Service;
use lymphdet_core::model::{init_params, NetworkConfig};
use lymphdet_core::synth::{generate_scene, SceneConfig, SyntheticScene};
use lymphdet_core::trainer::FineTuneConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tower::ServiceExt;

pub fn scene(seed: u64) -> SyntheticScene {
    let cfg = SceneConfig { height: 128, width: 128, lymphocytes: 2, distractors: 1, ..SceneConfig::default() };
    generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Service over `dir` with a tiny network and a short fine-tuning schedule.
pub fn service(dir: &std::path::Path, trigger: usize, finetune: FineTuneConfig) -> Arc<Service> {
    let mut config = AppConfig::default();
    config.network = NetworkConfig::tiny();
    config.service.data_dir = dir.to_path_buf();
    config.service.finetune_trigger = trigger;
    config.finetune = finetune;
    let svc = Service::open(config).unwrap();
    svc.register_model(init_params::<f32>(&NetworkConfig::tiny(), 1).unwrap(), None).unwrap();
    svc
}

pub fn quick_finetune() -> FineTuneConfig {
    FineTuneConfig {
        max_epochs: 2,
        epochs_without_validation: 2,
        train_epoch_size: 4,
        val_epoch_size: 2,
        patch_size: 32,
        ..FineTuneConfig::default()
    }
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap();
    (status, bytes.to_vec())
}

pub async fn call_json(app: &Router, method: &str, uri: &str, body: &Value) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, serde_json::to_vec(body).unwrap()).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

pub async fn upload(app: &Router, scene: &SyntheticScene) -> String {
    let (status, body) = call(app, "POST", "/images", scene.image.encode_png().unwrap()).await;
    assert_eq!(status, StatusCode::CREATED);
    let v: Value = serde_json::from_slice(&body).unwrap();
    v["id"].as_str().unwrap().to_string()
}

/// `n` single-point corrections alternating between the scene's
/// lymphocytes (PP) and empty background (NP).
pub fn point_corrections(image_id: &str, scene: &SyntheticScene, n: usize) -> Value {
    let centers = scene.lymphocyte_centers();
    let records: Vec<Value> = (0..n)
        .map(|i| {
            if i % 2 == 0 {
                let (r, c) = centers[(i / 2) % centers.len()];
                serde_json::json!({ "fov_id": image_id, "kind": "PP", "points": [[r.round() as usize, c.round() as usize]] })
            } else {
                serde_json::json!({ "fov_id": image_id, "kind": "NP", "points": [[2, 2 + (i % 100)]] })
            }
        })
        .collect();
    Value::Array(records)
}

pub async fn wait_for_rounds(app: &Router, rounds: u64, limit: Duration) -> Value {
    let start = Instant::now();
    loop {
        let (_, v) = call_json(app, "GET", "/models", &Value::Null).await;
        if v["finetune"]["completed_rounds"].as_u64() >= Some(rounds) && v["finetune"]["running"] == false {
            return v;
        }
        assert!(v["finetune"]["last_error"].is_null(), "fine-tuning failed: {}", v["finetune"]["last_error"]);
        assert!(start.elapsed() < limit, "fine-tuning did not finish in {limit:?}");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}
