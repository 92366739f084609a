//! HTTP API.
//!
//! | method | path                                   | body / result                         |
//! |--------|----------------------------------------|---------------------------------------|
//! | POST   | `/images`                              | PNG bytes → `{id, height, width}`     |
//! | GET    | `/images`                              | image ids                             |
//! | GET    | `/images/{id}`                         | original PNG                          |
//! | POST   | `/images/{id}/detect`                  | detections of the active model        |
//! | GET    | `/images/{id}/overlay`                 | PNG with detections drawn             |
//! | GET    | `/images/{id}/probability/{model}`     | probability map PNG                   |
//! | GET    | `/images/{id}/annotations`             | stored corrections for the image      |
//! | POST   | `/images/{id}/annotations`             | annotation record(s) → receipt        |
//! | POST   | `/finetune`                            | start a round now                     |
//! | GET    | `/models`                              | registry and job status               |

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lymphdet_core::postprocess::render_overlay;
use serde::Serialize;
use serde_json::{json, Value};

use crate::service::{JobStatus, Service, ServiceError};
use crate::store::StoredDetections;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ServiceError::NotFound(m) => (StatusCode::NOT_FOUND, json!({ "error": m })),
            ServiceError::Conflict(m) => (StatusCode::CONFLICT, json!({ "error": m })),
            ServiceError::BadRequest(fields) => {
                (StatusCode::BAD_REQUEST, json!({ "error": "invalid annotations", "fields": fields }))
            }
            ServiceError::Internal(e) => {
                log::error!("{e:#}");
                (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": format!("{e:#}") }))
            }
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

/// Run blocking work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Internal(e.into()))?
}

pub fn router(service: Arc<Service>) -> Router {
    let limit = service.config().service.max_upload_bytes;
    Router::new()
        .route("/images", post(upload).get(list_images))
        .route("/images/:id", get(image))
        .route("/images/:id/detect", post(detect))
        .route("/images/:id/overlay", get(overlay))
        .route("/images/:id/probability/:model", get(probability))
        .route("/images/:id/annotations", post(annotate).get(annotations))
        .route("/finetune", post(start_finetune))
        .route("/models", get(models))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(service)
}

async fn upload(State(svc): State<Arc<Service>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let (id, img) = blocking(move || {
        svc.store.put_image(&body).map_err(|e| {
            ServiceError::BadRequest(vec![crate::service::FieldError {
                index: 0,
                field: "body".into(),
                message: format!("not a readable PNG: {e:#}"),
            }])
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id, "height": img.height(), "width": img.width() }))))
}

async fn list_images(State(svc): State<Arc<Service>>) -> ApiResult<Json<Vec<String>>> {
    Ok(Json(svc.store.image_ids()?))
}

async fn image(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Response> {
    if !svc.store.has_image(&id) {
        return Err(ServiceError::NotFound(format!("no image {id}")));
    }
    Ok(png(svc.store.image_png(&id)?))
}

#[derive(Serialize)]
struct DetectResponse {
    #[serde(flatten)]
    stored: StoredDetections,
    probability_map: String,
}

async fn detect(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Json<DetectResponse>> {
    let stored = blocking(move || svc.detect(&id)).await?;
    let probability_map = format!("/images/{}/probability/{}", stored.image_id, stored.model_id);
    Ok(Json(DetectResponse { stored, probability_map }))
}

async fn overlay(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = blocking(move || {
        let stored = svc.detect(&id)?;
        let img = svc.store.image(&id)?;
        Ok(render_overlay(&img, &stored.detections).encode_png().map_err(anyhow::Error::from)?)
    })
    .await?;
    Ok(png(bytes))
}

async fn probability(State(svc): State<Arc<Service>>, Path((id, model)): Path<(String, String)>) -> ApiResult<Response> {
    match svc.store.probability_png_path(&id, &model).filter(|p| p.exists()) {
        Some(path) => Ok(png(std::fs::read(path).map_err(anyhow::Error::from)?)),
        None => Err(ServiceError::NotFound(format!("no probability map for image {id} and model {model}"))),
    }
}

async fn annotate(State(svc): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let value: Value = serde_json::from_slice(&body).map_err(|e| {
        ServiceError::BadRequest(vec![crate::service::FieldError {
            index: 0,
            field: "body".into(),
            message: format!("not JSON: {e}"),
        }])
    })?;
    let receipt = blocking(move || {
        let records = svc.parse_corrections(&id, &value)?;
        svc.add_corrections(&records)
    })
    .await?;
    Ok(Json(serde_json::to_value(receipt).map_err(anyhow::Error::from)?))
}

async fn annotations(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    if !svc.store.has_image(&id) {
        return Err(ServiceError::NotFound(format!("no image {id}")));
    }
    let records: Vec<_> = svc.store.corrections()?.into_iter().filter(|r| r.fov_id == id).collect();
    Ok(Json(json!(records)))
}

async fn start_finetune(State(svc): State<Arc<Service>>) -> ApiResult<(StatusCode, Json<Value>)> {
    if svc.job_status().running {
        return Err(ServiceError::Conflict("a fine-tuning round is already running".into()));
    }
    if svc.active_model().is_none() {
        return Err(ServiceError::Conflict("no ready model".into()));
    }
    let started = blocking(move || svc.maybe_start_job(true)).await?;
    if started {
        Ok((StatusCode::ACCEPTED, Json(json!({ "started": true }))))
    } else {
        Err(ServiceError::Conflict("nothing to fine-tune on: no unconsumed corrections".into()))
    }
}

#[derive(Serialize)]
struct ModelsResponse {
    active: Option<String>,
    models: Vec<crate::registry::ModelRegistryEntry>,
    finetune: JobStatus,
    unconsumed_corrections: usize,
}

async fn models(State(svc): State<Arc<Service>>) -> ApiResult<Json<ModelsResponse>> {
    let manifest = svc.models();
    Ok(Json(ModelsResponse {
        active: manifest.active,
        models: manifest.entries,
        finetune: svc.job_status(),
        unconsumed_corrections: svc.store.unconsumed()?.len(),
    }))
}

/// Bind and serve until the process is stopped.
pub async fn serve(service: Arc<Service>, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await?;
    Ok(())
}
