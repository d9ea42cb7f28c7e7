//! HTTP job service over the project store.
//!
//! | Method | Path | Body | Reply |
//! |---|---|---|---|
//! | POST | `/projects` | multipart `image`, optional `roi`, `config` | `201` project |
//! | GET | `/projects` | | project ids |
//! | GET | `/projects/{id}` | | project |
//! | PUT | `/projects/{id}/roi` | `{"boxes": [...]}` | project |
//! | POST | `/projects/{id}/train` | optional overrides | `202` `{job_id}` |
//! | GET | `/projects/{id}/status` | | status |
//! | POST | `/projects/{id}/generate` | `{count, seed, band_px}` | `{samples}` |
//! | POST | `/projects/{id}/edit` | multipart `image`, optional `seed` | sample record |
//! | POST | `/projects/{id}/animate` | `{kind, frames, level_max, fps, seed}` | animation |
//! | GET | `/projects/{id}/metrics` | query `samples`, `seed` | metrics reports |
//! | GET | `/samples/{id}` | | PNG |
//! | GET | `/samples/{id}/record` | | sample record |
//!
//! Unknown ids give 404, a second training request 409, invalid input 422.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use mogan::imaging::{Image, RoiBox};
use mogan::model::{MoganModel, SampleRecord};
use mogan::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, ErrorKind, Result};
use crate::ops::{self, AnimateSpec, Animation, ProgressTracker, StatusReport, TrainOverrides, TrainingJob};
use crate::store::{new_id, Project, Store};

const BODY_LIMIT: usize = 32 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    store: Store,
    trackers: Mutex<HashMap<String, Arc<ProgressTracker>>>,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    models: Mutex<HashMap<String, Arc<MoganModel>>>,
}

impl AppState {
    pub fn new(store: Store) -> Self {
        AppState {
            inner: Arc::new(Inner {
                store,
                trackers: Mutex::default(),
                locks: Mutex::default(),
                models: Mutex::default(),
            }),
        }
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    /// Serializes mutating requests on one project.
    fn project_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.inner.locks.lock().expect("lock table poisoned");
        Arc::clone(locks.entry(id.to_string()).or_default())
    }

    async fn model(&self, project: &Project) -> Result<Arc<MoganModel>> {
        if let Some(m) = self.inner.models.lock().expect("model cache poisoned").get(&project.id) {
            return Ok(Arc::clone(m));
        }
        let state = self.clone();
        let project = project.clone();
        blocking(move || {
            let model = Arc::new(ops::load_model(state.store(), &project)?);
            state.inner.models.lock().expect("model cache poisoned").insert(project.id.clone(), Arc::clone(&model));
            Ok(model)
        })
        .await
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/projects", post(create_project).get(list_projects))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/roi", put(put_roi))
        .route("/projects/{id}/train", post(train))
        .route("/projects/{id}/status", get(status))
        .route("/projects/{id}/generate", post(generate))
        .route("/projects/{id}/edit", post(edit))
        .route("/projects/{id}/animate", post(animate))
        .route("/projects/{id}/metrics", get(metrics))
        .route("/samples/{id}", get(sample_png))
        .route("/samples/{id}/record", get(sample_record))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let status = match self.kind() {
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ErrorKind::Conflict => StatusCode::CONFLICT,
            ErrorKind::Validation => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorKind::Training | ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| AppError::Io(std::io::Error::other(e)))?
}

fn parse_json<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| AppError::Invalid(format!("invalid request body: {e}")))
}

fn parse_required<T: DeserializeOwned>(body: &Bytes) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| AppError::Invalid(format!("invalid request body: {e}")))
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> AppError {
    AppError::Invalid(format!("invalid multipart body: {e}"))
}

/// Collects named multipart fields as raw bytes.
async fn fields(mut form: Multipart) -> Result<HashMap<String, Bytes>> {
    let mut out = HashMap::new();
    while let Some(field) = form.next_field().await.map_err(multipart_error)? {
        let name = field.name().unwrap_or_default().to_string();
        out.insert(name, field.bytes().await.map_err(multipart_error)?);
    }
    Ok(out)
}

fn image_field(fields: &HashMap<String, Bytes>) -> Result<Image> {
    let bytes = fields.get("image").ok_or_else(|| AppError::Invalid("missing `image` field".into()))?;
    Ok(Image::decode(bytes)?)
}

async fn create_project(State(state): State<AppState>, form: Multipart) -> Result<(StatusCode, Json<Project>)> {
    let fields = fields(form).await?;
    let image = image_field(&fields)?;
    let boxes: Vec<RoiBox> = match fields.get("roi") {
        Some(b) => parse_json(b)?,
        None => Vec::new(),
    };
    let overrides: TrainOverrides = match fields.get("config") {
        Some(b) => parse_json(b)?,
        None => TrainOverrides::default(),
    };
    let config = overrides.apply(&TrainConfig::desk())?;
    let project = blocking(move || state.store().create_project(&image, &boxes, config)).await?;
    Ok((StatusCode::CREATED, Json(project)))
}

async fn list_projects(State(state): State<AppState>) -> Result<Json<Vec<String>>> {
    Ok(Json(state.store().list()?))
}

async fn get_project(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Project>> {
    Ok(Json(state.store().project(&id)?))
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoiRequest {
    boxes: Vec<RoiBox>,
}

async fn put_roi(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Project>> {
    state.store().project(&id)?;
    let req: RoiRequest = parse_json(&body)?;
    let lock = state.project_lock(&id);
    let _guard = lock.lock().await;
    let store = state.store().clone();
    Ok(Json(blocking(move || ops::set_roi(&store, &id, req.boxes)).await?))
}

#[derive(Serialize)]
struct JobAccepted {
    job_id: String,
    project_id: String,
}

async fn train(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<(StatusCode, Json<JobAccepted>)> {
    state.store().project(&id)?;
    let overrides: TrainOverrides = parse_json(&body)?;
    let lock = state.project_lock(&id);
    let _guard = lock.lock().await;
    let store = state.store().clone();
    let claim_id = id.clone();
    let job = blocking(move || TrainingJob::start(&store, &claim_id, &overrides)).await?;
    state.inner.trackers.lock().expect("tracker table poisoned").insert(id.clone(), job.tracker());
    let store = state.store().clone();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = job.run(&store) {
            log::warn!("training failed: {e}");
        }
    });
    Ok((StatusCode::ACCEPTED, Json(JobAccepted { job_id: new_id(), project_id: id })))
}

async fn status(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<StatusReport>> {
    let project = state.store().project(&id)?;
    let tracker = state.inner.trackers.lock().expect("tracker table poisoned").get(&id).cloned();
    Ok(Json(match tracker {
        Some(t) => t.report(&project),
        None => ops::stored_report(state.store(), &project),
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    #[serde(default = "one")]
    count: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    band_px: Option<usize>,
}

fn one() -> usize {
    1
}

impl Default for GenerateRequest {
    fn default() -> Self {
        GenerateRequest { count: 1, seed: 0, band_px: None }
    }
}

#[derive(Serialize)]
struct SamplesReply {
    samples: Vec<SampleRecord>,
}

async fn generate(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<SamplesReply>> {
    let project = state.store().project(&id)?;
    let req: GenerateRequest = parse_json(&body)?;
    let model = state.model(&project).await?;
    let store = state.store().clone();
    let written = blocking(move || ops::generate(&store, &project, &model, req.count, req.seed, req.band_px)).await?;
    Ok(Json(SamplesReply { samples: written.into_iter().map(|w| w.record).collect() }))
}

async fn edit(State(state): State<AppState>, Path(id): Path<String>, form: Multipart) -> Result<Json<SampleRecord>> {
    let project = state.store().project(&id)?;
    let fields = fields(form).await?;
    let image = image_field(&fields)?;
    let seed = match fields.get("seed") {
        Some(b) => std::str::from_utf8(b)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| AppError::Invalid("`seed` must be an unsigned integer".into()))?,
        None => 0,
    };
    let model = state.model(&project).await?;
    let store = state.store().clone();
    Ok(Json(blocking(move || ops::edit(&store, &project, &model, &image, seed)).await?.record))
}

async fn animate(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Animation>> {
    let project = state.store().project(&id)?;
    let spec: AnimateSpec = parse_required(&body)?;
    let model = state.model(&project).await?;
    let store = state.store().clone();
    Ok(Json(blocking(move || ops::animate(&store, &project, &model, &spec)).await?))
}

#[derive(Deserialize)]
struct MetricsQuery {
    samples: Option<usize>,
    seed: Option<u64>,
}

async fn metrics(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<MetricsQuery>,
) -> Result<Json<Vec<mogan::metrics::MetricsReport>>> {
    let project = state.store().project(&id)?;
    if q.samples.is_none() && q.seed.is_none() {
        if let Some(cached) = ops::cached_metrics(state.store(), &id)? {
            return Ok(Json(cached));
        }
    }
    let model = state.model(&project).await?;
    let store = state.store().clone();
    let (samples, seed) = (q.samples.unwrap_or(ops::DEFAULT_EVAL_SAMPLES), q.seed.unwrap_or(0));
    Ok(Json(blocking(move || ops::evaluate(&store, &project, &model, samples, seed)).await?))
}

async fn sample_png(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response> {
    let bytes = tokio::fs::read(state.store().sample_png(&id)?).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn sample_record(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SampleRecord>> {
    Ok(Json(state.store().sample_record(&id)?))
}
