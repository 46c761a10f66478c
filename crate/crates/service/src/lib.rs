//! HTTP session service for interactive morphism of multi-invex classifiers.
//!
//! Endpoints:
//!
//! | method | path | body | result |
//! |---|---|---|---|
//! | POST | `/sessions` | [`api::CreateSession`] | 201 [`api::Created`] |
//! | GET | `/sessions/{id}/state?grid=R` | | [`api::State`] |
//! | POST | `/sessions/{id}/morph` | [`api::MorphRequest`] | [`api::MorphResponse`] |
//! | POST | `/sessions/{id}/train` | [`api::TrainRequest`] | [`api::TrainResponse`] |
//! | GET | `/sessions/{id}/export` | | checkpoint JSON |
//! | DELETE | `/sessions/{id}` | | 204 |
//!
//! Errors are `{"error": ...}` with 400 (bad session spec), 404 (unknown
//! session), 409 (stale `expected_revision` or training in progress) or 422
//! (invalid op or step count).

pub mod api;
mod error;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State as AxState};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use invexnet::checkpoint::{Checkpoint, DatasetRef, Model};
use invexnet::classifier::{train_multi_invex, MultiInvex, MultiTrainConfig};
use invexnet::datasets::{by_name, parse_csv, Dataset, Task};
use invexnet::morph::{MorphOp, MorphismSession};
use invexnet::nn::InvertibleNet;
use invexnet::verify::{raster_bounds, rasterize_classes, rasterize_regions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use error::ApiError;

use api::*;

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub struct Session {
    pub morph: MorphismSession,
    pub dataset: DatasetRef,
    pub created: u64,
    pub updated: u64,
}

struct Slot {
    session: Mutex<Session>,
    training: AtomicBool,
}

impl Slot {
    fn lock(&self) -> std::sync::MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Clears the training flag when dropped.
struct TrainingGuard(Arc<Slot>);

impl Drop for TrainingGuard {
    fn drop(&mut self) {
        self.0.training.store(false, Ordering::Release);
    }
}

/// Shared, in-memory session table.
#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Arc<Slot>>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an existing session and returns its id.
    pub fn insert(&self, morph: MorphismSession, dataset: DatasetRef) -> String {
        let id = format!("{:032x}", rand::random::<u128>());
        let t = now();
        let slot = Arc::new(Slot {
            session: Mutex::new(Session {
                morph,
                dataset,
                created: t,
                updated: t,
            }),
            training: AtomicBool::new(false),
        });
        self.sessions.write().unwrap_or_else(|p| p.into_inner()).insert(id.clone(), slot);
        id
    }

    pub fn len(&self) -> usize {
        self.sessions.read().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no session {id}")))
    }

    fn remove(&self, id: &str) -> Option<Arc<Slot>> {
        self.sessions.write().unwrap_or_else(|p| p.into_inner()).remove(id)
    }
}

/// CORS for `origin`, or for any origin when `None`.
pub fn cors(origin: Option<&str>) -> Result<CorsLayer, String> {
    let allow = match origin {
        None => AllowOrigin::from(Any),
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).map_err(|e| format!("bad origin {o:?}: {e}"))?),
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST, Method::DELETE])
        .allow_headers([header::CONTENT_TYPE]))
}

pub fn router(state: AppState, cors: CorsLayer) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", delete(delete_session))
        .route("/sessions/{id}/state", get(get_state))
        .route("/sessions/{id}/morph", post(morph))
        .route("/sessions/{id}/train", post(train))
        .route("/sessions/{id}/export", get(export))
        .layer(cors)
        .with_state(state)
}

/// Serves `router` on `listener` until the process is stopped.
pub async fn serve(listener: tokio::net::TcpListener, router: Router) -> std::io::Result<()> {
    axum::serve(listener, router).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, DatasetRef), ApiError> {
    let bad = |e: invexnet::Error| ApiError::BadRequest(e.to_string());
    let (data, name) = match spec {
        DatasetSpec::Name(name) => (by_name(name, seed).map_err(bad)?, name.clone()),
        DatasetSpec::Inline { csv, label_column } => (parse_csv(csv.as_bytes(), label_column, "inline").map_err(bad)?, "inline".to_string()),
    };
    if data.dim() != 2 {
        return Err(ApiError::BadRequest(format!("sessions need 2D data, got {} features", data.dim())));
    }
    if !matches!(data.task, Task::Classification { .. }) {
        return Err(ApiError::BadRequest("sessions need class labels".into()));
    }
    Ok((data, DatasetRef { name, seed }))
}

fn validate_model(m: &ModelSpec, n: usize) -> Result<(), ApiError> {
    let bad = |msg: String| Err(ApiError::BadRequest(msg));
    if m.regions == 0 || m.regions > n {
        return bad(format!("regions must be in [1, {n}]"));
    }
    if m.blocks > 64 || m.hidden == 0 || m.hidden > 512 || m.depth == 0 || m.depth > 8 {
        return bad("need blocks <= 64, hidden in [1, 512], depth in [1, 8]".into());
    }
    if !(m.coeff > 0.0 && m.coeff < 1.0) {
        return bad("coeff must be in (0, 1)".into());
    }
    if m.train_steps > MAX_TRAIN_STEPS {
        return bad(format!("train_steps must be at most {MAX_TRAIN_STEPS}"));
    }
    for (name, v) in [("lr", m.lr), ("finetune_lr", m.finetune_lr), ("init_logit", m.init_logit.abs() + 1.0)] {
        if !(v.is_finite() && v > 0.0) {
            return bad(format!("{name} must be positive and finite"));
        }
    }
    Ok(())
}

fn build_session(req: &CreateSession) -> Result<(MorphismSession, DatasetRef), ApiError> {
    let (data, dataset) = load_dataset(&req.dataset, req.seed)?;
    let m = &req.model;
    validate_model(m, data.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let backbone = InvertibleNet::new(2, m.blocks, m.hidden, m.depth, m.activation, m.coeff, m.batch_norm, &mut rng)
        .map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let mut model = MultiInvex::init_kmeans(backbone, &data, m.regions, m.init_logit, req.seed).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    if m.train_steps > 0 {
        let cfg = MultiTrainConfig {
            steps: m.train_steps,
            lr: m.lr,
            log_every: 0,
            ..Default::default()
        };
        train_multi_invex(&mut model, &data, &cfg)?;
    }
    let finetune = MultiTrainConfig {
        lr: m.finetune_lr,
        log_every: 0,
        ..Default::default()
    };
    Ok((MorphismSession::new(model, data, finetune)?, dataset))
}

fn grid_size(grid: Option<usize>) -> Result<usize, ApiError> {
    match grid.unwrap_or(DEFAULT_GRID) {
        0 | 1 => Err(ApiError::Unprocessable("grid must be at least 2".into())),
        g => Ok(g.min(MAX_GRID)),
    }
}

fn snapshot(id: &str, s: &Session, grid: usize) -> Result<State, ApiError> {
    let model = &s.morph.model;
    let data = &s.morph.data;
    let bounds = raster_bounds(&data.bounds(), 0.2)?;
    let centers = model.input_space_centers()?;
    Ok(State {
        session_id: id.to_string(),
        revision: model.state.revision,
        regions: model.state.num_regions(),
        num_classes: model.state.num_classes(),
        centers: (0..centers.rows()).map(|r| [centers.get(r, 0), centers.get(r, 1)]).collect(),
        region_classes: model.state.region_classes(),
        accuracy: model.accuracy(data, true)?,
        soft_accuracy: model.accuracy(data, false)?,
        reports: model.region_report(data)?,
        region_raster: rasterize_regions(model, bounds, [grid, grid])?,
        class_raster: rasterize_classes(model, bounds, [grid, grid])?,
        points: data
            .labels()
            .into_iter()
            .enumerate()
            .map(|(i, label)| Point {
                x: data.x.get(i, 0),
                y: data.x.get(i, 1),
                label,
            })
            .collect(),
        log: s.morph.log.clone(),
        created: s.created,
        updated: s.updated,
    })
}

/// Copies the parts of a session needed for a snapshot, so rendering runs unlocked.
fn detached(s: &Session) -> Session {
    Session {
        morph: s.morph.clone(),
        dataset: s.dataset.clone(),
        created: s.created,
        updated: s.updated,
    }
}

async fn create_session(AxState(state): AxState<AppState>, body: Result<Json<CreateSession>, JsonRejection>) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let grid = grid_size(req.grid).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let (session, snap) = blocking(move || {
        let (morph, dataset) = build_session(&req)?;
        let t = now();
        let session = Session {
            morph,
            dataset,
            created: t,
            updated: t,
        };
        let snap = snapshot("", &session, grid)?;
        Ok((session, snap))
    })
    .await?;
    let id = state.insert(session.morph, session.dataset);
    let created = Created {
        session_id: id.clone(),
        state: State { session_id: id, ..snap },
    };
    Ok((StatusCode::CREATED, Json(created)))
}

async fn list_sessions(AxState(state): AxState<AppState>) -> Json<Vec<String>> {
    let mut ids: Vec<String> = state.sessions.read().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect();
    ids.sort();
    Json(ids)
}

#[derive(Debug, Deserialize)]
struct GridQuery {
    grid: Option<usize>,
}

async fn get_state(
    AxState(state): AxState<AppState>,
    Path(id): Path<String>,
    query: Result<Query<GridQuery>, QueryRejection>,
) -> Result<Json<State>, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::Unprocessable(e.body_text()))?;
    let grid = grid_size(q.grid)?;
    let slot = state.get(&id)?;
    let copy = detached(&slot.lock());
    let snap = blocking(move || snapshot(&id, &copy, grid)).await?;
    Ok(Json(snap))
}

async fn morph(
    AxState(state): AxState<AppState>,
    Path(id): Path<String>,
    body: Result<Json<MorphRequest>, JsonRejection>,
) -> Result<Json<MorphResponse>, ApiError> {
    let slot = state.get(&id)?;
    let Json(req) = body.map_err(|e| ApiError::Unprocessable(e.body_text()))?;
    if matches!(req.op, MorphOp::Finetune { .. }) {
        return Err(ApiError::Unprocessable("fine-tuning goes through POST /sessions/{id}/train".into()));
    }
    if slot.training.load(Ordering::Acquire) {
        return Err(ApiError::Conflict {
            message: "training in progress".into(),
            current_revision: None,
        });
    }
    let mut s = slot.lock();
    let current = s.morph.revision();
    if req.expected_revision != current {
        return Err(ApiError::Conflict {
            message: format!("expected revision {}, session is at {current}", req.expected_revision),
            current_revision: Some(current),
        });
    }
    let step = s.morph.apply(req.op.clone()).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    s.updated = now();
    Ok(Json(MorphResponse {
        revision: step.revision,
        regions: step.regions,
        accuracy_before: step.accuracy_before,
        accuracy: step.accuracy,
        reassigned: step.reassigned.len(),
        added_region: matches!(req.op, MorphOp::Add { .. }).then(|| step.regions - 1),
    }))
}

async fn train(
    AxState(state): AxState<AppState>,
    Path(id): Path<String>,
    body: Result<Json<TrainRequest>, JsonRejection>,
) -> Result<Json<TrainResponse>, ApiError> {
    let slot = state.get(&id)?;
    let Json(req) = body.map_err(|e| ApiError::Unprocessable(e.body_text()))?;
    if req.steps == 0 || req.steps > MAX_TRAIN_STEPS {
        return Err(ApiError::Unprocessable(format!("steps must be in [1, {MAX_TRAIN_STEPS}]")));
    }
    if slot.training.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err() {
        return Err(ApiError::Conflict {
            message: "training already in progress".into(),
            current_revision: None,
        });
    }
    let guard = TrainingGuard(slot.clone());
    let mut work = slot.lock().morph.clone();
    let steps = req.steps;
    let (work, step) = blocking(move || {
        let step = work.apply(MorphOp::Finetune { steps })?;
        Ok((work, step))
    })
    .await?;
    {
        let mut s = slot.lock();
        s.morph = work;
        s.updated = now();
    }
    drop(guard);
    Ok(Json(TrainResponse {
        steps,
        accuracy_before: step.accuracy_before,
        accuracy_after: step.accuracy,
        revision: step.revision,
    }))
}

async fn export(AxState(state): AxState<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let slot = state.get(&id)?;
    let ckpt = {
        let s = slot.lock();
        Checkpoint::new(Model::MultiInvex(s.morph.model.clone()), Some(s.dataset.clone()))
    };
    let body = ckpt.to_json()?;
    let disposition = format!("attachment; filename=\"session-{id}.json\"");
    Ok(([(header::CONTENT_TYPE, "application/json".to_string()), (header::CONTENT_DISPOSITION, disposition)], body))
}

async fn delete_session(AxState(state): AxState<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    state
        .remove(&id)
        .map(|_| StatusCode::NO_CONTENT)
        .ok_or_else(|| ApiError::NotFound(format!("no session {id}")))
}
