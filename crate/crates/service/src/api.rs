use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast;

use scenestage::codec::{image_to_png, mask_to_png};
use scenestage::pipeline::{SessionConfig, StagePrompt};
use scenestage::protocol::{encode_reply, DecodedPredict, PredictWire};
use scenestage::render::render_cartesian;
use scenestage::scene::{apply_translation, check_in_bounds, Box3D, SceneLayout};
use scenestage::translation::TranslationRequest;
use scenestage::Error;

use crate::clients::BackendKind;
use crate::error::{parse_body, ApiError, ApiResult};
use crate::jobs::{Job, JobEvent};
use crate::state::{body_digest, stage_summary, AppState, Slot, Work};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/stages:add", post(add_stage))
        .route("/sessions/{id}/stages:translate", post(translate_stage))
        .route("/sessions/{id}/stages/{i}", get(get_stage))
        .route("/sessions/{id}/stages/{i}/render/{kind}", get(get_render))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/events", get(job_events))
        .route("/backends", get(backends))
        .route("/v1/predict", post(predict))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .route("/healthz", get(healthz))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

async fn auth(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config().token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|v| v == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn backends(State(state): State<AppState>) -> Json<Value> {
    Json(json!({ "backends": state.backends() }))
}

fn idem_key(headers: &HeaderMap, body: &[u8]) -> Option<(String, String)> {
    let key = headers.get(IDEMPOTENCY_HEADER)?.to_str().ok()?.trim();
    (!key.is_empty()).then(|| (key.to_string(), body_digest(body)))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PromptIn {
    Text(String),
    Full(StagePrompt),
}

impl From<PromptIn> for StagePrompt {
    fn from(p: PromptIn) -> Self {
        match p {
            PromptIn::Text(t) => StagePrompt::new(t),
            PromptIn::Full(p) => p,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    scene: SceneLayout,
    prompt: PromptIn,
    #[serde(default)]
    config: SessionConfig,
    #[serde(default)]
    backend: Option<BackendKind>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AddBody {
    #[serde(rename = "box")]
    box3d: Box3D,
    prompt: PromptIn,
}

#[derive(Deserialize, Default)]
struct WaitQuery {
    wait: Option<bool>,
}

fn handle(slot: &Slot) -> Value {
    let s = slot.snapshot();
    json!({
        "id": slot.id,
        "created_at": slot.created_at,
        "backend": slot.backend,
        "config": s.config(),
        "stage_count": s.stages().len(),
        "scene": s.scene(),
        "stages": s.stages().iter().map(|r| stage_summary(&slot.id, r)).collect::<Vec<_>>(),
    })
}

async fn create_session(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let idem = idem_key(&headers, &body);
    if let Some((key, digest)) = &idem {
        if let Some(id) = state.create_replay(key, digest)? {
            let slot = state.session(&id)?;
            return Ok((StatusCode::CREATED, Json(handle(&slot))).into_response());
        }
    }
    let b: CreateBody = parse_body(&body)?;
    let prompt: StagePrompt = b.prompt.into();
    prompt.validate()?;
    b.config.validate()?;
    b.config.check_scene(&b.scene)?;
    let kind = b.backend.unwrap_or(if state.config().external.is_some() {
        BackendKind::External
    } else {
        BackendKind::Toy
    });
    let slot = state.create(b.scene, prompt, b.config, kind, idem).await?;
    let loc = format!("/sessions/{}", slot.id);
    Ok((StatusCode::CREATED, [(header::LOCATION, loc)], Json(handle(&slot))).into_response())
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = state.session(&id)?;
    Ok(Json(handle(&slot)))
}

fn parse_index(i: &str) -> ApiResult<usize> {
    i.parse().map_err(|_| ApiError::not_found("stage", i))
}

async fn get_stage(State(state): State<AppState>, Path((id, i)): Path<(String, String)>) -> ApiResult<Json<Value>> {
    let slot = state.session(&id)?;
    let snap = slot.snapshot();
    let rec = snap.stage(parse_index(&i)?)?;
    Ok(Json(stage_summary(&id, rec)))
}

async fn get_render(
    State(state): State<AppState>,
    Path((id, i, kind)): Path<(String, String, String)>,
) -> ApiResult<Response> {
    let slot = state.session(&id)?;
    let snap = slot.snapshot();
    let rec = snap.stage(parse_index(&i)?)?;
    const PNG: &str = "image/png";
    const BLOB: &str = "application/octet-stream";
    let (ctype, bytes) = match kind.as_str() {
        "image" => (PNG, image_to_png(&rec.image)),
        "mask_fg" => (PNG, mask_to_png(&rec.masks.fg)),
        "depth" => (BLOB, rec.depth.to_blob().encode()),
        "cartesian" => match &rec.box3d {
            Some(b) => (BLOB, render_cartesian(b, &rec.scene.camera).to_blob().encode()),
            None => return Err(ApiError::not_found("render", "cartesian (stage has no box)")),
        },
        other => return Err(ApiError::not_found("render kind", other)),
    };
    Ok(([(header::CONTENT_TYPE, ctype)], bytes).into_response())
}

/// Sync callers get the stage back; async callers get 202 and a job link.
async fn respond(job: Arc<Job>, wait: bool) -> ApiResult<Response> {
    if !wait {
        let body = json!({
            "job_id": job.id,
            "status": job.status(),
            "job": format!("/jobs/{}", job.id),
            "events": format!("/jobs/{}/events", job.id),
        });
        return Ok((StatusCode::ACCEPTED, Json(body)).into_response());
    }
    match job.wait().await {
        JobEvent::Done { result } => Ok(Json(json!({ "job_id": job.id, "stage": result })).into_response()),
        JobEvent::Failed { error } => Err(ApiError::from_body(error)),
        JobEvent::Progress { .. } => unreachable!("wait returns a terminal event"),
    }
}

fn wants_wait(slot: &Slot, q: &WaitQuery) -> bool {
    q.wait.unwrap_or(slot.backend == BackendKind::Toy)
}

async fn add_stage(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<WaitQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let slot = state.session(&id)?;
    let idem = idem_key(&headers, &body);
    if let Some(job) = state.replay(&slot, &idem)? {
        return respond(job, wants_wait(&slot, &q)).await;
    }
    let b: AddBody = parse_body(&body)?;
    let prompt: StagePrompt = b.prompt.into();
    prompt.validate()?;
    // cheap checks against the latest snapshot before anything is queued
    let mut scene = slot.snapshot().scene().clone();
    scene.add_box(b.box3d.clone())?;
    let job = state.submit(
        &slot,
        "add",
        Work::Add {
            box3d: b.box3d,
            prompt,
        },
        idem,
    )?;
    respond(job, wants_wait(&slot, &q)).await
}

async fn translate_stage(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<WaitQuery>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let slot = state.session(&id)?;
    let idem = idem_key(&headers, &body);
    if let Some(job) = state.replay(&slot, &idem)? {
        return respond(job, wants_wait(&slot, &q)).await;
    }
    let request: TranslationRequest = parse_body(&body)?;
    request.validate()?;
    let snap = slot.snapshot();
    let b = snap.scene().find_box(&request.box_id)?;
    if !check_in_bounds(snap.scene(), &apply_translation(b, request.t)) {
        return Err(Error::OutOfBounds { id: b.id.clone() }.into());
    }
    let job = state.submit(&slot, "translate", Work::Translate { request }, idem)?;
    respond(job, wants_wait(&slot, &q)).await
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(serde_json::to_value(state.job(&id)?.view()).expect("job view")))
}

struct EventFeed {
    backlog: VecDeque<(usize, JobEvent)>,
    rx: broadcast::Receiver<JobEvent>,
    next_id: usize,
    job: Arc<Job>,
    done: bool,
}

fn sse_event(id: usize, ev: &JobEvent) -> Event {
    Event::default()
        .event(ev.name())
        .id(id.to_string())
        .json_data(ev)
        .expect("job event serializes")
}

/// Replays the log then follows live events; ends after the terminal event.
/// `Last-Event-ID` resumes after the given event.
async fn job_events(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let job = state.job(&id)?;
    let skip = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok())
        .map_or(0, |n| n + 1);
    let (history, rx) = job.subscribe();
    let next_id = history.len();
    let backlog = history.into_iter().enumerate().skip(skip).collect();
    let feed = EventFeed {
        backlog,
        rx,
        next_id,
        job,
        done: false,
    };
    let stream = futures::stream::unfold(feed, |mut f| async move {
        if f.done {
            return None;
        }
        let (i, ev) = match f.backlog.pop_front() {
            Some(x) => x,
            None => loop {
                match f.rx.recv().await {
                    Ok(ev) => {
                        let i = f.next_id;
                        f.next_id += 1;
                        break (i, ev);
                    }
                    Err(broadcast::error::RecvError::Lagged(_)) => {
                        // refill from the log
                        let all = f.job.view().events;
                        f.backlog = all.into_iter().enumerate().skip(f.next_id).collect();
                        f.next_id += f.backlog.len();
                        if let Some(x) = f.backlog.pop_front() {
                            break x;
                        }
                    }
                    Err(broadcast::error::RecvError::Closed) => return None,
                }
            },
        };
        if ev.is_terminal() {
            f.done = true;
        }
        Some((Ok(sse_event(i, &ev)), f))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Deserialize, Default)]
struct PredictQuery {
    seed: Option<u64>,
}

/// Reference wire backend: the toy denoiser behind the external protocol.
async fn predict(State(state): State<AppState>, Query(q): Query<PredictQuery>, body: Bytes) -> ApiResult<Response> {
    let w: PredictWire = parse_body(&body)?;
    let model = state.model(BackendKind::Toy, q.seed.unwrap_or(0))?;
    let reply = tokio::task::spawn_blocking(move || -> scenestage::Result<_> {
        let d = DecodedPredict::decode(&w)?;
        let out = d.with_request(|req| model.predict(req))?;
        Ok(encode_reply(&out))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(reply).into_response())
}
