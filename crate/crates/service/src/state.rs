//! Session store: one directory per session, an in-memory snapshot for reads,
//! and a FIFO worker per session for mutations.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::sync::mpsc;

use scenestage::denoiser::EpsModel;
use scenestage::pipeline::{no_progress, SessionConfig, StagePrompt, StageRecord};
use scenestage::scene::{Box3D, SceneLayout};
use scenestage::session::{image_digest, Session};
use scenestage::translation::{Segmenter, TranslationRequest};
use scenestage::{Error, Result, ToyDenoiser};

use crate::clients::{BackendDescriptor, BackendKind, HttpBackend, HttpSegmenter, DEFAULT_TIMEOUT};
use crate::error::ApiError;
use crate::jobs::Job;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Static bearer token; every route except `/healthz` requires it when set.
    pub token: Option<String>,
    pub external: Option<BackendDescriptor>,
    pub segmenter: Option<String>,
    pub timeout_ms: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            data_dir: PathBuf::from("scenestage-data"),
            token: None,
            external: None,
            segmenter: None,
            timeout_ms: DEFAULT_TIMEOUT.as_millis() as u64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HandleFile {
    id: String,
    created_at: String,
    backend: BackendKind,
}

pub enum Work {
    Add { box3d: Box3D, prompt: StagePrompt },
    Translate { request: TranslationRequest },
}

struct Queued {
    job: Arc<Job>,
    work: Work,
}

pub struct Slot {
    pub id: String,
    pub created_at: String,
    pub backend: BackendKind,
    dir: PathBuf,
    current: RwLock<Arc<Session>>,
    tx: mpsc::UnboundedSender<Queued>,
    idem: Mutex<HashMap<String, (String, Arc<Job>)>>,
}

impl Slot {
    pub fn snapshot(&self) -> Arc<Session> {
        self.current.read().unwrap().clone()
    }
}

struct Inner {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    jobs: RwLock<HashMap<String, Arc<Job>>>,
    create_idem: Mutex<HashMap<String, (String, String)>>,
    toys: Mutex<HashMap<u64, Arc<ToyDenoiser>>>,
    external: Option<Arc<HttpBackend>>,
    segmenter: Option<Arc<HttpSegmenter>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

/// Hex SHA-256 of a request body, used to spot reused idempotency keys.
pub fn body_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn stage_summary(session_id: &str, s: &StageRecord) -> Value {
    let base = format!("/sessions/{session_id}/stages/{}", s.index);
    let mut renders = json!({
        "image": format!("{base}/render/image"),
        "depth": format!("{base}/render/depth"),
        "mask_fg": format!("{base}/render/mask_fg"),
    });
    if s.box3d.is_some() {
        renders["cartesian"] = json!(format!("{base}/render/cartesian"));
    }
    json!({
        "index": s.index,
        "kind": s.kind,
        "box": s.box3d,
        "prompt": s.prompt,
        "seed": s.seed,
        "image_sha256": image_digest(&s.image),
        "fg_pixels": s.masks.fg.count(),
        "introduced": s.introduced,
        "generated": s.generated,
        "translation": s.translation.as_ref().map(|t| json!({
            "request": t.request,
            "base_stage": t.base_stage,
            "coarse_bbox": t.coarse_bbox,
            "object_bbox": t.object_bbox,
            "homography": t.homography,
        })),
        "renders": renders,
    })
}

fn read_denoiser_seed(dir: &Path) -> Result<u64> {
    let v: Value = serde_json::from_slice(&std::fs::read(dir.join("config.json"))?)?;
    Ok(v["config"]["denoiser_seed"].as_u64().unwrap_or(0))
}

impl AppState {
    /// Opens the store and replays every saved session.
    pub async fn open(config: ServiceConfig) -> Result<Self> {
        std::fs::create_dir_all(config.data_dir.join("sessions"))?;
        let timeout = Duration::from_millis(config.timeout_ms);
        let external = match &config.external {
            Some(d) => Some(Arc::new(HttpBackend::new(d.clone(), timeout)?)),
            None => None,
        };
        let segmenter = config.segmenter.as_deref().map(|u| Arc::new(HttpSegmenter::new(u, timeout)));
        let state = AppState(Arc::new(Inner {
            config,
            sessions: RwLock::new(HashMap::new()),
            jobs: RwLock::new(HashMap::new()),
            create_idem: Mutex::new(HashMap::new()),
            toys: Mutex::new(HashMap::new()),
            external,
            segmenter,
        }));
        let root = state.0.config.data_dir.join("sessions");
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("handle.json").exists() && p.join("ops.json").exists())
            .collect();
        dirs.sort();
        for dir in dirs {
            let st = state.clone();
            let loaded = tokio::task::spawn_blocking(move || -> Result<(HandleFile, Session, PathBuf)> {
                let handle: HandleFile = serde_json::from_slice(&std::fs::read(dir.join("handle.json"))?)?;
                let model = st.model(handle.backend, read_denoiser_seed(&dir)?)?;
                let session = Session::load(&dir, model.as_ref())?;
                Ok((handle, session, dir))
            })
            .await
            .expect("loader task");
            match loaded {
                Ok((h, s, dir)) => {
                    state.install(h, s, dir);
                }
                Err(e) => tracing::warn!("skipping unreadable session: {e}"),
            }
        }
        Ok(state)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.config
    }

    pub fn backends(&self) -> Vec<BackendDescriptor> {
        let mut out = vec![BackendDescriptor::toy()];
        out.extend(self.0.config.external.clone());
        out
    }

    pub fn model(&self, kind: BackendKind, denoiser_seed: u64) -> Result<Arc<dyn EpsModel>> {
        match kind {
            BackendKind::Toy => {
                let mut toys = self.0.toys.lock().unwrap();
                let m = toys
                    .entry(denoiser_seed)
                    .or_insert_with(|| Arc::new(ToyDenoiser::new(denoiser_seed)))
                    .clone();
                Ok(m)
            }
            BackendKind::External => self
                .0
                .external
                .clone()
                .map(|m| m as Arc<dyn EpsModel>)
                .ok_or_else(|| Error::Unsupported("no external backend is configured".into())),
        }
    }

    fn install(&self, h: HandleFile, session: Session, dir: PathBuf) -> Arc<Slot> {
        let (tx, rx) = mpsc::unbounded_channel();
        let slot = Arc::new(Slot {
            id: h.id.clone(),
            created_at: h.created_at,
            backend: h.backend,
            dir,
            current: RwLock::new(Arc::new(session)),
            tx,
            idem: Mutex::new(HashMap::new()),
        });
        self.0.sessions.write().unwrap().insert(h.id, slot.clone());
        tokio::spawn(worker(self.clone(), slot.clone(), rx));
        slot
    }

    pub fn session(&self, id: &str) -> std::result::Result<Arc<Slot>, ApiError> {
        self.0
            .sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }

    pub fn job(&self, id: &str) -> std::result::Result<Arc<Job>, ApiError> {
        self.0
            .jobs
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("job", id))
    }

    /// Session id already created under `key` with the same body, or an
    /// error if the key was used with a different body.
    pub fn create_replay(&self, key: &str, digest: &str) -> std::result::Result<Option<String>, ApiError> {
        match self.0.create_idem.lock().unwrap().get(key) {
            Some((d, id)) if d == digest => Ok(Some(id.clone())),
            Some(_) => Err(idempotency_conflict()),
            None => Ok(None),
        }
    }

    /// Runs stage 0 and persists the new session.
    pub async fn create(
        &self,
        scene: SceneLayout,
        prompt: StagePrompt,
        config: SessionConfig,
        backend: BackendKind,
        idem: Option<(String, String)>,
    ) -> std::result::Result<Arc<Slot>, ApiError> {
        let model = self.model(backend, config.denoiser_seed)?;
        let id = uuid::Uuid::new_v4().to_string();
        let dir = self.0.config.data_dir.join("sessions").join(&id);
        let handle = HandleFile {
            id: id.clone(),
            created_at: chrono::Utc::now().to_rfc3339(),
            backend,
        };
        let (h2, dir2) = (handle.clone(), dir.clone());
        let session = tokio::task::spawn_blocking(move || -> Result<Session> {
            let s = Session::create(model.as_ref(), scene, prompt, config, &mut no_progress())?;
            s.save(&dir2)?;
            std::fs::write(dir2.join("handle.json"), serde_json::to_vec_pretty(&h2)?)?;
            Ok(s)
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
        let session = match session {
            Ok(s) => s,
            Err(e) => {
                let _ = std::fs::remove_dir_all(&dir);
                return Err(e.into());
            }
        };
        if let Some((key, digest)) = idem {
            self.0.create_idem.lock().unwrap().insert(key, (digest, id.clone()));
        }
        Ok(self.install(handle, session, dir))
    }

    /// Job already submitted under this key, if any.
    pub fn replay(&self, slot: &Slot, idem: &Option<(String, String)>) -> std::result::Result<Option<Arc<Job>>, ApiError> {
        let Some((key, digest)) = idem else { return Ok(None) };
        match slot.idem.lock().unwrap().get(key) {
            Some((d, job)) if d == digest => Ok(Some(job.clone())),
            Some(_) => Err(idempotency_conflict()),
            None => Ok(None),
        }
    }

    /// Queues a mutation. A repeated idempotency key returns the original job.
    pub fn submit(
        &self,
        slot: &Arc<Slot>,
        op: &'static str,
        work: Work,
        idem: Option<(String, String)>,
    ) -> std::result::Result<Arc<Job>, ApiError> {
        let mut map = slot.idem.lock().unwrap();
        if let Some((key, digest)) = &idem {
            if let Some((d, job)) = map.get(key) {
                return if d == digest { Ok(job.clone()) } else { Err(idempotency_conflict()) };
            }
        }
        let job = Arc::new(Job::new(&slot.id, op));
        self.0.jobs.write().unwrap().insert(job.id.clone(), job.clone());
        if let Some((key, digest)) = idem {
            map.insert(key, (digest, job.clone()));
        }
        slot.tx
            .send(Queued { job: job.clone(), work })
            .map_err(|_| ApiError::internal("session worker stopped"))?;
        Ok(job)
    }

    fn segmenter(&self) -> Option<Arc<HttpSegmenter>> {
        self.0.segmenter.clone()
    }
}

fn idempotency_conflict() -> ApiError {
    ApiError::new(
        axum::http::StatusCode::CONFLICT,
        "idempotency_conflict",
        "idempotency key was already used with a different request body",
    )
}

async fn worker(state: AppState, slot: Arc<Slot>, mut rx: mpsc::UnboundedReceiver<Queued>) {
    while let Some(Queued { job, work }) = rx.recv().await {
        job.set_running();
        let snapshot = slot.snapshot();
        let model = match state.model(slot.backend, snapshot.config().denoiser_seed) {
            Ok(m) => m,
            Err(e) => {
                job.fail(ApiError::from(e).body);
                continue;
            }
        };
        let segmenter = state.segmenter();
        let (dir, j) = (slot.dir.clone(), job.clone());
        let out = tokio::task::spawn_blocking(move || -> Result<Session> {
            let mut s = (*snapshot).clone();
            let mut cb = |p| j.progress(p);
            match work {
                Work::Add { box3d, prompt } => {
                    s.add_object(model.as_ref(), box3d, prompt, &mut cb)?;
                }
                Work::Translate { request } => {
                    let seg = segmenter.as_deref().map(|s| s as &dyn Segmenter);
                    s.translate_object(model.as_ref(), request, seg, &mut cb)?;
                }
            }
            s.save(&dir)?;
            Ok(s)
        })
        .await;
        match out {
            Ok(Ok(s)) => {
                let summary = stage_summary(&slot.id, s.last());
                *slot.current.write().unwrap() = Arc::new(s);
                job.finish(summary);
            }
            Ok(Err(e)) => job.fail(ApiError::from(e).body),
            Err(e) => job.fail(ApiError::internal(e.to_string()).body),
        }
    }
}
