use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use axum::http::StatusCode as AxStatus;
use axum::routing::post;
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use scenestage::codec::{image_from_png, mask_from_png, F32Blob};
use scenestage::denoiser::{AttentionMode, Capabilities, DepthCond, EpsModel, PredictRequest};
use scenestage::pipeline::SessionConfig;
use scenestage::protocol::{encode_predict, DecodedPredict};
use scenestage::scene::{make_scene, Box3D, Camera, SceneLayout, Vec3};
use scenestage::{Latent, ToyDenoiser};
use scenestage_service::clients::{BackendDescriptor, BackendKind, HttpBackend};
use scenestage_service::{router, AppState, ServiceConfig};

struct Server {
    base: String,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl Server {
    async fn start(config: ServiceConfig) -> Server {
        Server::serve(router(AppState::open(config).await.unwrap())).await
    }

    async fn serve(app: axum::Router) -> Server {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
                .unwrap();
        });
        Server {
            base,
            stop: Some(tx),
            task,
        }
    }

    async fn shutdown(mut self) {
        let _ = self.stop.take().unwrap().send(());
        let _ = tokio::time::timeout(Duration::from_secs(10), self.task).await;
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }
}

fn config(dir: &Path) -> ServiceConfig {
    ServiceConfig {
        data_dir: dir.to_path_buf(),
        ..ServiceConfig::default()
    }
}

fn scene() -> SceneLayout {
    make_scene([4.0, 3.0, 6.0], Camera::looking_forward(128, 128)).unwrap()
}

fn fast() -> SessionConfig {
    SessionConfig {
        steps: 6,
        inversion_max_iter: 0,
        ..SessionConfig::default()
    }
}

fn sofa() -> Box3D {
    Box3D::new("sofa", Vec3::new(-0.3, -1.1, 3.5), [1.4, 0.8, 0.8], 0.3)
}

fn lamp() -> Box3D {
    Box3D::new("lamp", Vec3::new(1.0, -1.0, 4.0), [0.4, 1.0, 0.4], 0.0)
}

fn create_body() -> Value {
    json!({ "scene": scene(), "prompt": "a cozy living room", "config": fast() })
}

async fn create(c: &Client, s: &Server) -> Value {
    let r = c.post(s.url("/sessions")).json(&create_body()).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
    r.json().await.unwrap()
}

async fn add(c: &Client, s: &Server, id: &str, b: &Box3D, prompt: &str) -> reqwest::Response {
    c.post(s.url(&format!("/sessions/{id}/stages:add")))
        .json(&json!({ "box": b, "prompt": prompt }))
        .send()
        .await
        .unwrap()
}

async fn get_json(c: &Client, url: String) -> Value {
    c.get(url).send().await.unwrap().json().await.unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// (event name, id, data) triples from an SSE body.
fn parse_sse(text: &str) -> Vec<(String, usize, Value)> {
    let mut out = Vec::new();
    for block in text.split("\n\n") {
        let (mut name, mut id, mut data) = (None, None, None);
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("event:") {
                name = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("id:") {
                id = v.trim().parse().ok();
            } else if let Some(v) = line.strip_prefix("data:") {
                data = serde_json::from_str(v.trim()).ok();
            }
        }
        if let (Some(n), Some(i), Some(d)) = (name, id, data) {
            out.push((n, i, d));
        }
    }
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn create_returns_handle_and_distinct_ids() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(config(dir.path())).await;
    let c = Client::new();
    let a = create(&c, &s).await;
    let b = create(&c, &s).await;
    assert_ne!(a["id"], b["id"]);
    assert_eq!(a["stage_count"], 1);
    assert_eq!(a["backend"], "toy");
    assert_eq!(a["stages"][0]["kind"], "background");
    assert!(dir.path().join("sessions").join(a["id"].as_str().unwrap()).join("ops.json").exists());
    let got = get_json(&c, s.url(&format!("/sessions/{}", a["id"].as_str().unwrap()))).await;
    assert_eq!(got, a);
    let h: Value = get_json(&c, s.url("/healthz")).await;
    assert_eq!(h["status"], "ok");
    let bk: Value = get_json(&c, s.url("/backends")).await;
    assert_eq!(bk["backends"][0]["kind"], "toy");
    s.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_bodies_report_field_paths() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(config(dir.path())).await;
    let c = Client::new();
    let mut body = create_body();
    body["scene"]["camera"]["width"] = json!("wide");
    let r = c.post(s.url("/sessions")).json(&body).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let e: Value = r.json().await.unwrap();
    assert_eq!(e["code"], "validation");
    assert_eq!(e["detail"]["field"], "scene.camera.width");
    assert!(e["message"].as_str().unwrap().contains("invalid type"));

    let r = c.post(s.url("/sessions")).body("{\"scene\": ").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);

    let mut body = create_body();
    body["config"]["steps"] = json!(0);
    let e: Value = c.post(s.url("/sessions")).json(&body).send().await.unwrap().json().await.unwrap();
    assert_eq!(e["detail"]["field"], "steps");

    let r = c.get(s.url("/sessions/nope")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    let e: Value = r.json().await.unwrap();
    assert_eq!(e["code"], "not_found");
    s.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn toy_add_is_synchronous_and_renders_decode() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(config(dir.path())).await;
    let c = Client::new();
    let id = create(&c, &s).await["id"].as_str().unwrap().to_string();
    let r = add(&c, &s, &id, &sofa(), "a white sofa").await;
    assert_eq!(r.status(), StatusCode::OK);
    let v: Value = r.json().await.unwrap();
    assert_eq!(v["stage"]["index"], 1);
    let image_url = v["stage"]["renders"]["image"].as_str().unwrap();
    assert_eq!(image_url, format!("/sessions/{id}/stages/1/render/image"));

    let bytes = |kind: &str| {
        let url = s.url(&format!("/sessions/{id}/stages/1/render/{kind}"));
        let c = c.clone();
        async move {
            let r = c.get(url).send().await.unwrap();
            assert_eq!(r.status(), StatusCode::OK);
            r.bytes().await.unwrap().to_vec()
        }
    };
    let img = image_from_png(&bytes("image").await).unwrap();
    assert_eq!((img.width, img.height), (128, 128));
    let mask = mask_from_png(&bytes("mask_fg").await).unwrap();
    assert_eq!(mask.count() as u64, v["stage"]["fg_pixels"].as_u64().unwrap());
    let depth = F32Blob::decode(&bytes("depth").await).unwrap();
    assert_eq!((depth.w, depth.h, depth.c), (128, 128, 1));
    let cart = F32Blob::decode(&bytes("cartesian").await).unwrap();
    assert_eq!((cart.w, cart.h, cart.c), (128, 128, 3));
    assert!(cart.data.iter().any(|v| v.is_finite()));

    for path in ["stages/1/render/normals", "stages/9/render/image", "stages/0/render/cartesian", "stages/x"] {
        let r = c.get(s.url(&format!("/sessions/{id}/{path}"))).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::NOT_FOUND, "{path}");
    }
    s.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_adds_are_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(config(dir.path())).await;
    let c = Client::new();
    let id = create(&c, &s).await["id"].as_str().unwrap().to_string();
    let (sofa, lamp) = (sofa(), lamp());
    let (a, b) = tokio::join!(add(&c, &s, &id, &sofa, "a white sofa"), add(&c, &s, &id, &lamp, "a lamp"));
    let (a, b): (Value, Value) = (a.json().await.unwrap(), b.json().await.unwrap());
    let mut idx = [a["stage"]["index"].as_u64().unwrap(), b["stage"]["index"].as_u64().unwrap()];
    idx.sort();
    assert_eq!(idx, [1, 2]);
    let h = get_json(&c, s.url(&format!("/sessions/{id}"))).await;
    assert_eq!(h["stage_count"], 3);
    // the later stage saw the earlier one: both boxes are in the final scene
    let ids: Vec<&str> = h["scene"]["boxes"].as_array().unwrap().iter().map(|b| b["id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 2);

    // observable order: the second job starts after the first one ends
    let ja = get_json(&c, s.url(&format!("/jobs/{}", a["job_id"].as_str().unwrap()))).await;
    let jb = get_json(&c, s.url(&format!("/jobs/{}", b["job_id"].as_str().unwrap()))).await;
    let first = if a["stage"]["index"] == 1 { &ja } else { &jb };
    let second = if a["stage"]["index"] == 1 { &jb } else { &ja };
    assert_eq!(first["events"][0]["stage"], 1);
    assert_eq!(second["events"][0]["stage"], 2);
    s.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn restart_preserves_sessions_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(config(dir.path())).await;
    let c = Client::new();
    let id = create(&c, &s).await["id"].as_str().unwrap().to_string();
    assert_eq!(add(&c, &s, &id, &sofa(), "a white sofa").await.status(), StatusCode::OK);
    let before = get_json(&c, s.url(&format!("/sessions/{id}"))).await;
    let png = c.get(s.url(&format!("/sessions/{id}/stages/1/render/image"))).send().await.unwrap().bytes().await.unwrap();
    s.shutdown().await;
    let files = tree(dir.path());

    let s = Server::start(config(dir.path())).await;
    let after = get_json(&c, s.url(&format!("/sessions/{id}"))).await;
    assert_eq!(before, after);
    let png2 = c.get(s.url(&format!("/sessions/{id}/stages/1/render/image"))).send().await.unwrap().bytes().await.unwrap();
    assert_eq!(png, png2);
    assert_eq!(files, tree(dir.path()));
    // and the restored session keeps working
    assert_eq!(add(&c, &s, &id, &lamp(), "a lamp").await.status(), StatusCode::OK);
    s.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn translate_smoke_and_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(config(dir.path())).await;
    let c = Client::new();
    let id = create(&c, &s).await["id"].as_str().unwrap().to_string();
    add(&c, &s, &id, &sofa(), "a white sofa").await;
    let url = s.url(&format!("/sessions/{id}/stages:translate"));

    let r = c.post(&url).json(&json!({ "box_id": "sofa", "t": [5.0, 0.0, 0.0] })).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let e: Value = r.json().await.unwrap();
    assert_eq!(e["code"], "out_of_bounds");
    let r = add(&c, &s, &id, &Box3D::new("big", Vec3::new(1.8, -1.1, 3.5), [1.0, 0.8, 0.8], 0.0), "a big box").await;
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let r = c.post(&url).json(&json!({ "box_id": "ghost", "t": [0.0, 0.0, 0.0] })).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    let h = get_json(&c, s.url(&format!("/sessions/{id}"))).await;
    assert_eq!(h["stage_count"], 2);

    let r = c.post(&url).json(&json!({ "box_id": "sofa", "t": [0.0, 0.0, 0.0] })).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let v: Value = r.json().await.unwrap();
    assert_eq!(v["stage"]["index"], 2);
    assert_eq!(v["stage"]["kind"], "translate");
    assert_eq!(v["stage"]["translation"]["base_stage"], 0);
    s.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn segmentation_failure_is_typed() {
    let seg = Server::serve(axum::Router::new().route("/segment", post(|| async { (AxStatus::INTERNAL_SERVER_ERROR, "model crashed") }))).await;
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(ServiceConfig {
        segmenter: Some(seg.base.clone()),
        ..config(dir.path())
    })
    .await;
    let c = Client::new();
    let id = create(&c, &s).await["id"].as_str().unwrap().to_string();
    add(&c, &s, &id, &sofa(), "a white sofa").await;
    let r = c
        .post(s.url(&format!("/sessions/{id}/stages:translate")))
        .json(&json!({ "box_id": "sofa", "t": [0.2, 0.0, 0.0] }))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let e: Value = r.json().await.unwrap();
    assert_eq!(e["code"], "segmentation_failed");
    assert!(e["message"].as_str().unwrap().contains("model crashed"));
    assert_eq!(get_json(&c, s.url(&format!("/sessions/{id}"))).await["stage_count"], 2);
    s.shutdown().await;
    seg.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sse_progress_is_monotone_and_terminates_once() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(config(dir.path())).await;
    let c = Client::new();
    let id = create(&c, &s).await["id"].as_str().unwrap().to_string();
    let r = c
        .post(s.url(&format!("/sessions/{id}/stages:add?wait=false")))
        .json(&json!({ "box": sofa(), "prompt": "a white sofa" }))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::ACCEPTED);
    let v: Value = r.json().await.unwrap();
    let events_url = s.url(v["events"].as_str().unwrap());
    let text = c.get(&events_url).send().await.unwrap().text().await.unwrap();
    let evs = parse_sse(&text);
    assert_eq!(evs.len(), 7, "{text}");
    assert!(evs.iter().enumerate().all(|(i, e)| e.1 == i));
    let overall: Vec<u64> = evs[..6].iter().map(|e| e.2["overall"].as_u64().unwrap()).collect();
    assert!(overall.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(evs.iter().filter(|e| e.0 != "progress").count(), 1);
    assert_eq!(evs[6].0, "done");
    assert_eq!(evs[6].2["result"]["index"], 1);

    // resume after event 4
    let text = c.get(&events_url).header("Last-Event-ID", "4").send().await.unwrap().text().await.unwrap();
    let ids: Vec<usize> = parse_sse(&text).iter().map(|e| e.1).collect();
    assert_eq!(ids, vec![5, 6]);
    let job = get_json(&c, s.url(v["job"].as_str().unwrap())).await;
    assert_eq!(job["status"], "done");
    s.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn retries_with_the_same_key_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(config(dir.path())).await;
    let c = Client::new();
    let post = |path: String, body: Value, key: &'static str| {
        let c = c.clone();
        async move { c.post(path).header("Idempotency-Key", key).json(&body).send().await.unwrap() }
    };
    let a: Value = post(s.url("/sessions"), create_body(), "k1").await.json().await.unwrap();
    let b: Value = post(s.url("/sessions"), create_body(), "k1").await.json().await.unwrap();
    assert_eq!(a["id"], b["id"]);
    let id = a["id"].as_str().unwrap();
    let add_url = s.url(&format!("/sessions/{id}/stages:add"));
    let body = json!({ "box": sofa(), "prompt": "a white sofa" });
    let x: Value = post(add_url.clone(), body.clone(), "k2").await.json().await.unwrap();
    let y: Value = post(add_url.clone(), body.clone(), "k2").await.json().await.unwrap();
    assert_eq!(x, y);
    assert_eq!(get_json(&c, s.url(&format!("/sessions/{id}"))).await["stage_count"], 2);
    let r = post(add_url, json!({ "box": lamp(), "prompt": "a lamp" }), "k2").await;
    assert_eq!(r.status(), StatusCode::CONFLICT);
    assert_eq!(r.json::<Value>().await.unwrap()["code"], "idempotency_conflict");
    s.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bearer_token_guards_everything_but_healthz() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(ServiceConfig {
        token: Some("sekrit".into()),
        ..config(dir.path())
    })
    .await;
    let c = Client::new();
    assert_eq!(c.get(s.url("/healthz")).send().await.unwrap().status(), StatusCode::OK);
    assert_eq!(c.get(s.url("/backends")).send().await.unwrap().status(), StatusCode::UNAUTHORIZED);
    let r = c.get(s.url("/backends")).bearer_auth("sekrit").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    s.shutdown().await;
}

fn external(endpoint: &str, kv: bool) -> BackendDescriptor {
    BackendDescriptor {
        kind: BackendKind::External,
        endpoint: Some(endpoint.to_string()),
        capabilities: Capabilities {
            max_resolution: 512,
            supports_kv_injection: kv,
        },
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn wire_dispatch_matches_direct_predict() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(config(dir.path())).await;
    let backend = HttpBackend::new(external(&format!("{}/v1", s.base), true), Duration::from_secs(30)).unwrap();
    let (remote, local) = tokio::task::spawn_blocking(move || {
        let model = ToyDenoiser::new(0);
        let x = Latent::from_vec(4, 16, 16, (0..1024).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.5).collect()).unwrap();
        let depth = DepthCond::from_depth(&scenestage::render::render_depth(&scene()), 16, 16).unwrap();
        let req = PredictRequest {
            x_t: &x,
            t: 5,
            prompt: "a cozy room",
            depth: &depth,
            mode: AttentionMode::Standard,
            cfg_scale: 1.0,
        };
        // the wire narrows to f32, so the reference is the decoded request
        let seen = DecodedPredict::decode(&encode_predict(&req)).unwrap();
        (backend.predict(&req).unwrap(), seen.with_request(|r| model.predict(r)).unwrap())
    })
    .await
    .unwrap();
    let narrow = |v: &[f64]| v.iter().map(|x| *x as f32).collect::<Vec<_>>();
    assert_eq!(remote.eps.shape(), local.eps.shape());
    assert_eq!(narrow(&remote.eps.data), narrow(&local.eps.data));
    assert_eq!(remote.kv.len(), local.kv.len());
    assert_eq!(remote.cross_attn.len(), local.cross_attn.len());
    s.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn external_backend_failures_leave_session_unchanged() {
    let c = Client::new();
    let remote_dir = tempfile::tempdir().unwrap();
    let remote = Server::start(config(remote_dir.path())).await;
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(ServiceConfig {
        external: Some(external(&format!("{}/v1", remote.base), true)),
        timeout_ms: 5_000,
        ..config(dir.path())
    })
    .await;
    let h = create(&c, &s).await;
    assert_eq!(h["backend"], "external");
    let id = h["id"].as_str().unwrap().to_string();
    let before = get_json(&c, s.url(&format!("/sessions/{id}"))).await;
    remote.shutdown().await;

    let r = add(&c, &s, &id, &sofa(), "a white sofa").await;
    assert_eq!(r.status(), StatusCode::ACCEPTED);
    let v: Value = r.json().await.unwrap();
    let text = c.get(s.url(v["events"].as_str().unwrap())).send().await.unwrap().text().await.unwrap();
    let evs = parse_sse(&text);
    let last = evs.last().unwrap();
    assert_eq!(last.0, "failed");
    assert_eq!(last.2["error"]["code"], "backend_error");
    assert_eq!(get_json(&c, s.url(&format!("/jobs/{}", v["job_id"].as_str().unwrap()))).await["status"], "failed");
    assert_eq!(get_json(&c, s.url(&format!("/sessions/{id}"))).await, before);

    let r = c
        .post(s.url(&format!("/sessions/{id}/stages:add?wait=true")))
        .json(&json!({ "box": sofa(), "prompt": "a white sofa" }))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::BAD_GATEWAY);
    s.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn dsa_on_a_backend_without_kv_injection_is_refused() {
    let c = Client::new();
    let remote_dir = tempfile::tempdir().unwrap();
    let remote = Server::start(config(remote_dir.path())).await;
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(ServiceConfig {
        external: Some(external(&format!("{}/v1", remote.base), false)),
        ..config(dir.path())
    })
    .await;
    let id = create(&c, &s).await["id"].as_str().unwrap().to_string();
    let r = c
        .post(s.url(&format!("/sessions/{id}/stages:add?wait=true")))
        .json(&json!({ "box": sofa(), "prompt": "a white sofa" }))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let e: Value = r.json().await.unwrap();
    assert_eq!(e["code"], "capability_mismatch");
    assert!(e["message"].as_str().unwrap().to_lowercase().contains("dsa"));
    s.shutdown().await;
    remote.shutdown().await;
}
