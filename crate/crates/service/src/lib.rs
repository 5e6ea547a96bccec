//! HTTP service over the sketchlift pipeline.
//!
//! Scenes and instructions are stored as content-addressed objects and
//! addressed by digest. Plans and training runs execute on the blocking
//! pool and are polled by id.

pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sketchlift_client::*;
use sketchlift_core::digest::canonical_digest;
use sketchlift_core::geometry::CalibrationFile;
use sketchlift_core::instruction::{
    instruction_to_value, parse_instruction, validate_scene_bundle, SceneBundle, SceneView, ViewCalibration,
};
use sketchlift_core::lifting::sample_trajectory;
use sketchlift_core::models::{Backends, LiveBackend, LiveConfig, ScriptedScenario};
use sketchlift_core::pipeline::{
    decode_rgb, export_plan, import_plan, run_pipeline, trace_to_jsonl, MotionPlan, PipelineConfig, PipelineInput,
    TraceRecord,
};
use sketchlift_core::rl::{build_demo_dataset, report_artifacts, DemoDataset, ReachExperiment};

pub use store::{Index, Session, Store, TrainRecord};

pub const MAX_SAMPLES: usize = 10_000;
pub const DEFAULT_ROLLOUTS: usize = 50;
const MIN_BASELINE_DEG: f64 = 10.0;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
}

impl AppState {
    pub fn open(data_dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        Ok(AppState { store: Arc::new(Store::open(data_dir)?) })
    }
}

/// An error response: status plus `{"error": ApiError}` body.
#[derive(Debug)]
pub struct Failure(pub StatusCode, pub ApiError);

impl Failure {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Failure(status, ApiError { code: code.into(), message: message.into(), stage: None, fields: Vec::new() })
    }

    fn field(field: &str, message: impl Into<String>) -> Self {
        let message = message.into();
        let mut f = Failure::new(StatusCode::BAD_REQUEST, "validation", format!("{field}: {message}"));
        f.1.fields.push(FieldError { field: field.into(), message });
        f
    }

    fn not_found(what: &str, id: &str) -> Self {
        Failure::new(StatusCode::NOT_FOUND, "not-found", format!("unknown {what} {id}"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

type ApiResult<T> = Result<T, Failure>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/api/v1/scenes", post(create_scene))
        .route("/api/v1/scenes/{id}", get(get_scene))
        .route("/api/v1/objects/{digest}", get(get_object))
        .route("/api/v1/instructions", post(create_instruction))
        .route("/api/v1/instructions/{id}", get(get_instruction))
        .route("/api/v1/scenarios/{name}", put(put_scenario))
        .route("/api/v1/sessions", get(list_sessions))
        .route("/api/v1/plans", post(create_plan))
        .route("/api/v1/plans/{id}", get(get_plan))
        .route("/api/v1/plans/{id}/plan", get(get_plan_file))
        .route("/api/v1/plans/{id}/trace", get(get_trace_file))
        .route("/api/v1/plans/{id}/samples", post(samples))
        .route("/api/v1/train", post(create_training))
        .route("/api/v1/train/{id}", get(get_training))
        .route("/api/v1/train/{id}/artifacts/{name}", get(get_artifact))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(state)
}

/// Serves until the process receives ctrl-c.
pub async fn serve(addr: SocketAddr, state: AppState) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, data = %state.store.root().display(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

fn load_object(store: &Store, digest: &str, what: &str) -> ApiResult<Vec<u8>> {
    store.get(digest).map_err(Failure::internal)?.ok_or_else(|| Failure::not_found(what, digest))
}

async fn health() -> Json<Health> {
    Json(Health { status: "ok".into(), name: "sketchlift".into(), version: env!("CARGO_PKG_VERSION").into() })
}

async fn create_scene(State(st): State<AppState>, mut form: Multipart) -> ApiResult<(StatusCode, Json<SceneCreated>)> {
    let mut calibration = None;
    let mut images = std::collections::BTreeMap::new();
    while let Some(field) = form.next_field().await.map_err(|e| Failure::field("multipart", e.body_text()))? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| Failure::field(&name, e.body_text()))?;
        if name == "calibration" {
            calibration = Some(bytes);
        } else {
            images.insert(name, bytes);
        }
    }
    let calibration = calibration.ok_or_else(|| Failure::field("calibration", "missing part"))?;
    let calibration = CalibrationFile::from_json(&calibration).map_err(|e| Failure::field("calibration", e.to_string()))?;
    let mut views = Vec::new();
    for cam in &calibration.views {
        let png = images.remove(&cam.id).ok_or_else(|| Failure::field(&cam.id, "missing image part"))?;
        let img = decode_rgb(&png).map_err(|e| Failure::field(&cam.id, e.to_string()))?;
        let k = &cam.intrinsics;
        if img.dimensions() != (k.width, k.height) {
            return Err(Failure::field(
                &cam.id,
                format!("image is {}x{}, calibration says {}x{}", img.width(), img.height(), k.width, k.height),
            ));
        }
        views.push(SceneView {
            id: cam.id.clone(),
            image_path: st.store.put(&png).map_err(Failure::internal)?,
            calibration: ViewCalibration { intrinsics: cam.intrinsics, pose: cam.pose },
        });
    }
    if let Some(extra) = images.keys().next() {
        return Err(Failure::field(extra, "no calibrated view with this id"));
    }
    let bundle = SceneBundle { views };
    let diagnostics = validate_scene_bundle(&bundle, MIN_BASELINE_DEG);
    if !diagnostics.is_empty() {
        let mut f = Failure::new(StatusCode::BAD_REQUEST, "validation", "scene bundle failed validation");
        f.1.fields = diagnostics.iter().map(|d| FieldError { field: d.code.clone(), message: d.message.clone() }).collect();
        return Err(f);
    }
    let scene_id = st.store.put(&bundle.to_json()).map_err(Failure::internal)?;
    Ok((StatusCode::CREATED, Json(SceneCreated { scene_id, diagnostics })))
}

fn load_scene(store: &Store, id: &str) -> ApiResult<SceneBundle> {
    let bytes = load_object(store, id, "scene")?;
    SceneBundle::from_json(&bytes).map_err(|_| Failure::not_found("scene", id))
}

async fn get_scene(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SceneBundle>> {
    load_scene(&st.store, &id).map(Json)
}

async fn get_object(State(st): State<AppState>, Path(digest): Path<String>) -> ApiResult<Vec<u8>> {
    load_object(&st.store, &digest, "object")
}

/// Stored form of an instruction.
#[derive(serde::Serialize, serde::Deserialize)]
struct InstructionRecord {
    instruction: Value,
    scene_id: Option<String>,
    image: Option<String>,
}

async fn create_instruction(
    State(st): State<AppState>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<InstructionCreated>)> {
    let req: InstructionRequest = serde_json::from_slice(&body).map_err(|e| Failure::field("body", e.to_string()))?;
    let raw = serde_json::to_vec(&req.instruction).unwrap();
    let instruction = parse_instruction(&raw).map_err(|e| Failure::field("instruction", e.to_string()))?;
    let scene = match &req.scene_id {
        Some(id) => Some(load_scene(&st.store, id)?),
        None => None,
    };
    let image = match &req.image_png_base64 {
        Some(b64) => {
            let png = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| Failure::field("image_png_base64", e.to_string()))?;
            let img = decode_rgb(&png).map_err(|e| Failure::field("image_png_base64", e.to_string()))?;
            instruction.validate_bounds(img.width(), img.height()).map_err(|e| Failure::field("instruction", e.to_string()))?;
            Some(st.store.put(&png).map_err(Failure::internal)?)
        }
        None => {
            let view = scene.as_ref().and_then(|s| s.views.iter().find(|v| v.id == instruction.image_ref));
            let Some(view) = view else {
                return Err(Failure::field(
                    "image_ref",
                    format!("{:?} names no view of the given scene and no image was attached", instruction.image_ref),
                ));
            };
            let k = view.calibration.intrinsics;
            instruction.validate_bounds(k.width, k.height).map_err(|e| Failure::field("instruction", e.to_string()))?;
            None
        }
    };
    let record = InstructionRecord { instruction: instruction_to_value(&instruction), scene_id: req.scene_id, image };
    let instruction_id = st.store.put(&serde_json::to_vec(&record).unwrap()).map_err(Failure::internal)?;
    Ok((StatusCode::CREATED, Json(InstructionCreated { instruction_id })))
}

fn load_instruction(store: &Store, id: &str) -> ApiResult<InstructionRecord> {
    let bytes = load_object(store, id, "instruction")?;
    serde_json::from_slice(&bytes).map_err(|_| Failure::not_found("instruction", id))
}

async fn get_instruction(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let r = load_instruction(&st.store, &id)?;
    Ok(Json(json!({"instruction": r.instruction, "scene_id": r.scene_id, "image": r.image})))
}

async fn put_scenario(State(st): State<AppState>, Path(name): Path<String>, body: Bytes) -> ApiResult<StatusCode> {
    ScriptedScenario::from_json(&body).map_err(|e| Failure::field("scenario", e.to_string()))?;
    let digest = st.store.put(&body).map_err(Failure::internal)?;
    st.store.update(|i| i.scenarios.insert(name, digest)).map_err(Failure::internal)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn list_sessions(State(st): State<AppState>) -> Json<Index> {
    Json(st.store.snapshot())
}

enum BackendSpec {
    Scripted(ScriptedScenario),
    Live(LiveConfig),
}

impl BackendSpec {
    /// Builds the backends. The live client blocks, so call this off the
    /// async runtime.
    fn build(self) -> Result<Backends, String> {
        match self {
            BackendSpec::Scripted(s) => Ok(Backends::scripted(s)),
            BackendSpec::Live(c) => LiveBackend::new(c).map(|b| Backends::single(Arc::new(b))).map_err(|e| e.to_string()),
        }
    }
}

fn backend_spec(store: &Store, backend: &str) -> ApiResult<BackendSpec> {
    if backend == "live" {
        let config = LiveConfig::from_env().ok_or_else(|| Failure::field("backend", "CI_LIVE_URL is not set"))?;
        return Ok(BackendSpec::Live(config));
    }
    let Some(name) = backend.strip_prefix("scripted:") else {
        return Err(Failure::field("backend", "expected \"live\" or \"scripted:<name>\""));
    };
    let digest = store.scenario_ref(name).ok_or_else(|| Failure::not_found("scenario", name))?;
    let scenario = ScriptedScenario::from_json(&load_object(store, &digest, "scenario")?).map_err(Failure::internal)?;
    Ok(BackendSpec::Scripted(scenario))
}

fn input_for(store: &Store, scene: SceneBundle, record: &InstructionRecord) -> ApiResult<PipelineInput> {
    let decode = |digest: &str| -> ApiResult<Arc<image::RgbImage>> {
        decode_rgb(&load_object(store, digest, "image")?).map(Arc::new).map_err(Failure::internal)
    };
    let views = scene.views.iter().map(|v| decode(&v.image_path)).collect::<ApiResult<Vec<_>>>()?;
    let image = record.image.as_deref().map(decode).transpose()?;
    let instruction = parse_instruction(&serde_json::to_vec(&record.instruction).unwrap()).map_err(Failure::internal)?;
    PipelineInput::from_parts(instruction, scene, views, image).map_err(|e| Failure::field("instruction_id", e.to_string()))
}

async fn create_plan(State(st): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<PlanCreated>)> {
    let req: PlanRequest = serde_json::from_slice(&body).map_err(|e| Failure::field("body", e.to_string()))?;
    let scene = load_scene(&st.store, &req.scene_id)?;
    let record = load_instruction(&st.store, &req.instruction_id)?;
    let config: PipelineConfig = serde_json::from_value(req.config.clone().unwrap_or_else(|| json!({})))
        .map_err(|e| Failure::field("config", e.to_string()))?;
    config.validate().map_err(|e| Failure::field("config", e.to_string()))?;
    let backends = backend_spec(&st.store, &req.backend)?;
    let input = input_for(&st.store, scene, &record)?;

    let config_ref = st.store.put(&serde_json::to_vec(&config).unwrap()).map_err(Failure::internal)?;
    let request_key = canonical_digest(&json!({
        "scene": req.scene_id, "instruction": req.instruction_id, "config": config_ref, "backend": req.backend,
    }));
    let session = Session {
        id: uuid::Uuid::new_v4().to_string(),
        scene_ref: req.scene_id.clone(),
        instruction_ref: req.instruction_id.clone(),
        plan_ref: None,
        trace_ref: None,
        overlay_ref: None,
        config_ref,
        backend: req.backend.clone(),
        request_key: request_key.clone(),
        status: RunStatus::Running,
        error: None,
        created_at: now(),
    };
    let id = session.id.clone();
    let inserted = st
        .store
        .update(|i| {
            if i.sessions.iter().any(|s| s.request_key == request_key && s.status == RunStatus::Running) {
                return false;
            }
            i.sessions.push(session);
            true
        })
        .map_err(Failure::internal)?;
    if !inserted {
        return Err(Failure::new(StatusCode::CONFLICT, "conflict", "an identical plan is already running"));
    }

    let store = st.store.clone();
    let run_id = id.clone();
    tokio::task::spawn_blocking(move || {
        let result = match backends.build() {
            Ok(b) => run_pipeline(&input, &config, &b).map_err(PlanFailure::Pipeline),
            Err(e) => Err(PlanFailure::Backend(e)),
        };
        finish_plan(&store, &run_id, result)
    });
    let status_url = format!("/api/v1/plans/{id}");
    Ok((StatusCode::ACCEPTED, Json(PlanCreated { plan_id: id, status_url })))
}

enum PlanFailure {
    Pipeline(sketchlift_core::pipeline::PipelineError),
    Backend(String),
}

fn finish_plan(store: &Store, id: &str, result: Result<sketchlift_core::pipeline::PipelineOutput, PlanFailure>) {
    let outcome = (|| -> std::io::Result<Box<dyn FnOnce(&mut Session)>> {
        match result {
            Ok(out) => {
                let plan_ref = store.put(&export_plan(&out.plan))?;
                let trace_ref = store.put(trace_to_jsonl(&out.trace).as_bytes())?;
                let overlay = PlanOverlay {
                    descriptors: out.descriptors,
                    pointed: out.pointed,
                    raw_polylines: out.raw_polylines,
                    pixel_trajectories: out.pixel_trajectories,
                };
                let overlay_ref = store.put(&serde_json::to_vec(&overlay).unwrap())?;
                Ok(Box::new(move |s: &mut Session| {
                    s.plan_ref = Some(plan_ref);
                    s.trace_ref = Some(trace_ref);
                    s.overlay_ref = Some(overlay_ref);
                    s.status = RunStatus::Done;
                }))
            }
            Err(PlanFailure::Backend(message)) => {
                let error = ApiError { code: "validation".into(), message, stage: None, fields: Vec::new() };
                Ok(Box::new(move |s: &mut Session| {
                    s.error = Some(error);
                    s.status = RunStatus::Failed;
                }))
            }
            Err(PlanFailure::Pipeline(e)) => {
                let trace_ref = store.put(trace_to_jsonl(&e.trace).as_bytes())?;
                let error = ApiError {
                    code: e.source.class().as_str().into(),
                    message: e.source.to_string(),
                    stage: Some(e.stage.as_str().into()),
                    fields: Vec::new(),
                };
                Ok(Box::new(move |s: &mut Session| {
                    s.trace_ref = Some(trace_ref);
                    s.error = Some(error);
                    s.status = RunStatus::Failed;
                }))
            }
        }
    })();
    let apply: Box<dyn FnOnce(&mut Session)> = match outcome {
        Ok(f) => f,
        Err(e) => Box::new(move |s: &mut Session| {
            s.status = RunStatus::Failed;
            s.error = Some(Failure::internal(e).1);
        }),
    };
    let res = store.update(|i| {
        if let Some(s) = i.sessions.iter_mut().find(|s| s.id == id) {
            apply(s);
        }
    });
    if let Err(e) = res {
        tracing::error!(session = id, error = %e, "failed to persist plan result");
    }
}

fn session_or_404(store: &Store, id: &str) -> ApiResult<Session> {
    store.session(id).ok_or_else(|| Failure::not_found("plan", id))
}

async fn get_plan(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<PlanView>> {
    let s = session_or_404(&st.store, &id)?;
    if let Some(err) = s.error.as_ref().filter(|e| e.code == "transport") {
        return Err(Failure(StatusCode::BAD_GATEWAY, err.clone()));
    }
    let object = |r: &Option<String>| -> ApiResult<Option<Vec<u8>>> {
        r.as_deref().map(|d| load_object(&st.store, d, "object")).transpose()
    };
    let plan = object(&s.plan_ref)?.map(|b| serde_json::from_slice::<Value>(&b)).transpose().map_err(Failure::internal)?;
    let overlay = object(&s.overlay_ref)?.map(|b| serde_json::from_slice(&b)).transpose().map_err(Failure::internal)?;
    let trace = match object(&s.trace_ref)? {
        Some(b) => String::from_utf8_lossy(&b)
            .lines()
            .map(serde_json::from_str::<TraceRecord>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(Failure::internal)?,
        None => Vec::new(),
    };
    Ok(Json(PlanView {
        id: s.id,
        status: s.status,
        created_at: s.created_at,
        scene_id: s.scene_ref,
        instruction_id: s.instruction_ref,
        backend: s.backend,
        plan,
        overlay,
        trace,
        error: s.error,
    }))
}

fn finished_plan_bytes(store: &Store, id: &str) -> ApiResult<Vec<u8>> {
    let s = session_or_404(store, id)?;
    match (&s.status, &s.plan_ref) {
        (RunStatus::Done, Some(r)) => load_object(store, r, "plan"),
        (RunStatus::Running, _) => Err(Failure::new(StatusCode::CONFLICT, "conflict", format!("plan {id} is still running"))),
        _ => Err(Failure::new(StatusCode::CONFLICT, "conflict", format!("plan {id} failed"))),
    }
}

async fn get_plan_file(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = finished_plan_bytes(&st.store, &id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn get_trace_file(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = session_or_404(&st.store, &id)?;
    let r = s.trace_ref.ok_or_else(|| Failure::new(StatusCode::CONFLICT, "conflict", format!("plan {id} is still running")))?;
    let bytes = load_object(&st.store, &r, "trace")?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], bytes).into_response())
}

fn load_plan(store: &Store, id: &str) -> ApiResult<MotionPlan> {
    import_plan(&finished_plan_bytes(store, id)?).map_err(|e| Failure::internal(e.0))
}

async fn samples(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<SamplesResponse>> {
    let req: SamplesRequest = serde_json::from_slice(&body).map_err(|e| Failure::field("body", e.to_string()))?;
    session_or_404(&st.store, &id)?;
    if req.n == 0 || req.n > MAX_SAMPLES {
        return Err(Failure::field("n", format!("must be in 1..={MAX_SAMPLES}")));
    }
    let plan = load_plan(&st.store, &id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let trajectories = (0..req.n)
        .map(|_| sample_trajectory(&plan.distribution, &mut rng).iter().map(|p| [p.x, p.y, p.z]).collect())
        .collect();
    Ok(Json(SamplesResponse { plan_id: id, seed: req.seed, trajectories }))
}

async fn create_training(State(st): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<TrainCreated>)> {
    let req: TrainRequest = serde_json::from_slice(&body).map_err(|e| Failure::field("body", e.to_string()))?;
    let exp: ReachExperiment = serde_json::from_value(req.config.clone().unwrap_or_else(|| json!({})))
        .map_err(|e| Failure::field("config", e.to_string()))?;
    exp.env.validate().map_err(|e| Failure::field("config", e.to_string()))?;
    exp.td3.validate().map_err(|e| Failure::field("config", e.to_string()))?;
    let demo = match (&req.demo_jsonl, &req.from_plan) {
        (Some(text), None) => DemoDataset::from_jsonl(text.as_bytes()).map_err(|e| Failure::field("demo_jsonl", e.to_string()))?,
        (None, Some(plan_id)) => {
            let plan = load_plan(&st.store, plan_id)?;
            let n = req.rollouts.unwrap_or(DEFAULT_ROLLOUTS);
            build_demo_dataset(&plan.distribution, &exp.env, n, req.seed)
                .map_err(|e| Failure::field("rollouts", e.to_string()))?
        }
        _ => return Err(Failure::field("body", "give exactly one of demo_jsonl and from_plan")),
    };
    let record = TrainRecord {
        id: uuid::Uuid::new_v4().to_string(),
        status: RunStatus::Running,
        artifacts: Default::default(),
        error: None,
        created_at: now(),
    };
    let id = record.id.clone();
    st.store.update(|i| i.trainings.push(record)).map_err(Failure::internal)?;

    let store = st.store.clone();
    let run_id = id.clone();
    let seed = req.seed;
    tokio::task::spawn_blocking(move || {
        let result = exp.train_on_demo(&demo, seed);
        let mut artifacts = std::collections::BTreeMap::new();
        let mut error = None;
        match result {
            Ok(report) => {
                let mut files = report_artifacts(&report, "td3+bc");
                files.push(("demo.jsonl", demo.to_jsonl()));
                for (name, bytes) in files {
                    match store.put(&bytes) {
                        Ok(d) => {
                            artifacts.insert(name.to_string(), d);
                        }
                        Err(e) => error = Some(Failure::internal(e).1),
                    }
                }
            }
            Err(e) => error = Some(ApiError { code: "training".into(), message: e.to_string(), stage: None, fields: Vec::new() }),
        }
        let res = store.update(|i| {
            if let Some(t) = i.trainings.iter_mut().find(|t| t.id == run_id) {
                t.status = if error.is_some() { RunStatus::Failed } else { RunStatus::Done };
                t.artifacts = artifacts;
                t.error = error;
            }
        });
        if let Err(e) = res {
            tracing::error!(training = run_id, error = %e, "failed to persist training result");
        }
    });
    let status_url = format!("/api/v1/train/{id}");
    Ok((StatusCode::ACCEPTED, Json(TrainCreated { train_id: id, status_url })))
}

async fn get_training(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<TrainView>> {
    let t = st.store.training(&id).ok_or_else(|| Failure::not_found("training", &id))?;
    let mut view = TrainView {
        id: t.id,
        status: t.status,
        created_at: t.created_at,
        curve: Vec::new(),
        artifacts: t.artifacts.keys().cloned().collect(),
        summary: None,
        error: t.error,
    };
    if let Some(d) = t.artifacts.get("curve.csv") {
        let text = String::from_utf8(load_object(&st.store, d, "artifact")?).map_err(Failure::internal)?;
        view.curve = sketchlift_core::rl::curve_from_csv(&text).map_err(Failure::internal)?;
    }
    if let Some(d) = t.artifacts.get("summary.json") {
        view.summary = Some(serde_json::from_slice(&load_object(&st.store, d, "artifact")?).map_err(Failure::internal)?);
    }
    Ok(Json(view))
}

async fn get_artifact(State(st): State<AppState>, Path((id, name)): Path<(String, String)>) -> ApiResult<Vec<u8>> {
    let t = st.store.training(&id).ok_or_else(|| Failure::not_found("training", &id))?;
    let d = t.artifacts.get(&name).ok_or_else(|| Failure::not_found("artifact", &name))?;
    load_object(&st.store, d, "artifact")
}
