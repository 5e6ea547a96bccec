use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::json;
use sketchlift_client::{Client, ClientError, PlanRequest, RunStatus, TrainRequest};
use sketchlift_core::geometry::CalibrationFile;
use sketchlift_core::instruction::SceneBundle;
use sketchlift_core::models::{Backends, ScriptedScenario};
use sketchlift_core::pipeline::{export_plan, import_plan, run_pipeline, PipelineConfig, PipelineInput};
use sketchlift_core::rl::{build_demo_dataset, report_artifacts, ReachExperiment};
use sketchlift_service::{router, AppState};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

async fn start(data: &Path) -> Client {
    let state = AppState::open(data).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    Client::new(&format!("http://{addr}")).unwrap().with_poll_interval(Duration::from_millis(20))
}

fn scene_parts() -> (Vec<u8>, Vec<(String, Vec<u8>)>) {
    let dir = fixtures().join("fixture_a");
    let scene = SceneBundle::from_json(&std::fs::read(dir.join("scene.json")).unwrap()).unwrap();
    let images = scene
        .views
        .iter()
        .zip(scene.image_paths(&dir))
        .map(|(v, p)| (v.id.clone(), std::fs::read(p).unwrap()))
        .collect();
    (CalibrationFile { views: scene.cameras() }.to_json(), images)
}

fn slide_config() -> PipelineConfig {
    serde_json::from_slice(&std::fs::read(fixtures().join("slide/config.json")).unwrap()).unwrap()
}

/// Uploads the FIXTURE-A scene, the slide instruction and scenario.
async fn upload_slide(client: &Client) -> (String, String) {
    let (calib, images) = scene_parts();
    let scene = client.upload_scene(calib, images).await.unwrap();
    assert!(scene.diagnostics.is_empty());
    let instr = std::fs::read(fixtures().join("slide/instruction.json")).unwrap();
    let instruction = client.post_instruction(&instr, Some(&scene.scene_id), None).await.unwrap();
    client.put_scenario("SCEN-SLIDE", std::fs::read(fixtures().join("slide/scenario.json")).unwrap()).await.unwrap();
    (scene.scene_id, instruction.instruction_id)
}

fn plan_request(scene_id: &str, instruction_id: &str, config: &PipelineConfig) -> PlanRequest {
    PlanRequest {
        instruction_id: instruction_id.into(),
        scene_id: scene_id.into(),
        config: Some(serde_json::to_value(config).unwrap()),
        backend: "scripted:SCEN-SLIDE".into(),
    }
}

fn status(e: ClientError) -> (u16, sketchlift_client::ApiError) {
    match e {
        ClientError::Api { status, error } => (status, error),
        other => panic!("expected an API error, got {other}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn scripted_flow_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let client = start(dir.path()).await;
    assert_eq!(client.health().await.unwrap().status, "ok");
    let (scene_id, instruction_id) = upload_slide(&client).await;
    let created = client.create_plan(&plan_request(&scene_id, &instruction_id, &slide_config())).await.unwrap();
    assert_eq!(created.status_url, format!("/api/v1/plans/{}", created.plan_id));
    let view = client.wait_plan(&created.plan_id, Duration::from_secs(60)).await.unwrap();
    assert_eq!(view.status, RunStatus::Done, "{:?}", view.error);

    let golden = std::fs::read(fixtures().join("slide/golden_plan.json")).unwrap();
    assert_eq!(client.plan_file(&created.plan_id).await.unwrap(), golden);
    assert_eq!(view.plan.unwrap(), serde_json::from_slice::<serde_json::Value>(&golden).unwrap());
    let overlay = view.overlay.unwrap();
    assert_eq!(overlay.pointed.len(), 6);
    assert_eq!(overlay.descriptors.len(), 3);
    assert!(overlay.pixel_trajectories.iter().all(|xi| xi.horizon() == 20));
    assert_eq!(overlay.raw_polylines[0].len(), 7);
    assert_eq!(view.trace.len(), 10);
    let trace = client.trace_file(&created.plan_id).await.unwrap();
    assert_eq!(String::from_utf8(trace).unwrap().lines().count(), 10);

    // Persisted state survives a restart.
    let again = start(dir.path()).await;
    assert_eq!(again.plan_file(&created.plan_id).await.unwrap(), golden);
    let index: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("index.json")).unwrap()).unwrap();
    assert_eq!(index["sessions"][0]["id"], created.plan_id.as_str());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn samples_are_seeded_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let client = start(dir.path()).await;
    let (scene_id, instruction_id) = upload_slide(&client).await;
    let id = client.create_plan(&plan_request(&scene_id, &instruction_id, &slide_config())).await.unwrap().plan_id;
    client.wait_plan(&id, Duration::from_secs(60)).await.unwrap();

    let a = client.samples(&id, 5, 11).await.unwrap();
    let b = client.samples(&id, 5, 11).await.unwrap();
    let c = client.samples(&id, 5, 12).await.unwrap();
    assert_eq!(a, b);
    assert_ne!(a.trajectories, c.trajectories);
    assert_eq!(a.trajectories.len(), 5);
    assert!(a.trajectories.iter().all(|t| t.len() == 20));

    let (code, err) = status(client.samples(&id, 0, 1).await.unwrap_err());
    assert_eq!(code, 400);
    assert_eq!(err.fields[0].field, "n");
    let (code, _) = status(client.samples("nope", 3, 1).await.unwrap_err());
    assert_eq!(code, 404);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn unknown_ids_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let client = start(dir.path()).await;
    let (scene_id, instruction_id) = upload_slide(&client).await;
    let config = slide_config();
    let missing = "0".repeat(64);
    let (code, _) = status(client.create_plan(&plan_request(&missing, &instruction_id, &config)).await.unwrap_err());
    assert_eq!(code, 404);
    let (code, _) = status(client.create_plan(&plan_request(&scene_id, &missing, &config)).await.unwrap_err());
    assert_eq!(code, 404);
    let mut req = plan_request(&scene_id, &instruction_id, &config);
    req.backend = "scripted:NOPE".into();
    assert_eq!(status(client.create_plan(&req).await.unwrap_err()).0, 404);
    assert_eq!(status(client.plan("nope").await.unwrap_err()).0, 404);
    assert_eq!(status(client.scene(&missing).await.unwrap_err()).0, 404);
    // An instruction id is not a scene id.
    assert_eq!(status(client.scene(&instruction_id).await.unwrap_err()).0, 404);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn validation_errors_name_fields() {
    let dir = tempfile::tempdir().unwrap();
    let client = start(dir.path()).await;
    let (scene_id, instruction_id) = upload_slide(&client).await;

    let (calib, images) = scene_parts();
    let mut cal: CalibrationFile = CalibrationFile::from_json(&calib).unwrap();
    cal.views[1].pose = cal.views[0].pose;
    let (code, err) = status(client.upload_scene(cal.to_json(), images.clone()).await.unwrap_err());
    assert_eq!(code, 400);
    assert!(err.fields.iter().any(|f| f.field == "baseline"), "{err:?}");

    let (code, err) = status(client.upload_scene(calib.clone(), images[..1].to_vec()).await.unwrap_err());
    assert_eq!(code, 400);
    assert_eq!(err.fields[0].field, "view_2");

    let (code, err) = status(client.upload_scene(b"{".to_vec(), images).await.unwrap_err());
    assert_eq!(code, 400);
    assert_eq!(err.fields[0].field, "calibration");

    let instr = std::fs::read(fixtures().join("slide/instruction.json")).unwrap();
    let (code, err) = status(client.post_instruction(&instr, None, None).await.unwrap_err());
    assert_eq!(code, 400);
    assert_eq!(err.fields[0].field, "image_ref");

    let bad = br#"{"version":"crossinstruct/1","image_ref":"view_1","strokes":[],"labels":[]}"#;
    let (code, err) = status(client.post_instruction(bad, Some(&scene_id), None).await.unwrap_err());
    assert_eq!(code, 400);
    assert_eq!(err.fields[0].field, "instruction");

    let mut req = plan_request(&scene_id, &instruction_id, &slide_config());
    req.config = Some(json!({"horizon": 1}));
    let (code, err) = status(client.create_plan(&req).await.unwrap_err());
    assert_eq!(code, 400);
    assert_eq!(err.fields[0].field, "config");
    req.config = Some(json!({"no_such_option": true}));
    assert_eq!(status(client.create_plan(&req).await.unwrap_err()).0, 400);
    req.config = None;
    req.backend = "magic".into();
    assert_eq!(status(client.create_plan(&req).await.unwrap_err()).1.fields[0].field, "backend");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn standalone_instruction_image_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let client = start(dir.path()).await;
    let (scene_id, _) = upload_slide(&client).await;
    let mut instr: serde_json::Value =
        serde_json::from_slice(&std::fs::read(fixtures().join("slide/instruction.json")).unwrap()).unwrap();
    instr["image_ref"] = json!("annotated.png");
    let png = std::fs::read(fixtures().join("fixture_a/view_1.png")).unwrap();
    let bytes = serde_json::to_vec(&instr).unwrap();
    let id = client.post_instruction(&bytes, Some(&scene_id), Some(&png)).await.unwrap().instruction_id;
    let stored = client.instruction(&id).await.unwrap();
    assert_eq!(stored["instruction"]["image_ref"], "annotated.png");
    assert!(stored["image"].is_string());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_plans_match_serial_runs() {
    let dir = tempfile::tempdir().unwrap();
    let client = start(dir.path()).await;
    let (scene_id, instruction_id) = upload_slide(&client).await;
    let configs: Vec<PipelineConfig> =
        (0..4).map(|k| PipelineConfig { min_baseline_deg: 10.0 + k as f64, ..slide_config() }).collect();

    let mut ids = Vec::new();
    for c in &configs {
        ids.push(client.create_plan(&plan_request(&scene_id, &instruction_id, c)).await.unwrap().plan_id);
    }
    let root = fixtures();
    let input = PipelineInput::load(&root.join("slide/instruction.json"), &root.join("fixture_a/scene.json")).unwrap();
    let scenario = ScriptedScenario::from_json(&std::fs::read(root.join("slide/scenario.json")).unwrap()).unwrap();
    for (id, c) in ids.iter().zip(&configs) {
        let view = client.wait_plan(id, Duration::from_secs(120)).await.unwrap();
        assert_eq!(view.status, RunStatus::Done);
        let serial = run_pipeline(&input, c, &Backends::scripted(scenario.clone())).unwrap();
        assert_eq!(client.plan_file(id).await.unwrap(), export_plan(&serial.plan));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn training_matches_local_run() {
    let dir = tempfile::tempdir().unwrap();
    let client = start(dir.path()).await;
    let (scene_id, instruction_id) = upload_slide(&client).await;
    let plan_id = client.create_plan(&plan_request(&scene_id, &instruction_id, &slide_config())).await.unwrap().plan_id;
    client.wait_plan(&plan_id, Duration::from_secs(60)).await.unwrap();

    let mut exp = ReachExperiment::default();
    exp.bc.epochs = 3;
    exp.td3.total_steps = 60;
    exp.td3.eval_interval = 30;
    exp.td3.eval_episodes = 4;
    let req = TrainRequest {
        demo_jsonl: None,
        from_plan: Some(plan_id.clone()),
        rollouts: Some(4),
        config: Some(serde_json::to_value(&exp).unwrap()),
        seed: 3,
    };
    let created = client.create_training(&req).await.unwrap();
    let view = client.wait_training(&created.train_id, Duration::from_secs(120)).await.unwrap();
    assert_eq!(view.status, RunStatus::Done, "{:?}", view.error);
    assert_eq!(view.curve.len(), 3);

    let plan = import_plan(&client.plan_file(&plan_id).await.unwrap()).unwrap();
    let demo = build_demo_dataset(&plan.distribution, &exp.env, 4, 3).unwrap();
    let report = exp.train_on_demo(&demo, 3).unwrap();
    for (name, bytes) in report_artifacts(&report, "td3+bc") {
        assert!(view.artifacts.iter().any(|a| a == name));
        assert_eq!(client.training_artifact(&created.train_id, name).await.unwrap(), bytes, "{name}");
    }
    assert_eq!(client.training_artifact(&created.train_id, "demo.jsonl").await.unwrap(), demo.to_jsonl());

    let bad = TrainRequest { demo_jsonl: None, from_plan: None, rollouts: None, config: None, seed: 0 };
    assert_eq!(status(client.create_training(&bad).await.unwrap_err()).0, 400);
    let missing = TrainRequest { from_plan: Some("nope".into()), ..bad };
    assert_eq!(status(client.create_training(&missing).await.unwrap_err()).0, 404);
}
