use std::path::PathBuf;
use std::time::Duration;

use axum::http::StatusCode;
use axum::routing::post;
use axum::Router;
use sketchlift_client::{Client, ClientError, PlanRequest};
use sketchlift_core::geometry::CalibrationFile;
use sketchlift_core::instruction::SceneBundle;
use sketchlift_service::{router, AppState};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn live_transport_failure_is_bad_gateway_and_duplicates_conflict() {
    // A model endpoint that is always slow and unavailable.
    let model = Router::new().route(
        "/v1/{kind}",
        post(|| async {
            tokio::time::sleep(Duration::from_millis(300)).await;
            (StatusCode::SERVICE_UNAVAILABLE, "overloaded")
        }),
    );
    let model_listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let model_addr = model_listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(model_listener, model).await.unwrap() });
    std::env::set_var("CI_LIVE_URL", format!("http://{model_addr}"));

    let dir = tempfile::tempdir().unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let state = AppState::open(dir.path()).unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    let client = Client::new(&format!("http://{addr}")).unwrap().with_poll_interval(Duration::from_millis(20));

    let scene_dir = fixtures().join("fixture_a");
    let scene = SceneBundle::from_json(&std::fs::read(scene_dir.join("scene.json")).unwrap()).unwrap();
    let images =
        scene.views.iter().zip(scene.image_paths(&scene_dir)).map(|(v, p)| (v.id.clone(), std::fs::read(p).unwrap())).collect();
    let scene_id =
        client.upload_scene(CalibrationFile { views: scene.cameras() }.to_json(), images).await.unwrap().scene_id;
    let instr = std::fs::read(fixtures().join("slide/instruction.json")).unwrap();
    let instruction_id = client.post_instruction(&instr, Some(&scene_id), None).await.unwrap().instruction_id;

    let req = PlanRequest { instruction_id, scene_id, config: None, backend: "live".into() };
    let id = client.create_plan(&req).await.unwrap().plan_id;
    match client.create_plan(&req).await {
        Err(ClientError::Api { status: 409, error }) => assert_eq!(error.code, "conflict"),
        other => panic!("expected 409, got {other:?}"),
    }
    match client.wait_plan(&id, Duration::from_secs(30)).await {
        Err(ClientError::Api { status: 502, error }) => {
            assert_eq!(error.code, "transport");
            assert_eq!(error.stage.as_deref(), Some("keypoints"));
        }
        other => panic!("expected 502, got {other:?}"),
    }
    // Once the first run has ended, the same request may run again.
    assert!(client.create_plan(&req).await.is_ok());
}
