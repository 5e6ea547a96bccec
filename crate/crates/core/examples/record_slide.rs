//! Regenerates the FIXTURE-A scene and the SCEN-SLIDE scenario.
//!
//! Renders both views of a block-pushing scene, serves a simulated model
//! over HTTP that answers from the scene's ground truth, runs the pipeline
//! once through the live backend with a recorder attached, then replays the
//! recording and freezes the resulting plan as the golden file.
//!
//! `cargo run -p sketchlift-core --example record_slide -- [fixtures dir]`

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::Path as UrlPath;
use axum::routing::post;
use axum::{Json, Router};
use image::{Rgb, RgbImage};
use nalgebra::{Vector2, Vector3};
use serde_json::{json, Value};
use sketchlift_core::geometry::{
    pixel_to_ray, project_point, CalibrationFile, CameraIntrinsics, CameraPose, CameraView,
};
use sketchlift_core::instruction::{
    serialize_instruction, CrossModalInstruction, SceneBundle, SceneView, Stroke, StrokeKind, StrokeStyle, TextLabel,
    ViewCalibration,
};
use sketchlift_core::models::{Backends, LiveBackend, LiveConfig, ModelBackend, Recorder, ScriptedScenario};
use sketchlift_core::pipeline::{export_plan, run_pipeline, PipelineConfig, PipelineInput};

const TABLE_Y: f64 = 0.15;
const PUSH_Y: f64 = 0.12;
const BLOCK_HALF: f64 = 0.03;
const BLOCK_S: f64 = 0.3;
const TARGET_HALF: f64 = 0.04;

fn cameras() -> [CameraView; 2] {
    let k = CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 50.0, cy: 50.0, width: 100, height: 100 };
    let pose_2 = CameraPose::look_at(Vector3::new(1.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 1.0, 0.0))
        .expect("valid pose");
    [
        CameraView { id: "view_1".into(), intrinsics: k.clone(), pose: CameraPose::identity() },
        CameraView { id: "view_2".into(), intrinsics: k, pose: pose_2 },
    ]
}

/// Pusher path on the table, bowing sideways, `s ∈ [0, 1]`.
fn path(s: f64) -> Vector3<f64> {
    let a = Vector3::new(-0.2, PUSH_Y, 0.8);
    let b = Vector3::new(0.2, PUSH_Y, 1.2);
    let d = b - a;
    let n = Vector3::new(-d.z, 0.0, d.x).normalize();
    a + d * s + n * (0.06 * (std::f64::consts::PI * s).sin())
}

fn block_center() -> Vector3<f64> {
    let p = path(BLOCK_S);
    Vector3::new(p.x, TABLE_Y - BLOCK_HALF, p.z)
}

fn target_center() -> Vector3<f64> {
    let p = path(1.0);
    Vector3::new(p.x, TABLE_Y, p.z)
}

fn keypoint(label: &str) -> Vector3<f64> {
    match label {
        "block top face" => block_center() - Vector3::new(0.0, BLOCK_HALF, 0.0),
        "target square center" => target_center(),
        "pre-push approach point" => path(0.0),
        other => panic!("unknown keypoint {other}"),
    }
}

fn render(view: &CameraView) -> RgbImage {
    let c = block_center();
    let t = target_center();
    RgbImage::from_fn(view.intrinsics.width, view.intrinsics.height, |u, v| {
        let ray = pixel_to_ray(view, &Vector2::new(u as f64, v as f64)).unwrap();
        let (o, d) = (ray.origin, *ray.direction());
        // Block: slab test against an axis-aligned cube.
        let (mut t0, mut t1, mut axis) = (0.0f64, f64::INFINITY, 0);
        for k in 0..3 {
            let (lo, hi) = (c[k] - BLOCK_HALF, c[k] + BLOCK_HALF);
            if d[k].abs() < 1e-12 {
                if o[k] < lo || o[k] > hi {
                    t0 = f64::INFINITY;
                }
                continue;
            }
            let (a, b) = ((lo - o[k]) / d[k], (hi - o[k]) / d[k]);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            if a > t0 {
                t0 = a;
                axis = k;
            }
            t1 = t1.min(b);
        }
        if t0 <= t1 {
            let shade = [200u8, 150, 110][axis];
            return Rgb([40, shade / 2, shade]);
        }
        if d.y > 1e-9 {
            let hit = o + d * ((TABLE_Y - o.y) / d.y);
            if (hit.x - t.x).abs() <= TARGET_HALF && (hit.z - t.z).abs() <= TARGET_HALF {
                let edge = (hit.x - t.x).abs().max((hit.z - t.z).abs()) > TARGET_HALF * 0.7;
                return if edge { Rgb([200, 40, 40]) } else { Rgb([235, 200, 200]) };
            }
            let checker = ((hit.x * 10.0).floor() as i64 + (hit.z * 10.0).floor() as i64).rem_euclid(2);
            return if checker == 0 { Rgb([170, 140, 100]) } else { Rgb([150, 120, 85]) };
        }
        Rgb([205, 215, 225])
    })
}

fn project(view: &CameraView, p: &Vector3<f64>) -> [f64; 2] {
    let px = project_point(view, p).expect("point in front of camera");
    [px.x, px.y]
}

fn round_to(x: f64, step: f64) -> f64 {
    (x / step).round() * step
}

/// The simulated model: answers each request from the scene ground truth.
async fn model(UrlPath(kind): UrlPath<String>, Json(body): Json<Value>) -> Json<Value> {
    let cams = cameras();
    let view = |id: &str| cams.iter().find(|c| c.id == id).cloned().expect("known view");
    let payload = &body["payload"];
    Json(match kind.as_str() {
        "keypoints" => json!({"keypoints": [
            {"label": "block top face", "metadata": "object to push"},
            {"label": "target square center", "metadata": "red outlined goal region"},
            {"label": "pre-push approach point", "metadata": "behind the block, opposite the push direction"},
        ]}),
        "point" => {
            let v = view(payload["view_id"].as_str().unwrap());
            let p = project(&v, &keypoint(payload["descriptor"]["label"].as_str().unwrap()));
            json!({"pixel": [p[0].round(), p[1].round()]})
        }
        "trajectories" => {
            let poly = |v: &CameraView, n: usize| {
                (0..n)
                    .map(|i| {
                        let p = project(v, &path(i as f64 / (n - 1) as f64));
                        json!([round_to(p[0], 0.01), round_to(p[1], 0.01)])
                    })
                    .collect::<Vec<_>>()
            };
            json!({"polylines": [poly(&cams[0], 7), poly(&cams[1], 9)]})
        }
        "pose_schedule" => {
            let h = payload["lifted_trajectory"].as_array().map(|a| a.len()).unwrap_or(0);
            let steps: Vec<Value> =
                (0..h).map(|_| json!({"quaternion": [0.7071068, 0.7071068, 0.0, 0.0], "gripper": 0})).collect();
            json!({"steps": steps})
        }
        other => json!({"error": format!("unknown request kind {other}")}),
    })
}

fn spawn_model_server() -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, Router::new().route("/v1/{kind}", post(model))).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

fn write(path: &Path, bytes: &[u8]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, bytes).unwrap();
    println!("wrote {}", path.display());
}

fn main() {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    let scene_dir = root.join("fixture_a");
    let slide_dir = root.join("slide");
    let cams = cameras();

    let mut calib = CalibrationFile { views: cams.to_vec() }.to_json();
    calib.push(b'\n');
    write(&scene_dir.join("calibration.json"), &calib);
    let bundle = SceneBundle {
        views: cams
            .iter()
            .map(|c| SceneView {
                id: c.id.clone(),
                image_path: format!("{}.png", c.id),
                calibration: ViewCalibration { intrinsics: c.intrinsics.clone(), pose: c.pose.clone() },
            })
            .collect(),
    };
    let mut scene = bundle.to_json();
    scene.push(b'\n');
    write(&scene_dir.join("scene.json"), &scene);
    for c in &cams {
        let p = scene_dir.join(format!("{}.png", c.id));
        render(c).save(&p).unwrap();
        println!("wrote {}", p.display());
    }

    let v1 = &cams[0];
    let corners: Vec<[f64; 2]> = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
        .iter()
        .map(|(dx, dz)| project(v1, &(target_center() + Vector3::new(dx * TARGET_HALF * 1.3, 0.0, dz * TARGET_HALF * 1.3))))
        .map(|p| [round_to(p[0], 0.5), round_to(p[1], 0.5)])
        .collect();
    let b = project(v1, &block_center());
    let t = project(v1, &target_center());
    let instruction = CrossModalInstruction {
        image_ref: "view_1".into(),
        image_size: Some([100, 100]),
        strokes: vec![
            Stroke {
                kind: StrokeKind::Arrow,
                points: vec![[b[0].round(), b[1].round()], [((b[0] + t[0]) / 2.0).round(), ((b[1] + t[1]) / 2.0).round() - 3.0], [t[0].round(), t[1].round()]],
                style: StrokeStyle { rgba: [0, 200, 255, 255], width: 2.0 },
            },
            Stroke { kind: StrokeKind::Boundary, points: corners, style: StrokeStyle { rgba: [255, 0, 255, 255], width: 1.0 } },
        ],
        labels: vec![TextLabel { text: "slide".into(), anchor: [(t[0] - 20.0).round(), (t[1] - 14.0).round()] }],
    };
    write(&slide_dir.join("instruction.json"), &serialize_instruction(&instruction));

    let config = PipelineConfig { horizon: 20, ..PipelineConfig::default() }.with_seed(7);
    let mut cfg = serde_json::to_vec_pretty(&config).unwrap();
    cfg.push(b'\n');
    write(&slide_dir.join("config.json"), &cfg);

    let input = PipelineInput::load(&slide_dir.join("instruction.json"), &scene_dir.join("scene.json")).unwrap();
    let live: Arc<dyn ModelBackend> = Arc::new(
        LiveBackend::new(LiveConfig { base_url: spawn_model_server(), ..LiveConfig::default() }).unwrap(),
    );
    let recorder = Recorder::new();
    let recorded = run_pipeline(&input, &config, &Backends::single(Arc::new(recorder.wrap(live)))).unwrap();
    let scenario = recorder.scenario("SCEN-SLIDE");
    write(&slide_dir.join("scenario.json"), &scenario.to_json());

    let replay = ScriptedScenario::from_json(&scenario.to_json()).unwrap();
    let replayed = run_pipeline(&input, &config, &Backends::scripted(replay)).unwrap();
    assert_eq!(recorded.plan.steps, replayed.plan.steps, "replay reproduces the recorded run");
    write(&slide_dir.join("golden_plan.json"), &export_plan(&replayed.plan));
    for r in &replayed.trace {
        println!("{:>20}  {}", r.stage.as_str(), r.diagnostics.join(" | "));
    }
}
