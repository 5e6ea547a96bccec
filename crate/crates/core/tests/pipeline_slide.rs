use std::path::PathBuf;

use sketchlift_core::models::{Backends, ScriptedScenario};
use sketchlift_core::pipeline::{
    export_plan, import_plan, plan_diagnostics, run_pipeline, ErrorClass, PipelineConfig, PipelineInput, Stage,
    StageError,
};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn slide() -> (PipelineInput, PipelineConfig, Backends) {
    let root = fixtures();
    let input =
        PipelineInput::load(&root.join("slide/instruction.json"), &root.join("fixture_a/scene.json")).unwrap();
    let config: PipelineConfig =
        serde_json::from_slice(&std::fs::read(root.join("slide/config.json")).unwrap()).unwrap();
    let scenario = ScriptedScenario::from_json(&std::fs::read(root.join("slide/scenario.json")).unwrap()).unwrap();
    (input, config, Backends::scripted(scenario))
}

#[test]
fn slide_reproduces_golden_plan() {
    let (input, config, backends) = slide();
    assert_eq!(config.horizon, 20);
    assert_eq!(config.lifting.rng_seed, 7);
    let out = run_pipeline(&input, &config, &backends).unwrap();
    let golden = std::fs::read(fixtures().join("slide/golden_plan.json")).unwrap();
    assert_eq!(export_plan(&out.plan), golden);
}

#[test]
fn repeated_runs_are_identical() {
    let (input, config, backends) = slide();
    let a = run_pipeline(&input, &config, &backends).unwrap();
    let b = run_pipeline(&input, &config, &backends).unwrap();
    assert_eq!(export_plan(&a.plan), export_plan(&b.plan));
    assert_eq!(a.pointed, b.pointed);
}

#[test]
fn golden_parses_and_revalidates() {
    let bytes = std::fs::read(fixtures().join("slide/golden_plan.json")).unwrap();
    let plan = import_plan(&bytes).unwrap();
    plan.validate().unwrap();
    assert_eq!(plan.horizon(), 20);
    assert_eq!(plan.provenance.rng_seed, 7);
    assert_eq!(export_plan(&plan), bytes);
}

#[test]
fn trace_follows_stage_order() {
    let (input, config, backends) = slide();
    let out = run_pipeline(&input, &config, &backends).unwrap();
    let stages: Vec<Stage> = out.trace.iter().map(|r| r.stage).collect();
    assert_eq!(
        stages,
        [
            Stage::SceneValidate,
            Stage::InstructionValidate,
            Stage::Rasterize,
            Stage::Keypoints,
            Stage::Pointing,
            Stage::Trajectories,
            Stage::Resample,
            Stage::Lift,
            Stage::PoseSchedule,
            Stage::Assemble,
        ]
    );
    assert!(out.trace.iter().all(|r| r.input_digest.len() == 64 && r.output_digest.len() == 64));
    assert_eq!(out.descriptors.len(), 3);
    assert_eq!(out.pointed.len(), 6);
}

#[test]
fn zero_baseline_fails_scene_validation() {
    let (mut input, config, backends) = slide();
    input.scene.views[1].calibration.pose = input.scene.views[0].calibration.pose.clone();
    let err = run_pipeline(&input, &config, &backends).unwrap_err();
    assert_eq!(err.stage, Stage::SceneValidate);
    assert!(matches!(err.source, StageError::Scene(_)));
    assert_eq!(err.source.class(), ErrorClass::Validation);
    assert_eq!(err.trace.len(), 1);
}

#[test]
fn unrecorded_request_is_scenario_incomplete() {
    let (input, config, backends) = slide();
    let err = run_pipeline(&input, &config.with_seed(8), &backends).unwrap_err();
    assert_eq!(err.stage, Stage::PoseSchedule);
    assert_eq!(err.source.class(), ErrorClass::ScenarioIncomplete);
}

#[test]
fn default_run_reprojects_within_three_sigma() {
    let (input, config, backends) = slide();
    let out = run_pipeline(&input, &config, &backends).unwrap();
    let xi = &out.pixel_trajectories;
    let d = plan_diagnostics(&out.plan, &input.scene, (&xi[0], &xi[1])).unwrap();
    assert_eq!(d.reprojection_px.len(), 20);
    assert!(d.max_reprojection_px <= 3.0 * 2f64.sqrt(), "{}", d.max_reprojection_px);
    assert_eq!(d.gripper_transitions, 0);
    assert!(d.max_sigma_trace > 0.0);
}

#[test]
fn degenerate_run_reprojects_within_half_pixel() {
    let (input, config, _) = slide();
    let mut config = config;
    config.lifting.epsilon_sigma = 1e-9;
    let mut scenario =
        ScriptedScenario::from_json(&std::fs::read(fixtures().join("slide/scenario.json")).unwrap()).unwrap();
    let first = run_pipeline(&input, &config, &Backends::scripted(scenario.clone())).unwrap_err();
    assert_eq!(first.stage, Stage::PoseSchedule);
    let steps: Vec<_> = (0..20).map(|_| serde_json::json!({"quaternion": [1.0, 0.0, 0.0, 0.0], "gripper": 1})).collect();
    let digest = missing_pose_digest(&first);
    scenario.insert(sketchlift_core::models::RequestKind::PoseSchedule, digest, serde_json::json!({ "steps": steps }));
    let out = run_pipeline(&input, &config, &Backends::scripted(scenario)).unwrap();
    let xi = &out.pixel_trajectories;
    let d = plan_diagnostics(&out.plan, &input.scene, (&xi[0], &xi[1])).unwrap();
    assert!(d.max_reprojection_px <= 0.5, "{}", d.max_reprojection_px);
    assert_eq!(d.gripper_transitions, 0);
}

fn missing_pose_digest(err: &sketchlift_core::pipeline::PipelineError) -> String {
    match &err.source {
        StageError::Model(sketchlift_core::models::ModelError::ScenarioIncomplete { digest, .. }) => digest.clone(),
        other => panic!("unexpected {other:?}"),
    }
}
