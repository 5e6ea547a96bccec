//! End-to-end planning: instruction + scene bundle → [`MotionPlan`].
//!
//! Stages run in a fixed order and each appends a [`TraceRecord`]:
//! `scene-validate`, `instruction-validate`, `rasterize`, `keypoints`,
//! `pointing`, `trajectories`, `resample`, `lift`, `pose-schedule`,
//! `assemble`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use nalgebra::{Matrix2, Quaternion, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::digest::{canonical_digest, image_digest};
use crate::geometry::{project_point, CameraView};
use crate::instruction::{
    parse_instruction, rasterize_overlay, validate_scene_bundle, CrossModalInstruction, Diagnostic, InstructionError,
    SceneBundle, DEFAULT_MIN_BASELINE_DEG,
};
use crate::lifting::{
    lift_with_report, mean_trajectory, resample_equal_length, LiftingConfig, LiftingError, PixelTrajectory,
    TrajectoryDistribution,
};
use crate::models::{
    point_keypoint, polyline_keypoint_distances, request_keypoints, request_pixel_trajectories, request_pose_schedule,
    Backends, KeypointDescriptor, ModelError, PointedKeypoint, ReasoningContext, ViewImage,
};

pub const DEFAULT_HORIZON: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    SceneValidate,
    InstructionValidate,
    Rasterize,
    Keypoints,
    Pointing,
    Trajectories,
    Resample,
    Lift,
    PoseSchedule,
    Assemble,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::SceneValidate => "scene-validate",
            Stage::InstructionValidate => "instruction-validate",
            Stage::Rasterize => "rasterize",
            Stage::Keypoints => "keypoints",
            Stage::Pointing => "pointing",
            Stage::Trajectories => "trajectories",
            Stage::Resample => "resample",
            Stage::Lift => "lift",
            Stage::PoseSchedule => "pose-schedule",
            Stage::Assemble => "assemble",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error("scene bundle invalid: {}", .0.iter().map(|d| d.message.as_str()).collect::<Vec<_>>().join("; "))]
    Scene(Vec<Diagnostic>),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lifting(#[from] LiftingError),
    #[error("only {remaining} keypoint descriptor(s) left, need {required}")]
    InsufficientKeypoints { remaining: usize, required: usize },
    #[error("{0}")]
    Validation(String),
}

/// Coarse error classes shared by the CLI exit codes and HTTP statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorClass {
    Validation,
    Transport,
    ScenarioIncomplete,
    ModelResponse,
    Numerical,
}

impl ErrorClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorClass::Validation => "validation",
            ErrorClass::Transport => "transport",
            ErrorClass::ScenarioIncomplete => "scenario-incomplete",
            ErrorClass::ModelResponse => "model-response",
            ErrorClass::Numerical => "numerical",
        }
    }
}

impl StageError {
    pub fn class(&self) -> ErrorClass {
        match self {
            StageError::Model(ModelError::Transport { .. }) => ErrorClass::Transport,
            StageError::Model(ModelError::ScenarioIncomplete { .. }) => ErrorClass::ScenarioIncomplete,
            StageError::Model(_) => ErrorClass::ModelResponse,
            StageError::Lifting(LiftingError::EmptyRegion { .. } | LiftingError::SingularCovariance { .. }) => {
                ErrorClass::Numerical
            }
            StageError::InsufficientKeypoints { .. } => ErrorClass::ModelResponse,
            _ => ErrorClass::Validation,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("stage {stage}: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    pub source: StageError,
    /// Records of the stages that ran, including the failing one.
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub horizon: usize,
    pub lifting: LiftingConfig,
    pub min_descriptors: usize,
    /// Pixel covariance `Σ_m` (row-major 2×2) used for both views.
    pub pixel_covariance: [f64; 4],
    pub min_baseline_deg: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            horizon: DEFAULT_HORIZON,
            lifting: LiftingConfig::default(),
            min_descriptors: 1,
            pixel_covariance: [2.0, 0.0, 0.0, 2.0],
            min_baseline_deg: DEFAULT_MIN_BASELINE_DEG,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), StageError> {
        if self.horizon < 2 {
            return Err(StageError::Validation("horizon must be >= 2".into()));
        }
        self.lifting.validate()?;
        Ok(())
    }

    pub fn digest(&self) -> String {
        canonical_digest(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.lifting.rng_seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: Stage,
    pub started_at: String,
    pub input_digest: String,
    pub output_digest: String,
    pub diagnostics: Vec<String>,
}

pub fn trace_to_jsonl(trace: &[TraceRecord]) -> String {
    trace.iter().map(|r| serde_json::to_string(r).expect("trace serializes") + "\n").collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionStep {
    pub t: usize,
    pub position: Vector3<f64>,
    pub orientation: Quaternion<f64>,
    pub gripper: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// `scripted:<name>` or `live`.
    pub backend: String,
    pub rng_seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionPlan {
    pub steps: Vec<MotionStep>,
    pub distribution: TrajectoryDistribution,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRepr {
    t: usize,
    position: [f64; 3],
    quaternion: [f64; 4],
    gripper: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanRepr {
    horizon: usize,
    steps: Vec<StepRepr>,
    distribution: TrajectoryDistribution,
    provenance: Provenance,
}

impl MotionPlan {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Checks step numbering, unit quaternions, binary gripper states, and
    /// that step positions equal the distribution means exactly.
    pub fn validate(&self) -> Result<(), String> {
        if self.steps.len() != self.distribution.horizon() {
            return Err(format!("{} steps but distribution horizon {}", self.steps.len(), self.distribution.horizon()));
        }
        self.distribution.validate().map_err(|e| e.to_string())?;
        for (i, (s, w)) in self.steps.iter().zip(&self.distribution.waypoints).enumerate() {
            if s.t != i + 1 {
                return Err(format!("step {} has t={}", i + 1, s.t));
            }
            if s.position != w.mu {
                return Err(format!("step {} position differs from distribution mean", s.t));
            }
            if !((s.orientation.norm() - 1.0).abs() <= 1e-9) {
                return Err(format!("step {} quaternion is not unit norm", s.t));
            }
            if s.gripper > 1 {
                return Err(format!("step {} gripper must be 0 or 1", s.t));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
#[error("plan file: {0}")]
pub struct PlanParseError(pub String);

pub fn export_plan(plan: &MotionPlan) -> Vec<u8> {
    let repr = PlanRepr {
        horizon: plan.horizon(),
        steps: plan
            .steps
            .iter()
            .map(|s| StepRepr {
                t: s.t,
                position: [s.position.x, s.position.y, s.position.z],
                quaternion: [s.orientation.w, s.orientation.i, s.orientation.j, s.orientation.k],
                gripper: s.gripper,
            })
            .collect(),
        distribution: plan.distribution.clone(),
        provenance: plan.provenance.clone(),
    };
    let mut out = serde_json::to_vec_pretty(&repr).expect("plan serializes");
    out.push(b'\n');
    out
}

pub fn import_plan(bytes: &[u8]) -> Result<MotionPlan, PlanParseError> {
    let repr: PlanRepr = serde_json::from_slice(bytes).map_err(|e| PlanParseError(e.to_string()))?;
    if repr.horizon != repr.steps.len() {
        return Err(PlanParseError(format!("horizon {} but {} steps", repr.horizon, repr.steps.len())));
    }
    let plan = MotionPlan {
        steps: repr
            .steps
            .into_iter()
            .map(|s| MotionStep {
                t: s.t,
                position: Vector3::from(s.position),
                orientation: Quaternion::new(s.quaternion[0], s.quaternion[1], s.quaternion[2], s.quaternion[3]),
                gripper: s.gripper,
            })
            .collect(),
        distribution: repr.distribution,
        provenance: repr.provenance,
    };
    plan.validate().map_err(PlanParseError)?;
    Ok(plan)
}

/// Everything the pipeline consumes.
#[derive(Debug, Clone)]
pub struct PipelineInput {
    pub instruction: CrossModalInstruction,
    pub instruction_image: Arc<RgbImage>,
    pub scene: SceneBundle,
    /// One image per scene view, in bundle order.
    pub view_images: Vec<Arc<RgbImage>>,
}

#[derive(Debug, Error)]
pub enum InputError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error("image_ref {0:?} names no scene view and no instruction image was given")]
    UnresolvedImage(String),
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, InputError> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| InputError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn read(path: &Path) -> Result<Vec<u8>, InputError> {
    std::fs::read(path).map_err(|e| InputError::Io { path: path.display().to_string(), message: e.to_string() })
}

impl PipelineInput {
    /// Loads an instruction file and a scene bundle file. The instruction's
    /// `image_ref` names either a scene view id or an image path relative to
    /// the instruction file.
    pub fn load(instruction_path: &Path, scene_path: &Path) -> Result<Self, InputError> {
        let instruction = parse_instruction(&read(instruction_path)?)?;
        let scene = SceneBundle::from_json(&read(scene_path)?)?;
        let base = scene_path.parent().unwrap_or(Path::new("."));
        let view_images = scene
            .image_paths(base)
            .iter()
            .map(|p| load_rgb(p).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        let instruction_image = match scene.views.iter().position(|v| v.id == instruction.image_ref) {
            Some(i) => view_images[i].clone(),
            None => Arc::new(load_rgb(&instruction_path.parent().unwrap_or(Path::new(".")).join(&instruction.image_ref))?),
        };
        Ok(PipelineInput { instruction, instruction_image, scene, view_images })
    }

    /// Assembles an input from decoded parts. Without an explicit
    /// instruction image, `image_ref` must name a scene view.
    pub fn from_parts(
        instruction: CrossModalInstruction,
        scene: SceneBundle,
        view_images: Vec<Arc<RgbImage>>,
        instruction_image: Option<Arc<RgbImage>>,
    ) -> Result<Self, InputError> {
        let instruction_image = match (instruction_image, scene.views.iter().position(|v| v.id == instruction.image_ref)) {
            (Some(img), _) => img,
            (None, Some(i)) if i < view_images.len() => view_images[i].clone(),
            _ => return Err(InputError::UnresolvedImage(instruction.image_ref.clone())),
        };
        Ok(PipelineInput { instruction, instruction_image, scene, view_images })
    }
}

/// Decodes an image file's bytes to 8-bit RGB.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, image::ImageError> {
    image::load_from_memory(bytes).map(|i| i.to_rgb8())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub plan: MotionPlan,
    pub descriptors: Vec<KeypointDescriptor>,
    pub pointed: Vec<PointedKeypoint>,
    pub raw_polylines: [Vec<[f64; 2]>; 2],
    pub pixel_trajectories: [PixelTrajectory; 2],
    pub trace: Vec<TraceRecord>,
}

struct Tracer {
    records: Vec<TraceRecord>,
}

impl Tracer {
    fn run<T>(
        &mut self,
        stage: Stage,
        input: Value,
        f: impl FnOnce(&mut Vec<String>) -> Result<(T, Value), StageError>,
    ) -> Result<T, PipelineError> {
        let started_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true);
        let input_digest = canonical_digest(&input);
        let mut diagnostics = Vec::new();
        let result = f(&mut diagnostics);
        let output_digest = match &result {
            Ok((_, out)) => canonical_digest(out),
            Err(_) => String::new(),
        };
        if let Err(e) = &result {
            diagnostics.push(format!("error: {e}"));
        }
        self.records.push(TraceRecord { stage, started_at, input_digest, output_digest, diagnostics });
        result.map(|(v, _)| v).map_err(|source| PipelineError { stage, source, trace: self.records.clone() })
    }
}

fn points_value(points: &[nalgebra::Vector2<f64>]) -> Value {
    Value::Array(points.iter().map(|p| json!([p.x, p.y])).collect())
}

pub fn run_pipeline(input: &PipelineInput, config: &PipelineConfig, backends: &Backends) -> Result<PipelineOutput, PipelineError> {
    let mut tracer = Tracer { records: Vec::new() };
    let scene_value = serde_json::to_value(&input.scene).expect("scene serializes");

    let cameras: Vec<CameraView> = tracer.run(Stage::SceneValidate, scene_value.clone(), |diag| {
        config.validate()?;
        let problems = validate_scene_bundle(&input.scene, config.min_baseline_deg);
        if !problems.is_empty() {
            return Err(StageError::Scene(problems));
        }
        if input.view_images.len() != 2 {
            return Err(StageError::Validation(format!("expected 2 view images, got {}", input.view_images.len())));
        }
        let cams = input.scene.cameras();
        for (cam, img) in cams.iter().zip(&input.view_images) {
            let k = &cam.intrinsics;
            if (img.width(), img.height()) != (k.width, k.height) {
                return Err(StageError::Validation(format!(
                    "view {} image is {}x{}, calibration says {}x{}",
                    cam.id,
                    img.width(),
                    img.height(),
                    k.width,
                    k.height
                )));
            }
        }
        diag.push(format!(
            "baseline angle {:.1}°",
            crate::instruction::baseline_angle_deg(&cams[0], &cams[1])
        ));
        Ok((cams, scene_value.clone()))
    })?;

    let instr_value = crate::instruction::instruction_to_value(&input.instruction);
    tracer.run(Stage::InstructionValidate, instr_value.clone(), |_| {
        input.instruction.validate()?;
        input.instruction.validate_bounds(input.instruction_image.width(), input.instruction_image.height())?;
        Ok(((), instr_value.clone()))
    })?;

    let annotated = tracer.run(
        Stage::Rasterize,
        json!({ "instruction": instr_value, "image": image_digest(&input.instruction_image) }),
        |_| {
            let img = rasterize_overlay(&input.instruction_image, &input.instruction)?;
            let d = json!(image_digest(&img));
            Ok((Arc::new(img), d))
        },
    )?;

    let views = [
        ViewImage { view: cameras[0].clone(), image: input.view_images[0].clone() },
        ViewImage { view: cameras[1].clone(), image: input.view_images[1].clone() },
    ];
    let mut ctx = ReasoningContext::new(input.instruction.clone(), annotated, views);

    let kp_request = ctx.keypoints_request();
    ctx.descriptors = tracer.run(Stage::Keypoints, kp_request.payload.clone(), |diag| {
        let d = request_keypoints(backends.reasoning.as_ref(), &ctx)?;
        diag.push(format!("{} descriptor(s)", d.len()));
        if d.len() < config.min_descriptors {
            return Err(StageError::InsufficientKeypoints { remaining: d.len(), required: config.min_descriptors });
        }
        let v = serde_json::to_value(&d).unwrap();
        Ok((d, v))
    })?;

    let (descriptors, pointed) = tracer.run(
        Stage::Pointing,
        json!({ "descriptors": ctx.descriptors, "views": [cameras[0].id, cameras[1].id] }),
        |diag| {
            let (descriptors, pointed) = point_all(backends, &ctx, diag);
            if descriptors.len() < config.min_descriptors.max(1) {
                return Err(StageError::InsufficientKeypoints {
                    remaining: descriptors.len(),
                    required: config.min_descriptors.max(1),
                });
            }
            let v = json!({ "descriptors": descriptors, "pointed": pointed });
            Ok(((descriptors, pointed), v))
        },
    )?;
    ctx.descriptors = descriptors;
    ctx.pointed = pointed;

    let traj_request = ctx.trajectories_request();
    let (poly_1, poly_2) = tracer.run(Stage::Trajectories, traj_request.payload.clone(), |diag| {
        let (a, b) = request_pixel_trajectories(backends.reasoning.as_ref(), &ctx)?;
        for (poly, cam) in [(&a, &cameras[0]), (&b, &cameras[1])] {
            for (idx, d) in polyline_keypoint_distances(poly, &ctx.pointed, &cam.id) {
                diag.push(format!("view {} keypoint {idx}: {d:.2} px from polyline", cam.id));
            }
        }
        let v = json!([points_value(&a), points_value(&b)]);
        Ok(((a, b), v))
    })?;

    let sigma = Matrix2::from_row_slice(&config.pixel_covariance);
    let xi = tracer.run(
        Stage::Resample,
        json!({ "polylines": [points_value(&poly_1), points_value(&poly_2)], "horizon": config.horizon }),
        |diag| {
            diag.push(format!("polyline lengths {} and {} -> H={}", poly_1.len(), poly_2.len(), config.horizon));
            let r1 = resample_equal_length(&poly_1, config.horizon)?;
            let r2 = resample_equal_length(&poly_2, config.horizon)?;
            let x1 = PixelTrajectory::new(cameras[0].id.clone(), r1, sigma)?;
            let x2 = PixelTrajectory::new(cameras[1].id.clone(), r2, sigma)?;
            let v = serde_json::to_value([&x1, &x2]).unwrap();
            Ok(([x1, x2], v))
        },
    )?;

    let xi_value = serde_json::to_value(&xi).unwrap();
    let distribution = tracer.run(
        Stage::Lift,
        json!({ "xi": xi_value, "lifting": config.lifting }),
        |diag| {
            let report = lift_with_report(&xi[0], &xi[1], (&cameras[0], &cameras[1]), &config.lifting)?;
            for w in &report.widened {
                diag.push(format!("t={}: delta widened to {} m", w.t, w.delta));
            }
            let min_n = report.distribution.waypoints.iter().map(|w| w.n_samples).min().unwrap_or(0);
            diag.push(format!("min samples per waypoint: {min_n}"));
            let v = serde_json::to_value(&report.distribution).unwrap();
            Ok((report.distribution, v))
        },
    )?;

    let mean = mean_trajectory(&distribution);
    ctx.lifted_trajectory = Some(mean.clone());
    let pose_request = ctx.pose_request(&mean);
    let schedule = tracer.run(Stage::PoseSchedule, pose_request.payload.clone(), |diag| {
        let s = request_pose_schedule(backends.reasoning.as_ref(), &ctx)?;
        diag.push(format!("gripper transitions: {}", gripper_transitions(s.iter().map(|p| p.gripper))));
        let v = serde_json::to_value(&s).unwrap();
        Ok((s, v))
    })?;

    let plan = tracer.run(Stage::Assemble, json!({ "distribution": distribution, "schedule": schedule }), |_| {
        let steps = mean
            .iter()
            .zip(&schedule)
            .enumerate()
            .map(|(i, (p, s))| MotionStep { t: i + 1, position: *p, orientation: s.orientation, gripper: s.gripper })
            .collect();
        let plan = MotionPlan {
            steps,
            distribution: distribution.clone(),
            provenance: Provenance {
                backend: backends.name(),
                rng_seed: config.lifting.rng_seed,
                config_digest: config.digest(),
            },
        };
        plan.validate().map_err(StageError::Validation)?;
        let v: Value = serde_json::from_slice(&export_plan(&plan)).unwrap();
        Ok((plan, v))
    })?;

    let to_raw = |p: &[nalgebra::Vector2<f64>]| p.iter().map(|v| [v.x, v.y]).collect::<Vec<_>>();
    Ok(PipelineOutput {
        plan,
        descriptors: ctx.descriptors,
        pointed: ctx.pointed,
        raw_polylines: [to_raw(&poly_1), to_raw(&poly_2)],
        pixel_trajectories: xi,
        trace: tracer.records,
    })
}

/// Points every descriptor in both views concurrently. A descriptor whose
/// pointing fails in either view is dropped and the survivors are renumbered.
fn point_all(
    backends: &Backends,
    ctx: &ReasoningContext,
    diag: &mut Vec<String>,
) -> (Vec<KeypointDescriptor>, Vec<PointedKeypoint>) {
    let jobs: Vec<(usize, usize)> =
        (0..ctx.descriptors.len()).flat_map(|d| (0..ctx.views.len()).map(move |v| (d, v))).collect();
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(d, v)| {
                let backend = backends.pointing.clone();
                let view = &ctx.views[v];
                let descriptor = &ctx.descriptors[d];
                s.spawn(move || point_keypoint(backend.as_ref(), d, descriptor, &view.image, &view.view.id))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("pointing thread panicked")).collect()
    });

    let mut failed = vec![false; ctx.descriptors.len()];
    let mut ok = Vec::new();
    for (&(d, v), r) in jobs.iter().zip(results) {
        match r {
            Ok(p) => {
                if let Some(w) = p.warning {
                    diag.push(format!("descriptor {d} view {}: {w}", ctx.views[v].view.id));
                }
                ok.push(p.keypoint);
            }
            Err(e) => {
                diag.push(format!("descriptor {d} view {}: dropped ({e})", ctx.views[v].view.id));
                failed[d] = true;
            }
        }
    }
    let mut remap = vec![None; ctx.descriptors.len()];
    let mut descriptors = Vec::new();
    for (i, d) in ctx.descriptors.iter().enumerate() {
        if !failed[i] {
            remap[i] = Some(descriptors.len());
            descriptors.push(d.clone());
        }
    }
    let view_order = |id: &str| ctx.views.iter().position(|v| v.view.id == id).unwrap_or(usize::MAX);
    let mut pointed: Vec<PointedKeypoint> = ok
        .into_iter()
        .filter_map(|mut k| {
            k.descriptor_index = remap[k.descriptor_index]?;
            Some(k)
        })
        .collect();
    pointed.sort_by(|a, b| {
        a.descriptor_index.cmp(&b.descriptor_index).then(view_order(&a.view_id).cmp(&view_order(&b.view_id)))
    });
    (descriptors, pointed)
}

pub fn gripper_transitions(states: impl IntoIterator<Item = u8>) -> usize {
    let mut it = states.into_iter();
    let Some(mut prev) = it.next() else { return 0 };
    let mut n = 0;
    for s in it {
        if s != prev {
            n += 1;
        }
        prev = s;
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    /// Per timestep, reprojection error of `μ_t` into each view (pixels).
    pub reprojection_px: Vec<[f64; 2]>,
    pub max_reprojection_px: f64,
    pub max_sigma_trace: f64,
    pub gripper_transitions: usize,
}

pub fn plan_diagnostics(
    plan: &MotionPlan,
    bundle: &SceneBundle,
    xi: (&PixelTrajectory, &PixelTrajectory),
) -> Result<PlanDiagnostics, StageError> {
    let cams = bundle.cameras();
    let find = |id: &str| {
        cams.iter()
            .find(|c| c.id == id)
            .ok_or_else(|| StageError::Validation(format!("view {id} not in scene bundle")))
    };
    let (c1, c2) = (find(&xi.0.view_id)?, find(&xi.1.view_id)?);
    if xi.0.horizon() != plan.horizon() || xi.1.horizon() != plan.horizon() {
        return Err(StageError::Validation("pixel trajectories do not match plan horizon".into()));
    }
    let mut reprojection_px = Vec::with_capacity(plan.horizon());
    for (i, w) in plan.distribution.waypoints.iter().enumerate() {
        let e1 = project_point(c1, &w.mu).map(|p| (p - xi.0.points[i]).norm()).unwrap_or(f64::INFINITY);
        let e2 = project_point(c2, &w.mu).map(|p| (p - xi.1.points[i]).norm()).unwrap_or(f64::INFINITY);
        reprojection_px.push([e1, e2]);
    }
    let max_reprojection_px = reprojection_px.iter().flat_map(|e| e.iter().copied()).fold(0.0, f64::max);
    let max_sigma_trace = plan.distribution.waypoints.iter().map(|w| w.sigma.trace()).fold(0.0, f64::max);
    Ok(PlanDiagnostics {
        reprojection_px,
        max_reprojection_px,
        max_sigma_trace,
        gripper_transitions: gripper_transitions(plan.steps.iter().map(|s| s.gripper)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::WaypointGaussian;
    use nalgebra::Matrix3;
    use proptest::prelude::*;

    fn plan(h: usize, grippers: &[u8]) -> MotionPlan {
        let waypoints: Vec<_> = (0..h)
            .map(|i| WaypointGaussian {
                t: i + 1,
                mu: Vector3::new(0.1 * i as f64, -0.05, 1.0 + 1e-3 * i as f64),
                sigma: Matrix3::from_diagonal(&Vector3::new(1e-5, 2e-5, 3e-5)),
                n_samples: 10 + i,
            })
            .collect();
        let distribution = TrajectoryDistribution::new(waypoints).unwrap();
        MotionPlan {
            steps: mean_trajectory(&distribution)
                .into_iter()
                .enumerate()
                .map(|(i, p)| MotionStep { t: i + 1, position: p, orientation: Quaternion::identity(), gripper: grippers[i % grippers.len()] })
                .collect(),
            distribution,
            provenance: Provenance { backend: "scripted:test".into(), rng_seed: 7, config_digest: "abc".into() },
        }
    }

    #[test]
    fn plan_round_trip_and_truncation() {
        let p = plan(4, &[0, 1]);
        let bytes = export_plan(&p);
        assert_eq!(import_plan(&bytes).unwrap(), p);
        assert!(import_plan(&bytes[..bytes.len() / 2]).is_err());
    }

    #[test]
    fn import_rejects_inconsistent_positions() {
        let mut p = plan(3, &[0]);
        p.steps[1].position.x += 1e-9;
        assert!(import_plan(&export_plan(&p)).is_err());
    }

    #[test]
    fn gripper_transition_counts() {
        assert_eq!(gripper_transitions([0, 0, 0]), 0);
        assert_eq!(gripper_transitions([0, 1, 1, 0]), 2);
        assert_eq!(gripper_transitions(Vec::<u8>::new()), 0);
    }

    #[test]
    fn stage_names_are_kebab_case() {
        assert_eq!(serde_json::to_value(Stage::SceneValidate).unwrap(), "scene-validate");
        assert_eq!(Stage::PoseSchedule.to_string(), "pose-schedule");
    }

    proptest! {
        #[test]
        fn plan_export_import_identity(h in 1usize..12, grippers in prop::collection::vec(0u8..2, 1..5), yaw in -3.0..3.0f64) {
            let mut p = plan(h, &grippers);
            let q = nalgebra::UnitQuaternion::from_euler_angles(0.0, 0.0, yaw).into_inner();
            for s in &mut p.steps { s.orientation = q; }
            let bytes = export_plan(&p);
            let back = import_plan(&bytes).unwrap();
            prop_assert_eq!(&back, &p);
            prop_assert_eq!(export_plan(&back), bytes);
        }
    }
}
