//! Clients for the reasoning model and the pointing model.
//!
//! Every exchange is a [`ModelRequest`]: a request kind plus a JSON payload in
//! which images appear only as digests, with the raw rasters attached on the
//! side. Backends answer with a JSON response that the operations in this
//! module validate, whichever backend produced it. Request digests are taken
//! over the canonical form of `{kind, payload}`, which is what the scripted
//! backend keys its canned responses by.

mod live;
mod prompts;
mod scripted;

use std::fmt;
use std::sync::Arc;

use image::RgbImage;
use nalgebra::{Quaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::digest::{canonical_digest, image_digest};
use crate::geometry::CameraView;
use crate::instruction::{instruction_to_value, CrossModalInstruction};

pub use live::{LiveBackend, LiveConfig, ENV_LIVE_TOKEN, ENV_LIVE_URL};
pub use prompts::{render_prompt, template, PROMPT_VERSION};
pub use scripted::{Recorder, RecordingBackend, ScenarioEntry, ScriptedBackend, ScriptedScenario};

/// Allowed relative deviation of a returned quaternion from unit norm.
pub const QUATERNION_NORM_TOL: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("scenario has no {kind} response for request {digest}")]
    ScenarioIncomplete { kind: RequestKind, digest: String },
    #[error("invalid {kind} response: {message}")]
    InvalidResponse { kind: RequestKind, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Keypoints,
    Point,
    Trajectories,
    PoseSchedule,
}

impl RequestKind {
    pub const ALL: [RequestKind; 4] =
        [RequestKind::Keypoints, RequestKind::Point, RequestKind::Trajectories, RequestKind::PoseSchedule];

    pub fn as_str(&self) -> &'static str {
        match self {
            RequestKind::Keypoints => "keypoints",
            RequestKind::Point => "point",
            RequestKind::Trajectories => "trajectories",
            RequestKind::PoseSchedule => "pose_schedule",
        }
    }
}

impl fmt::Display for RequestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct ModelRequest {
    pub kind: RequestKind,
    pub payload: Value,
    /// Named rasters referenced by digest from the payload.
    pub images: Vec<(String, Arc<RgbImage>)>,
}

impl ModelRequest {
    pub fn digest(&self) -> String {
        canonical_digest(&json!({ "kind": self.kind, "payload": self.payload }))
    }
}

pub trait ModelBackend: Send + Sync {
    /// Provenance label, e.g. `scripted:SCEN-SLIDE` or `live`.
    fn name(&self) -> String;
    fn call(&self, request: &ModelRequest) -> Result<Value, ModelError>;
}

/// The two model roles used by the pipeline.
#[derive(Clone)]
pub struct Backends {
    pub reasoning: Arc<dyn ModelBackend>,
    pub pointing: Arc<dyn ModelBackend>,
}

impl Backends {
    pub fn scripted(scenario: ScriptedScenario) -> Self {
        let b: Arc<dyn ModelBackend> = Arc::new(ScriptedBackend::new(scenario));
        Backends { reasoning: b.clone(), pointing: b }
    }

    pub fn single(backend: Arc<dyn ModelBackend>) -> Self {
        Backends { reasoning: backend.clone(), pointing: backend }
    }

    pub fn name(&self) -> String {
        self.reasoning.name()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointDescriptor {
    pub label: String,
    #[serde(default)]
    pub metadata: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointedKeypoint {
    pub descriptor_index: usize,
    pub view_id: String,
    pub pixel: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseStepRepr", try_from = "PoseStepRepr")]
pub struct PoseStep {
    pub t: usize,
    /// Unit quaternion.
    pub orientation: Quaternion<f64>,
    /// 0 = open, 1 = closed.
    pub gripper: u8,
}

#[derive(Serialize, Deserialize)]
struct PoseStepRepr {
    t: usize,
    quaternion: [f64; 4],
    gripper: u8,
}

impl From<PoseStep> for PoseStepRepr {
    fn from(p: PoseStep) -> Self {
        let q = p.orientation;
        PoseStepRepr { t: p.t, quaternion: [q.w, q.i, q.j, q.k], gripper: p.gripper }
    }
}

impl TryFrom<PoseStepRepr> for PoseStep {
    type Error = String;

    fn try_from(r: PoseStepRepr) -> Result<Self, String> {
        let [w, x, y, z] = r.quaternion;
        let q = Quaternion::new(w, x, y, z);
        if !((q.norm() - 1.0).abs() <= 1e-9) {
            return Err(format!("quaternion at t={} is not unit norm", r.t));
        }
        if r.gripper > 1 {
            return Err(format!("gripper at t={} must be 0 or 1", r.t));
        }
        Ok(PoseStep { t: r.t, orientation: q, gripper: r.gripper })
    }
}

/// Accepts a raw quaternion `[w, x, y, z]` whose norm is within
/// [`QUATERNION_NORM_TOL`] of 1 and normalizes it.
pub fn normalize_quaternion(raw: [f64; 4]) -> Result<Quaternion<f64>, String> {
    let q = Quaternion::new(raw[0], raw[1], raw[2], raw[3]);
    let n = q.norm();
    if !n.is_finite() || raw.iter().any(|v| !v.is_finite()) {
        return Err("non-finite quaternion".into());
    }
    if (n - 1.0).abs() > QUATERNION_NORM_TOL {
        return Err(format!("quaternion norm {n} outside 1 ± {QUATERNION_NORM_TOL}"));
    }
    Ok(q / n)
}

/// One scene view image handed to the models.
#[derive(Debug, Clone)]
pub struct ViewImage {
    pub view: CameraView,
    pub image: Arc<RgbImage>,
}

/// Everything the reasoning model has been shown or has produced so far.
#[derive(Debug, Clone)]
pub struct ReasoningContext {
    pub instruction: CrossModalInstruction,
    pub annotated_image: Arc<RgbImage>,
    pub views: [ViewImage; 2],
    pub descriptors: Vec<KeypointDescriptor>,
    pub pointed: Vec<PointedKeypoint>,
    pub lifted_trajectory: Option<Vec<Vector3<f64>>>,
}

impl ReasoningContext {
    pub fn new(instruction: CrossModalInstruction, annotated_image: Arc<RgbImage>, views: [ViewImage; 2]) -> Self {
        ReasoningContext {
            instruction,
            annotated_image,
            views,
            descriptors: Vec::new(),
            pointed: Vec::new(),
            lifted_trajectory: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for p in &self.pointed {
            if p.descriptor_index >= self.descriptors.len() {
                return Err(ModelError::InvalidRequest(format!("pointed keypoint references descriptor {}", p.descriptor_index)));
            }
            if !self.views.iter().any(|v| v.view.id == p.view_id) {
                return Err(ModelError::InvalidRequest(format!("pointed keypoint references view {}", p.view_id)));
            }
        }
        Ok(())
    }

    fn base_payload(&self) -> serde_json::Map<String, Value> {
        let mut m = serde_json::Map::new();
        m.insert("instruction".into(), instruction_to_value(&self.instruction));
        m.insert("annotated_image".into(), Value::String(image_digest(&self.annotated_image)));
        m.insert(
            "views".into(),
            Value::Array(
                self.views
                    .iter()
                    .map(|v| json!({ "id": v.view.id, "image": image_digest(&v.image) }))
                    .collect(),
            ),
        );
        m
    }

    fn images(&self) -> Vec<(String, Arc<RgbImage>)> {
        let mut out = vec![("instruction_image".to_string(), self.annotated_image.clone())];
        for v in &self.views {
            out.push((v.view.id.clone(), v.image.clone()));
        }
        out
    }

    pub fn keypoints_request(&self) -> ModelRequest {
        ModelRequest { kind: RequestKind::Keypoints, payload: Value::Object(self.base_payload()), images: self.images() }
    }

    pub fn trajectories_request(&self) -> ModelRequest {
        let mut m = self.base_payload();
        m.insert("descriptors".into(), serde_json::to_value(&self.descriptors).unwrap());
        m.insert("pointed".into(), serde_json::to_value(&self.pointed).unwrap());
        ModelRequest { kind: RequestKind::Trajectories, payload: Value::Object(m), images: self.images() }
    }

    pub fn pose_request(&self, lifted: &[Vector3<f64>]) -> ModelRequest {
        let mut m = self.base_payload();
        m.insert("descriptors".into(), serde_json::to_value(&self.descriptors).unwrap());
        m.insert("pointed".into(), serde_json::to_value(&self.pointed).unwrap());
        m.insert(
            "lifted_trajectory".into(),
            Value::Array(lifted.iter().map(|p| json!([p.x, p.y, p.z])).collect()),
        );
        ModelRequest { kind: RequestKind::PoseSchedule, payload: Value::Object(m), images: self.images() }
    }
}

fn invalid(kind: RequestKind, message: impl Into<String>) -> ModelError {
    ModelError::InvalidResponse { kind, message: message.into() }
}

fn parse_field<T: for<'de> Deserialize<'de>>(kind: RequestKind, response: &Value, field: &str) -> Result<T, ModelError> {
    let v = response.get(field).ok_or_else(|| invalid(kind, format!("missing field {field:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| invalid(kind, format!("{field}: {e}")))
}

fn finite_point(kind: RequestKind, p: [f64; 2]) -> Result<Vector2<f64>, ModelError> {
    if p[0].is_finite() && p[1].is_finite() {
        Ok(Vector2::new(p[0], p[1]))
    } else {
        Err(invalid(kind, "non-finite pixel"))
    }
}

/// Asks the reasoning model for semantic keypoint descriptors.
pub fn request_keypoints(backend: &dyn ModelBackend, context: &ReasoningContext) -> Result<Vec<KeypointDescriptor>, ModelError> {
    if !context.descriptors.is_empty() {
        return Err(ModelError::InvalidRequest("context already has descriptors".into()));
    }
    let kind = RequestKind::Keypoints;
    let response = backend.call(&context.keypoints_request())?;
    let descriptors: Vec<KeypointDescriptor> = parse_field(kind, &response, "keypoints")?;
    if descriptors.is_empty() {
        return Err(invalid(kind, "no keypoints returned"));
    }
    if let Some(i) = descriptors.iter().position(|d| d.label.is_empty()) {
        return Err(invalid(kind, format!("keypoint {i} has an empty label")));
    }
    Ok(descriptors)
}

/// A pointed keypoint plus a warning when the returned pixel was clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub keypoint: PointedKeypoint,
    pub warning: Option<String>,
}

pub fn point_request(descriptor: &KeypointDescriptor, image: &RgbImage, view_id: &str) -> ModelRequest {
    ModelRequest {
        kind: RequestKind::Point,
        payload: json!({
            "descriptor": descriptor,
            "view_id": view_id,
            "image": image_digest(image),
        }),
        images: vec![(view_id.to_string(), Arc::new(image.clone()))],
    }
}

/// Asks the pointing model for the pixel of one descriptor in one view.
/// Out-of-bounds pixels are clamped into the image.
pub fn point_keypoint(
    backend: &dyn ModelBackend,
    descriptor_index: usize,
    descriptor: &KeypointDescriptor,
    image: &RgbImage,
    view_id: &str,
) -> Result<PointResult, ModelError> {
    if descriptor.label.is_empty() {
        return Err(ModelError::InvalidRequest("empty descriptor label".into()));
    }
    if image.width() == 0 || image.height() == 0 {
        return Err(ModelError::InvalidRequest("empty image".into()));
    }
    let kind = RequestKind::Point;
    let response = backend.call(&point_request(descriptor, image, view_id))?;
    let raw = finite_point(kind, parse_field(kind, &response, "pixel")?)?;
    let (pixel, warning) = clamp_pixel(raw, image.width(), image.height());
    Ok(PointResult {
        keypoint: PointedKeypoint { descriptor_index, view_id: view_id.to_string(), pixel: [pixel.x, pixel.y] },
        warning,
    })
}

/// Clamps into `[0, width-1] × [0, height-1]`; idempotent.
pub fn clamp_pixel(p: Vector2<f64>, width: u32, height: u32) -> (Vector2<f64>, Option<String>) {
    let c = Vector2::new(p.x.clamp(0.0, (width - 1) as f64), p.y.clamp(0.0, (height - 1) as f64));
    let warning = (c != p).then(|| format!("pixel ({}, {}) clamped to ({}, {})", p.x, p.y, c.x, c.y));
    (c, warning)
}

/// Asks the reasoning model to draw one 2D trajectory per view. Returned
/// polylines are raw; callers resample them to a common horizon.
pub fn request_pixel_trajectories(
    backend: &dyn ModelBackend,
    context: &ReasoningContext,
) -> Result<(Vec<Vector2<f64>>, Vec<Vector2<f64>>), ModelError> {
    if context.descriptors.is_empty() {
        return Err(ModelError::InvalidRequest("context has no descriptors".into()));
    }
    context.validate()?;
    let kind = RequestKind::Trajectories;
    let response = backend.call(&context.trajectories_request())?;
    let polylines: Vec<Vec<[f64; 2]>> = parse_field(kind, &response, "polylines")?;
    if polylines.len() != 2 {
        return Err(invalid(kind, format!("expected 2 polylines, got {}", polylines.len())));
    }
    let mut out = Vec::with_capacity(2);
    for (m, poly) in polylines.into_iter().enumerate() {
        if poly.len() < 2 {
            return Err(invalid(kind, format!("polyline {} has {} point(s)", m + 1, poly.len())));
        }
        out.push(poly.into_iter().map(|p| finite_point(kind, p)).collect::<Result<Vec<_>, _>>()?);
    }
    let second = out.pop().unwrap();
    Ok((out.pop().unwrap(), second))
}

/// Minimum distance from `polyline` to each pointed keypoint of `view_id`,
/// as `(descriptor_index, distance_px)`.
pub fn polyline_keypoint_distances(
    polyline: &[Vector2<f64>],
    pointed: &[PointedKeypoint],
    view_id: &str,
) -> Vec<(usize, f64)> {
    let seg_dist = |p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>| {
        let d = b - a;
        let t = if d.norm_squared() > 0.0 { ((p - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0) } else { 0.0 };
        (p - (a + d * t)).norm()
    };
    pointed
        .iter()
        .filter(|k| k.view_id == view_id)
        .map(|k| {
            let p = Vector2::new(k.pixel[0], k.pixel[1]);
            let d = polyline.windows(2).map(|w| seg_dist(p, w[0], w[1])).fold(f64::INFINITY, f64::min);
            (k.descriptor_index, d)
        })
        .collect()
}

#[derive(Deserialize)]
struct RawPoseStep {
    quaternion: [f64; 4],
    gripper: u8,
}

/// Asks the reasoning model for an orientation and gripper state per lifted waypoint.
pub fn request_pose_schedule(backend: &dyn ModelBackend, context: &ReasoningContext) -> Result<Vec<PoseStep>, ModelError> {
    let lifted = context
        .lifted_trajectory
        .as_ref()
        .ok_or_else(|| ModelError::InvalidRequest("context has no lifted trajectory".into()))?;
    let kind = RequestKind::PoseSchedule;
    let response = backend.call(&context.pose_request(lifted))?;
    let steps: Vec<RawPoseStep> = parse_field(kind, &response, "steps")?;
    if steps.len() != lifted.len() {
        return Err(invalid(kind, format!("expected {} steps, got {}", lifted.len(), steps.len())));
    }
    steps
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let orientation = normalize_quaternion(s.quaternion).map_err(|m| invalid(kind, format!("step {}: {m}", i + 1)))?;
            if s.gripper > 1 {
                return Err(invalid(kind, format!("step {}: gripper must be 0 or 1", i + 1)));
            }
            Ok(PoseStep { t: i + 1, orientation, gripper: s.gripper })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose};
    use crate::instruction::parse_instruction;
    use std::sync::Mutex;

    /// Returns canned values per kind and records requests.
    struct Canned {
        responses: Vec<(RequestKind, Value)>,
        seen: Mutex<Vec<ModelRequest>>,
    }

    impl ModelBackend for Canned {
        fn name(&self) -> String {
            "canned".into()
        }
        fn call(&self, request: &ModelRequest) -> Result<Value, ModelError> {
            self.seen.lock().unwrap().push(request.clone());
            self.responses
                .iter()
                .find(|(k, _)| *k == request.kind)
                .map(|(_, v)| v.clone())
                .ok_or(ModelError::ScenarioIncomplete { kind: request.kind, digest: request.digest() })
        }
    }

    fn canned(responses: Vec<(RequestKind, Value)>) -> Canned {
        Canned { responses, seen: Mutex::new(Vec::new()) }
    }

    fn context() -> ReasoningContext {
        let instr = parse_instruction(
            br#"{"version":"crossinstruct/1","image_ref":"view_1","labels":[{"text":"push","anchor":[1,1]}]}"#,
        )
        .unwrap();
        let view = |id: &str| ViewImage {
            view: CameraView {
                id: id.into(),
                intrinsics: CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 50.0, cy: 50.0, width: 100, height: 100 },
                pose: CameraPose::identity(),
            },
            image: Arc::new(RgbImage::new(100, 100)),
        };
        ReasoningContext::new(instr, Arc::new(RgbImage::new(100, 100)), [view("view_1"), view("view_2")])
    }

    #[test]
    fn keypoints_are_validated() {
        let ctx = context();
        let ok = canned(vec![(RequestKind::Keypoints, json!({"keypoints": [{"label": "a", "metadata": "m"}]}))]);
        assert_eq!(request_keypoints(&ok, &ctx).unwrap()[0].label, "a");
        let empty = canned(vec![(RequestKind::Keypoints, json!({"keypoints": []}))]);
        assert!(matches!(request_keypoints(&empty, &ctx), Err(ModelError::InvalidResponse { .. })));
        let missing = canned(vec![]);
        assert!(matches!(request_keypoints(&missing, &ctx), Err(ModelError::ScenarioIncomplete { .. })));
    }

    #[test]
    fn out_of_bounds_point_is_clamped_with_warning() {
        let b = canned(vec![(RequestKind::Point, json!({"pixel": [-3.0, 50.0]}))]);
        let d = KeypointDescriptor { label: "x".into(), metadata: String::new() };
        let r = point_keypoint(&b, 0, &d, &RgbImage::new(100, 100), "view_1").unwrap();
        assert_eq!(r.keypoint.pixel, [0.0, 50.0]);
        assert!(r.warning.is_some());
    }

    #[test]
    fn clamping_is_idempotent() {
        for p in [Vector2::new(-3.0, 50.0), Vector2::new(140.0, -1.0), Vector2::new(5.0, 5.0)] {
            let (c1, _) = clamp_pixel(p, 100, 100);
            let (c2, w2) = clamp_pixel(c1, 100, 100);
            assert_eq!(c1, c2);
            assert!(w2.is_none());
        }
    }

    #[test]
    fn trajectories_need_two_points_each() {
        let mut ctx = context();
        ctx.descriptors.push(KeypointDescriptor { label: "a".into(), metadata: String::new() });
        let ok = canned(vec![(RequestKind::Trajectories, json!({"polylines": [[[1, 2], [3, 4]], [[5, 6], [7, 8], [9, 9]]]}))]);
        let (a, b) = request_pixel_trajectories(&ok, &ctx).unwrap();
        assert_eq!((a.len(), b.len()), (2, 3));
        let bad = canned(vec![(RequestKind::Trajectories, json!({"polylines": [[[1, 2]], [[5, 6], [7, 8]]]}))]);
        assert!(matches!(request_pixel_trajectories(&bad, &ctx), Err(ModelError::InvalidResponse { .. })));
    }

    #[test]
    fn keypoint_distance_diagnostic() {
        let poly = vec![Vector2::new(0.0, 0.0), Vector2::new(10.0, 0.0)];
        let pointed = vec![
            PointedKeypoint { descriptor_index: 0, view_id: "a".into(), pixel: [5.0, 3.0] },
            PointedKeypoint { descriptor_index: 1, view_id: "b".into(), pixel: [5.0, 3.0] },
            PointedKeypoint { descriptor_index: 2, view_id: "a".into(), pixel: [13.0, 4.0] },
        ];
        assert_eq!(polyline_keypoint_distances(&poly, &pointed, "a"), vec![(0, 3.0), (2, 5.0)]);
    }

    fn pose_ctx(h: usize) -> ReasoningContext {
        let mut ctx = context();
        ctx.lifted_trajectory = Some(vec![Vector3::zeros(); h]);
        ctx
    }

    fn steps(n: usize, q: [f64; 4]) -> Value {
        json!({"steps": (0..n).map(|_| json!({"quaternion": q, "gripper": 0})).collect::<Vec<_>>()})
    }

    #[test]
    fn pose_schedule_rules() {
        let ok = canned(vec![(RequestKind::PoseSchedule, steps(20, [1.0, 0.0, 0.0, 0.0]))]);
        let s = request_pose_schedule(&ok, &pose_ctx(20)).unwrap();
        assert_eq!(s.len(), 20);
        assert_eq!(s[19].t, 20);

        let short = canned(vec![(RequestKind::PoseSchedule, steps(19, [1.0, 0.0, 0.0, 0.0]))]);
        assert!(matches!(request_pose_schedule(&short, &pose_ctx(20)), Err(ModelError::InvalidResponse { .. })));

        let near = canned(vec![(RequestKind::PoseSchedule, steps(2, [1.05, 0.0, 0.0, 0.0]))]);
        assert_eq!(request_pose_schedule(&near, &pose_ctx(2)).unwrap()[0].orientation, Quaternion::new(1.0, 0.0, 0.0, 0.0));

        let far = canned(vec![(RequestKind::PoseSchedule, steps(2, [2.0, 0.0, 0.0, 0.0]))]);
        assert!(matches!(request_pose_schedule(&far, &pose_ctx(2)), Err(ModelError::InvalidResponse { .. })));

        assert!(request_pose_schedule(&ok, &context()).is_err());
    }

    #[test]
    fn quaternion_normalization_is_idempotent() {
        let q = normalize_quaternion([0.7, 0.1, -0.7, 0.05]).unwrap();
        let again = normalize_quaternion([q.w, q.i, q.j, q.k]).unwrap();
        assert!((q - again).norm() <= 1e-15);
        assert!(normalize_quaternion([f64::NAN, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn request_digest_ignores_raw_image_attachment_but_not_pixels() {
        let ctx = context();
        let a = ctx.keypoints_request();
        let mut other = ctx.clone();
        let mut img = RgbImage::new(100, 100);
        img.put_pixel(3, 3, image::Rgb([1, 2, 3]));
        other.annotated_image = Arc::new(img);
        assert_ne!(a.digest(), other.keypoints_request().digest());
        assert_eq!(a.digest(), ctx.keypoints_request().digest());
    }
}
