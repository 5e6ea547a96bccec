//! Request and response bodies of the `/api/v1` HTTP interface.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sketchlift_core::instruction::Diagnostic;
use sketchlift_core::lifting::PixelTrajectory;
use sketchlift_core::models::{KeypointDescriptor, PointedKeypoint};
use sketchlift_core::pipeline::TraceRecord;
use sketchlift_core::rl::CurvePoint;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    /// `validation`, `not-found`, `conflict`, `transport`, `scenario-incomplete`,
    /// `model-response`, `numerical` or `internal`.
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ApiError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneCreated {
    pub scene_id: String,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionRequest {
    /// A `crossinstruct/1` document.
    pub instruction: Value,
    /// Scene whose view ids `image_ref` may name.
    #[serde(default)]
    pub scene_id: Option<String>,
    /// Standalone annotated image, base64 PNG.
    #[serde(default)]
    pub image_png_base64: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionCreated {
    pub instruction_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRequest {
    pub instruction_id: String,
    pub scene_id: String,
    /// Pipeline configuration; omitted fields take their defaults.
    #[serde(default)]
    pub config: Option<Value>,
    /// `scripted:<scenario name>` or `live`.
    pub backend: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanCreated {
    pub plan_id: String,
    pub status_url: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Done,
    Failed,
}

/// Pipeline outputs the UI overlays on the scene views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOverlay {
    pub descriptors: Vec<KeypointDescriptor>,
    pub pointed: Vec<PointedKeypoint>,
    pub raw_polylines: [Vec<[f64; 2]>; 2],
    pub pixel_trajectories: [PixelTrajectory; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanView {
    pub id: String,
    pub status: RunStatus,
    pub created_at: String,
    pub scene_id: String,
    pub instruction_id: String,
    pub backend: String,
    #[serde(default)]
    pub plan: Option<Value>,
    #[serde(default)]
    pub overlay: Option<PlanOverlay>,
    #[serde(default)]
    pub trace: Vec<TraceRecord>,
    #[serde(default)]
    pub error: Option<ApiError>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplesRequest {
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesResponse {
    pub plan_id: String,
    pub seed: u64,
    pub trajectories: Vec<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    /// Demonstration dataset in JSON lines.
    #[serde(default)]
    pub demo_jsonl: Option<String>,
    /// Id of a finished plan whose distribution generates the demos.
    #[serde(default)]
    pub from_plan: Option<String>,
    #[serde(default)]
    pub rollouts: Option<usize>,
    /// Reach experiment configuration; omitted fields take their defaults.
    #[serde(default)]
    pub config: Option<Value>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainCreated {
    pub train_id: String,
    pub status_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainView {
    pub id: String,
    pub status: RunStatus,
    pub created_at: String,
    #[serde(default)]
    pub curve: Vec<CurvePoint>,
    /// Artifact names, fetchable under `artifacts/{name}`.
    #[serde(default)]
    pub artifacts: Vec<String>,
    #[serde(default)]
    pub summary: Option<Value>,
    #[serde(default)]
    pub error: Option<ApiError>,
}
