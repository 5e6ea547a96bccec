//! Versioned prompt templates for the live backend.
//!
//! Placeholders: `{INSTRUCTION_IMAGE}`, `{VIEWS}`, `{KEYPOINTS}`,
//! `{TRAJECTORY_3D}` and `{LABEL}`. Images are referenced by attachment name
//! as `[image:<name>]`.

use serde_json::{json, Value};

use super::{ModelRequest, RequestKind};

pub const PROMPT_VERSION: &str = "prompts/1";

pub fn template(kind: RequestKind) -> &'static str {
    match kind {
        RequestKind::Keypoints => include_str!("../../prompts/keypoints.txt"),
        RequestKind::Point => include_str!("../../prompts/point.txt"),
        RequestKind::Trajectories => include_str!("../../prompts/trajectories.txt"),
        RequestKind::PoseSchedule => include_str!("../../prompts/pose_schedule.txt"),
    }
}

fn compact(v: &Value) -> String {
    serde_json::to_string(v).unwrap_or_default()
}

pub fn render_prompt(request: &ModelRequest) -> String {
    let p = &request.payload;
    let views = p["views"]
        .as_array()
        .map(|vs| {
            vs.iter()
                .filter_map(|v| v["id"].as_str())
                .map(|id| format!("[image:{id}]"))
                .collect::<Vec<_>>()
                .join(", ")
        })
        .unwrap_or_default();
    let keypoints = compact(&json!({ "descriptors": p["descriptors"], "pointed": p["pointed"] }));
    let label = match p["descriptor"]["metadata"].as_str() {
        Some(m) if !m.is_empty() => format!("{} ({m})", p["descriptor"]["label"].as_str().unwrap_or_default()),
        _ => p["descriptor"]["label"].as_str().unwrap_or_default().to_string(),
    };
    template(request.kind)
        .replace("{INSTRUCTION_IMAGE}", "[image:instruction_image]")
        .replace("{VIEWS}", &views)
        .replace("{KEYPOINTS}", &keypoints)
        .replace("{TRAJECTORY_3D}", &compact(&p["lifted_trajectory"]))
        .replace("{LABEL}", &label)
}
