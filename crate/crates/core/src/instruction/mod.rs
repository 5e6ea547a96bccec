//! Cross-modal instructions (scene image, strokes, text labels) and scene
//! bundles (two calibrated views).
//!
//! Instructions are stored as JSON tagged with [`INSTRUCTION_VERSION`]:
//!
//! ```json
//! {"version": "crossinstruct/1", "image_ref": "view_1", "image_size": [100, 100],
//!  "strokes": [{"kind": "arrow", "points": [[10, 10], [40, 12]], "style": {"rgba": [255, 0, 0, 255], "width": 2}}],
//!  "labels": [{"text": "push", "anchor": [12, 30]}]}
//! ```
//!
//! `image_size` is optional; when present, bounds are checked at parse time,
//! otherwise they are checked once the referenced image is known.

pub(crate) mod raster;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, CameraPose, CameraView};

pub use raster::{draw_segment, label_box, rasterize_overlay, stroke_segments, Segment, GLYPH_SIZE, LABEL_COLOR};

pub const INSTRUCTION_VERSION: &str = "crossinstruct/1";
pub const DEFAULT_MIN_BASELINE_DEG: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InstructionError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },
    #[error("image is {actual:?} but instruction expects {expected:?}")]
    DimensionMismatch { expected: [u32; 2], actual: [u32; 2] },
}

impl InstructionError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        InstructionError::Validation { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrokeKind {
    Freehand,
    Arrow,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrokeStyle {
    pub rgba: [u8; 4],
    /// Line width in pixels, at least 1.
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stroke {
    pub kind: StrokeKind,
    pub points: Vec<[f64; 2]>,
    pub style: StrokeStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextLabel {
    pub text: String,
    pub anchor: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalInstruction {
    pub image_ref: String,
    pub image_size: Option<[u32; 2]>,
    pub strokes: Vec<Stroke>,
    pub labels: Vec<TextLabel>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstructionDoc {
    version: String,
    image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_size: Option<[u32; 2]>,
    #[serde(default)]
    strokes: Vec<Stroke>,
    #[serde(default)]
    labels: Vec<TextLabel>,
}

impl From<&CrossModalInstruction> for InstructionDoc {
    fn from(i: &CrossModalInstruction) -> Self {
        InstructionDoc {
            version: INSTRUCTION_VERSION.to_string(),
            image_ref: i.image_ref.clone(),
            image_size: i.image_size,
            strokes: i.strokes.clone(),
            labels: i.labels.clone(),
        }
    }
}

impl CrossModalInstruction {
    /// Checks every invariant that does not depend on the image itself.
    pub fn validate(&self) -> Result<(), InstructionError> {
        if self.image_ref.is_empty() {
            return Err(InstructionError::invalid("image_ref", "empty image reference"));
        }
        if self.strokes.is_empty() && self.labels.is_empty() {
            return Err(InstructionError::invalid("strokes/labels", "no annotations"));
        }
        for (i, s) in self.strokes.iter().enumerate() {
            if s.points.len() < 2 {
                return Err(InstructionError::invalid(format!("strokes[{i}].points"), "stroke needs at least 2 points"));
            }
            if !(s.style.width.is_finite() && s.style.width >= 1.0) {
                return Err(InstructionError::invalid(format!("strokes[{i}].style.width"), "width must be >= 1"));
            }
        }
        for (i, l) in self.labels.iter().enumerate() {
            if l.text.is_empty() {
                return Err(InstructionError::invalid(format!("labels[{i}].text"), "empty label text"));
            }
        }
        match self.image_size {
            Some([w, h]) => self.validate_bounds(w, h),
            None => self.check_points(|p| p[0] >= 0.0 && p[1] >= 0.0),
        }
    }

    /// Checks that every stroke point and anchor lies inside a `width × height` image.
    pub fn validate_bounds(&self, width: u32, height: u32) -> Result<(), InstructionError> {
        let (w, h) = (width as f64, height as f64);
        self.check_points(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] < w && p[1] < h)
    }

    fn check_points(&self, inside: impl Fn(&[f64; 2]) -> bool) -> Result<(), InstructionError> {
        for (i, s) in self.strokes.iter().enumerate() {
            for (j, p) in s.points.iter().enumerate() {
                if !(p[0].is_finite() && p[1].is_finite() && inside(p)) {
                    return Err(InstructionError::invalid(format!("strokes[{i}].points[{j}]"), "point out of bounds"));
                }
            }
        }
        for (i, l) in self.labels.iter().enumerate() {
            if !(l.anchor[0].is_finite() && l.anchor[1].is_finite() && inside(&l.anchor)) {
                return Err(InstructionError::invalid(format!("labels[{i}].anchor"), "anchor out of bounds"));
            }
        }
        Ok(())
    }
}

fn byte_offset(bytes: &[u8], err: &serde_json::Error) -> usize {
    if err.line() == 0 {
        return bytes.len();
    }
    let mut line = 1;
    for (i, b) in bytes.iter().enumerate() {
        if line == err.line() {
            return (i + err.column().saturating_sub(1)).min(bytes.len());
        }
        if *b == b'\n' {
            line += 1;
        }
    }
    bytes.len()
}

fn parse_doc(bytes: &[u8], value: serde_json::Value) -> Result<CrossModalInstruction, InstructionError> {
    let doc: InstructionDoc = serde_json::from_value(value).map_err(|e| InstructionError::Parse {
        offset: byte_offset(bytes, &e),
        message: e.to_string(),
    })?;
    if doc.version != INSTRUCTION_VERSION {
        return Err(InstructionError::invalid("version", format!("unsupported version {:?}", doc.version)));
    }
    let instr = CrossModalInstruction {
        image_ref: doc.image_ref,
        image_size: doc.image_size,
        strokes: doc.strokes,
        labels: doc.labels,
    };
    instr.validate()?;
    Ok(instr)
}

fn parse_value(bytes: &[u8]) -> Result<serde_json::Value, InstructionError> {
    serde_json::from_slice(bytes)
        .map_err(|e| InstructionError::Parse { offset: byte_offset(bytes, &e), message: e.to_string() })
}

pub fn parse_instruction(bytes: &[u8]) -> Result<CrossModalInstruction, InstructionError> {
    let value = parse_value(bytes)?;
    parse_doc(bytes, value)
}

/// Parses either a single instruction document or a JSON array of them.
pub fn parse_instruction_set(bytes: &[u8]) -> Result<Vec<CrossModalInstruction>, InstructionError> {
    match parse_value(bytes)? {
        serde_json::Value::Array(items) => items.into_iter().map(|v| parse_doc(bytes, v)).collect(),
        v => Ok(vec![parse_doc(bytes, v)?]),
    }
}

pub fn serialize_instruction(instr: &CrossModalInstruction) -> Vec<u8> {
    serde_json::to_vec(&InstructionDoc::from(instr)).expect("instruction serializes")
}

pub fn instruction_to_value(instr: &CrossModalInstruction) -> serde_json::Value {
    serde_json::to_value(InstructionDoc::from(instr)).expect("instruction serializes")
}

/// Intrinsics and pose of one scene view, in the calibration file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewCalibration {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneView {
    pub id: String,
    /// Path to an 8-bit RGB PNG, relative to the bundle file.
    pub image_path: String,
    pub calibration: ViewCalibration,
}

impl SceneView {
    pub fn camera(&self) -> CameraView {
        CameraView {
            id: self.id.clone(),
            intrinsics: self.calibration.intrinsics,
            pose: self.calibration.pose,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBundle {
    pub views: Vec<SceneView>,
}

impl SceneBundle {
    pub fn from_json(bytes: &[u8]) -> Result<Self, InstructionError> {
        serde_json::from_slice(bytes)
            .map_err(|e| InstructionError::Parse { offset: byte_offset(bytes, &e), message: e.to_string() })
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("scene bundle serializes")
    }

    pub fn cameras(&self) -> Vec<CameraView> {
        self.views.iter().map(SceneView::camera).collect()
    }

    /// Resolves image paths against `base`.
    pub fn image_paths(&self, base: &Path) -> Vec<PathBuf> {
        self.views.iter().map(|v| base.join(&v.image_path)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Diagnostic { code: code.to_string(), message: message.into() }
    }
}

/// Angle in degrees between the two optical axes.
pub fn baseline_angle_deg(a: &CameraView, b: &CameraView) -> f64 {
    let cos = a.pose.optical_axis().dot(&b.pose.optical_axis()).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

/// Returns one diagnostic per violated scene invariant; empty means valid.
pub fn validate_scene_bundle(bundle: &SceneBundle, min_baseline_deg: f64) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if bundle.views.len() != 2 {
        out.push(Diagnostic::new("view-count", format!("expected exactly 2 views, found {}", bundle.views.len())));
    }
    let mut seen = HashSet::new();
    for v in &bundle.views {
        if !seen.insert(v.id.as_str()) {
            out.push(Diagnostic::new("duplicate-id", format!("duplicate id {:?}", v.id)));
        }
        if let Err(e) = v.camera().validate() {
            out.push(Diagnostic::new("calibration", e.to_string()));
        }
    }
    if let [a, b] = bundle.views.as_slice() {
        let angle = baseline_angle_deg(&a.camera(), &b.camera());
        if !(angle >= min_baseline_deg) {
            out.push(Diagnostic::new(
                "baseline",
                format!("baseline angle {angle:.1}° < {min_baseline_deg}°"),
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"{"version":"crossinstruct/1","image_ref":"view_1","image_size":[100,100],
        "strokes":[{"kind":"arrow","points":[[10,10],[40,12]],"style":{"rgba":[255,0,0,255],"width":2}}],
        "labels":[{"text":"push","anchor":[12,30]}]}"#;

    #[test]
    fn parses_minimal_document() {
        let i = parse_instruction(MINIMAL.as_bytes()).unwrap();
        assert_eq!(i.strokes.len(), 1);
        assert_eq!(i.labels.len(), 1);
        assert_eq!(i.strokes[0].kind, StrokeKind::Arrow);
    }

    #[test]
    fn rejects_empty_annotations() {
        let doc = r#"{"version":"crossinstruct/1","image_ref":"x","strokes":[],"labels":[]}"#;
        let e = parse_instruction(doc.as_bytes()).unwrap_err();
        assert!(e.to_string().contains("no annotations"), "{e}");
    }

    #[test]
    fn rejects_negative_anchor() {
        let doc = r#"{"version":"crossinstruct/1","image_ref":"x","labels":[{"text":"a","anchor":[-5,10]}]}"#;
        match parse_instruction(doc.as_bytes()).unwrap_err() {
            InstructionError::Validation { field, message } => {
                assert_eq!(field, "labels[0].anchor");
                assert_eq!(message, "anchor out of bounds");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn anchor_beyond_declared_size_is_rejected() {
        let doc = r#"{"version":"crossinstruct/1","image_ref":"x","image_size":[10,10],"labels":[{"text":"a","anchor":[10,3]}]}"#;
        assert!(parse_instruction(doc.as_bytes()).is_err());
    }

    #[test]
    fn syntax_error_reports_byte_offset() {
        let doc = "{\"version\":\"crossinstruct/1\",\n \"image_ref\": x}";
        match parse_instruction(doc.as_bytes()).unwrap_err() {
            InstructionError::Parse { offset, .. } => assert_eq!(&doc[offset..offset + 1], "x"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn wrong_version_and_unknown_fields_rejected() {
        let doc = MINIMAL.replace("crossinstruct/1", "crossinstruct/9");
        assert!(parse_instruction(doc.as_bytes()).is_err());
        let doc = MINIMAL.replace("\"image_ref\"", "\"extra\":1,\"image_ref\"");
        assert!(matches!(parse_instruction(doc.as_bytes()), Err(InstructionError::Parse { .. })));
    }

    #[test]
    fn unicode_label_round_trips() {
        let doc = r#"{"version":"crossinstruct/1","image_ref":"x","labels":[{"text":"repeat 3x ←","anchor":[1,2]}]}"#;
        let i = parse_instruction(doc.as_bytes()).unwrap();
        let back = parse_instruction(&serialize_instruction(&i)).unwrap();
        assert_eq!(back.labels[0].text, "repeat 3x ←");
        assert_eq!(back, i);
    }

    #[test]
    fn instruction_set_accepts_array_or_single() {
        let arr = format!("[{MINIMAL},{MINIMAL}]");
        assert_eq!(parse_instruction_set(arr.as_bytes()).unwrap().len(), 2);
        assert_eq!(parse_instruction_set(MINIMAL.as_bytes()).unwrap().len(), 1);
    }

    fn view(id: &str, origin: [f64; 3], target: [f64; 3]) -> SceneView {
        SceneView {
            id: id.into(),
            image_path: format!("{id}.png"),
            calibration: ViewCalibration {
                intrinsics: CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 50.0, cy: 50.0, width: 100, height: 100 },
                pose: CameraPose::look_at(origin.into(), target.into(), Vector3::new(0.0, 1.0, 0.0)).unwrap(),
            },
        }
    }

    #[test]
    fn scene_validation_cases() {
        let ok = SceneBundle { views: vec![view("a", [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]), view("b", [1.0, 0.0, 1.0], [0.0, 0.0, 1.0])] };
        assert!(validate_scene_bundle(&ok, DEFAULT_MIN_BASELINE_DEG).is_empty());

        let same = SceneBundle { views: vec![view("a", [0.0; 3], [0.0, 0.0, 1.0]), view("b", [0.0; 3], [0.0, 0.0, 1.0])] };
        let d = validate_scene_bundle(&same, DEFAULT_MIN_BASELINE_DEG);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].message, "baseline angle 0.0° < 10°");

        let dup = SceneBundle { views: vec![view("a", [0.0; 3], [0.0, 0.0, 1.0]), view("a", [1.0, 0.0, 1.0], [0.0, 0.0, 1.0])] };
        let d = validate_scene_bundle(&dup, DEFAULT_MIN_BASELINE_DEG);
        assert_eq!(d.len(), 1);
        assert!(d[0].message.contains("duplicate id"));

        let one = SceneBundle { views: vec![view("a", [0.0; 3], [0.0, 0.0, 1.0])] };
        assert_eq!(validate_scene_bundle(&one, DEFAULT_MIN_BASELINE_DEG)[0].code, "view-count");
    }

    pub(crate) fn arb_instruction() -> impl Strategy<Value = CrossModalInstruction> {
        let point = prop::array::uniform2(0.0..640.0f64);
        let stroke = (
            prop_oneof![Just(StrokeKind::Freehand), Just(StrokeKind::Arrow), Just(StrokeKind::Boundary)],
            prop::collection::vec(point.clone(), 2..12),
            prop::array::uniform4(any::<u8>()),
            1.0..8.0f64,
        )
            .prop_map(|(kind, points, rgba, width)| Stroke { kind, points, style: StrokeStyle { rgba, width } });
        let label = ("\\PC{1,16}", point).prop_map(|(text, anchor)| TextLabel { text, anchor });
        (
            "[a-z0-9_./]{1,12}",
            prop::option::of(Just([640u32, 640u32])),
            prop::collection::vec(stroke, 0..4),
            prop::collection::vec(label, 0..4),
        )
            .prop_filter("at least one annotation", |(_, _, s, l)| !s.is_empty() || !l.is_empty())
            .prop_map(|(image_ref, image_size, strokes, labels)| CrossModalInstruction { image_ref, image_size, strokes, labels })
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(instr in arb_instruction()) {
            let bytes = serialize_instruction(&instr);
            let back = parse_instruction(&bytes).unwrap();
            prop_assert_eq!(&back, &instr);
            prop_assert_eq!(serialize_instruction(&back), bytes);
        }
    }
}
