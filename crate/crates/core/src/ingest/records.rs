//! Canonical JSON Lines records and their validation.

use std::collections::HashSet;
use std::io::BufRead;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::IngestError;
use crate::geometry::{CameraExtrinsics, CameraIntrinsics, Se3Pose, Vec3};
use crate::vocab::{PoseTuple, MAX_CATEGORY_BYTES};

pub const SCENE_SCHEMA: &str = "posekit-scene/1";
pub const TRAJECTORY_SCHEMA: &str = "posekit-trajectory/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub category: String,
    /// Pixel coordinates of the 2D box center.
    pub box_center_px: [f64; 2],
    /// Object pose in the camera frame.
    pub pose: Se3Pose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<Vec3>,
}

/// One image with its 3D grounding annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub schema_version: String,
    pub id: String,
    pub image_ref: String,
    pub intrinsics: CameraIntrinsics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    pub annotations: Vec<Annotation>,
}

impl SceneRecord {
    /// Box center divided by the image size.
    pub fn normalized_center(&self, annotation: &Annotation) -> [f64; 2] {
        [
            annotation.box_center_px[0] / self.intrinsics.width() as f64,
            annotation.box_center_px[1] / self.intrinsics.height() as f64,
        ]
    }

    pub fn tuples(&self) -> Vec<PoseTuple> {
        self.annotations
            .iter()
            .map(|a| PoseTuple {
                category: a.category.clone(),
                box_center: self.normalized_center(a),
                pose: a.pose,
                size: a.size,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct View {
    pub view_id: String,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

/// One timestep. `ee_pose_base[a]` and `gripper[a]` belong to arm `a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub timestamp: f64,
    pub ee_pose_base: Vec<Se3Pose>,
    pub gripper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub schema_version: String,
    pub id: String,
    pub views: Vec<View>,
    pub frames: Vec<Frame>,
    pub instruction: String,
}

impl TrajectoryRecord {
    pub fn arm_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.ee_pose_base.len())
    }

    pub fn view(&self, view_id: &str) -> Option<&View> {
        self.views.iter().find(|v| v.view_id == view_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Record {
    Scene(SceneRecord),
    Trajectory(TrajectoryRecord),
}

impl Record {
    pub fn id(&self) -> &str {
        match self {
            Record::Scene(s) => &s.id,
            Record::Trajectory(t) => &t.id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Record::Scene(_) => "scene",
            Record::Trajectory(_) => "trajectory",
        }
    }
}

fn schema_error(path: String, message: impl Into<String>) -> IngestError {
    IngestError::Schema {
        path,
        message: message.into(),
    }
}

fn invariant(path: String, message: impl Into<String>) -> IngestError {
    IngestError::InvariantViolation {
        path,
        message: message.into(),
    }
}

/// Deserializes with the failing field reported as a JSON pointer.
fn typed<T: DeserializeOwned>(raw: &Value) -> Result<T, IngestError> {
    serde_path_to_error::deserialize(raw).map_err(|e| {
        let mut pointer = String::new();
        for seg in e.path().iter() {
            match seg {
                serde_path_to_error::Segment::Seq { index } => pointer.push_str(&format!("/{index}")),
                serde_path_to_error::Segment::Map { key } => {
                    pointer.push('/');
                    pointer.push_str(&key.replace('~', "~0").replace('/', "~1"));
                }
                serde_path_to_error::Segment::Enum { .. } | serde_path_to_error::Segment::Unknown => {}
            }
        }
        schema_error(pointer, e.into_inner().to_string())
    })
}

fn expect_version(raw: &Value, expected: &str) -> Result<(), IngestError> {
    match raw.get("schema_version") {
        Some(Value::String(s)) if s == expected => Ok(()),
        Some(other) => Err(schema_error(
            "/schema_version".into(),
            format!("expected \"{expected}\", found {other}"),
        )),
        None => Err(schema_error("/schema_version".into(), "missing field")),
    }
}

pub fn validate_scene(raw: &Value) -> Result<SceneRecord, IngestError> {
    expect_version(raw, SCENE_SCHEMA)?;
    let r: SceneRecord = typed(raw)?;
    let (w, h) = (r.intrinsics.width() as f64, r.intrinsics.height() as f64);
    for (i, a) in r.annotations.iter().enumerate() {
        if a.category.len() > MAX_CATEGORY_BYTES {
            return Err(invariant(
                format!("/annotations/{i}/category"),
                format!("annotation {i}: category longer than {MAX_CATEGORY_BYTES} bytes"),
            ));
        }
        let [u, v] = a.box_center_px;
        if !(0.0..w).contains(&u) || !(0.0..h).contains(&v) {
            return Err(invariant(
                format!("/annotations/{i}/box_center_px"),
                format!("annotation {i}: box center ({u}, {v}) outside [0, {w}) x [0, {h})"),
            ));
        }
        let z = a.pose.translation()[2];
        if z <= 0.0 {
            return Err(invariant(
                format!("/annotations/{i}/pose/translation/2"),
                format!("annotation {i}: object depth z = {z} is not in front of the camera"),
            ));
        }
        if let Some(size) = a.size {
            if let Some(k) = size.iter().position(|d| !(d.is_finite() && *d > 0.0)) {
                return Err(invariant(
                    format!("/annotations/{i}/size/{k}"),
                    format!("annotation {i}: size {size:?} must be positive"),
                ));
            }
        }
    }
    Ok(r)
}

pub fn validate_trajectory(raw: &Value) -> Result<TrajectoryRecord, IngestError> {
    expect_version(raw, TRAJECTORY_SCHEMA)?;
    let r: TrajectoryRecord = typed(raw)?;
    if r.views.is_empty() {
        return Err(invariant("/views".into(), "at least one view is required"));
    }
    let mut seen = HashSet::new();
    for (i, v) in r.views.iter().enumerate() {
        if !seen.insert(v.view_id.as_str()) {
            return Err(invariant(
                format!("/views/{i}/view_id"),
                format!("duplicate view id {:?}", v.view_id),
            ));
        }
    }
    if r.frames.len() < 2 {
        return Err(invariant("/frames".into(), format!("{} frames, at least 2 required", r.frames.len())));
    }
    let arms = r.arm_count();
    if arms == 0 {
        return Err(invariant("/frames/0/ee_pose_base".into(), "frame has no arms"));
    }
    for (i, f) in r.frames.iter().enumerate() {
        if !f.timestamp.is_finite() {
            return Err(invariant(format!("/frames/{i}/timestamp"), "timestamp is not finite"));
        }
        if i > 0 && f.timestamp <= r.frames[i - 1].timestamp {
            return Err(invariant(
                format!("/frames/{i}/timestamp"),
                format!("frame {i}: timestamps must be strictly increasing"),
            ));
        }
        if f.ee_pose_base.len() != arms {
            return Err(invariant(
                format!("/frames/{i}/ee_pose_base"),
                format!("frame {i}: {} arms, expected {arms}", f.ee_pose_base.len()),
            ));
        }
        if f.gripper.len() != arms {
            return Err(invariant(
                format!("/frames/{i}/gripper"),
                format!("frame {i}: {} gripper values for {arms} arms", f.gripper.len()),
            ));
        }
        if let Some(a) = f.gripper.iter().position(|g| !(0.0..=1.0).contains(g)) {
            return Err(invariant(
                format!("/frames/{i}/gripper/{a}"),
                format!("frame {i}: gripper {} outside [0, 1]", f.gripper[a]),
            ));
        }
    }
    Ok(r)
}

/// Validates a record of either kind, dispatching on `schema_version`.
pub fn validate_record(raw: &Value) -> Result<Record, IngestError> {
    match raw.get("schema_version").and_then(Value::as_str) {
        Some(SCENE_SCHEMA) => validate_scene(raw).map(Record::Scene),
        Some(TRAJECTORY_SCHEMA) => validate_trajectory(raw).map(Record::Trajectory),
        Some(other) => Err(schema_error(
            "/schema_version".into(),
            format!("unknown schema version {other:?}"),
        )),
        None if raw.is_object() => Err(schema_error("/schema_version".into(), "missing field")),
        None => Err(schema_error(String::new(), "record must be a JSON object")),
    }
}

pub fn parse_record(line: &str) -> Result<Record, IngestError> {
    let raw: Value = serde_json::from_str(line).map_err(|e| schema_error(String::new(), e.to_string()))?;
    validate_record(&raw)
}

/// A record read from a JSON Lines stream with its 1-based line number.
#[derive(Debug)]
pub struct ReadRecord {
    pub line: usize,
    pub record: Result<Record, IngestError>,
}

/// Reads every non-blank line. I/O failures end the stream with an error.
pub fn read_records(reader: impl BufRead) -> Result<Vec<ReadRecord>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(ReadRecord {
            line: i + 1,
            record: parse_record(&line),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn scene() -> Value {
        json!({
            "schema_version": SCENE_SCHEMA,
            "id": "scene-0",
            "image_ref": "images/0.png",
            "intrinsics": {"fx": 500.0, "fy": 500.0, "cx": 320.0, "cy": 240.0, "width": 640, "height": 480},
            "annotations": [
                {"category": "chair", "box_center_px": [320.0, 100.0],
                 "pose": {"translation": [0.1, 0.2, 2.0], "rotation": [1.0, 0.0, 0.0, 0.0]},
                 "size": [0.5, 0.5, 1.0]},
                {"category": "lamp", "box_center_px": [0.0, 479.5],
                 "pose": {"translation": [0.0, 0.0, 3.0], "rotation": [1.0, 0.0, 0.0, 0.0]}}
            ]
        })
    }

    fn trajectory() -> Value {
        let pose = json!({"translation": [0.3, 0.0, 0.5], "rotation": [1.0, 0.0, 0.0, 0.0]});
        json!({
            "schema_version": TRAJECTORY_SCHEMA,
            "id": "traj-0",
            "instruction": "pick up the cup",
            "views": [{"view_id": "head",
                       "intrinsics": {"fx": 100.0, "fy": 100.0, "cx": 14.0, "cy": 14.0, "width": 28, "height": 28},
                       "extrinsics": {"pose_of_base_in_camera": {"translation": [0.0, 0.0, 1.0], "rotation": [1.0, 0.0, 0.0, 0.0]}}}],
            "frames": [
                {"timestamp": 0.0, "ee_pose_base": [pose.clone()], "gripper": [1.0]},
                {"timestamp": 0.5, "ee_pose_base": [pose], "gripper": [0.0]}
            ]
        })
    }

    #[test]
    fn well_formed_scene() {
        let r = validate_scene(&scene()).unwrap();
        for t in r.tuples() {
            assert!(t.box_center.iter().all(|c| (0.0..1.0).contains(c)));
        }
        assert_eq!(r.tuples()[0].box_center, [0.5, 100.0 / 480.0]);
    }

    #[test]
    fn negative_depth_names_the_annotation() {
        let mut raw = scene();
        raw["annotations"][1]["pose"]["translation"][2] = json!(-0.1);
        let err = validate_scene(&raw).unwrap_err();
        match &err {
            IngestError::InvariantViolation { path, message } => {
                assert_eq!(path, "/annotations/1/pose/translation/2");
                assert!(message.contains("annotation 1"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn box_center_bound_is_half_open() {
        let mut raw = scene();
        raw["annotations"][0]["box_center_px"][0] = json!(640.0);
        assert!(matches!(
            validate_scene(&raw),
            Err(IngestError::InvariantViolation { path, .. }) if path == "/annotations/0/box_center_px"
        ));
    }

    #[test]
    fn schema_errors_carry_a_pointer() {
        let mut raw = scene();
        raw["annotations"][0]["pose"]["translation"] = json!([0.0, "x", 1.0]);
        assert!(matches!(
            validate_scene(&raw),
            Err(IngestError::Schema { path, .. }) if path == "/annotations/0/pose/translation/1"
        ));

        let mut raw = scene();
        raw["annotations"][0]["pose"]["rotation"] = json!([2.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            validate_scene(&raw),
            Err(IngestError::Schema { path, .. }) if path == "/annotations/0/pose/rotation"
        ));

        let mut raw = scene();
        raw.as_object_mut().unwrap().remove("intrinsics");
        assert!(matches!(validate_scene(&raw), Err(IngestError::Schema { .. })));

        let mut raw = scene();
        raw["extra"] = json!(1);
        assert!(matches!(validate_scene(&raw), Err(IngestError::Schema { .. })));

        assert!(matches!(parse_record("{not json"), Err(IngestError::Schema { .. })));
        assert!(matches!(
            parse_record(r#"{"schema_version": "other/9"}"#),
            Err(IngestError::Schema { path, .. }) if path == "/schema_version"
        ));
    }

    #[test]
    fn trajectory_invariants() {
        assert_eq!(validate_trajectory(&trajectory()).unwrap().arm_count(), 1);

        let mut raw = trajectory();
        raw["frames"][1]["timestamp"] = json!(0.0);
        assert!(matches!(validate_trajectory(&raw), Err(IngestError::InvariantViolation { .. })));

        let mut raw = trajectory();
        raw["frames"].as_array_mut().unwrap().pop();
        assert!(matches!(validate_trajectory(&raw), Err(IngestError::InvariantViolation { .. })));

        let mut raw = trajectory();
        raw["views"] = json!([]);
        assert!(matches!(validate_trajectory(&raw), Err(IngestError::InvariantViolation { .. })));

        let mut raw = trajectory();
        raw["frames"][0]["gripper"] = json!([1.5]);
        assert!(matches!(
            validate_trajectory(&raw),
            Err(IngestError::InvariantViolation { path, .. }) if path == "/frames/0/gripper/0"
        ));
    }

    #[test]
    fn reads_json_lines_with_line_numbers() {
        let text = format!("{}\n\n{}\nnope\n", scene(), trajectory());
        let recs = read_records(text.as_bytes()).unwrap();
        assert_eq!(recs.iter().map(|r| r.line).collect::<Vec<_>>(), vec![1, 3, 4]);
        assert_eq!(recs[0].record.as_ref().unwrap().kind(), "scene");
        assert_eq!(recs[1].record.as_ref().unwrap().id(), "traj-0");
        assert!(recs[2].record.is_err());
    }
}
