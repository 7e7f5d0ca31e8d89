//! Camera-frame projection and fixed-horizon resampling.

use serde::{Deserialize, Serialize};

use super::records::TrajectoryRecord;
use super::IngestError;
use crate::geometry::{Se3Pose, UnitQuaternion};
use crate::vocab::Trajectory;

pub const DEFAULT_HORIZON: usize = 16;
pub const DEFAULT_DT: f64 = 0.1;

/// Poses of one arm in one view's camera frame, one per source frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmStream {
    pub arm: usize,
    pub timestamps: Vec<f64>,
    pub poses: Vec<Se3Pose>,
    pub gripper: Vec<f64>,
}

/// A resampled waypoint sequence for one arm seen from one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFrameTrajectory {
    pub view_id: String,
    pub arm: usize,
    pub horizon: usize,
    pub waypoints: Trajectory,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSpec {
    pub horizon: usize,
    pub dt: f64,
}

impl Default for HorizonSpec {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            dt: DEFAULT_DT,
        }
    }
}

impl HorizonSpec {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.horizon == 0 {
            return Err(IngestError::InvalidHorizon("horizon must be at least 1".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(IngestError::InvalidHorizon(format!("dt = {} must be positive", self.dt)));
        }
        Ok(())
    }
}

/// Maps every end-effector pose into the camera frame of `view_id`,
/// producing one stream per arm.
pub fn project_record(r: &TrajectoryRecord, view_id: &str) -> Result<Vec<ArmStream>, IngestError> {
    let view = r
        .view(view_id)
        .ok_or_else(|| IngestError::UnknownView(view_id.to_string()))?;
    let timestamps: Vec<f64> = r.frames.iter().map(|f| f.timestamp).collect();
    Ok((0..r.arm_count())
        .map(|arm| ArmStream {
            arm,
            timestamps: timestamps.clone(),
            poses: r
                .frames
                .iter()
                .map(|f| view.extrinsics.base_to_camera(&f.ee_pose_base[arm]))
                .collect(),
            gripper: r.frames.iter().map(|f| f.gripper[arm]).collect(),
        })
        .collect())
}

fn lerp(a: f64, b: f64, s: f64) -> f64 {
    a + s * (b - a)
}

/// Bracketing frames for `t`: `(i, j, s)` with `s` the fraction from
/// `i` to `j`. Exact timestamps and times past the end give `i == j`.
fn bracket(timestamps: &[f64], t: f64) -> (usize, usize, f64) {
    let last = timestamps.len() - 1;
    let j = timestamps.partition_point(|ts| *ts <= t);
    if j == 0 {
        return (0, 0, 0.0);
    }
    let i = j - 1;
    if j > last || timestamps[i] == t {
        return (i.min(last), i.min(last), 0.0);
    }
    (i, j, (t - timestamps[i]) / (timestamps[j] - timestamps[i]))
}

fn interpolate_pose(a: &Se3Pose, b: &Se3Pose, s: f64) -> Se3Pose {
    let (ta, tb) = (a.translation(), b.translation());
    let t = [lerp(ta[0], tb[0], s), lerp(ta[1], tb[1], s), lerp(ta[2], tb[2], s)];
    let q: UnitQuaternion = a.rotation().slerp(&b.rotation(), s);
    Se3Pose::new(t, q).expect("interpolation of finite poses is finite")
}

/// Pose at time `t`; clamps to the final pose past the end and returns
/// the stored pose unchanged at a frame timestamp.
pub fn pose_at(timestamps: &[f64], poses: &[Se3Pose], t: f64) -> Result<Se3Pose, IngestError> {
    if poses.is_empty() || timestamps.len() != poses.len() {
        return Err(IngestError::EmptyTrajectory);
    }
    let (i, j, s) = bracket(timestamps, t);
    Ok(if i == j { poses[i] } else { interpolate_pose(&poses[i], &poses[j], s) })
}

fn sample_times(timestamps: &[f64], t0: f64, spec: &HorizonSpec) -> Result<Vec<f64>, IngestError> {
    spec.validate()?;
    let (first, last) = match (timestamps.first(), timestamps.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(IngestError::EmptyTrajectory),
    };
    if !(first..=last).contains(&t0) {
        return Err(IngestError::InvalidHorizon(format!(
            "start time {t0} outside [{first}, {last}]"
        )));
    }
    Ok((0..spec.horizon).map(|k| t0 + k as f64 * spec.dt).collect())
}

/// Samples `horizon` waypoints at `t0 + k·dt`.
pub fn resample_horizon(
    timestamps: &[f64],
    poses: &[Se3Pose],
    t0: f64,
    spec: &HorizonSpec,
) -> Result<Vec<Se3Pose>, IngestError> {
    if poses.is_empty() || timestamps.len() != poses.len() {
        return Err(IngestError::EmptyTrajectory);
    }
    sample_times(timestamps, t0, spec)?
        .into_iter()
        .map(|t| pose_at(timestamps, poses, t))
        .collect()
}

/// Resamples poses and gripper openings of one arm stream.
pub fn resample_stream(
    view_id: &str,
    stream: &ArmStream,
    t0: f64,
    spec: &HorizonSpec,
) -> Result<CameraFrameTrajectory, IngestError> {
    let waypoints = resample_horizon(&stream.timestamps, &stream.poses, t0, spec)?;
    let gripper = sample_times(&stream.timestamps, t0, spec)?
        .into_iter()
        .map(|t| {
            let (i, j, s) = bracket(&stream.timestamps, t);
            if i == j {
                stream.gripper[i]
            } else {
                lerp(stream.gripper[i], stream.gripper[j], s)
            }
        })
        .collect();
    Ok(CameraFrameTrajectory {
        view_id: view_id.to_string(),
        arm: stream.arm,
        horizon: spec.horizon,
        waypoints: Trajectory {
            waypoints,
            gripper: Some(gripper),
        },
    })
}

/// Projects into `view_id` and resamples every arm from the first frame.
pub fn camera_trajectories(
    r: &TrajectoryRecord,
    view_id: &str,
    spec: &HorizonSpec,
) -> Result<Vec<CameraFrameTrajectory>, IngestError> {
    project_record(r, view_id)?
        .iter()
        .map(|s| resample_stream(view_id, s, s.timestamps[0], spec))
        .collect()
}
