//! Canonical interchange records, camera-frame projection and training
//! stream emission.
//!
//! Records are JSON Lines with a top-level `schema_version`:
//! `posekit-scene/1` for grounding scenes and `posekit-trajectory/1` for
//! robot trajectories.

mod records;
mod resample;
mod stream;

pub use records::{
    parse_record, read_records, validate_record, validate_scene, validate_trajectory, Annotation, Frame, ReadRecord,
    Record, SceneRecord, TrajectoryRecord, View, SCENE_SCHEMA, TRAJECTORY_SCHEMA,
};
pub use resample::{
    camera_trajectories, pose_at, project_record, resample_horizon, resample_stream, ArmStream,
    CameraFrameTrajectory, HorizonSpec, DEFAULT_DT, DEFAULT_HORIZON,
};
pub use stream::{
    collect_fit_samples, emit_training_stream, read_manifest, read_stream_tokens, record_items, EmitConfig,
    EmitSummary, ErrorMode, FitSamples, ManifestEntry, PriorsConfig, SkippedRecord, MANIFEST_FILE, PRIORS_FILE,
    TOKENS_FILE,
};

use thiserror::Error;

use crate::priors::PriorsError;
use crate::vocab::GrammarError;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("schema error at {path:?}: {message}")]
    Schema { path: String, message: String },
    #[error("invariant violated at {path:?}: {message}")]
    InvariantViolation { path: String, message: String },
    #[error("unknown view {0:?}")]
    UnknownView(String),
    #[error("trajectory has no poses")]
    EmptyTrajectory,
    #[error("invalid horizon: {0}")]
    InvalidHorizon(String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Priors(#[from] PriorsError),
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("record {ordinal}{}: {source}", id.as_ref().map(|i| format!(" ({i})")).unwrap_or_default())]
    Record {
        ordinal: u64,
        id: Option<String>,
        source: Box<IngestError>,
    },
}

impl IngestError {
    /// The underlying error with any record context stripped.
    pub fn root(&self) -> &IngestError {
        match self {
            IngestError::Record { source, .. } => source.root(),
            other => other,
        }
    }
}
