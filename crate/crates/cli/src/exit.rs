//! Exit codes: 0 success, 1 other failures (I/O, usage), 2 schema,
//! 3 bin fitting, 4 token stream, 5 unknown view, 6 field shape.

use posekit::ingest::IngestError;
use posekit::priors::PriorsError;
use posekit::quantizer::QuantizeError;

pub const GENERAL: u8 = 1;
pub const SCHEMA: u8 = 2;
pub const FITTING: u8 = 3;
pub const TOKEN_STREAM: u8 = 4;
pub const VIEW: u8 = 5;
pub const SHAPE: u8 = 6;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn new(code: u8, source: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            source: source.into(),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(source: anyhow::Error) -> Self {
        Self { code: GENERAL, source }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(GENERAL, e)
    }
}

pub fn priors_code(e: &PriorsError) -> u8 {
    match e {
        PriorsError::NonDivisibleShape { .. } | PriorsError::ShapeMismatch => SHAPE,
        PriorsError::InvalidProbability { .. } => SCHEMA,
        _ => GENERAL,
    }
}

pub fn ingest_code(e: &IngestError) -> u8 {
    match e.root() {
        IngestError::Schema { .. }
        | IngestError::InvariantViolation { .. }
        | IngestError::EmptyTrajectory
        | IngestError::InvalidHorizon(_) => SCHEMA,
        IngestError::UnknownView(_) => VIEW,
        IngestError::Priors(p) => priors_code(p),
        IngestError::Grammar(posekit::vocab::GrammarError::Quantize(q)) => quantize_code(q),
        _ => GENERAL,
    }
}

pub fn quantize_code(e: &QuantizeError) -> u8 {
    match e {
        QuantizeError::TooFewSamples { .. } | QuantizeError::NonFiniteSample(_) => FITTING,
        _ => GENERAL,
    }
}

/// Attaches an exit code to any error.
pub trait WithCode<T> {
    fn code(self, code: u8) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(code, e))
    }
}
