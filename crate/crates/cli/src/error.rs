//! Error classes and their exit codes.

use rigsynth::audio2rig::ModelError;
use rigsynth::blink::BlinkError;
use rigsynth::evalkit::EvalError;
use rigsynth::featio::FeatureError;
use rigsynth::gaze::GazeError;
use rigsynth::postfx::PostError;
use rigsynth::rig::{MapError, RigError};
use rigsynth::rigcsv::RigCsvError;
use rigsynth::trainer::TrainError;
use serde::Serialize;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    exit_code: i32,
    message: String,
}

#[derive(Serialize)]
struct ErrorDoc<'a> {
    error: ErrorBody<'a>,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }

    pub fn to_json(&self) -> String {
        let doc = ErrorDoc { error: ErrorBody { kind: self.kind(), exit_code: self.exit_code(), message: self.to_string() } };
        serde_json::to_string(&doc).expect("error serializes")
    }
}

pub fn data(context: &str, err: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{context}: {err}"))
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_errors!(FeatureError, MapError, RigError, RigCsvError, EvalError, GazeError, PostError, BlinkError, csv::Error, serde_json::Error, std::io::Error);

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::Model(ModelError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
