use std::fmt;

use serde::Serialize;
use tracksearch::Error;

/// Process exit codes. Listed in `--help`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitKind {
    Internal = 1,
    Usage = 2,
    MalformedInput = 3,
    Infeasible = 4,
    CapExceeded = 5,
    EvaluationFailed = 6,
    VerificationFailed = 7,
    Io = 8,
}

pub const EXIT_CODES_HELP: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error (unknown flag, bad argument)
  3  malformed input file (genome, space, config, table, weights)
  4  infeasible budget (no candidate satisfies the constraints)
  5  enumeration cap exceeded
  6  evaluation failed
  7  verification failed (shape or MAC mismatch)
  8  I/O error

Errors are printed to stderr as one JSON line:
  {\"error\":{\"code\":N,\"kind\":\"...\",\"message\":\"...\"}}

Logging: set NAS_TRACKSEARCH_LOG to error, warn, info or debug.";

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }

    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": { "code": self.code(), "kind": self.kind, "message": self.message }
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn kind_of(e: &Error) -> ExitKind {
    match e {
        Error::InvalidGenome(_)
        | Error::Decode(_)
        | Error::WrongGeneCount { .. }
        | Error::InvalidSpace(_)
        | Error::CorruptFile(_)
        | Error::VersionMismatch { .. }
        | Error::FingerprintMismatch
        | Error::OutsideSpace
        | Error::DuplicateKey(_)
        | Error::Config(_)
        | Error::Json(_)
        | Error::Csv(_)
        | Error::MissingWeights { .. } => ExitKind::MalformedInput,
        Error::Exhausted { .. } => ExitKind::Infeasible,
        Error::CapExceeded { .. } => ExitKind::CapExceeded,
        Error::Evaluation { .. }
        | Error::MissingGenome(_)
        | Error::EmptyEvalset
        | Error::EmptyCalibration
        | Error::NonFiniteFitness(_) => ExitKind::EvaluationFailed,
        Error::Shape(_) | Error::MissingStats(_) => ExitKind::VerificationFailed,
        Error::Io(_) => ExitKind::Io,
        Error::InvalidOperator(_) => ExitKind::Internal,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self { kind: kind_of(&e), message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ExitKind::Io, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new(ExitKind::MalformedInput, e.to_string())
    }
}
