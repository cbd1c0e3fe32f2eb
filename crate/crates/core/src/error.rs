use thiserror::Error;

use crate::space::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid genome: {}", join_violations(.0))]
    InvalidGenome(Vec<Violation>),

    #[error("malformed genome encoding: {0}")]
    Decode(String),

    #[error("wrong gene count for {field}: expected {expected}, got {got}")]
    WrongGeneCount {
        field: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid space description: {0}")]
    InvalidSpace(String),

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing weights for layer {layer} choice {choice}")]
    MissingWeights { layer: String, choice: u32 },

    #[error("missing normalization statistics for {0}")]
    MissingStats(String),

    #[error("calibration stream is empty")]
    EmptyCalibration,

    #[error("corrupt weight file: {0}")]
    CorruptFile(String),

    #[error("unsupported weight file version {found} (expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },

    #[error("space fingerprint mismatch: store was built for a different search space")]
    FingerprintMismatch,

    #[error("genome lies outside the store's search space")]
    OutsideSpace,

    #[error("no feasible genome found after {tries} proposals")]
    Exhausted { tries: usize },

    #[error("enumeration cap exceeded: space has {cardinality} members, cap is {cap}")]
    CapExceeded { cardinality: u128, cap: u128 },

    #[error("evaluation failed for genome {genome}: {source}")]
    Evaluation {
        genome: String,
        #[source]
        source: Box<Error>,
    },

    #[error("genome {0} is not present in the lookup table")]
    MissingGenome(String),

    #[error("duplicate lookup key {0}")]
    DuplicateKey(String),

    #[error("evaluator returned non-finite fitness {0}")]
    NonFiniteFitness(f64),

    #[error("evaluation set is empty")]
    EmptyEvalset,

    #[error("invalid search config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
