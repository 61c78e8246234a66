use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by how the CLI maps them to exit codes: anything
/// data- or configuration-shaped exits 2, numeric failures (NaN blowups,
/// failed gradient checks) exit 3. Usage errors never reach this type —
/// argument parsing handles them before any work starts.
#[derive(Debug, Error)]
pub enum Error {
    /// A value fed to an operation is outside its domain (negative dwell
    /// seconds, NaN scores, empty input where at least one record is needed).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Contradictory or out-of-range configuration; the message names the
    /// offending field and the constraint it violates.
    #[error("config: {0}")]
    Config(String),

    /// Tensor or layer shape mismatch; the message names both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Unparseable file contents: JSONL logs, TSV/binary embedding stores,
    /// checkpoints. Line- or offset-specific where possible.
    #[error("format: {0}")]
    Format(String),

    /// A news id required for scoring was not present in the embedding store.
    #[error("unknown news id `{0}`")]
    UnknownNewsId(String),

    /// Remote embedding fetch failed after retries.
    #[error("remote fetch: {0}")]
    Remote(String),

    /// NaN/Inf surfaced mid-training, or a gradient check exceeded tolerance.
    #[error("numeric: {0}")]
    Numeric(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit-code class for the CLI: data/config problems exit 2, numeric
    /// failures exit 3. (Usage errors exit 1 from the argument parser.)
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
