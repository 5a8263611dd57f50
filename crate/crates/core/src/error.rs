use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("residue {index}: N, CA and C are collinear or coincident")]
    DegenerateResidue { index: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("structure has no complete backbone residues")]
    EmptyStructure,

    #[error("invalid structure: {0}")]
    InvalidStructure(String),

    #[error("manifest {}: {}", path.display(), problems.join("; "))]
    Manifest { path: PathBuf, problems: Vec<String> },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("superposition subset is degenerate (collinear or coincident points)")]
    DegenerateSubset,

    #[error("structure too short: need at least {min} residues, found {found}")]
    TooShort { min: usize, found: usize },

    #[error("invalid timestep {timestep} (valid range {min}..={max})")]
    InvalidTimestep { timestep: usize, min: usize, max: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    DivergedTraining { step: usize, loss: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
