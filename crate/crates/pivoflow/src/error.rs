use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] pivoflow_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}: format version {found} is not supported (expected {expected})", path.display())]
    VersionMismatch { path: PathBuf, found: String, expected: String },

    #[error("{}: checksum mismatch (manifest {expected}, data {found})", path.display())]
    ChecksumMismatch { path: PathBuf, expected: String, found: String },

    #[error("{}: inconsistent shape: {detail}", path.display())]
    ShapeInconsistency { path: PathBuf, detail: String },

    #[error("{}:{line}: {detail}", path.display())]
    Manifest { path: PathBuf, line: usize, detail: String },

    #[error("config line {line}: {detail}")]
    ConfigLine { line: usize, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: missing prerequisite {what}")]
    MissingPrerequisite { stage: &'static str, what: String },

    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<Error> },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ (Error::Stage { .. } | Error::MissingPrerequisite { .. }) => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }

    /// Process exit status: 2 for configuration problems, 3 for missing
    /// prerequisites, 4 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Config(_) | Error::ConfigLine { .. } => 2,
            Error::MissingPrerequisite { .. } => 3,
            Error::Core(e) => match e {
                pivoflow_core::Error::NonFinite { .. }
                | pivoflow_core::Error::StepDiverged { .. }
                | pivoflow_core::Error::SimulationDiverged { .. } => 4,
                pivoflow_core::Error::InvalidInput(_) => 2,
                _ => 1,
            },
            _ => 1,
        }
    }
}
