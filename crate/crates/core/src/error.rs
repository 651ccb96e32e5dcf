use std::path::PathBuf;

use thiserror::Error;

/// Every failure the engine can report.
///
/// Variants fall into two families: validation failures (bad input, bad
/// configuration, malformed files) and runtime failures (I/O, divergence).
/// [`Error::is_validation`] tells them apart, which the CLI maps to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric domain violation in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range [0, {classes}) at row {row}")]
    Label {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("checkpoint error: {detail}; missing ids {missing:?}; unexpected ids {extra:?}")]
    Checkpoint {
        detail: String,
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("{path}: line {line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: u64,
        detail: String,
    },

    #[error("feature file {path}: {kind}")]
    Feature { path: PathBuf, kind: FeatureFault },

    #[error("data error: {0}")]
    Data(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("export error: {0}")]
    Export(String),

    #[error("training diverged: non-finite loss for task `{task_id}` at step {step}")]
    Divergence { task_id: String, step: u64 },

    #[error("split coherence violated ({0} violations)")]
    Incoherent(usize),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Distinct ways a feature container can be malformed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureFault {
    BadMagic([u8; 4]),
    Truncated { expected: u64, actual: u64 },
    SizeOverflow { rows: u32, cols: u32 },
    BadTrailer(String),
}

impl std::fmt::Display for FeatureFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureFault::BadMagic(m) => write!(f, "magic mismatch: found {m:?}"),
            FeatureFault::Truncated { expected, actual } => write!(
                f,
                "payload length mismatch: expected {expected} bytes, found {actual}"
            ),
            FeatureFault::SizeOverflow { rows, cols } => {
                write!(f, "declared size {rows}x{cols} overflows")
            }
            FeatureFault::BadTrailer(s) => write!(f, "bad trailer: {s}"),
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Divergence { .. } | Error::Contract(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
