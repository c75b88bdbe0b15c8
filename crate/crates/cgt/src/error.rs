use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing input file: {0}")]
    MissingFile(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("binary format error: {0}")]
    Format(String),

    #[error("infeasible clustering: m * k_min = {required} exceeds available points {available}")]
    InfeasibleClustering { required: usize, available: usize },

    #[error("requested {m} clusters but data has only {distinct} distinct rows")]
    DuplicateCenterCollapse { m: usize, distinct: usize },

    #[error("power iteration did not converge: residual {residual} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing artifact {0} (run the upstream stage first)")]
    MissingArtifact(String),

    #[error("run directory is locked by another process: {0}")]
    Locked(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 validation, 3 missing artifact, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact(_) | Error::MissingFile(_) => 3,
            Error::NoConvergence { .. } | Error::Numerical(_) => 4,
            _ => 2,
        }
    }
}
