use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Contract(String),

    #[error("Newton iteration failed to converge at step {step} (t = {time:.6}, residual = {residual:.3e})")]
    NewtonFailure { step: usize, time: f64, residual: f64 },

    #[error("state norm {norm:.3e} exceeded blow-up bound {bound:.3e} at step {step}")]
    Divergence { step: usize, norm: f64, bound: f64 },

    #[error("singular step matrix at step {0}")]
    SingularStep(usize),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("ensemble member {member}: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("capability limit: {0}")]
    Capability(String),

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("missing artifact {path}; run `{producer}` first")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn member(member: usize, source: Error) -> Self {
        Error::Member {
            member,
            source: Box::new(source),
        }
    }
}
