//! Command implementations behind the `promptdet` binary.

pub mod ablate;
pub mod artifacts;
pub mod commands;
pub mod config;

/// A command failure, classified by exit status.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Missing(_) => 3,
            Failure::Check(_) => 4,
            Failure::Other(_) => 1,
        }
    }
}

impl From<promptdet::Error> for Failure {
    fn from(e: promptdet::Error) -> Self {
        match e {
            promptdet::Error::Config(m) => Failure::Config(m),
            promptdet::Error::MissingPrerequisite(m) => Failure::Missing(m),
            other => Failure::Other(other.into()),
        }
    }
}
