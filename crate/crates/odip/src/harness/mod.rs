//! Experiment orchestration: config files, on-disk run layout, resumable
//! checkpoints, annotation export, reports, and the command-line frontend.

pub mod annotations;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod report;

pub use annotations::{AnnotationFile, AnnotationRecord, LabelSource};
pub use checkpoint::{RunDir, RunManifest};
pub use config::{ConfigError, ExperimentConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Run(#[from] crate::looprunner::LoopError),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Corrupt { path: std::path::PathBuf, message: String },
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<std::path::PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }

    pub(crate) fn corrupt(
        path: impl Into<std::path::PathBuf>,
        message: impl Into<String>,
    ) -> Self {
        HarnessError::Corrupt { path: path.into(), message: message.into() }
    }
}

/// Applies the `ODIP_THREADS` cap to the global worker pool. Call once at
/// process start; later calls are ignored by the pool builder.
pub fn init_thread_pool() {
    if let Ok(value) = std::env::var("ODIP_THREADS") {
        if let Ok(threads @ 1..) = value.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
        }
    }
}
