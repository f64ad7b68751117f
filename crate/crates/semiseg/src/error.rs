use std::path::{Path, PathBuf};

use semiseg_core::annotation::AnnotationError;
use semiseg_core::classifier::ClassifierError;
use semiseg_core::evaluation::EvalError;
use semiseg_core::pipeline::PipelineError;
use semiseg_core::training::TrainError;
use serde_json::json;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{}: checksum mismatch (file corrupt or truncated)", path.display())]
    Checksum { path: PathBuf },
    #[error("{}: unsupported format version {found} (expected {expected})", path.display())]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("config {key}: {message}")]
    Config { key: String, message: String },
    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.to_path_buf())
        } else {
            Error::Io { path: path.to_path_buf(), source }
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), message: message.into() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Checksum { .. } => "checksum",
            Error::Version { .. } => "version",
            Error::Format { .. } => "format",
            Error::Config { .. } => "config",
            Error::MissingInput(_) => "missing_input",
            Error::Pipeline(_) => "pipeline",
            Error::Train(TrainError::ModeMismatch(_)) => "mode_mismatch",
            Error::Train(_) => "training",
            Error::Classifier(_) => "classifier",
            Error::Annotation(_) => "annotation",
            Error::Eval(_) => "evaluation",
        }
    }

    /// One-line JSON description for machine consumers.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            Error::Config { key, .. } => v["key"] = json!(key),
            Error::Io { path, .. }
            | Error::Parse { path, .. }
            | Error::Checksum { path }
            | Error::Version { path, .. }
            | Error::Format { path, .. }
            | Error::MissingInput(path) => v["path"] = json!(path.display().to_string()),
            _ => {}
        }
        v
    }
}
