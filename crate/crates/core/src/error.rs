use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Stable machine-readable class name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NumericDomain(_) => "numeric_domain",
            Error::Contract(_) => "contract",
            Error::Input(_) => "input",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => "missing_artifact",
            Error::Io(_) => "io",
            Error::Json(_) => "format",
        }
    }

    /// Process exit status: 2 missing artifact, 3 invalid input or config,
    /// 4 broken invariant, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "missing_artifact" => 2,
            "input" | "config" | "format" | "parse" | "validation" => 3,
            "shape" | "numeric_domain" | "contract" => 4,
            _ => 1,
        }
    }

    /// The message on one line.
    pub fn one_line(&self) -> String {
        format!("error[{}]: {}", self.kind(), self.to_string().split_whitespace().collect::<Vec<_>>().join(" "))
    }
}
