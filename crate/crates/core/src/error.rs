use std::fmt;

use thiserror::Error;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// A single problem found while validating an experiment configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Violation {
    pub field: String,
    /// `schema` or `dimension`.
    pub kind: String,
    pub message: String,
}

impl Violation {
    pub fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            kind: "schema".into(),
            message: message.into(),
        }
    }

    pub fn dimension(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            kind: "dimension".into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}): {}", self.field, self.kind, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{} violation(s): {}", .0.len(), join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: {detail}")]
    Dimension { what: String, detail: String },
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("pair (A, C) is not observable: {0}")]
    NotObservable(String),
    #[error("pair (A, B) is not controllable: {0}")]
    NotControllable(String),
    #[error("rank hypothesis fails: {0}")]
    RankDeficient(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("non-finite value encountered at step {step}")]
    Divergence { step: usize },
    #[error("equation-stack selector did not converge (best residual {residual:e})")]
    SelectorFailure { residual: f64 },
    #[error("terminal constraint infeasible: {0}")]
    Infeasible(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("unknown built-in `{0}`")]
    UnknownBuiltin(String),
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::EmptyMatrix => "empty_matrix",
            Error::NotObservable(_) => "not_observable",
            Error::NotControllable(_) => "not_controllable",
            Error::RankDeficient(_) => "rank_deficient",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::Singular(_) => "singular",
            Error::Divergence { .. } => "divergence",
            Error::SelectorFailure { .. } => "selector_failure",
            Error::Infeasible(_) => "infeasible",
            Error::Solver(_) => "solver_failure",
            Error::UnknownBuiltin(_) => "unknown_builtin",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code: 2 config, 3 synthesis (rank), 4 solver, 5 infeasible.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Dimension { .. }
            | Error::EmptyMatrix
            | Error::InvalidParameter { .. }
            | Error::UnknownBuiltin(_)
            | Error::Io(_) => 2,
            Error::NotObservable(_)
            | Error::NotControllable(_)
            | Error::RankDeficient(_)
            | Error::Singular(_) => 3,
            Error::Divergence { .. } | Error::SelectorFailure { .. } | Error::Solver(_) => 4,
            Error::Infeasible(_) => 5,
        }
    }

    /// Machine-readable error object: kind, exit code, message and any
    /// validation violations.
    pub fn to_json(&self) -> serde_json::Value {
        let mut obj = serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let Some(v) = self.violations() {
            obj["violations"] = serde_json::to_value(v).unwrap_or_default();
        }
        if let Error::Config(ConfigError::Parse { line, column, .. }) = self {
            obj["line"] = (*line).into();
            obj["column"] = (*column).into();
        }
        obj
    }

    /// Prefix string-carrying errors with the experiment mode.
    pub fn in_context(self, context: &str) -> Self {
        match self {
            Error::NotObservable(m) => Error::NotObservable(format!("{context}: {m}")),
            Error::NotControllable(m) => Error::NotControllable(format!("{context}: {m}")),
            Error::RankDeficient(m) => Error::RankDeficient(format!("{context}: {m}")),
            Error::Singular(m) => Error::Singular(format!("{context}: {m}")),
            Error::Infeasible(m) => Error::Infeasible(format!("{context}: {m}")),
            Error::Solver(m) => Error::Solver(format!("{context}: {m}")),
            other => other,
        }
    }

    /// Individual violations, when this is a validation error.
    pub fn violations(&self) -> Option<&[Violation]> {
        match self {
            Error::Config(ConfigError::Invalid(v)) => Some(v),
            _ => None,
        }
    }
}
