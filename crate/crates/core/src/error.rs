use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvalidArgument {
    #[error("{name} must be finite (got {value})")]
    NonFinite { name: &'static str, value: f64 },
    #[error("{name} violates {constraint} (got {value})")]
    OutOfRange { name: &'static str, value: f64, constraint: &'static str },
}

/// Configuration and validation failures. `path` is the dotted location of the
/// offending key, e.g. `converters[0].droop.alpha`.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{path}: parse error: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: unknown key")]
    UnknownKey { path: String },
    #[error("{path}: constraint {constraint} violated (got {value})")]
    Constraint { path: String, constraint: String, value: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: i/o error: {message}")]
    Io { path: String, message: String },
}

impl ConfigError {
    pub(crate) fn constraint(path: impl Into<String>, constraint: impl Into<String>, value: impl ToString) -> Self {
        ConfigError::Constraint { path: path.into(), constraint: constraint.into(), value: value.to_string() }
    }

    pub(crate) fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid { path: path.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PowerflowError {
    #[error("line cannot carry the requested power: |P*·X/(V0·V1)| = {ratio} > 1")]
    InfeasibleTransfer { ratio: f64 },
    #[error(
        "power-sharing setpoints must satisfy P*_1/P*_2 = gamma_1/gamma_2 \
         (got P* ratio {setpoint_ratio}, gamma ratio {gain_ratio})"
    )]
    InconsistentSharing { setpoint_ratio: f64, gain_ratio: f64 },
    #[error("steady-state solve did not converge after {iterations} iterations (residual {residual} W)")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("steady power of the second converter is {p2} W; ratio undefined below 1 W")]
    UndefinedRatio { p2: f64 },
    #[error("no steady state detected for channel {0}")]
    NoSteadyState(String),
    #[error("channel {0} not found in trace")]
    MissingChannel(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}
