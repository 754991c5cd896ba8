//! Error type of the runner and its mapping to process exit codes.

use std::fmt;

use thiserror::Error;

use crate::config::ConfigError;

/// Exit code for a run that finished.
pub const EXIT_OK: i32 = 0;
/// Exit code for an invalid configuration or parameter.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code when a required certificate is missing, refused or stale.
pub const EXIT_CERTIFICATE: i32 = 3;
/// Exit code for a numerical failure or an I/O problem during the run.
pub const EXIT_RUN: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n{}", ConfigList(.0))]
    Config(Vec<ConfigError>),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    /// A precondition is not certified. `producer` is the command that
    /// creates the certificate.
    #[error("missing certificate `{certificate}`: {reason}\n  produce it with: {producer}")]
    Certificate { certificate: String, reason: String, producer: String },
    #[error("run failed: {0}")]
    Run(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

struct ConfigList<'a>(&'a [ConfigError]);

impl fmt::Display for ConfigList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  {e}")?;
        }
        Ok(())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Invalid(_) => EXIT_CONFIG,
            CliError::Certificate { .. } => EXIT_CERTIFICATE,
            CliError::Run(_) | CliError::Io { .. } => EXIT_RUN,
        }
    }

    pub fn io(path: &std::path::Path, err: impl fmt::Display) -> Self {
        CliError::Io { path: path.display().to_string(), message: err.to_string() }
    }
}

impl From<vanishcost_core::Error> for CliError {
    /// Errors that describe the request itself map to the configuration code,
    /// everything else is a run failure.
    fn from(e: vanishcost_core::Error) -> Self {
        use vanishcost_core::Error as E;
        match e {
            E::UnsupportedDomain(_)
            | E::InvalidResolution(_)
            | E::DimensionMismatch { .. }
            | E::EmptyShrink { .. }
            | E::UnknownField(_)
            | E::Expression { .. }
            | E::MissingPotential
            | E::InvalidAnnulus(_)
            | E::InvalidParameter(_)
            | E::UndefinedConstant(_)
            | E::Precondition(_) => CliError::Invalid(e.to_string()),
            E::OutOfDomain { .. }
            | E::SolverFailure { .. }
            | E::Scale { .. }
            | E::DegenerateObservation(_)
            | E::Fit(_)
            | E::Construction(_)
            | E::Io(_) => CliError::Run(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_split_between_config_and_run_codes() {
        let c: CliError = vanishcost_core::Error::InvalidParameter("x".into()).into();
        assert_eq!(c.exit_code(), EXIT_CONFIG);
        let r: CliError = vanishcost_core::Error::SolverFailure { step: 3, residual: 1.0 }.into();
        assert_eq!(r.exit_code(), EXIT_RUN);
        let cert = CliError::Certificate { certificate: "c".into(), reason: "r".into(), producer: "p".into() };
        assert_eq!(cert.exit_code(), EXIT_CERTIFICATE);
    }

    #[test]
    fn config_errors_are_listed_one_per_line() {
        let e =
            CliError::Config(vec![ConfigError { line: 3, message: "a".into() }, ConfigError { line: 0, message: "b".into() }]);
        assert_eq!(e.to_string(), "invalid configuration:\n  line 3: a\n  b");
    }
}
