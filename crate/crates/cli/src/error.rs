use cpo_core::concept_graph::GraphError;
use cpo_core::corpus::CorpusError;
use cpo_core::counterfactual::CounterfactualError;
use cpo_core::cpo::CpoError;
use cpo_core::drift::DriftError;
use cpo_core::eval_metrics::EvalError;
use cpo_core::policy::PolicyError;
use cpo_core::trajectory::TrajectoryError;

/// Failure of one subcommand, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unreadable or malformed inputs, invalid configuration.
    #[error("{0}")]
    Input(String),
    /// Training diverged.
    #[error("{0}")]
    Numeric(String),
    /// Artifacts that do not belong together (vocabulary or shape).
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Mismatch(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::VocabMismatch { .. } | PolicyError::ShapeMismatch(_) => CliError::Mismatch(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<CpoError> for CliError {
    fn from(e: CpoError) -> Self {
        match e {
            CpoError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            CpoError::VocabMismatch => CliError::Mismatch(e.to_string()),
            CpoError::Policy(p) => p.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<DriftError> for CliError {
    fn from(e: DriftError) -> Self {
        match e {
            DriftError::Policy(p) => p.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Policy(p) => p.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

macro_rules! input_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Input(e.to_string())
            }
        }
    )*};
}

input_error!(CorpusError, CounterfactualError, GraphError, TrajectoryError);
