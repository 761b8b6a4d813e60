use sdmsfem::experiments::ExperimentError;
use sdmsfem::msfem::MsfemError;
use sdmsfem::solver::SolverError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("basis archive {path}: {reason}")]
    Archive { path: String, reason: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Budget(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("output: {0}")]
    Output(String),
}

impl CliError {
    /// Process exit status: 2 for bad input, 3 for numerical trouble, 4 for
    /// an exceeded budget and 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Archive { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Budget(_) => 4,
            CliError::Io { .. } | CliError::Output(_) => 1,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::InvalidParameter(_)
            | SolverError::NonIntegralSteps { .. }
            | SolverError::WrongRegion { .. }
            | SolverError::StateMismatch(_)
            | SolverError::Mesh(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<MsfemError> for CliError {
    fn from(e: MsfemError) -> Self {
        match e {
            MsfemError::LocalSolve { .. } | MsfemError::Fem(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::BudgetExceeded { .. } => CliError::Budget(e.to_string()),
            ExperimentError::Solver(s) => s.into(),
            ExperimentError::Msfem(m) => m.into(),
            ExperimentError::Fem(_) => CliError::Numerical(e.to_string()),
            ExperimentError::Io(source) => CliError::io("experiment output", source),
            ExperimentError::Csv(_) | ExperimentError::Json(_) => CliError::Output(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}
