use mosaic_core::bench::BenchError;
use mosaic_core::cluster::ClusterError;
use mosaic_core::graph::GraphError;
use mosaic_core::instance::InstanceError;
use mosaic_core::interference::FitError;
use mosaic_core::io::IoError;
use mosaic_core::oracle::OracleError;
use mosaic_core::plan::PlanError;
use mosaic_core::presets::PresetError;
use mosaic_core::profiler::WorkloadError;
use mosaic_core::quota::QuotaError;
use mosaic_core::sim::SimError;
use mosaic_core::solver::SolveError;
use mosaic_core::stage_eval::StageEvalError;
use mosaic_core::surface::{LookupError, SurfaceError};
use thiserror::Error;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

macro_rules! validation {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Validation(e.to_string())
            }
        }
    )*};
}

validation!(
    ClusterError,
    GraphError,
    FitError,
    PlanError,
    PresetError,
    WorkloadError,
    QuotaError,
    SurfaceError,
    LookupError
);

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<StageEvalError> for CliError {
    fn from(e: StageEvalError) -> Self {
        match e {
            StageEvalError::ModuleInfeasible(_) | StageEvalError::Unpackable(_) => CliError::Infeasible(e.to_string()),
            StageEvalError::Lookup(l) => l.into(),
            StageEvalError::InvariantViolated(_) => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::Stage(s) => s.into(),
            SolveError::InvariantViolated(_) => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InfeasibleBaseline(_) => CliError::Infeasible(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::NoFeasiblePlan => CliError::Infeasible(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<InstanceError> for CliError {
    fn from(e: InstanceError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Solve(s) => s.into(),
            BenchError::Oracle(o) => o.into(),
            BenchError::Sim(s) => s.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}
