//! Crate-wide error type, for callers that want one error to propagate and a
//! coarse category to report.

use thiserror::Error;

use crate::datasets::DatasetError;
use crate::extract::EvalError;
use crate::gateway::GatewayError;
use crate::optimizer::OptimizerError;
use crate::strategies::StrategyError;
use crate::textgrad::TextGradError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Transport,
    Auth,
    Io,
}

impl ErrorCategory {
    pub fn label(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Transport => "transport",
            ErrorCategory::Auth => "auth",
            ErrorCategory::Io => "io",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    TextGrad(#[from] TextGradError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
}

fn gateway_category(e: &GatewayError) -> ErrorCategory {
    match e {
        GatewayError::Auth(_) => ErrorCategory::Auth,
        GatewayError::Config(_) | GatewayError::InvalidRequest(_) => ErrorCategory::Config,
        GatewayError::Cache(_) => ErrorCategory::Io,
        GatewayError::Transport { .. }
        | GatewayError::Protocol(_)
        | GatewayError::Rejected { .. } => ErrorCategory::Transport,
    }
}

fn textgrad_category(e: &TextGradError) -> ErrorCategory {
    match e {
        TextGradError::Engine { source, .. } => gateway_category(source),
        TextGradError::Strategy(_) => ErrorCategory::Data,
        TextGradError::FrozenParameter => ErrorCategory::Config,
        _ => ErrorCategory::Transport,
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Gateway(e) => gateway_category(e),
            Error::Dataset(DatasetError::Io { .. }) => ErrorCategory::Data,
            Error::Dataset(DatasetError::SpecUnsatisfiable(_)) => ErrorCategory::Config,
            Error::Dataset(_) => ErrorCategory::Data,
            Error::Strategy(
                StrategyError::InvalidStrategy(_) | StrategyError::PoolTooSmall { .. },
            ) => ErrorCategory::Config,
            Error::Strategy(_) => ErrorCategory::Data,
            Error::Eval(_) => ErrorCategory::Data,
            Error::TextGrad(e) => textgrad_category(e),
            Error::Optimizer(e) => match e {
                OptimizerError::Config(_) | OptimizerError::Resume { .. } => ErrorCategory::Config,
                OptimizerError::Engine(e) => textgrad_category(e),
                OptimizerError::Strategy(
                    StrategyError::InvalidStrategy(_) | StrategyError::PoolTooSmall { .. },
                ) => ErrorCategory::Config,
                OptimizerError::Strategy(_) | OptimizerError::Eval(_) => ErrorCategory::Data,
                OptimizerError::Store { .. } => ErrorCategory::Io,
            },
        }
    }
}
