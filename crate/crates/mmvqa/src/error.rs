//! Process-level error type with the exit-code contract:
//! 1 = usage/config error, 2 = data error, 3 = numeric failure.

use mmvqa_core::model::ModelError;
use mmvqa_core::tensor::NumericsError;
use mmvqa_core::tokenizer::TokenizerError;
use mmvqa_core::vision::VisionError;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Numeric(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        AppError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        AppError::Data(msg.into())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<NumericsError> for AppError {
    fn from(e: NumericsError) -> Self {
        AppError::Numeric(e.to_string())
    }
}

impl From<ModelError> for AppError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(msg) => AppError::Usage(msg),
            ModelError::Contract(msg) => AppError::Data(msg),
            ModelError::Numeric { .. } => AppError::Numeric(e.to_string()),
        }
    }
}

impl From<TokenizerError> for AppError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::TargetTooSmall { .. } => AppError::Usage(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<VisionError> for AppError {
    fn from(e: VisionError) -> Self {
        match e {
            VisionError::Config(_) => AppError::Usage(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<mmvqa_core::metrics::MetricsError> for AppError {
    fn from(e: mmvqa_core::metrics::MetricsError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<mmvqa_core::optim::OptimError> for AppError {
    fn from(e: mmvqa_core::optim::OptimError) -> Self {
        AppError::Numeric(e.to_string())
    }
}

impl From<mmvqa_core::interp::InterpError> for AppError {
    fn from(e: mmvqa_core::interp::InterpError) -> Self {
        AppError::Data(e.to_string())
    }
}
