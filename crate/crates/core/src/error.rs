use thiserror::Error;

use crate::surrogate::{MlpModel, TrainReport};
use crate::sysid::HammersteinWienerModel;
use crate::signals::FitMetrics;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("series do not overlap in time")]
    EmptyOverlap,

    #[error("sample {index} is {value}, outside the domain of the logarithm")]
    Domain { index: usize, value: f64 },

    #[error("r-squared is undefined for a constant target")]
    UndefinedR2,

    #[error("no melt pool found in the frame")]
    EmptyPool,

    #[error("model is unidentifiable: {0}")]
    Unidentifiable(String),

    #[error("hammerstein-wiener fit diverged after {rounds} rounds")]
    NonConvergence {
        rounds: usize,
        best: Box<(HammersteinWienerModel, FitMetrics)>,
    },

    #[error("least-squares basis is rank deficient; collinear terms: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("training failed: {reason}")]
    TrainingFailure {
        reason: String,
        best: Box<(MlpModel, TrainReport)>,
    },

    #[error("dataset has no usable rows")]
    EmptyDataset,

    #[error("pid tuning failed: {0}")]
    TuningFailure(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad input data or configuration rather than numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::EmptyOverlap
                | Error::Domain { .. }
                | Error::Parse(_)
                | Error::Io(_)
                | Error::EmptyDataset
        )
    }
}
