use mogan::Error as CoreError;

/// How a failure is reported: HTTP status and CLI exit code follow from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    NotFound,
    Conflict,
    Validation,
    Training,
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Internal => 1,
            ErrorKind::Validation => 3,
            ErrorKind::Training => 4,
            ErrorKind::NotFound => 5,
            ErrorKind::Conflict => 6,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("project `{0}` not found")]
    ProjectNotFound(String),

    #[error("sample `{0}` not found")]
    SampleNotFound(String),

    #[error("{0}")]
    Conflict(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AppError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            AppError::ProjectNotFound(_) | AppError::SampleNotFound(_) => ErrorKind::NotFound,
            AppError::Conflict(_) => ErrorKind::Conflict,
            AppError::Invalid(_) | AppError::Json(_) => ErrorKind::Validation,
            AppError::Io(_) => ErrorKind::Internal,
            AppError::Core(e) => match e {
                CoreError::InvalidImage(_)
                | CoreError::RoiOutOfBounds { .. }
                | CoreError::DegenerateRoi(_)
                | CoreError::OverlappingRois(..)
                | CoreError::RoiParse(_)
                | CoreError::Pyramid(_)
                | CoreError::DimensionMismatch(_)
                | CoreError::UnknownAugmentKind(_)
                | CoreError::InvalidArgument(_)
                | CoreError::ShapeMismatch { .. }
                | CoreError::BelowReceptiveField { .. }
                | CoreError::Codec(_) => ErrorKind::Validation,
                CoreError::NonFiniteLoss { .. } | CoreError::NonFiniteGradient(_) => ErrorKind::Training,
                CoreError::UntrainedScale(_) | CoreError::NotFrozen => ErrorKind::Conflict,
                _ => ErrorKind::Internal,
            },
        }
    }
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;
