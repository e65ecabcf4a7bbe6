use lsa_core::bounds::BoundsError;
use lsa_core::counterexample::CounterexampleError;
use lsa_core::{LinalgError, LsaError, MarkovError, TdError};
use serde::Serialize;

/// Failure classes, each with its own exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Config,
    Model,
    Numerical,
    Io,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Model => 3,
            Category::Numerical => 4,
            Category::Io => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{category:?} error: {message}")]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            category: Category::Config,
            message: message.into(),
        }
    }

    pub fn model(message: impl Into<String>) -> Self {
        Self {
            category: Category::Model,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            category: Category::Numerical,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            category: Category::Io,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.category.exit_code()
    }

    fn with(category: Category, err: &impl std::fmt::Display) -> Self {
        Self {
            category,
            message: err.to_string(),
        }
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        let category = match e {
            LinalgError::SingularSystem { .. }
            | LinalgError::NoConvergence { .. }
            | LinalgError::NotPositiveDefinite { .. } => Category::Numerical,
            _ => Category::Model,
        };
        Self::with(category, &e)
    }
}

impl From<MarkovError> for CliError {
    fn from(e: MarkovError) -> Self {
        let category = match e {
            MarkovError::InvalidDelta(_) => Category::Config,
            MarkovError::MixingExceedsCap { .. } | MarkovError::StationaryFailed { .. } => Category::Numerical,
            _ => Category::Model,
        };
        Self::with(category, &e)
    }
}

impl From<TdError> for CliError {
    fn from(e: TdError) -> Self {
        match e {
            TdError::Markov(inner) => inner.into(),
            TdError::Linalg(inner) => inner.into(),
            other => Self::with(Category::Model, &other),
        }
    }
}

impl From<LsaError> for CliError {
    fn from(e: LsaError) -> Self {
        Self::with(Category::Config, &e)
    }
}

impl From<BoundsError> for CliError {
    fn from(e: BoundsError) -> Self {
        match e {
            BoundsError::Linalg(inner) => inner.into(),
            BoundsError::NotNegativeDefinite { .. } => Self::with(Category::Model, &e),
            other => Self::with(Category::Config, &other),
        }
    }
}

impl From<CounterexampleError> for CliError {
    fn from(e: CounterexampleError) -> Self {
        match e {
            CounterexampleError::Markov(inner) => inner.into(),
            CounterexampleError::Lsa(inner) => inner.into(),
            CounterexampleError::NoThreshold { .. } => Self::with(Category::Numerical, &e),
            other => Self::with(Category::Config, &other),
        }
    }
}
