use thiserror::Error;

use crate::plant::PlantState;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("simulation diverged at step {step}: {state:?}")]
    Divergence { step: usize, state: PlantState },

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error("ill-conditioned matrix: {0}")]
    Conditioning(String),

    #[error("hyperparameter fit failed: {0}")]
    FitFailed(String),

    #[error("state covariance lost positive semi-definiteness at step {step} (min eigenvalue {min_eig:e})")]
    Propagation { step: usize, min_eig: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data quality: {0}")]
    DataQuality(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("fit quality: {0}")]
    FitQuality(String),

    #[error("region of attraction is empty: no converged samples")]
    EmptyRoa,

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by the numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::Conditioning(_)
                | Error::FitFailed(_)
                | Error::Propagation { .. }
                | Error::DataQuality(_)
                | Error::FitQuality(_)
                | Error::EmptyRoa
                | Error::EmptyData(_)
        )
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::EmptyData(_) => "empty_data",
            Error::Conditioning(_) => "conditioning",
            Error::FitFailed(_) => "fit_failed",
            Error::Propagation { .. } => "propagation",
            Error::Domain(_) => "domain",
            Error::DataQuality(_) => "data_quality",
            Error::Shape(_) => "shape",
            Error::FitQuality(_) => "fit_quality",
            Error::EmptyRoa => "empty_roa",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
