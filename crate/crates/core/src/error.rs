use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input file is missing a required column or has an unusable header.
    #[error("schema error: {0}")]
    Schema(String),

    /// A single input row failed to parse or validate. `row` is 1-based and
    /// counts the header line, so it matches what a text editor shows.
    #[error("row {row}, column `{column}`: {message}")]
    Row {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("design matrix is rank deficient; collinear terms: {}", .terms.join(", "))]
    RankDeficient { terms: Vec<String> },

    #[error("cohort {0} has no designee tracts")]
    EmptyCohort(i32),

    #[error("cohort {cohort} is missing data years {years:?} required by the event window")]
    MissingYears { cohort: i32, years: Vec<i32> },

    #[error("arm `{0}` is empty after filtering")]
    EmptyArm(String),

    #[error("tract `{0}` has no centroid")]
    MissingCentroid(String),

    #[error("simplex solver did not converge after {iterations} iterations (final gap {gap:e})")]
    NoConvergence { iterations: usize, gap: f64 },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failure during computation. The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Row { .. }
                | Error::Argument(_)
                | Error::Validation(_)
                | Error::Config(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Io { .. }
        )
    }
}
