use std::path::PathBuf;

use thiserror::Error;

/// Which Phase-I arm a message refers to.
pub fn arm_label(z: bool) -> &'static str {
    if z {
        "treated (z=1)"
    } else {
        "control (z=0)"
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("column `{0}` not found in CSV header")]
    MissingColumn(String),

    #[error("row {row}: treatment column `{column}` must be 0 or 1, got `{value}`")]
    NonBinaryTreatment { row: usize, column: String, value: String },

    #[error("row {row}: column `{column}` is missing or not a finite number (`{value}`)")]
    NonFiniteValue { row: usize, column: String, value: String },

    #[error("site `{site_id}` has {count} individual(s) in the {} arm; at least {required} required", arm_label(*z))]
    SiteTooSmall {
        site_id: String,
        z: bool,
        count: usize,
        required: usize,
    },

    #[error("record has {found} covariates but the dataset has {expected}")]
    CovariateDimension { expected: usize, found: usize },

    #[error("dataset has no intermediate outcome V; this estimator requires it")]
    MissingIntermediateOutcome,

    #[error("dataset contains no sites")]
    EmptyDataset,

    #[error("design matrix is empty")]
    EmptyDesign,

    #[error("non-finite value in regression input")]
    NonFiniteInput,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("no eligible sites: {0}")]
    NoEligibleSites(String),

    #[error("stage 2 needs at least 5 sites, got {0}")]
    TooFewSites(usize),

    #[error(
        "stage-2 design {{1, beta1_k, beta2_k, alpha1_k}} is collinear (rank {rank} of 4); \
         this happens e.g. when every site shows full compliance, making beta1_k and beta2_k constant"
    )]
    CollinearDesign { rank: usize },

    #[error("propensity model in site `{site_id}`, {} arm, fitted a probability of exactly 0 or 1", arm_label(*z))]
    PropensityDegenerate { site_id: String, z: bool },

    #[error("resampled site `{0}` lost a treatment arm")]
    DegenerateResample(String),

    #[error("estimator failed on the original sample: {0}")]
    EstimatorFailedOnOriginal(Box<Error>),

    #[error("{failed} of {requested} bootstrap replicates failed (limit 10%)")]
    TooManyFailedReplicates { failed: usize, requested: usize },

    #[error("Var(beta1)*Var(beta2) - Cov(beta1,beta2)^2 must be positive, got {0}")]
    SingularMomentMatrix(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
