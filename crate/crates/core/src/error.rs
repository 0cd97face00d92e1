use thiserror::Error;

/// Errors produced anywhere in the fitting, simulation and validation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("missing value in column `{column}` at data row {row}")]
    MissingValue { row: usize, column: String },
    #[error("non-binary value `{value}` in column `{column}` at data row {row}")]
    NonBinary {
        row: usize,
        column: String,
        value: String,
    },
    #[error("non-finite value in column `{column}` at data row {row}")]
    NonFinite { row: usize, column: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("column index {index} out of range for {len} covariates")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("interaction column {0} violates the model hierarchy")]
    HierarchyViolation(usize),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("column mismatch: model expects {expected} covariates, got {actual}")]
    ColumnMismatch { expected: usize, actual: usize },
    #[error("need more observations ({n}) than model columns ({columns})")]
    TooFewObservations { n: usize, columns: usize },
    #[error("perfect or quasi-complete separation: no finite maximum likelihood estimate")]
    Separation,
    #[error("weighted normal equations are singular")]
    Singular,
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("negative likelihood-ratio statistic {0}: models not nested or not converged")]
    NegativeStatistic(f64),
    #[error("invalid penalty configuration: {0}")]
    InvalidConfig(String),
    #[error("every fold failed for every penalty value")]
    DegenerateFold,
    #[error("no root of the prevalence equation in the search bracket")]
    NoRoot,
    #[error("strategy cannot be fitted: {0}")]
    StrategyInfeasible(String),
    #[error("unknown strategy id `{0}`")]
    UnknownStrategy(String),
    #[error("need at least {needed} subjects, got {actual}")]
    TooFewSubjects { needed: usize, actual: usize },
    #[error("all outcomes identical: null log-likelihood is zero")]
    DegenerateNull,
    #[error("outcome has a single class")]
    SingleClass,
    #[error("out-of-bag set empty after {0} redraws")]
    AllInBag(usize),
    #[error("aggregation cell has no successful runs")]
    EmptyCell,
    #[error("study aborted: {0}")]
    StudyAborted(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
