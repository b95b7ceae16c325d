use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("outcome index {outcome} / interventional index {interventional} out of range for a {n_outcome}x{n_interventional} mapping")]
    EdgeOutOfRange {
        outcome: usize,
        interventional: usize,
        n_outcome: usize,
        n_interventional: usize,
    },
    #[error("index {index} out of range (size {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("outcome units with empty interference sets: {0:?}")]
    EmptyInterferenceSet(Vec<usize>),
    #[error("interventional unit {interventional} is not in the interference set of outcome unit {outcome}")]
    NotInInterferenceSet { outcome: usize, interventional: usize },
    #[error("unknown cluster {cluster} (partition has {n_clusters} clusters)")]
    UnknownCluster { cluster: usize, n_clusters: usize },
    #[error("invalid cluster partition: {0}")]
    InvalidPartition(String),
    #[error("mapping is not block-partial with respect to the partition ({n_violations} violations)")]
    PartialInterferenceViolation { n_violations: usize },
    #[error("missing observed {what} for unit `{id}`")]
    MissingObservation { what: &'static str, id: String },
    #[error("missing location for unit `{0}`")]
    MissingLocation(String),
    #[error("invalid geographic point ({lat}, {lon})")]
    InvalidGeoPoint { lat: f64, lon: f64 },
    #[error("allocation probability {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("enumerating 2^{n} allocations exceeds the cap of 2^{cap}; use sampling instead")]
    EnumerationCapExceeded { n: usize, cap: usize },
    #[error("restricted outcome table for outcome unit {outcome} has {got} entries, expected {expected}")]
    TableSize {
        outcome: usize,
        got: usize,
        expected: usize,
    },
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("perfect or quasi-complete separation detected: {0}")]
    Separation(String),
    #[error("design matrix is rank deficient; collinear columns: {0:?}")]
    RankDeficient(Vec<String>),
    #[error("optimizer did not converge after {iterations} iterations (gradient max-norm {gradient_norm:e})")]
    NotConverged {
        iterations: usize,
        gradient_norm: f64,
    },
    #[error("cluster {cluster}: propensity of the observed treatment vector underflows to zero")]
    DenominatorUnderflow { cluster: usize },
    #[error("estimate grid has no cell for a = {a}, alpha = {alpha}")]
    MissingCell { a: u8, alpha: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset is invalid: {0}")]
    InvalidDataset(String),
    #[error("I/O: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
