use std::fmt;

use thiserror::Error;

/// A single invariant violation found while validating a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Index of the offending record (timepoint).
    pub record: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    CoordinateOutOfRange { location: usize, axis: usize, value: f64 },
    NonIncreasingTime { previous: f64, current: f64 },
    DuplicateLocation { first: usize, second: usize },
    DimensionMismatch { location: usize, expected: usize, found: usize },
    EmptyTimepoint,
    NonFiniteResponse { location: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::CoordinateOutOfRange { location, axis, value } => write!(
                f,
                "CoordinateOutOfRange at record {}: location {location} axis {axis} = {value}",
                self.record
            ),
            ViolationKind::NonIncreasingTime { previous, current } => write!(
                f,
                "NonIncreasingTime at record {}: {current} follows {previous}",
                self.record
            ),
            ViolationKind::DuplicateLocation { first, second } => write!(
                f,
                "DuplicateLocation at record {}: locations {first} and {second} coincide",
                self.record
            ),
            ViolationKind::DimensionMismatch { location, expected, found } => write!(
                f,
                "DimensionMismatch at record {}: location {location} has {found} coordinates, expected {expected}",
                self.record
            ),
            ViolationKind::EmptyTimepoint => {
                write!(f, "EmptyTimepoint at record {}: no locations", self.record)
            }
            ViolationKind::NonFiniteResponse { location } => write!(
                f,
                "NonFiniteResponse at record {}: location {location}",
                self.record
            ),
        }
    }
}

/// Every violation found in one pass over a dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    Validation(ValidationReport),
    #[error("DegenerateRange: axis {axis} has max == min ({value})")]
    DegenerateRange { axis: String, value: f64 },
    #[error("UnsupportedCount: {count} basis functions requested in dimension {dim}, at most {max} available")]
    UnsupportedCount { dim: usize, count: usize, max: usize },
    #[error("IndexOutOfRange: basis index {index} with {count} functions")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("EmptyLocations: no observed locations")]
    EmptyLocations,
    #[error("InvalidResolution: effective resolution must be positive, got {0}")]
    InvalidResolution(f64),
    #[error("ResolutionTooFine: {cells} cells exceed the cap of {cap}")]
    ResolutionTooFine { cells: f64, cap: usize },
    #[error("InvalidTruncation: truncation level {requested} with {available} basis functions")]
    InvalidTruncation { requested: usize, available: usize },
    #[error("NoNeighbors: no covariate within the kernel support at bandwidth {bandwidth}")]
    NoNeighbors { bandwidth: f64 },
    #[error("DegenerateSupport: {count} timepoints in the kernel support, at least 2 required")]
    DegenerateSupport { count: usize },
    #[error("InvalidLocation: {0:?} is outside the unit hypercube or has the wrong dimension")]
    InvalidLocation(Vec<f64>),
    #[error("InsufficientLocations: record {record} has fewer than 2 locations")]
    InsufficientLocations { record: usize },
    #[error("NoCandidate: every hyperparameter candidate was disqualified")]
    NoCandidate,
    #[error("QuadratureOverflow: {nodes} nodes exceed the cap of {cap}")]
    QuadratureOverflow { nodes: f64, cap: usize },
    #[error("CorrelationBound: |c| = {value} exceeds its Cauchy-Schwarz bound")]
    CorrelationBound { value: f64 },
    #[error("IllConditionedSystem: condition number {condition:e} exceeds cap {cap:e}")]
    IllConditionedSystem { condition: f64, cap: f64 },
    #[error("NoPairs: {0}")]
    NoPairs(String),
    #[error("DimensionMismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("InvalidLevel: {0}")]
    InvalidLevel(f64),
    #[error("InvalidM: m_n = {0}, at least 2 required")]
    InvalidM(usize),
    #[error("QueriesTooClose: pairs {pairs:?} are within 2*h*lambda = {threshold}")]
    QueriesTooClose { pairs: Vec<(usize, usize)>, threshold: f64 },
    #[error("FirstTimepointUnavailable: scenario {0} has no lagged value at the first timepoint")]
    FirstTimepointUnavailable(String),
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("ParseError at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("JoinError: unmatched timepoints {0:?}")]
    Join(Vec<f64>),
    #[error("FactorizationFailed: covariance has minimum eigenvalue {0:e}")]
    Factorization(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
