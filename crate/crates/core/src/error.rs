use thiserror::Error;

use crate::dag::StateId;

/// Structural problems found while validating a pointed DAG.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DagError {
    #[error("dag has no states")]
    Empty,
    #[error("state ids must be the dense range 0..{expected}; found {found}")]
    NonDenseStates { expected: usize, found: usize },
    #[error("edge ({0}, {1}) references an unknown state")]
    UnknownState(StateId, StateId),
    #[error("initial state {0} is not a known state")]
    UnknownInitial(StateId),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(StateId, StateId),
    #[error("cycle detected through state {0}")]
    Cycle(StateId),
    #[error("multiple sources: {0:?}")]
    MultipleSources(Vec<StateId>),
    #[error("initial state {initial} is not the source (the source is {source_state})")]
    InitialNotSource {
        initial: StateId,
        source_state: StateId,
    },
    #[error("terminating state {0} has an outgoing edge")]
    TerminatingHasChild(StateId),
    #[error("state {0} has no outgoing edge but is not marked terminating")]
    SinkNotTerminating(StateId),
    #[error("state {0} is unreachable from the initial state")]
    Unreachable(StateId),
    #[error("layer index invalid: {0}")]
    BadLayering(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dag: {0}")]
    Dag(#[from] DagError),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("enumeration cap of {cap} exceeded")]
    CapExceeded { cap: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("state {state} has no {direction} neighbors")]
    NoNeighbors {
        state: StateId,
        direction: &'static str,
    },
    #[error("({0}, {1}) is not an edge of the dag")]
    NotAnEdge(StateId, StateId),
    #[error("reward at state {state} is not strictly positive ({value})")]
    NonPositiveReward { state: StateId, value: f64 },
    #[error("coordinate {coord} out of range for side length {side}")]
    CoordinateOutOfRange { coord: usize, side: usize },
    #[error("no flow value defined at state {0}")]
    MissingFlow(StateId),
    #[error("state {0} is not a hub state")]
    NotAHub(StateId),
    #[error("dag is not graded")]
    NotGraded,
    #[error("epsilon-shifted behavior needs an environment with a distinguished exit action")]
    NoExitAction,
    #[error("empty batch")]
    EmptyBatch,
    #[error("importance weights are all zero or non-finite")]
    DegenerateWeights,
    #[error("distributions have different supports")]
    SupportMismatch,
    #[error("divergence undefined: {0}")]
    SupportViolation(&'static str),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("zero denominator: every score vector vanishes")]
    ZeroDenominator,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(
        "trajectory is stale: cached under parameter version {cached}, policy is at {current}"
    )]
    StaleTrajectory { cached: u64, current: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
