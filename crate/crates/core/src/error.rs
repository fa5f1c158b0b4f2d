use alloc::boxed::Box;
use alloc::vec::Vec;

/// Everything that can go wrong in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid network: {0}")]
    InvalidNetwork(&'static str),
    #[error("routing matrix is not transient (row {row} sums to {sum}, or spectral radius >= 1)")]
    NonTransientRouting { row: usize, sum: f64 },
    #[error("class {class} has zero total arrival rate")]
    ZeroTraffic { class: usize },
    #[error("bad station map: {0}")]
    BadStationMap(&'static str),

    #[error("priority order misses class {class}")]
    IncompleteOrder { class: usize },
    #[error("class {class} appears twice in the priority order")]
    DuplicateClass { class: usize },
    #[error("class {class} is listed at station {station} but is served elsewhere")]
    WrongStation { class: usize, station: usize },

    #[error("control {control} failed at step {step}: {source}")]
    ControlEvaluation {
        step: u64,
        control: usize,
        source: Box<Error>,
    },
    #[error("initial state has {got} coordinates, expected {expected}")]
    StateDimension { expected: usize, got: usize },

    #[error("need at least 3 batches, got {0}")]
    TooFewBatches(usize),
    #[error("series of length {len} cannot fill {batches} batches")]
    TooFewObservations { len: usize, batches: usize },
    #[error("response and control series differ in length ({response} vs {control})")]
    SeriesLength { response: usize, control: usize },
    #[error("run carries no control series at index {0}")]
    MissingControl(usize),

    #[error("fluid boundary allocation did not converge at state {state:?}")]
    NonConvergentBoundary { state: Vec<f64> },
    #[error("fluid model does not drain from {state:?}")]
    FluidUnstable { state: Vec<f64> },

    #[error("queue is unstable (lambda = {lambda}, mu = {mu})")]
    UnstableQueue { lambda: f64, mu: f64 },
    #[error("power iteration did not converge (residual {residual:e})")]
    NoConvergence { residual: f64 },
    #[error("fluid oracle did not drain before t = {horizon}")]
    HorizonExceeded { horizon: f64 },
    #[error("truncated state space too large ({0} states)")]
    StateSpaceTooLarge(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error("matrix is singular")]
    Singular,
}
