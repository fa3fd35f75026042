use thiserror::Error;

/// Errors raised by the construction and verification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed document: {0}")]
    Malformed(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("invalid point index {0}")]
    InvalidPoint(usize),
    #[error("asymmetric distance between {0} and {1}")]
    Asymmetric(usize, usize),
    #[error("negative or non-finite distance between {0} and {1}")]
    NegativeDistance(usize, usize),
    #[error("distinct points {0} and {1} at distance zero")]
    ZeroDistance(usize, usize),
    #[error("nonpositive weight at point {0}")]
    NonpositiveWeight(usize),
    #[error("triangle inequality violated by ({0}, {1}, {2})")]
    Triangle(usize, usize, usize),
    #[error("neighbor graph disconnected: {0} components")]
    Disconnected(usize),
    #[error("chart sets overlap at points {0:?}")]
    ChartOverlap(Vec<usize>),
    #[error("chart sets leave points {0:?} uncovered")]
    ChartGap(Vec<usize>),
    #[error("dimension mismatch in chart {chart}: expected {expected}, found {found}")]
    DimensionMismatch {
        chart: usize,
        expected: usize,
        found: usize,
    },
    #[error("chart {0} has zero Lipschitz constant but positive dimension")]
    DegenerateChart(usize),
    #[error("empty window at point {0}")]
    EmptyWindow(usize),
    #[error("not differentiable at {point}: witness {witness}")]
    NotDifferentiable { point: usize, witness: usize },
    #[error("point {0} lies in no chart")]
    NoChart(usize),
    #[error("regions overlap at point {0}")]
    RegionOverlap(usize),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no good cube down to the finest level for points {0:?}")]
    Uncovered(Vec<usize>),
    #[error("empty inner region for cube {0}; coarsen t")]
    EmptyInnerRegion(usize),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("budget infeasible at iteration {n}: needed {needed:.6e}, allowed {allowed:.6e}")]
    BudgetInfeasible { n: usize, needed: f64, allowed: f64 },
    #[error("exhaustion stuck at stage {stage}: no capture for 3 stages, {} points left: {points:?}", points.len())]
    Stuck { stage: usize, points: Vec<usize> },
    #[error("unknown format `{0}`")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
