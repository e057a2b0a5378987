use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid walk: {0}")]
    InvalidWalk(String),
    #[error("rate graph is not strongly connected")]
    NotIrreducible,
    #[error("degenerate model: {0}")]
    DegenerateModel(String),
    #[error("alpha must satisfy alpha > 2 (got {0})")]
    AlphaOutOfRange(f64),
    #[error("sets must be non-empty and disjoint")]
    SetsOverlapOrEmpty,
    #[error("linear solve failed: {0}")]
    SolverFailure(String),
    #[error("configuration space too large for the index width")]
    Overflow,
    #[error("capacity vanishes")]
    ZeroCapacity,
    #[error("boundary condition violated: {0}")]
    BoundaryConditionViolated(String),
    #[error("test flow has zero distance to the induced flow")]
    DegenerateDenominator,
    #[error("edge ({0}, {1}) is not in the configuration graph")]
    EdgeOutsideGraph(usize, usize),
    #[error("function is not defined on the neighbourhood of the set")]
    UndefinedOnNeighborhood,
    #[error("valley must be a non-empty proper subset")]
    EmptyOrFullValley,
    #[error("function is not constant on the collapsed valley")]
    NotConstantOnValley,
    #[error("scale order floor(N eps) > pi_N > ell_N >= 1 fails at N = {n}; smallest admissible N is {min_n}")]
    ScaleOrderViolated { n: u32, min_n: u64 },
    #[error("eps must lie in (0, 1/16] (got {0})")]
    EpsOutOfRange(f64),
    #[error("ramp property check failed: {0}")]
    PropertyCheckFailed(String),
    #[error("configuration is outside the tube")]
    OutsideTube,
    #[error("missing constituent: {0}")]
    ConstituentMissing(String),
}

pub type Result<T> = std::result::Result<T, Error>;
