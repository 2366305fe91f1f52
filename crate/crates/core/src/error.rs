use thiserror::Error;

#[derive(Debug, Error)]
pub enum DyadError {
    #[error("level overflow: cube at level {level} has no children in a grid of depth {depth}")]
    LevelOverflow { level: u32, depth: u32 },
    #[error("misaligned cube or box: {0}")]
    MisalignedCube(String),
    #[error("degenerate measure: {0}")]
    DegenerateMeasure(String),
    #[error("insufficient samples: got {got}, need at least {need}")]
    InsufficientSamples { got: usize, need: usize },
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("zero-mass cube {0}")]
    ZeroMassCube(String),
    #[error("zero average")]
    ZeroAverage,
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("support violation: {0}")]
    SupportViolation(String),
    #[error("empty truncation ladder")]
    EmptyLadder,
    #[error("budget exceeded: {entries} matrix entries > budget {budget}")]
    BudgetExceeded { entries: usize, budget: usize },
    #[error("unknown suite '{0}'")]
    UnknownSuite(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DyadError>;
