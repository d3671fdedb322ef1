use std::io;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("gradient requested for untracked node {0}")]
    UntrackedLeaf(usize),
    #[error("second-order gradient not supported through {0}")]
    Unsupported(&'static str),
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
    #[error("overlay length {got} does not match maskable count {expected}")]
    OverlayLength { expected: usize, got: usize },
    #[error("invalid density {0}; expected a value in (0, 1]")]
    InvalidDensity(f64),
    #[error("empty ticket: round(kappa * d) is zero for kappa={kappa}, d={d}")]
    EmptyTicket { kappa: f64, d: usize },
    #[error("degenerate teacher loss {0:e}")]
    DegenerateTeacherLoss(f64),
    #[error("training diverged: non-finite loss for {streak} consecutive steps (at step {step})")]
    Divergence { step: usize, streak: usize },
    #[error("feature layer count mismatch: student {student}, teacher {teacher}")]
    LayerCountMismatch { student: usize, teacher: usize },
    #[error("zero gradient; GraSP undefined")]
    ZeroGradient,
    #[error("layer collapse: layer `{0}` has no retained weights")]
    LayerCollapse(String),
    #[error("score inversion needs the stored mask distribution")]
    MissingDistribution,
    #[error("combinatorial budget exceeded: {count} masks > {budget}")]
    BudgetExceeded { count: u128, budget: u128 },
    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
