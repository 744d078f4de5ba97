use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(
        "covariance is not symmetric: entry ({row}, {col}) differs from its transpose by {diff:e}"
    )]
    AsymmetricCovariance { row: usize, col: usize, diff: f64 },

    #[error("covariance is not positive semidefinite: smallest eigenvalue {min_eigenvalue:e} (largest {max_eigenvalue:e})")]
    NotPositiveSemidefinite {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },

    #[error("cost of model {index} must be strictly positive, got {value}")]
    NonpositiveCost { index: usize, value: f64 },

    #[error("subset {0} of the sample allocation is empty")]
    ZeroSubsetSize(usize),

    #[error("recursion assignment contains a cycle through models {0:?}")]
    CyclicAssignment(Vec<usize>),

    #[error("recursion assignment for model {model} targets {target}, outside 0..={max}")]
    OutOfRangeTarget {
        model: usize,
        target: usize,
        max: usize,
    },

    #[error("parameter out of range: {0}")]
    OutOfRange(String),

    #[error("budget {budget} cannot buy a single high-fidelity evaluation at cost {w0}")]
    BudgetTooSmall { budget: f64, w0: f64 },

    #[error("no floored allocation satisfies the constraints: {0}")]
    Infeasible(String),

    #[error("budget too small: high-fidelity sample count floors to {0}")]
    DegenerateBudget(f64),

    #[error("constraint violated after flooring: {0}")]
    ConstraintViolatedAfterFloor(String),

    #[error("every candidate sub-optimization was infeasible")]
    AllInfeasible,

    #[error("no scenarios supplied")]
    EmptyScenarioSet,

    #[error("inconsistent execution plan: {0}")]
    InconsistentPlan(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}
