use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("input out of domain: {0}")]
    Domain(String),

    #[error("intersection x_({i},{j}) is undefined: equal passive times")]
    DegenerateIntersection { i: i64, j: i64 },

    #[error("operation requires a different buffer regime: {0}")]
    Regime(String),

    #[error("class is not indexable: {0}")]
    NotIndexable(String),

    /// A modelling assumption needed by the relaxed solution does not hold.
    #[error("{name} violated: {detail}")]
    Assumption { name: &'static str, detail: String },

    #[error("no feasible multiplier: {0}")]
    Infeasible(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("problem too large: {0}")]
    Size(String),

    #[error("{0}")]
    Usage(String),
}
