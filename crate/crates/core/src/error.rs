use thiserror::Error;

/// Errors shared across the solver modules.
#[derive(Error, Debug, Clone)]
pub enum Error {
    #[error("malformed specification: {0}")]
    MalformedSpec(String),

    #[error("solver did not converge after {iterations} iterations (last residual {last_residual:.3e}{})",
        failing_alpha.map(|a| format!(", failing homotopy step alpha = {a}")).unwrap_or_default())]
    NotConverged {
        iterations: usize,
        last_residual: f64,
        /// Sup-norm distance between successive iterates, one entry per iteration.
        history: Vec<f64>,
        /// Set when a homotopy solve fails partway along the parameter path.
        failing_alpha: Option<f64>,
    },

    #[error("matrix numerically singular in {context} (condition estimate {cond:.3e})")]
    SingularMatrix { context: String, cond: f64 },

    #[error("riccati solution escaped to {max_entry:.3e} at t = {escape_time:.6}")]
    BlowUp { escape_time: f64, max_entry: f64 },

    #[error("projection iteration exceeded {0} steps without meeting tolerance")]
    ProjectionNotConverged(usize),

    #[error("transform assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error(
        "forward recombination defect {0:.3e} exceeds tolerance; solve on a path-dependent tree"
    )]
    RecombinationBroken(f64),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn not_converged(history: Vec<f64>, failing_alpha: Option<f64>) -> Self {
        Error::NotConverged {
            iterations: history.len(),
            last_residual: history.last().copied().unwrap_or(f64::NAN),
            history,
            failing_alpha,
        }
    }
}
