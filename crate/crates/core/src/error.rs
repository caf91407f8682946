use thiserror::Error;

/// Errors raised anywhere in the homogenization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("infeasible cell geometry: {0}")]
    Geometry(String),

    #[error("mesh topology error: {0}")]
    Topology(String),

    #[error("degenerate mesh: {0}")]
    Mesh(String),

    #[error("invalid coefficient: {0}")]
    Coefficient(String),

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    SolverDivergence { iterations: usize, residual: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("incompatible singular system: rhs component along the kernel is {defect:.3e} (relative)")]
    Compatibility { defect: f64 },

    #[error("degenerate coupling: f'(u0) = {fprime:.3e} is below the solvable threshold; use the u0 -> infinity limit solver")]
    DegenerateCoupling { fprime: f64 },

    #[error("velocity field has zero L2 norm")]
    DegenerateVelocity,

    #[error("drift mismatch: bulk drift ({bulk:?}) and surface drift ({surface:?}) differ by {gap:.3e}")]
    DriftMismatch {
        bulk: [f64; 2],
        surface: [f64; 2],
        gap: f64,
    },

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("newton iteration failed after {iterations} iterations (residual {residual:.3e}); try a smaller time step")]
    Newton { iterations: usize, residual: f64 },

    #[error("coercivity violated: lambda_min(A_sym) = {lambda_min:.6e} < bound {bound:.6e}")]
    Coercivity { lambda_min: f64, bound: f64 },

    #[error("dispersion tabulation failed at u0 = {u0}: {source}")]
    Tabulation { u0: f64, source: Box<Error> },

    #[error("failed to parse {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
