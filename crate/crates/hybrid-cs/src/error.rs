//! Error type shared by every solver and integrator in the crate.

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes of the steering pipeline.
///
/// Variants mirror the conditions the numerical routines actually guard
/// against; the payload carries the diagnostic the caller needs to decide
/// whether to retry, reroute (analytic → SDP), or give up.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("guard never changes sign on the sampled trajectory")]
    NoCrossing,

    #[error("tangential crossing: |dg/dt along the flow| = {derivative:.3e} at t = {t}")]
    TangentialCrossing { t: f64, derivative: f64 },

    #[error("grazing event: saltation denominator {denominator:.3e} below threshold")]
    Grazing { denominator: f64 },

    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },

    #[error("more than {max_events} hybrid events in one rollout (Zeno guard)")]
    ZenoGuard { max_events: usize },

    #[error("kernel identity residual {residual:.3e} exceeds {tolerance:.1e}; integration grid too coarse")]
    IllConditionedKernel { residual: f64, tolerance: f64 },

    #[error("phi12 block is numerically singular")]
    SingularPhi12,

    #[error("psi12 block is numerically singular")]
    SingularPsi12,

    #[error("matrix square-root argument has eigenvalue {min_eigenvalue:.3e} < 0")]
    NonpositiveSqrtArgument { min_eigenvalue: f64 },

    #[error("Riccati state norm {norm:.3e} exceeded blow-up bound at t = {t}")]
    RiccatiBlowup { t: f64, norm: f64 },

    #[error("covariance lost positive semidefiniteness: min eigenvalue {min_eigenvalue:.3e} at t = {t}")]
    PsdViolation { t: f64, min_eigenvalue: f64 },

    #[error("saltation matrix is not invertible (condition number {cond:.3e}); use the SDP path")]
    NoninvertibleSaltation { cond: f64 },

    #[error("composed kernel identity residual {residual:.3e} exceeds {tolerance:.1e}")]
    IdentityResidualExceeded { residual: f64, tolerance: f64 },

    #[error("segment Gramian is numerically singular (min/max eigenvalue ratio {ratio:.3e})")]
    GramianSingular { ratio: f64 },

    #[error("candidate outside the log-det domain: {context}")]
    InfeasibleLogdetDomain { context: String },

    #[error("solver hit the iteration limit ({iterations}) with gradient norm {gradient_norm:.3e}")]
    MaxIterations { iterations: usize, gradient_norm: f64 },

    #[error("no strictly feasible starting point found")]
    Infeasible,

    #[error("iLQR diverged: no cost-decreasing step found from the initial trajectory")]
    Diverged,

    #[error("matrix is numerically singular: {context}")]
    SingularMatrix { context: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit-code contract of the CLI: 2 config, 3 solver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Json(_) => 2,
            _ => 3,
        }
    }
}
