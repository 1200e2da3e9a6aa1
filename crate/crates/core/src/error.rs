use thiserror::Error;

pub type Result<T> = std::result::Result<T, GmyError>;

#[derive(Debug, Error)]
pub enum GmyError {
    #[error("unknown system `{0}` (expected one of: cat, mp_skew, perturbed_cat)")]
    UnknownSystem(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("zero tangent vector has no cone membership")]
    ZeroVector,

    #[error("degenerate splitting frame at ({x:.6}, {y:.6}): angle {angle:.3e} below minimum {min_angle:.3e}")]
    DegenerateFrame {
        x: f64,
        y: f64,
        angle: f64,
        min_angle: f64,
    },

    #[error("splitting frame diverged at orbit index {index}")]
    FrameDivergence { index: usize },

    #[error("disk refinement exceeded the sample budget ({budget} samples)")]
    BudgetExceeded { budget: usize },

    #[error("disk too short around the anchor: need parameter radius {needed:.3e}, have {available:.3e}")]
    InsufficientDisk { needed: f64, available: f64 },

    #[error("image arc length is not monotone in the disk parameter")]
    DegenerateDisk,

    #[error("degenerate tangent vector")]
    DegenerateTangent,

    #[error("stable leaf computation did not converge (last change {0:.3e})")]
    NonConvergence(f64),

    #[error("stable leaf does not meet the target curve")]
    NoIntersection,

    #[error("constant check failed: {0}")]
    ConstantViolation(String),

    #[error("reference search failed: {0}")]
    ReferenceSearchFailed(String),

    #[error("point at parameter {0:.6e} lies in the residual set")]
    ResidualPoint(f64),

    #[error("projection failed: point escaped the cylinder")]
    ProjectionFailed,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
