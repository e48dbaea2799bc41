//! Error type shared by all solver and verification modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("unsupported dimension {0} (only 1 and 2 are implemented)")]
    UnsupportedDimension(usize),

    #[error("invalid parameter `{name}`: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("diffusion coefficient not positive at face x=({x}, {y}): a={value}")]
    NonPositiveCoefficient { x: f64, y: f64, value: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in `{what}` at node {node}, time level {level}")]
    NonFinite {
        what: &'static str,
        node: usize,
        level: usize,
    },

    #[error("Newton did not converge at time step {step}: residual {residual:.3e} after {iters} iterations")]
    NewtonDiverged {
        step: usize,
        residual: f64,
        iters: usize,
    },

    #[error("linear solver breakdown at time step {step}: non-SPD system (p'Ap = {curvature:.3e}, min diagonal = {min_diag:.3e})")]
    LinearBreakdown {
        step: usize,
        curvature: f64,
        min_diag: f64,
    },

    #[error("derivative callback `{which}` disagrees with finite differences at (x={x:.4}, t={t:.4}, y={y:.4}, u={u:.4}): analytic {analytic:.6e} vs fd {fd:.6e}")]
    DerivativeMismatch {
        which: &'static str,
        x: f64,
        t: f64,
        y: f64,
        u: f64,
        analytic: f64,
        fd: f64,
    },

    #[error("spec is not convex: {0}")]
    NonConvexSpec(String),

    #[error("field is constant: Hölder exponent undefined")]
    ConstantField,

    #[error("critical-direction sampling rejected {rejected} of {attempts} attempts; lower the requested sample count")]
    SamplingExhausted { rejected: usize, attempts: usize },

    #[error("unknown catalog problem `{0}`")]
    UnknownCatalog(String),

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CoreError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("malformed field file {path}: {message}")]
    MalformedFieldFile { path: String, message: String },
}

impl CoreError {
    pub fn invalid(name: &'static str, message: impl Into<String>) -> Self {
        CoreError::InvalidParameter {
            name,
            message: message.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        CoreError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
