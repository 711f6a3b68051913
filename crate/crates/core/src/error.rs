use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("phase {tau} outside [0, 1]")]
    PhaseDomain { tau: f64 },

    #[error("time {t} outside [0, {total}]")]
    TimeDomain { t: f64, total: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("basis matrix is singular (smallest singular value {smallest_singular_value:e}, condition estimate {condition:e})")]
    Singular {
        smallest_singular_value: f64,
        condition: f64,
    },

    #[error("configuration metric is not positive definite at tau = {tau}")]
    MetricNotPositiveDefinite { tau: f64 },

    #[error("empty latent batch")]
    EmptyBatch,

    #[error("relaxed distortion undefined: mean trace {mean_trace:e} below 1e-12")]
    DistortionUndefined { mean_trace: f64 },

    #[error("non-finite gradient in {block}")]
    NonFiniteGradient { block: String },

    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("matrix is not skew-symmetric (|S + S^T| = {asymmetry:e})")]
    NotSkew { asymmetry: f64 },

    #[error("rotation angle {angle} is outside the principal branch of log")]
    Branch { angle: f64 },

    #[error("not a rotation matrix: {reason}")]
    NotRotation { reason: String },

    #[error("cannot fit {components} components to {points} points")]
    TooFewPoints { components: usize, points: usize },

    #[error("degenerate support: {0}")]
    DegenerateSupport(String),

    #[error("sampling starved: {accepted} of {requested} accepted after {attempts} attempts (acceptance rate {rate:.4})")]
    SamplingStarved {
        requested: usize,
        accepted: usize,
        attempts: usize,
        rate: f64,
    },

    #[error("no feasible replanning candidate among {evaluated} evaluated")]
    ReplanInfeasible { evaluated: usize },

    #[error("demonstration generation failed: {0}")]
    Generation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {source}")]
    Json {
        what: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        got: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }
}
