use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum RcuError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("precondition violated in {op}: {detail}")]
    Precondition { op: &'static str, detail: String },

    #[error("{op} did not converge: {detail}")]
    Convergence { op: &'static str, detail: String },

    #[error("rotation angle {angle} outside the principal branch [0, pi){context}")]
    Branch { angle: f64, context: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("training diverged in {stage} at step {step}")]
    Divergence { stage: &'static str, step: usize },

    #[error("request {request} failed during {stage}: {source}")]
    Stage {
        request: usize,
        stage: &'static str,
        #[source]
        source: Box<RcuError>,
    },

    #[error("request record {0} is immutable once written")]
    RecordImmutable(usize),

    #[error("malformed archive: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = RcuError> = std::result::Result<T, E>;

impl RcuError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        RcuError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn pre(op: &'static str, detail: impl Into<String>) -> Self {
        RcuError::Precondition { op, detail: detail.into() }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        RcuError::Domain { op, detail: detail.into() }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        RcuError::Degenerate { op, detail: detail.into() }
    }

    pub(crate) fn at_stage(self, request: usize, stage: &'static str) -> Self {
        RcuError::Stage { request, stage, source: Box::new(self) }
    }
}
