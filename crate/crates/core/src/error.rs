use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite intermediate at flow layer {layer}: {detail}")]
    FlowLayer { layer: usize, detail: String },

    #[error("non-finite loss for sample {index}")]
    NonFiniteLoss { index: usize },

    #[error("target {z} for dimension {dim} is outside the attainable range ({lo}, {hi})")]
    OutOfRange { dim: usize, z: f64, lo: f64, hi: f64 },

    #[error("inversion of dimension {dim} did not converge (residual {residual:e})")]
    NoConvergence { dim: usize, residual: f64 },

    #[error("sampler saturated: {rejected} of the last {window} draws fell outside the flow range")]
    Saturation { rejected: usize, window: usize },

    #[error("tape contract violation: {0}")]
    Contract(String),

    #[error("training diverged at iteration {iter} (loss {loss})")]
    Divergence { iter: usize, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the caller's input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::FlowLayer { .. }
                | Error::NonFiniteLoss { .. }
                | Error::OutOfRange { .. }
                | Error::NoConvergence { .. }
                | Error::Saturation { .. }
                | Error::Divergence { .. }
        )
    }
}
