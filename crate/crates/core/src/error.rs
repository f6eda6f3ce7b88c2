use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("inversion failed after {iterations} iterations (residual {residual:e})")]
    InversionFailure { residual: f64, iterations: usize },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("orientation check failed: det = {det:e} is not positive")]
    Orientation { det: f64 },

    #[error("matrix is ill-conditioned: sigma_min = {sigma_min:e}")]
    Conditioning { sigma_min: f64 },

    #[error("infeasible schedule for m = {m}, epsilon = {epsilon}: smallest sufficient m is {min_m}")]
    Infeasible { m: usize, epsilon: f64, min_m: usize },

    #[error("outside the near-identity regime: {0}")]
    Regime(String),

    #[error("domain sample cloud is empty")]
    EmptyDomain,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("generator network computes the identity on every probe point")]
    IdentityGenerator,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_layer(self, layer: usize) -> Self {
        Error::Layer { layer, source: Box::new(self) }
    }

    /// Errors that follow from the mathematics of the input (wrong orientation,
    /// infeasible schedule, identity generator, deviation outside `[0, 1)`)
    /// rather than from a bug or a bad config. The CLI maps these to exit code 2.
    pub fn is_expected_rejection(&self) -> bool {
        match self {
            Error::Orientation { .. } | Error::Infeasible { .. } | Error::IdentityGenerator | Error::Regime(_) => {
                true
            }
            Error::Layer { source, .. } => source.is_expected_rejection(),
            _ => false,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
