use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("{format} parse error at byte {offset}: {message}")]
    Parse {
        format: &'static str,
        offset: usize,
        message: String,
    },

    #[error("non-finite value in {context} at t={timestep}")]
    NonFinite { context: &'static str, timestep: usize },

    #[error("missing trajectory latent for t={0}")]
    MissingTimestep(usize),

    #[error("view at azimuth {azimuth}: {source}")]
    View {
        azimuth: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(context: &'static str, expected: (usize, usize), actual: (usize, usize)) -> Self {
        Error::ShapeMismatch {
            context,
            expected: format!("{}x{}", expected.0, expected.1),
            actual: format!("{}x{}", actual.0, actual.1),
        }
    }

    /// Numeric failures (divergence, NaN) as opposed to bad input data.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::View { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    pub fn in_view(self, azimuth: f64) -> Self {
        Error::View {
            azimuth,
            source: Box::new(self),
        }
    }
}
