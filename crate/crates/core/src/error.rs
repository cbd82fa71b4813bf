use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("modality index {index} out of range for a model with {count} modalities")]
    Index { index: usize, count: usize },

    #[error("family error: {0}")]
    Family(String),

    #[error("sampling plan error: {0}")]
    Plan(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("pairing error: class {class} is present in only one dataset")]
    Pairing { class: u16 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(
        "non-finite objective at epoch {epoch}, batch {batch}; parameter norms: {norms}"
    )]
    NumericAbort {
        epoch: usize,
        batch: usize,
        norms: String,
    },

    #[error("accuracy gate unmet: measured {measured:.4}, required {required:.4}")]
    Gate { measured: f64, required: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shapes(op: &str, a: &[usize], b: &[usize]) -> Self {
        Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
    }
}
