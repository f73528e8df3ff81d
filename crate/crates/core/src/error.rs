use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-dissipative mode k={k} (lambda={lambda}), stationary law undefined")]
    NonDissipative { k: usize, lambda: f64 },

    #[error("degenerate increments: {0}")]
    DegenerateIncrements(String),

    #[error("curvature not identifiable from one spatial point")]
    NotIdentifiable,

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("malformed field data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by the filesystem rather than by invalid input.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
