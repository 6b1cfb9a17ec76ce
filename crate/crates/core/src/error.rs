use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate rotation representation: {0}")]
    DegenerateRepresentation(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("virtual distance for segment `{segment}` is {distance_mm} mm (< 1 mm)")]
    DegenerateVirtualDistance { segment: String, distance_mm: f64 },

    #[error("unsolvable frame: {0}")]
    UnsolvableFrame(String),

    #[error("degenerate view: {0}")]
    DegenerateView(String),

    #[error("non-finite gradient in layer `{layer}`")]
    NonFiniteGradient { layer: String },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged {
        epoch: usize,
        last_good: Box<crate::learn::Checkpoint>,
    },

    #[error("{}:{line}: field `{field}`: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        path: impl Into<PathBuf>,
        line: usize,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by malformed or unreadable input files.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Parse { .. } | Error::Io { .. } | Error::Json { .. })
    }
}
