use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid label {label} (num_classes = {num_classes})")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("client {client} received no samples after {attempts} partition attempts")]
    EmptyClient { client: usize, attempts: usize },

    #[error("format error in field `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("protocol misuse: {0}")]
    ProtocolMisuse(String),

    #[error("prompt too short: sequence length {len} must exceed prefix length {prefix}")]
    PromptTooShort { len: usize, prefix: usize },

    #[error("insufficient classes: {present} present, at least 2 required")]
    InsufficientClasses { present: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("unsupported metric: {0}")]
    UnsupportedMetric(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips any context layers and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self.root(), Error::Config(_))
    }
}

/// Attaches a human-readable location (round, client, module) to an error.
pub trait ResultExt<T> {
    fn context<S: Into<String>>(self, context: impl FnOnce() -> S) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context<S: Into<String>>(self, context: impl FnOnce() -> S) -> Result<T> {
        self.map_err(|source| Error::Context {
            context: context().into(),
            source: Box::new(source),
        })
    }
}
