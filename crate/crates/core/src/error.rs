use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: not an embedding bundle (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported bundle version {found}")]
    VersionMismatch { path: PathBuf, found: u16 },
    #[error("bundle dimension is zero")]
    DimZero,
    #[error("bundle row count {rows} does not fit in memory or file")]
    RowCountOverflow { rows: u64 },
    #[error("row {row} has near-zero norm and cannot be normalized")]
    ZeroNormRow { row: usize },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),

    #[error("template {0:?} must contain exactly one `{{}}` placeholder")]
    NoPlaceholder(String),
    #[error("library is empty: {0}")]
    EmptyLibrary(String),
    #[error("manifest fingerprint {found} does not match expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("manifest has {manifest} entries but text bundle has {rows} rows")]
    CountMismatch { manifest: usize, rows: usize },

    #[error("text id {0} is unbound or out of range")]
    UnboundId(usize),
    #[error("template id {0} is not in the prompt space")]
    UnknownTemplate(usize),
    #[error("candidate has no templates")]
    EmptyCandidate,
    #[error("cannot remove text id {id} from class {class}: not present")]
    RemoveAbsent { class: usize, id: usize },
    #[error("pearson correlation undefined: {0}")]
    DegenerateVariance(String),

    #[error("population is empty")]
    EmptyPopulation,
    #[error("descriptions are not bound for class {0}")]
    UnboundDescriptions(usize),
    #[error("template library is empty")]
    NoTemplates,

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("unresolvable text for class {class}: {text:?}")]
    UnresolvedText { class: usize, text: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by a bad configuration rather than bad data.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::SpecInvalid(_))
    }
}
