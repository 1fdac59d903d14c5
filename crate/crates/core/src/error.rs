use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("site count {count} exceeds cap {cap}")]
    SiteCapExceeded { count: usize, cap: usize },

    #[error("site {0} is outside the box")]
    SiteOutOfBox(usize),

    #[error("site {0} has no positive conductance")]
    IsolatedSite(usize),

    #[error("domain is empty")]
    EmptyDomain,

    #[error("singular killed system: component of {size} sites containing site {site} has no exit")]
    SingularSystem { site: usize, size: usize },

    #[error("matrix-power budget exceeded: {requested} > {budget}")]
    BudgetExceeded { requested: u64, budget: u64 },

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("torus too small: need radius at least {required}, have {actual}")]
    TorusTooSmall { required: usize, actual: usize },

    #[error("pair function must vanish on the diagonal (site {0})")]
    DiagonalNonzero(usize),

    #[error("io: {0}")]
    Io(String),

    #[error("format: {0}")]
    Format(String),
}

impl Error {
    pub fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { field: field.into(), reason: reason.into() }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
