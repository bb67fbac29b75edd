use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding or validating an `OPTN` container.
#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected \"OPTN\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensors {first} and {second} overlap in the payload")]
    Overlap { first: String, second: String },
    #[error("payload out of bounds for tensor {0}")]
    OutOfBounds(String),
    #[error("tensor {0} is not 64-byte aligned")]
    Misaligned(String),
    #[error("tensor {0} contains non-finite values")]
    NonFinite(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name}: {detail}")]
    BadTensor { name: String, detail: String },
}

impl ContainerError {
    pub fn code(&self) -> &'static str {
        match self {
            ContainerError::BadMagic(_) => "bad_magic",
            ContainerError::VersionMismatch { .. } => "version_mismatch",
            ContainerError::Header(_) => "bad_header",
            ContainerError::Overlap { .. } => "overlap",
            ContainerError::OutOfBounds(_) => "out_of_bounds",
            ContainerError::Misaligned(_) => "misaligned",
            ContainerError::NonFinite(_) => "non_finite",
            ContainerError::MissingTensor(_) => "missing_tensor",
            ContainerError::BadTensor { .. } => "bad_tensor",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("mask does not match model: {0}")]
    MaskMismatch(String),
    #[error("token overflow: {0}")]
    TokenOverflow(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("cached trace does not match: {0}")]
    CacheMismatch(String),
    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),
    #[error("instance too large: {0}")]
    TooLarge(String),
    #[error("unsupported architecture: {0}")]
    Arch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("reference check failed: {0}")]
    ReferenceMismatch(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable identifier, emitted by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Param(_) => "parameter",
            Error::MaskMismatch(_) => "mask_mismatch",
            Error::TokenOverflow(_) => "token_overflow",
            Error::Index(_) => "index",
            Error::CacheMismatch(_) => "cache_mismatch",
            Error::InfeasibleBudget(_) => "infeasible_budget",
            Error::TooLarge(_) => "too_large",
            Error::Arch(_) => "architecture",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::ReferenceMismatch(_) => "reference_mismatch",
            Error::Container(e) => e.code(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
