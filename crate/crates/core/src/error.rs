use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("empty input sequence")]
    EmptyInput,
    #[error("window size must be at least 1")]
    InvalidWindow,
    #[error("chunk size must be at least 1")]
    InvalidChunk,
    #[error("gate value {0} outside the unit interval")]
    GateDomain(f32),
    #[error("value {0} outside the open interval (0, 1)")]
    Domain(f32),
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("top_k = {top_k} is not in 1..={experts}")]
    TopK { top_k: usize, experts: usize },
    #[error("negative count {0} cannot be binary coded")]
    NegativeBinary(i32),
    #[error("count {count} does not fit in {bits} steps")]
    BitOverflow { count: i32, bits: u32 },
    #[error("event value {value} is not valid for the {scheme} scheme")]
    MalformedEvent { value: i8, scheme: &'static str },
    #[error("token id {token} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("layer caches do not match the model")]
    CacheMismatch,
    #[error("integer accumulator overflow")]
    IntegerOverflow,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
