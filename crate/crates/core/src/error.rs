//! Crate-wide error type. Variant names double as the stable error
//! categories surfaced on the CLI and in HTTP diagnostics.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed subject DN: {0}")]
    MalformedDn(String),
    #[error("malformed FQAN: {0}")]
    MalformedFqan(String),

    #[error("unknown user: {0}")]
    UnknownUser(String),
    #[error("session expired")]
    SessionExpired,
    #[error("no such session: {0}")]
    NoSuchSession(String),
    #[error("return URL exceeds the configured length limit ({len} > {limit})")]
    UrlTooLong { len: usize, limit: usize },
    #[error("malformed encoded return URL: {0}")]
    MalformedReturnUrl(String),

    #[error("assertion has expired")]
    ExpiredAssertion,
    #[error("assertion rejected: {0}")]
    InvalidAssertion(String),
    #[error("authorization token unknown, expired or already used")]
    InvalidToken,
    #[error("CSR subject does not match the DN bound to the token: {0}")]
    DnMismatch(String),
    #[error("key below the minimum accepted size: {got} < {min} bits")]
    WeakKey { got: u32, min: u32 },
    #[error("certificate issuance failed: {0}")]
    IssuanceFailed(String),
    #[error("storage failure: {0}")]
    StorageFailed(String),

    #[error("credential expired")]
    CredentialExpired,
    #[error("unknown VO: {0}")]
    UnknownVo(String),
    #[error("attribute grant denied: {0}")]
    AttributeDenied(String),

    #[error("handshake rejected")]
    HandshakeRejected,
    #[error("location outside the configured prefix: {0}")]
    PrefixViolation(String),

    #[error("crypto failure: {0}")]
    Crypto(String),
    #[error("HTTP failure: {0}")]
    Http(String),
}

impl Error {
    /// Stable machine-readable category, used on stderr and in HTTP
    /// error bodies.
    pub fn category(&self) -> &'static str {
        match self {
            Error::MalformedDn(_) => "MalformedDn",
            Error::MalformedFqan(_) => "MalformedFqan",
            Error::UnknownUser(_) => "UnknownUser",
            Error::SessionExpired => "SessionExpired",
            Error::NoSuchSession(_) => "NoSuchSession",
            Error::UrlTooLong { .. } => "UrlTooLong",
            Error::MalformedReturnUrl(_) => "MalformedReturnUrl",
            Error::ExpiredAssertion => "ExpiredAssertion",
            Error::InvalidAssertion(_) => "InvalidAssertion",
            Error::InvalidToken => "InvalidToken",
            Error::DnMismatch(_) => "DnMismatch",
            Error::WeakKey { .. } => "WeakKey",
            Error::IssuanceFailed(_) => "IssuanceFailed",
            Error::StorageFailed(_) => "StorageFailed",
            Error::CredentialExpired => "CredentialExpired",
            Error::UnknownVo(_) => "UnknownVo",
            Error::AttributeDenied(_) => "AttributeDenied",
            Error::HandshakeRejected => "HandshakeRejected",
            Error::PrefixViolation(_) => "PrefixViolation",
            Error::Crypto(_) => "Crypto",
            Error::Http(_) => "Http",
        }
    }
}

impl From<openssl::error::ErrorStack> for Error {
    fn from(e: openssl::error::ErrorStack) -> Self {
        Error::Crypto(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
