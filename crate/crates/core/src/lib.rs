//! Bridge between federated web single sign-on and X.509-based
//! infrastructure: turn a signed login assertion into a short-lived
//! certificate from an online CA, then derive attribute-bearing proxy
//! credentials from it — all without the user ever handling key
//! material by hand.
//!
//! The crate ships in-process simulators for every party involved
//! (identity provider, service provider, online CA, VO membership
//! service) plus loopback HTTP fronts for all of them, so the complete
//! choreography runs on a single machine. See [`stack::SimStack`] for
//! the one-call bootstrap.

pub mod browser;
pub mod ca;
pub mod client;
pub mod clock;
pub mod error;
pub mod gateway;
pub mod model;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod proxy;
pub mod secrets;
pub mod services;
pub mod sso;
pub mod stack;
pub mod store;
pub mod voms;
pub mod x509;

pub use clock::{system_clock, Clock, MockClock, SharedClock, SystemClock, Timestamp};
pub use error::{Error, Result};
pub use model::{
    Assertion, CertificateConstraints, Credential, Fqan, ProxyCredential, SubjectDn,
    MAX_CERT_LIFETIME,
};
