//! Core domain types shared by every other module. No I/O here.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use openssl::hash::MessageDigest;
use openssl::pkey::{PKey, Private, Public};
use openssl::sign::{Signer, Verifier};
use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::error::{Error, Result};

/// Default validity of a federation assertion: 5 minutes.
pub const DEFAULT_ASSERTION_VALIDITY: u64 = 300;
/// Default identity-provider / service-provider session length: 8 hours.
pub const DEFAULT_SESSION_VALIDITY: u64 = 28_800;
/// Upper bound on the lifetime of an issued certificate: 1'000'000 seconds.
pub const MAX_CERT_LIFETIME: u64 = 1_000_000;

/// Ordered list of (attribute, value) relative distinguished names.
///
/// The canonical rendering is the slash-separated form used throughout
/// grid middleware, e.g. `/C=CH/O=SimFed/CN=alice`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubjectDn {
    rdns: Vec<(String, String)>,
}

impl SubjectDn {
    /// Well-formed components: non-empty attribute and value, neither
    /// containing `/` or `=` (the canonical-form separators).
    pub fn new(rdns: Vec<(String, String)>) -> Result<Self> {
        if rdns.is_empty() {
            return Err(Error::MalformedDn("empty DN".into()));
        }
        for (attr, value) in &rdns {
            if attr.is_empty() || value.is_empty() {
                return Err(Error::MalformedDn(format!("empty component in {rdns:?}")));
            }
            if attr.contains(['/', '=']) || value.contains(['/', '=']) {
                return Err(Error::MalformedDn(format!(
                    "reserved character in component ({attr}, {value})"
                )));
            }
        }
        Ok(SubjectDn { rdns })
    }

    pub fn rdns(&self) -> &[(String, String)] {
        &self.rdns
    }

    /// Deterministic canonical string; `parse(canonical()) == self`.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (attr, value) in &self.rdns {
            out.push('/');
            out.push_str(attr);
            out.push('=');
            out.push_str(value);
        }
        out
    }

    pub fn parse(s: &str) -> Result<Self> {
        if !s.starts_with('/') {
            return Err(Error::MalformedDn(format!("missing leading slash: {s}")));
        }
        let mut rdns = Vec::new();
        for part in s[1..].split('/') {
            let (attr, value) = part
                .split_once('=')
                .ok_or_else(|| Error::MalformedDn(format!("component without '=': {part}")))?;
            rdns.push((attr.to_string(), value.to_string()));
        }
        SubjectDn::new(rdns)
    }

    /// DN with one additional CN component appended, as used for proxy
    /// certificate subjects.
    pub fn with_appended_cn(&self, value: &str) -> Result<Self> {
        let mut rdns = self.rdns.clone();
        rdns.push(("CN".to_string(), value.to_string()));
        SubjectDn::new(rdns)
    }

    /// Inverse of [`with_appended_cn`]: the DN without its last
    /// component, which must be a CN. `None` if the shape does not match.
    pub fn parent_of_proxy(&self) -> Option<SubjectDn> {
        let (last, rest) = self.rdns.split_last()?;
        if last.0 != "CN" || rest.is_empty() {
            return None;
        }
        SubjectDn::new(rest.to_vec()).ok()
    }
}

impl fmt::Display for SubjectDn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// Fully-qualified attribute name: `/vo[/group...][/Role=r][/Capability=c]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fqan {
    pub vo: String,
    pub groups: Vec<String>,
    pub role: Option<String>,
    pub capability: Option<String>,
}

impl Fqan {
    pub fn vo(vo: &str) -> Self {
        Fqan {
            vo: vo.to_string(),
            groups: Vec::new(),
            role: None,
            capability: None,
        }
    }

    pub fn canonical(&self) -> String {
        let mut out = format!("/{}", self.vo);
        for g in &self.groups {
            out.push('/');
            out.push_str(g);
        }
        if let Some(r) = &self.role {
            out.push_str("/Role=");
            out.push_str(r);
        }
        if let Some(c) = &self.capability {
            out.push_str("/Capability=");
            out.push_str(c);
        }
        out
    }

    pub fn parse(s: &str) -> Result<Self> {
        let malformed = |msg: &str| Error::MalformedFqan(format!("{msg}: {s}"));
        if !s.starts_with('/') {
            return Err(malformed("missing leading slash"));
        }
        let mut vo = None;
        let mut groups = Vec::new();
        let mut role = None;
        let mut capability = None;
        for part in s[1..].split('/') {
            if part.is_empty() {
                return Err(malformed("empty component"));
            }
            if let Some(r) = part.strip_prefix("Role=") {
                if role.is_some() || capability.is_some() || r.is_empty() {
                    return Err(malformed("misplaced Role"));
                }
                role = Some(r.to_string());
            } else if let Some(c) = part.strip_prefix("Capability=") {
                if capability.is_some() || c.is_empty() {
                    return Err(malformed("misplaced Capability"));
                }
                capability = Some(c.to_string());
            } else {
                if role.is_some() || capability.is_some() || part.contains('=') {
                    return Err(malformed("group after Role/Capability"));
                }
                match vo {
                    None => vo = Some(part.to_string()),
                    Some(_) => groups.push(part.to_string()),
                }
            }
        }
        Ok(Fqan {
            vo: vo.ok_or_else(|| malformed("missing VO"))?,
            groups,
            role,
            capability,
        })
    }
}

impl fmt::Display for Fqan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// The payload an identity provider signs. Kept separate from
/// [`Assertion`] so signing and verification operate on identical bytes.
#[derive(Debug, Clone, Serialize)]
struct AssertionPayload<'a> {
    subject: &'a str,
    issuer: &'a str,
    issued_at: Timestamp,
    validity: u64,
    attributes: &'a BTreeMap<String, String>,
}

/// Signed single-sign-on token: the stand-in for a federation assertion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    pub subject: String,
    pub issuer: String,
    pub issued_at: Timestamp,
    pub validity: u64,
    pub attributes: BTreeMap<String, String>,
    /// Base64 of the issuer's RSA-SHA256 signature over the canonical
    /// serialization of all preceding fields.
    pub signature: String,
}

impl Assertion {
    fn payload_bytes(
        subject: &str,
        issuer: &str,
        issued_at: Timestamp,
        validity: u64,
        attributes: &BTreeMap<String, String>,
    ) -> Vec<u8> {
        serde_json::to_vec(&AssertionPayload {
            subject,
            issuer,
            issued_at,
            validity,
            attributes,
        })
        .expect("assertion payload serializes")
    }

    pub fn sign(
        subject: &str,
        issuer: &str,
        issued_at: Timestamp,
        validity: u64,
        attributes: BTreeMap<String, String>,
        key: &PKey<Private>,
    ) -> Result<Assertion> {
        let bytes = Self::payload_bytes(subject, issuer, issued_at, validity, &attributes);
        let mut signer = Signer::new(MessageDigest::sha256(), key)?;
        let sig = signer.sign_oneshot_to_vec(&bytes)?;
        Ok(Assertion {
            subject: subject.to_string(),
            issuer: issuer.to_string(),
            issued_at,
            validity,
            attributes,
            signature: B64.encode(sig),
        })
    }

    pub fn verify(&self, issuer_key: &PKey<Public>) -> Result<()> {
        let bytes = Self::payload_bytes(
            &self.subject,
            &self.issuer,
            self.issued_at,
            self.validity,
            &self.attributes,
        );
        let sig = B64
            .decode(&self.signature)
            .map_err(|e| Error::InvalidAssertion(format!("signature not base64: {e}")))?;
        let mut verifier = Verifier::new(MessageDigest::sha256(), issuer_key)?;
        if verifier.verify_oneshot(&sig, &bytes)? {
            Ok(())
        } else {
            Err(Error::InvalidAssertion("signature verification failed".into()))
        }
    }

    pub fn expired(&self, now: Timestamp) -> bool {
        assertion_expired(self, now)
    }
}

/// `true` iff `now` is strictly past the end of the validity window.
pub fn assertion_expired(a: &Assertion, now: Timestamp) -> bool {
    now > a.issued_at + a.validity as i64
}

/// X.509 constraints an online CA attaches to a login response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CertificateConstraints {
    pub max_lifetime: u64,
    pub key_size_min: u32,
    pub allowed_key_usages: Vec<String>,
}

impl Default for CertificateConstraints {
    fn default() -> Self {
        CertificateConstraints {
            max_lifetime: MAX_CERT_LIFETIME,
            key_size_min: 2048,
            allowed_key_usages: vec!["digitalSignature".into(), "keyEncipherment".into()],
        }
    }
}

/// What the CA's login endpoint hands back: the DN the certificate will
/// carry, a single-use authorization token, and issuance constraints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlcsLoginResponse {
    pub dn: SubjectDn,
    pub auth_token: String,
    pub constraints: CertificateConstraints,
}

/// Result of certificate issuance: the file locations plus the
/// passphrase protecting the private key.
#[derive(Debug, Clone)]
pub struct Credential {
    pub certificate_path: PathBuf,
    pub private_key_path: PathBuf,
    pub passphrase: String,
    pub subject: SubjectDn,
    pub not_before: Timestamp,
    pub not_after: Timestamp,
}

/// Proxy certificate chain, proxy first, end-entity last.
#[derive(Debug, Clone)]
pub struct ProxyCredential {
    /// PEM-encoded certificates.
    pub chain: Vec<String>,
    pub proxy_key_path: PathBuf,
    /// Path of the PEM bundle (proxy cert, proxy key, end-entity cert).
    pub proxy_path: PathBuf,
    pub fqans: Vec<Fqan>,
    pub not_after: Timestamp,
}
