//! Client side of certificate issuance: a long-lived factory holding
//! configuration, spawning one requestor per certificate request. All
//! secret material stays in memory until the CA has signed; only then
//! is anything persisted.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use openssl::pkey::{PKey, Private};
use openssl::symm::Cipher;
use openssl::x509::X509;

use crate::clock::{SharedClock, Timestamp};
use crate::error::{Error, Result};
use crate::model::{
    assertion_expired, Assertion, CertificateConstraints, Credential, SubjectDn,
    MAX_CERT_LIFETIME,
};
use crate::secrets;
use crate::services::{CertificateRequestWire, LoginResponseWire};
use crate::store;
use crate::x509;

/// Factory-wide configuration: endpoints, store location, defaults.
#[derive(Debug, Clone)]
pub struct SlcsFactoryConfig {
    pub slcs_login_url: String,
    pub slcs_sign_url: String,
    pub store_directory: PathBuf,
    /// PEM of the CA certificate issued credentials must chain to.
    pub ca_trust_anchor_pem: Vec<u8>,
    pub default_lifetime: u64,
    pub key_size: u32,
}

impl SlcsFactoryConfig {
    pub fn new(base_url: &str, store_directory: impl Into<PathBuf>, ca_pem: Vec<u8>) -> Self {
        SlcsFactoryConfig {
            slcs_login_url: format!("{base_url}/slcs/login"),
            slcs_sign_url: format!("{base_url}/slcs/certificate"),
            store_directory: store_directory.into(),
            ca_trust_anchor_pem: ca_pem,
            default_lifetime: MAX_CERT_LIFETIME,
            key_size: 2048,
        }
    }

    /// Load from a flat `key = value` configuration file. Recognized
    /// keys: `slcs.login-url`, `slcs.sign-url`, `store.directory`,
    /// `slcs.ca-certificate` (path), `slcs.default-lifetime`,
    /// `slcs.key-size`.
    pub fn from_properties(text: &str) -> Result<Self> {
        let map = parse_properties(text);
        let get = |key: &str| -> Result<String> {
            map.get(key)
                .cloned()
                .ok_or_else(|| Error::StorageFailed(format!("missing configuration key {key}")))
        };
        let ca_path = get("slcs.ca-certificate")?;
        let ca_pem = fs::read(&ca_path)
            .map_err(|e| Error::StorageFailed(format!("read {ca_path}: {e}")))?;
        Ok(SlcsFactoryConfig {
            slcs_login_url: get("slcs.login-url")?,
            slcs_sign_url: get("slcs.sign-url")?,
            store_directory: PathBuf::from(get("store.directory")?),
            ca_trust_anchor_pem: ca_pem,
            default_lifetime: map
                .get("slcs.default-lifetime")
                .and_then(|v| v.parse().ok())
                .unwrap_or(MAX_CERT_LIFETIME),
            key_size: map
                .get("slcs.key-size")
                .and_then(|v| v.parse().ok())
                .unwrap_or(2048),
        })
    }
}

/// Flat `key = value` lines; `#` starts a comment.
pub fn parse_properties(text: &str) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    map
}

/// Caller-supplied overrides for where the issued credential lands and
/// how the key is protected.
#[derive(Debug, Clone, Default)]
pub struct NewSlcsOverrides {
    pub certificate_path: Option<PathBuf>,
    pub key_path: Option<PathBuf>,
    pub passphrase: Option<String>,
}

/// Long-lived factory; one per federation. Safe for concurrent
/// `new_slcs` calls: every call owns a private requestor.
pub struct SlcsFactory {
    config: SlcsFactoryConfig,
    clock: SharedClock,
}

impl SlcsFactory {
    /// Fails if the store directory cannot be created or written.
    pub fn new(config: SlcsFactoryConfig, clock: SharedClock) -> Result<Self> {
        fs::create_dir_all(&config.store_directory).map_err(|e| {
            Error::StorageFailed(format!(
                "store directory {}: {e}",
                config.store_directory.display()
            ))
        })?;
        let probe = config.store_directory.join(format!(".probe-{}", secrets::hex_name()));
        fs::write(&probe, b"").and_then(|_| fs::remove_file(&probe)).map_err(|e| {
            Error::StorageFailed(format!(
                "store directory {} not writable: {e}",
                config.store_directory.display()
            ))
        })?;
        Ok(SlcsFactory { config, clock })
    }

    pub fn config(&self) -> &SlcsFactoryConfig {
        &self.config
    }

    /// Full issuance flow: CA login with the delegated assertion, local
    /// keypair and CSR generation, submission, then persistence.
    pub fn new_slcs(
        &self,
        assertion: &Assertion,
        overrides: &NewSlcsOverrides,
    ) -> Result<Credential> {
        self.new_slcs_with_lifetime(assertion, overrides, self.config.default_lifetime)
    }

    pub fn new_slcs_with_lifetime(
        &self,
        assertion: &Assertion,
        overrides: &NewSlcsOverrides,
        lifetime: u64,
    ) -> Result<Credential> {
        let requestor = SlcsRequestor {
            config: &self.config,
            now: self.clock.now(),
        };
        requestor.run(assertion, overrides, lifetime)
    }
}

/// Per-request state. Everything up to and including the signing
/// response happens in memory.
struct SlcsRequestor<'a> {
    config: &'a SlcsFactoryConfig,
    now: Timestamp,
}

impl SlcsRequestor<'_> {
    fn run(
        &self,
        assertion: &Assertion,
        overrides: &NewSlcsOverrides,
        lifetime: u64,
    ) -> Result<Credential> {
        // an assertion that is already stale cannot authenticate the
        // delegated login; the caller redirects into renewal
        if assertion_expired(assertion, self.now) {
            return Err(Error::ExpiredAssertion);
        }

        // step 1: login
        let login = self.login(assertion)?;

        // step 2: local keypair
        if self.config.key_size < login.constraints.key_size_min {
            return Err(Error::WeakKey {
                got: self.config.key_size,
                min: login.constraints.key_size_min,
            });
        }
        let key = x509::generate_rsa_key(self.config.key_size)?;

        // step 3: CSR
        let csr = build_csr(&key, &login.dn, &login.constraints)?;

        // step 4: submission
        let cert_pem = self.submit(&csr, &login.auth_token, lifetime)?;
        let cert = X509::from_pem(&cert_pem)
            .map_err(|e| Error::IssuanceFailed(format!("unparseable certificate: {e}")))?;
        self.check_issued(&cert, &login.dn, &key)?;
        let (not_before, not_after) = x509::cert_validity(&cert)?;

        // only now does anything touch the disk
        let passphrase = overrides
            .passphrase
            .clone()
            .unwrap_or_else(secrets::passphrase);
        let certificate_path = overrides.certificate_path.clone().unwrap_or_else(|| {
            self.config
                .store_directory
                .join(format!("{}.pem", secrets::hex_name()))
        });
        let private_key_path = overrides.key_path.clone().unwrap_or_else(|| {
            self.config
                .store_directory
                .join(format!("{}.key", secrets::hex_name()))
        });

        let key_pem =
            key.private_key_to_pem_pkcs8_passphrase(Cipher::aes_256_cbc(), passphrase.as_bytes())?;
        store::write_private(&certificate_path, &cert_pem)?;
        if let Err(e) = store::write_private(&private_key_path, &key_pem) {
            // leave nothing half-written behind
            let _ = fs::remove_file(&certificate_path);
            return Err(e);
        }
        if let Err(e) = store::write_sidecar(&certificate_path, not_after)
            .and_then(|_| store::write_sidecar(&private_key_path, not_after))
        {
            let _ = fs::remove_file(&certificate_path);
            let _ = fs::remove_file(&private_key_path);
            let _ = fs::remove_file(store::sidecar_path(&certificate_path));
            let _ = fs::remove_file(store::sidecar_path(&private_key_path));
            return Err(e);
        }

        Ok(Credential {
            certificate_path,
            private_key_path,
            passphrase,
            subject: login.dn,
            not_before,
            not_after,
        })
    }

    fn login(&self, assertion: &Assertion) -> Result<crate::model::SlcsLoginResponse> {
        let wire: LoginResponseWire =
            crate::services::post_json(&self.config.slcs_login_url, assertion)?;
        Ok(crate::model::SlcsLoginResponse {
            dn: SubjectDn::parse(&wire.dn)?,
            auth_token: wire.token,
            constraints: wire.constraints,
        })
    }

    fn submit(&self, csr_pem: &[u8], token: &str, lifetime: u64) -> Result<Vec<u8>> {
        let req = CertificateRequestWire {
            csr_pem: String::from_utf8(csr_pem.to_vec())
                .map_err(|_| Error::IssuanceFailed("CSR not UTF-8 PEM".into()))?,
            token: token.to_string(),
            lifetime,
        };
        crate::services::post_json_for_text(&self.config.slcs_sign_url, &req)
            .map(String::into_bytes)
    }

    /// Issued certificate must chain to the configured trust anchor and
    /// carry exactly the DN and public key we asked for.
    fn check_issued(&self, cert: &X509, dn: &SubjectDn, key: &PKey<Private>) -> Result<()> {
        let subject = x509::name_to_dn(cert.subject_name())?;
        if &subject != dn {
            return Err(Error::IssuanceFailed(format!(
                "CA returned certificate for {subject}, requested {dn}"
            )));
        }
        if !cert.public_key()?.public_eq(key) {
            return Err(Error::IssuanceFailed(
                "certificate public key does not match generated key".into(),
            ));
        }
        let anchor = X509::from_pem(&self.config.ca_trust_anchor_pem)
            .map_err(|e| Error::Crypto(format!("bad trust anchor: {e}")))?;
        let anchor_key = anchor.public_key()?;
        if !cert.verify(&anchor_key)? {
            return Err(Error::IssuanceFailed(
                "certificate does not verify against the trust anchor".into(),
            ));
        }
        Ok(())
    }
}

/// Build a CSR for `dn`, refusing keys below the CA's minimum size.
pub fn build_csr(
    key: &PKey<Private>,
    dn: &SubjectDn,
    constraints: &CertificateConstraints,
) -> Result<Vec<u8>> {
    let bits = x509::key_bits(key);
    if bits < constraints.key_size_min {
        return Err(Error::WeakKey {
            got: bits,
            min: constraints.key_size_min,
        });
    }
    x509::build_csr(key, dn)
}
