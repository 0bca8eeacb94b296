//! Simulated short-lived credential CA: a login endpoint that turns a
//! delegated assertion into a DN plus single-use authorization token,
//! and a signing endpoint that exchanges (CSR, token) for a signed
//! certificate.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use openssl::pkey::{PKey, Private, Public};
use openssl::x509::{X509Name, X509};

use crate::clock::Timestamp;
use crate::error::{Error, Result};
use crate::model::{
    Assertion, CertificateConstraints, SlcsLoginResponse, SubjectDn, MAX_CERT_LIFETIME,
};
use crate::secrets;
use crate::x509::{self, SignParams};

#[derive(Debug, Clone)]
pub struct CaConfig {
    /// Country component of issued subject DNs.
    pub country: String,
    /// Organization component: the federation name.
    pub federation: String,
    pub constraints: CertificateConstraints,
    /// Lifetime of login tokens, matched to the assertion validity.
    pub token_validity: u64,
    /// Verifier-side allowance for clock skew between services.
    pub clock_skew: u64,
}

impl Default for CaConfig {
    fn default() -> Self {
        CaConfig {
            country: "CH".into(),
            federation: "SimFed".into(),
            constraints: CertificateConstraints::default(),
            token_validity: 300,
            clock_skew: 60,
        }
    }
}

struct TokenEntry {
    dn: SubjectDn,
    expires_at: Timestamp,
}

/// The online CA. One instance owns its CA credential, its token table
/// and its serial counter.
pub struct SlcsCa {
    config: CaConfig,
    ca_key: PKey<Private>,
    ca_cert: X509,
    ca_name: X509Name,
    idp_public_key: PKey<Public>,
    tokens: Mutex<HashMap<String, TokenEntry>>,
    serial_counter: AtomicU64,
}

impl SlcsCa {
    pub fn new(config: CaConfig, idp_public_key_pem: &[u8], now: Timestamp) -> Result<Self> {
        let ca_key = x509::generate_rsa_key(2048)?;
        let ca_dn = SubjectDn::new(vec![
            ("O".into(), config.federation.clone()),
            ("CN".into(), "Simulated SLCS CA".into()),
        ])?;
        let ca_cert = x509::self_signed_ca(&ca_dn, &ca_key, now)?;
        let ca_name = x509::dn_to_name(&ca_dn)?;
        Ok(SlcsCa {
            config,
            ca_key,
            ca_cert,
            ca_name,
            idp_public_key: PKey::public_key_from_pem(idp_public_key_pem)
                .map_err(|e| Error::Crypto(format!("bad IdP public key: {e}")))?,
            tokens: Mutex::new(HashMap::new()),
            serial_counter: AtomicU64::new(1),
        })
    }

    /// PEM of the CA certificate: the trust anchor for everything this
    /// CA signs.
    pub fn ca_certificate_pem(&self) -> Vec<u8> {
        self.ca_cert.to_pem().expect("CA cert PEM")
    }

    /// Deterministic mapping from assertion subject to certificate DN.
    pub fn map_dn(&self, assertion_subject: &str) -> Result<SubjectDn> {
        SubjectDn::new(vec![
            ("C".into(), self.config.country.clone()),
            ("O".into(), self.config.federation.clone()),
            ("CN".into(), assertion_subject.to_string()),
        ])
    }

    /// Validate a delegated assertion and hand out the subject DN, a
    /// fresh single-use token and the issuance constraints.
    pub fn slcs_login(&self, assertion: &Assertion, now: Timestamp) -> Result<SlcsLoginResponse> {
        assertion.verify(&self.idp_public_key)?;
        let deadline = assertion.issued_at
            + assertion.validity as i64
            + self.config.clock_skew as i64;
        if now > deadline {
            return Err(Error::ExpiredAssertion);
        }
        let dn = self.map_dn(&assertion.subject)?;
        let auth_token = secrets::token();
        self.tokens.lock().unwrap().insert(
            auth_token.clone(),
            TokenEntry {
                dn: dn.clone(),
                expires_at: now + self.config.token_validity as i64,
            },
        );
        Ok(SlcsLoginResponse {
            dn,
            auth_token,
            constraints: self.config.constraints.clone(),
        })
    }

    /// Exchange a CSR plus a live token for a signed certificate. The
    /// token is consumed atomically: one success per token, ever.
    pub fn sign_csr(
        &self,
        csr_pem: &[u8],
        auth_token: &str,
        requested_lifetime: u64,
        now: Timestamp,
    ) -> Result<Vec<u8>> {
        // parse before consuming the token so a malformed CSR does not
        // burn the caller's only token
        let parsed = x509::parse_and_verify_csr(csr_pem)?;

        let entry = {
            let mut tokens = self.tokens.lock().unwrap();
            match tokens.get(auth_token) {
                Some(e) if now <= e.expires_at => tokens.remove(auth_token).unwrap(),
                Some(_) => {
                    tokens.remove(auth_token);
                    return Err(Error::InvalidToken);
                }
                None => return Err(Error::InvalidToken),
            }
        };

        if parsed.subject != entry.dn {
            return Err(Error::DnMismatch(format!(
                "{} != {}",
                parsed.subject, entry.dn
            )));
        }
        if parsed.key_bits < self.config.constraints.key_size_min {
            return Err(Error::WeakKey {
                got: parsed.key_bits,
                min: self.config.constraints.key_size_min,
            });
        }

        let lifetime = requested_lifetime
            .min(self.config.constraints.max_lifetime)
            .min(MAX_CERT_LIFETIME);
        let serial = self.serial_counter.fetch_add(1, Ordering::SeqCst);
        let cert = x509::sign_certificate(SignParams {
            subject: &entry.dn,
            issuer: &self.ca_name,
            public_key: &parsed.public_key,
            signing_key: &self.ca_key,
            serial,
            not_before: now,
            not_after: now + lifetime as i64,
            custom_extensions: vec![],
            is_ca: false,
        })?;
        Ok(cert.to_pem()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    const T: Timestamp = 1_700_000_000;

    fn idp_key() -> PKey<Private> {
        x509::generate_rsa_key(2048).unwrap()
    }

    fn assertion(key: &PKey<Private>, subject: &str, issued_at: Timestamp) -> Assertion {
        Assertion::sign(subject, "sim-idp", issued_at, 300, BTreeMap::new(), key).unwrap()
    }

    fn ca_with_key() -> (SlcsCa, PKey<Private>) {
        let key = idp_key();
        let ca = SlcsCa::new(
            CaConfig::default(),
            &key.public_key_to_pem().unwrap(),
            T,
        )
        .unwrap();
        (ca, key)
    }

    #[test]
    fn login_maps_dn_and_issues_token() {
        let (ca, key) = ca_with_key();
        let resp = ca.slcs_login(&assertion(&key, "alice", T), T).unwrap();
        assert_eq!(resp.dn.canonical(), "/C=CH/O=SimFed/CN=alice");
        assert_eq!(resp.constraints.max_lifetime, 1_000_000);
        assert!(!resp.auth_token.is_empty());
    }

    #[test]
    fn login_rejects_expired_and_forged() {
        let (ca, key) = ca_with_key();
        // 400 s old with 300 s validity: stale even with skew allowance
        assert!(matches!(
            ca.slcs_login(&assertion(&key, "alice", T - 400), T),
            Err(Error::ExpiredAssertion)
        ));
        let other_key = idp_key();
        assert!(matches!(
            ca.slcs_login(&assertion(&other_key, "alice", T), T),
            Err(Error::InvalidAssertion(_))
        ));
    }

    #[test]
    fn repeated_login_distinct_tokens_same_dn() {
        let (ca, key) = ca_with_key();
        let a = assertion(&key, "alice", T);
        let r1 = ca.slcs_login(&a, T).unwrap();
        let r2 = ca.slcs_login(&a, T).unwrap();
        assert_ne!(r1.auth_token, r2.auth_token);
        assert_eq!(r1.dn, r2.dn);
    }

    #[test]
    fn sign_caps_lifetime_and_consumes_token() {
        let (ca, key) = ca_with_key();
        let resp = ca.slcs_login(&assertion(&key, "alice", T), T).unwrap();
        let user_key = x509::generate_rsa_key(2048).unwrap();
        let csr = x509::build_csr(&user_key, &resp.dn).unwrap();

        let pem = ca.sign_csr(&csr, &resp.auth_token, 2_000_000, T).unwrap();
        let cert = X509::from_pem(&pem).unwrap();
        let (nb, na) = x509::cert_validity(&cert).unwrap();
        assert_eq!((nb, na), (T, T + 1_000_000));
        assert!(cert.verify(&X509::from_pem(&ca.ca_certificate_pem()).unwrap().public_key().unwrap()).unwrap());

        assert!(matches!(
            ca.sign_csr(&csr, &resp.auth_token, 1000, T),
            Err(Error::InvalidToken)
        ));
    }

    #[test]
    fn sign_enforces_dn_binding_and_key_size() {
        let (ca, key) = ca_with_key();
        let user_key = x509::generate_rsa_key(2048).unwrap();

        let resp = ca.slcs_login(&assertion(&key, "alice", T), T).unwrap();
        let wrong_dn = SubjectDn::parse("/C=CH/O=SimFed/CN=bob").unwrap();
        let csr = x509::build_csr(&user_key, &wrong_dn).unwrap();
        assert!(matches!(
            ca.sign_csr(&csr, &resp.auth_token, 1000, T),
            Err(Error::DnMismatch(_))
        ));

        let resp = ca.slcs_login(&assertion(&key, "alice", T), T).unwrap();
        let weak = x509::generate_rsa_key(1024).unwrap();
        let csr = x509::build_csr(&weak, &resp.dn).unwrap();
        assert!(matches!(
            ca.sign_csr(&csr, &resp.auth_token, 1000, T),
            Err(Error::WeakKey { got: 1024, min: 2048 })
        ));
    }

    #[test]
    fn expired_token_rejected() {
        let (ca, key) = ca_with_key();
        let resp = ca.slcs_login(&assertion(&key, "alice", T), T).unwrap();
        let user_key = x509::generate_rsa_key(2048).unwrap();
        let csr = x509::build_csr(&user_key, &resp.dn).unwrap();
        assert!(matches!(
            ca.sign_csr(&csr, &resp.auth_token, 1000, T + 301),
            Err(Error::InvalidToken)
        ));
    }

    #[test]
    fn serials_unique() {
        let (ca, key) = ca_with_key();
        let user_key = x509::generate_rsa_key(2048).unwrap();
        let mut serials = std::collections::HashSet::new();
        for _ in 0..5 {
            let resp = ca.slcs_login(&assertion(&key, "alice", T), T).unwrap();
            let csr = x509::build_csr(&user_key, &resp.dn).unwrap();
            let pem = ca.sign_csr(&csr, &resp.auth_token, 1000, T).unwrap();
            let cert = X509::from_pem(&pem).unwrap();
            let serial = cert.serial_number().to_bn().unwrap().to_dec_str().unwrap().to_string();
            assert!(serials.insert(serial));
        }
    }
}
