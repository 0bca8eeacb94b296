//! Proxy certificate factory: derives a short-lived proxy from an
//! issued credential, optionally decorated with signed attribute
//! grants fetched from the VO membership service.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use openssl::pkey::{PKey, Public};
use openssl::x509::X509;

use crate::clock::{SharedClock, Timestamp};
use crate::error::{Error, Result};
use crate::model::{Credential, Fqan, ProxyCredential, SubjectDn};
use crate::secrets;
use crate::services;
use crate::store;
use crate::voms::AttributeGrant;
use crate::x509::{self, SignParams, ATTRIBUTE_GRANT_OID};

/// Where to reach one VO's membership service and which key its grants
/// must be signed with.
#[derive(Debug, Clone)]
pub struct VomsEndpoint {
    pub base_url: String,
    pub issuer_public_key_pem: Vec<u8>,
}

/// Per-instance configuration; two factories with different endpoint
/// maps operate side by side without any shared process state.
#[derive(Debug, Clone)]
pub struct ProxyFactoryConfig {
    pub voms_endpoints: BTreeMap<String, VomsEndpoint>,
    pub default_proxy_lifetime: u64,
    pub proxy_store_directory: PathBuf,
}

impl ProxyFactoryConfig {
    pub fn new(proxy_store_directory: impl Into<PathBuf>) -> Self {
        ProxyFactoryConfig {
            voms_endpoints: BTreeMap::new(),
            default_proxy_lifetime: 43_200,
            proxy_store_directory: proxy_store_directory.into(),
        }
    }

    pub fn with_vo(mut self, vo: &str, endpoint: VomsEndpoint) -> Self {
        self.voms_endpoints.insert(vo.to_string(), endpoint);
        self
    }
}

pub struct ProxyFactory {
    config: ProxyFactoryConfig,
    clock: SharedClock,
}

/// Options for a single proxy request.
#[derive(Debug, Clone, Default)]
pub struct NewProxyOptions {
    pub lifetime: Option<u64>,
    /// Explicit bundle location; a random name in the store directory
    /// otherwise.
    pub output_path: Option<PathBuf>,
}

impl ProxyFactory {
    pub fn new(config: ProxyFactoryConfig, clock: SharedClock) -> Result<Self> {
        fs::create_dir_all(&config.proxy_store_directory).map_err(|e| {
            Error::StorageFailed(format!(
                "proxy store {}: {e}",
                config.proxy_store_directory.display()
            ))
        })?;
        Ok(ProxyFactory { config, clock })
    }

    pub fn config(&self) -> &ProxyFactoryConfig {
        &self.config
    }

    /// Create a proxy for `credential`, embedding one attribute grant
    /// per requested VO. An unreachable or denying VO endpoint fails
    /// the whole call: attributes are never silently dropped.
    pub fn new_proxy(
        &self,
        credential: &Credential,
        vos: &[Fqan],
        options: &NewProxyOptions,
    ) -> Result<ProxyCredential> {
        let now = self.clock.now();

        let cert_pem = fs::read(&credential.certificate_path)
            .map_err(|e| Error::StorageFailed(format!("read certificate: {e}")))?;
        let cert = X509::from_pem(&cert_pem)
            .map_err(|e| Error::Crypto(format!("unparseable credential certificate: {e}")))?;
        let (_, cred_not_after) = x509::cert_validity(&cert)?;
        if now > cred_not_after {
            return Err(Error::CredentialExpired);
        }
        let key_pem = fs::read(&credential.private_key_path)
            .map_err(|e| Error::StorageFailed(format!("read private key: {e}")))?;
        let signing_key =
            PKey::private_key_from_pem_passphrase(&key_pem, credential.passphrase.as_bytes())
                .map_err(|e| Error::Crypto(format!("cannot decrypt private key: {e}")))?;
        let subject = x509::name_to_dn(cert.subject_name())?;

        // one grant per VO, in request order
        let mut grants: Vec<AttributeGrant> = Vec::new();
        let mut per_vo: Vec<(String, Vec<Fqan>)> = Vec::new();
        for fqan in vos {
            match per_vo.iter_mut().find(|(vo, _)| *vo == fqan.vo) {
                Some((_, list)) => list.push(fqan.clone()),
                None => per_vo.push((fqan.vo.clone(), vec![fqan.clone()])),
            }
        }
        for (vo, fqans) in &per_vo {
            let endpoint = self
                .config
                .voms_endpoints
                .get(vo)
                .ok_or_else(|| Error::UnknownVo(vo.clone()))?;
            let grant = services::fetch_grant_http(&endpoint.base_url, vo, &subject, fqans)?;
            let issuer_key = PKey::public_key_from_pem(&endpoint.issuer_public_key_pem)
                .map_err(|e| Error::Crypto(format!("bad VOMS trust anchor: {e}")))?;
            grant.verify(&issuer_key)?;
            if grant.holder != subject {
                return Err(Error::AttributeDenied(format!(
                    "grant bound to {}, expected {subject}",
                    grant.holder
                )));
            }
            grants.push(grant);
        }

        let lifetime = options.lifetime.unwrap_or(self.config.default_proxy_lifetime);
        let not_after = (now + lifetime as i64).min(cred_not_after);

        let proxy_key = x509::generate_rsa_key(2048)?;
        let serial = x509::random_serial();
        let proxy_subject = subject.with_appended_cn(&serial.to_string())?;
        let proxy_public =
            PKey::public_key_from_pem(&proxy_key.public_key_to_pem()?)?;
        let mut custom_extensions = Vec::new();
        if !grants.is_empty() {
            let payload = serde_json::to_vec(&grants).expect("grants serialize");
            custom_extensions.push((ATTRIBUTE_GRANT_OID.to_string(), payload));
        }
        let proxy_cert = x509::sign_certificate(SignParams {
            subject: &proxy_subject,
            issuer: cert.subject_name(),
            public_key: &proxy_public,
            signing_key: &signing_key,
            serial,
            not_before: now,
            not_after,
            custom_extensions,
            is_ca: false,
        })?;

        // bundle: proxy cert, proxy key (unencrypted), end-entity cert
        let proxy_cert_pem = String::from_utf8(proxy_cert.to_pem()?)
            .map_err(|_| Error::Crypto("non-UTF8 PEM".into()))?;
        let proxy_key_pem = String::from_utf8(proxy_key.private_key_to_pem_pkcs8()?)
            .map_err(|_| Error::Crypto("non-UTF8 PEM".into()))?;
        let eec_pem = String::from_utf8(cert_pem)
            .map_err(|_| Error::Crypto("non-UTF8 PEM".into()))?;
        let bundle = format!("{proxy_cert_pem}{proxy_key_pem}{eec_pem}");

        let proxy_path = options.output_path.clone().unwrap_or_else(|| {
            self.config
                .proxy_store_directory
                .join(format!("proxy-{}.pem", secrets::hex_name()))
        });
        store::write_private(&proxy_path, bundle.as_bytes())?;
        store::write_sidecar(&proxy_path, not_after)?;

        Ok(ProxyCredential {
            chain: vec![proxy_cert_pem, eec_pem],
            proxy_key_path: proxy_path.clone(),
            proxy_path,
            fqans: vos.to_vec(),
            not_after,
        })
    }
}

/// Outcome of proxy verification: all findings, not just the first.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub ok: bool,
    pub reasons: Vec<String>,
}

/// Grants embedded in a certificate, if any.
pub fn embedded_grants(cert_pem: &str) -> Result<Vec<AttributeGrant>> {
    let (_, parsed) = x509_parser::pem::parse_x509_pem(cert_pem.as_bytes())
        .map_err(|e| Error::Crypto(format!("bad PEM: {e}")))?;
    let cert = parsed
        .parse_x509()
        .map_err(|e| Error::Crypto(format!("bad certificate: {e}")))?;
    for ext in cert.extensions() {
        if ext.oid.to_id_string() == ATTRIBUTE_GRANT_OID {
            return serde_json::from_slice(ext.value)
                .map_err(|e| Error::Crypto(format!("bad grant extension: {e}")));
        }
    }
    Ok(Vec::new())
}

/// Structural and cryptographic verification of a proxy chain: each
/// certificate signed by the next, the subject-extension rule at every
/// proxy level, all validity windows containing `now`, the end entity
/// chaining to `trust_anchor_pem`, and every embedded grant verifying
/// against `voms_issuer` when one is supplied.
pub fn verify_proxy(
    proxy: &ProxyCredential,
    trust_anchor_pem: &[u8],
    voms_issuer: Option<&PKey<Public>>,
    now: Timestamp,
) -> VerifyReport {
    let mut reasons = Vec::new();
    match verify_chain_pems(&proxy.chain, trust_anchor_pem, voms_issuer, now, &mut reasons) {
        Ok(()) => {}
        Err(e) => reasons.push(e.to_string()),
    }
    VerifyReport {
        ok: reasons.is_empty(),
        reasons,
    }
}

fn verify_chain_pems(
    chain: &[String],
    trust_anchor_pem: &[u8],
    voms_issuer: Option<&PKey<Public>>,
    now: Timestamp,
    reasons: &mut Vec<String>,
) -> Result<()> {
    if chain.len() < 2 {
        reasons.push(format!("chain too short: {}", chain.len()));
        return Ok(());
    }
    let certs: Vec<X509> = chain
        .iter()
        .map(|pem| X509::from_pem(pem.as_bytes()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Crypto(format!("unparseable chain: {e}")))?;
    let anchor = X509::from_pem(trust_anchor_pem)
        .map_err(|e| Error::Crypto(format!("bad trust anchor: {e}")))?;

    for (i, cert) in certs.iter().enumerate() {
        let (nb, na) = x509::cert_validity(cert)?;
        if now < nb || now > na {
            reasons.push(format!("certificate {i} not valid at {now} ({nb}..{na})"));
        }
        let issuer_cert = certs.get(i + 1).unwrap_or(&anchor);
        let issuer_key = issuer_cert.public_key()?;
        if !cert.verify(&issuer_key)? {
            reasons.push(format!("certificate {i} signature invalid"));
        }
        let issuer_dn = x509::name_to_dn(cert.issuer_name())?;
        let issuer_subject = x509::name_to_dn(issuer_cert.subject_name())?;
        if issuer_dn != issuer_subject {
            reasons.push(format!(
                "certificate {i} issuer {issuer_dn} does not match signer subject {issuer_subject}"
            ));
        }
    }

    // subject-extension rule at every proxy level
    for i in 0..certs.len() - 1 {
        let subject = x509::name_to_dn(certs[i].subject_name())?;
        let parent = x509::name_to_dn(certs[i + 1].subject_name())?;
        match subject.parent_of_proxy() {
            Some(base) if base == parent => {}
            _ => reasons.push(format!(
                "certificate {i} subject {subject} is not its issuer's DN plus one CN"
            )),
        }
    }

    // proxy must not outlive the end entity
    let (_, proxy_na) = x509::cert_validity(&certs[0])?;
    let (_, eec_na) = x509::cert_validity(certs.last().unwrap())?;
    if proxy_na > eec_na {
        reasons.push(format!(
            "proxy not-after {proxy_na} exceeds end-entity not-after {eec_na}"
        ));
    }

    // embedded grants
    let grants = embedded_grants(&chain[0])?;
    let eec_subject = x509::name_to_dn(certs.last().unwrap().subject_name())?;
    for grant in &grants {
        if grant.holder != eec_subject {
            reasons.push(format!(
                "grant holder {} does not match end entity {eec_subject}",
                grant.holder
            ));
        }
        if now < grant.not_before || now > grant.not_after {
            reasons.push("grant not valid now".to_string());
        }
        if let Some(issuer) = voms_issuer {
            if let Err(e) = grant.verify(issuer) {
                reasons.push(format!("grant signature: {e}"));
            }
        }
    }
    Ok(())
}

/// Load a proxy bundle written by [`ProxyFactory::new_proxy`] back into
/// a [`ProxyCredential`].
pub fn load_proxy_bundle(path: &PathBuf) -> Result<ProxyCredential> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::StorageFailed(format!("read {}: {e}", path.display())))?;
    let mut chain = Vec::new();
    for block in split_pem_blocks(&text) {
        if block.contains("BEGIN CERTIFICATE") {
            chain.push(block);
        }
    }
    if chain.len() < 2 {
        return Err(Error::Crypto(format!(
            "bundle {} holds {} certificates, expected proxy + end entity",
            path.display(),
            chain.len()
        )));
    }
    let proxy_cert = X509::from_pem(chain[0].as_bytes())
        .map_err(|e| Error::Crypto(format!("bad proxy certificate: {e}")))?;
    let (_, not_after) = x509::cert_validity(&proxy_cert)?;
    let fqans = embedded_grants(&chain[0])?
        .into_iter()
        .flat_map(|g| g.fqans)
        .collect();
    Ok(ProxyCredential {
        chain,
        proxy_key_path: path.clone(),
        proxy_path: path.clone(),
        fqans,
        not_after,
    })
}

fn split_pem_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current = String::new();
    let mut inside = false;
    for line in text.lines() {
        if line.starts_with("-----BEGIN ") {
            inside = true;
            current.clear();
        }
        if inside {
            current.push_str(line);
            current.push('\n');
        }
        if line.starts_with("-----END ") {
            inside = false;
            blocks.push(current.clone());
        }
    }
    blocks
}

/// Extract the subject DN from a PEM certificate file.
pub fn certificate_subject(path: &std::path::Path) -> Result<SubjectDn> {
    let pem = fs::read(path)
        .map_err(|e| Error::StorageFailed(format!("read {}: {e}", path.display())))?;
    let cert = X509::from_pem(&pem)
        .map_err(|e| Error::Crypto(format!("bad certificate: {e}")))?;
    x509::name_to_dn(cert.subject_name())
}
