//! Independent certificate-chain verification used by the test suite.
//! Everything here goes through a parser and signature implementation
//! unrelated to the one used for issuance, so agreement between the two
//! is meaningful.

use x509_parser::certificate::X509Certificate;
use x509_parser::pem::parse_x509_pem;
use x509_parser::prelude::FromDer;

use crate::clock::Timestamp;

fn decode(pem: &str) -> Result<Vec<u8>, String> {
    let (_, parsed) = parse_x509_pem(pem.as_bytes()).map_err(|e| format!("bad PEM: {e}"))?;
    Ok(parsed.contents)
}

/// Validity window `(not_before, not_after)` in unix seconds.
pub fn cert_window(pem: &str) -> Result<(Timestamp, Timestamp), String> {
    let der = decode(pem)?;
    let (_, cert) =
        X509Certificate::from_der(&der).map_err(|e| format!("bad certificate: {e}"))?;
    Ok((
        cert.validity().not_before.timestamp(),
        cert.validity().not_after.timestamp(),
    ))
}

/// Subject DN as rendered by the independent parser.
pub fn subject_string(pem: &str) -> Result<String, String> {
    let der = decode(pem)?;
    let (_, cert) =
        X509Certificate::from_der(&der).map_err(|e| format!("bad certificate: {e}"))?;
    Ok(cert.subject().to_string())
}

/// Verify `cert` was signed by the key in `issuer`.
pub fn signed_by(cert_pem: &str, issuer_pem: &str) -> Result<(), String> {
    let cert_der = decode(cert_pem)?;
    let issuer_der = decode(issuer_pem)?;
    let (_, cert) =
        X509Certificate::from_der(&cert_der).map_err(|e| format!("bad certificate: {e}"))?;
    let (_, issuer) =
        X509Certificate::from_der(&issuer_der).map_err(|e| format!("bad issuer: {e}"))?;
    cert.verify_signature(Some(issuer.public_key()))
        .map_err(|e| format!("signature: {e}"))
}

/// Full chain verification, leaf first, ending at `anchor_pem`. Returns
/// all findings; an empty list means the chain is good at `now`.
pub fn verify_chain(chain_pems: &[String], anchor_pem: &str, now: Timestamp) -> Vec<String> {
    let mut reasons = Vec::new();
    let mut ders = Vec::new();
    for pem in chain_pems {
        match decode(pem) {
            Ok(d) => ders.push(d),
            Err(e) => {
                reasons.push(e);
                return reasons;
            }
        }
    }
    match decode(anchor_pem) {
        Ok(d) => ders.push(d),
        Err(e) => {
            reasons.push(e);
            return reasons;
        }
    }
    let certs: Vec<X509Certificate> = match ders
        .iter()
        .map(|der| X509Certificate::from_der(der).map(|(_, c)| c))
        .collect()
    {
        Ok(c) => c,
        Err(e) => {
            reasons.push(format!("bad certificate: {e}"));
            return reasons;
        }
    };

    let chain_len = chain_pems.len();
    for (i, cert) in certs[..chain_len].iter().enumerate() {
        let issuer = &certs[i + 1];
        if let Err(e) = cert.verify_signature(Some(issuer.public_key())) {
            reasons.push(format!("certificate {i} signature: {e}"));
        }
        if cert.issuer() != issuer.subject() {
            reasons.push(format!(
                "certificate {i} issuer {} does not match signer subject {}",
                cert.issuer(),
                issuer.subject()
            ));
        }
        let nb = cert.validity().not_before.timestamp();
        let na = cert.validity().not_after.timestamp();
        if now < nb || now > na {
            reasons.push(format!("certificate {i} not valid at {now} ({nb}..{na})"));
        }
    }

    // each proxy subject must be its issuer's subject plus exactly one
    // appended CN component
    for i in 0..chain_len.saturating_sub(1) {
        let child = certs[i].subject().to_string();
        let parent = certs[i + 1].subject().to_string();
        let extends = child
            .strip_prefix(&parent)
            .map(|rest| {
                let rest = rest.trim_start_matches([',', ' ']);
                rest.starts_with("CN=") && !rest[3..].contains(',')
            })
            .unwrap_or(false);
        if !extends {
            reasons.push(format!(
                "certificate {i} subject {child} is not {parent} plus one CN"
            ));
        }
    }
    reasons
}
