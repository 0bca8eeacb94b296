//! Keypair, CSR and certificate construction on top of OpenSSL.
//!
//! This is the issuance path of the toolkit. The verification oracle
//! used in tests lives elsewhere (`oracle` feature) and is deliberately
//! built on an unrelated X.509 stack.

use openssl::asn1::{Asn1Object, Asn1OctetString, Asn1Time};
use openssl::bn::{BigNum, MsbOption};
use openssl::hash::MessageDigest;
use openssl::pkey::{PKey, Private, Public};
use openssl::rsa::Rsa;
use openssl::x509::{
    X509Extension, X509Name, X509NameBuilder, X509NameRef, X509Req, X509ReqBuilder, X509,
};

use crate::clock::Timestamp;
use crate::error::{Error, Result};
use crate::model::SubjectDn;

/// Private-enterprise OID under which the serialized attribute grant is
/// embedded in proxy certificates.
pub const ATTRIBUTE_GRANT_OID: &str = "1.3.6.1.4.1.54392.5.1879";

pub fn generate_rsa_key(bits: u32) -> Result<PKey<Private>> {
    Ok(PKey::from_rsa(Rsa::generate(bits)?)?)
}

pub fn key_bits(key: &PKey<impl openssl::pkey::HasPublic>) -> u32 {
    key.bits()
}

pub fn dn_to_name(dn: &SubjectDn) -> Result<X509Name> {
    let mut builder = X509NameBuilder::new()?;
    for (attr, value) in dn.rdns() {
        builder
            .append_entry_by_text(attr, value)
            .map_err(|e| Error::MalformedDn(format!("unsupported attribute {attr}: {e}")))?;
    }
    Ok(builder.build())
}

pub fn name_to_dn(name: &openssl::x509::X509NameRef) -> Result<SubjectDn> {
    let mut rdns = Vec::new();
    for entry in name.entries() {
        let attr = entry.object().nid().short_name()?.to_string();
        let value = String::from_utf8(entry.data().as_slice().to_vec())
            .map_err(|e| Error::MalformedDn(format!("non-UTF8 name entry: {e}")))?;
        rdns.push((attr, value));
    }
    SubjectDn::new(rdns)
}

/// Build a self-signed CSR carrying `dn` as subject.
pub fn build_csr(key: &PKey<Private>, dn: &SubjectDn) -> Result<Vec<u8>> {
    let mut builder = X509ReqBuilder::new()?;
    builder.set_version(0)?;
    let name = dn_to_name(dn)?;
    builder.set_subject_name(&name)?;
    builder.set_pubkey(key)?;
    builder.sign(key, MessageDigest::sha256())?;
    Ok(builder.build().to_pem()?)
}

pub struct ParsedCsr {
    pub subject: SubjectDn,
    pub public_key: PKey<Public>,
    pub key_bits: u32,
}

/// Parse a PEM CSR and check its self-signature.
pub fn parse_and_verify_csr(pem: &[u8]) -> Result<ParsedCsr> {
    let req = X509Req::from_pem(pem)
        .map_err(|e| Error::IssuanceFailed(format!("unparseable CSR: {e}")))?;
    let public_key = req.public_key()?;
    if !req.verify(&public_key)? {
        return Err(Error::IssuanceFailed("CSR self-signature invalid".into()));
    }
    Ok(ParsedCsr {
        subject: name_to_dn(req.subject_name())?,
        key_bits: public_key.bits(),
        public_key,
    })
}

pub struct SignParams<'a> {
    pub subject: &'a SubjectDn,
    pub issuer: &'a X509NameRef,
    pub public_key: &'a PKey<Public>,
    pub signing_key: &'a PKey<Private>,
    pub serial: u64,
    pub not_before: Timestamp,
    pub not_after: Timestamp,
    /// Raw DER extension contents keyed by OID, e.g. the attribute grant.
    pub custom_extensions: Vec<(String, Vec<u8>)>,
    pub is_ca: bool,
}

/// Sign an end-entity or proxy certificate.
pub fn sign_certificate(p: SignParams<'_>) -> Result<X509> {
    let mut builder = X509::builder()?;
    builder.set_version(2)?;
    let subject = dn_to_name(p.subject)?;
    builder.set_subject_name(&subject)?;
    builder.set_issuer_name(p.issuer)?;
    builder.set_pubkey(p.public_key)?;
    let serial = BigNum::from_slice(&p.serial.to_be_bytes())?.to_asn1_integer()?;
    builder.set_serial_number(&serial)?;
    let not_before = Asn1Time::from_unix(p.not_before)?;
    builder.set_not_before(&not_before)?;
    let not_after = Asn1Time::from_unix(p.not_after)?;
    builder.set_not_after(&not_after)?;
    if p.is_ca {
        builder.append_extension(
            openssl::x509::extension::BasicConstraints::new()
                .critical()
                .ca()
                .build()?,
        )?;
    }
    for (oid, der) in &p.custom_extensions {
        let obj = Asn1Object::from_str(oid)?;
        let contents = Asn1OctetString::new_from_bytes(der)?;
        builder.append_extension(X509Extension::new_from_der(&obj, false, &contents)?)?;
    }
    builder.sign(p.signing_key, MessageDigest::sha256())?;
    Ok(builder.build())
}

/// Self-signed CA certificate for the simulated online CA.
pub fn self_signed_ca(dn: &SubjectDn, key: &PKey<Private>, now: Timestamp) -> Result<X509> {
    let name = dn_to_name(dn)?;
    let public = PKey::public_key_from_pem(&key.public_key_to_pem()?)?;
    sign_certificate(SignParams {
        subject: dn,
        issuer: &name,
        public_key: &public,
        signing_key: key,
        serial: random_serial(),
        not_before: now - 3600,
        not_after: now + 10 * 365 * 86_400,
        custom_extensions: vec![],
        is_ca: true,
    })
}

/// Random positive 63-bit serial.
pub fn random_serial() -> u64 {
    let mut bn = BigNum::new().expect("bignum");
    bn.rand(63, MsbOption::MAYBE_ZERO, false).expect("rand serial");
    let bytes = bn.to_vec();
    let mut buf = [0u8; 8];
    buf[8 - bytes.len()..].copy_from_slice(&bytes);
    u64::from_be_bytes(buf)
}

/// Unix timestamp of an ASN.1 time field.
pub fn asn1_time_to_unix(t: &openssl::asn1::Asn1TimeRef) -> Result<Timestamp> {
    let epoch = Asn1Time::from_unix(0)?;
    let diff = epoch.diff(t)?;
    Ok(diff.days as i64 * 86_400 + diff.secs as i64)
}

pub fn cert_validity(cert: &X509) -> Result<(Timestamp, Timestamp)> {
    Ok((
        asn1_time_to_unix(cert.not_before())?,
        asn1_time_to_unix(cert.not_after())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csr_round_trip() {
        let key = generate_rsa_key(2048).unwrap();
        let dn = SubjectDn::parse("/C=CH/O=SimFed/CN=alice").unwrap();
        let pem = build_csr(&key, &dn).unwrap();
        let parsed = parse_and_verify_csr(&pem).unwrap();
        assert_eq!(parsed.subject, dn);
        assert_eq!(parsed.key_bits, 2048);
    }

    #[test]
    fn ca_signs_and_validity_parses_back() {
        let now = 1_700_000_000;
        let ca_key = generate_rsa_key(2048).unwrap();
        let ca_dn = SubjectDn::parse("/O=SimFed/CN=Sim SLCS CA").unwrap();
        let ca = self_signed_ca(&ca_dn, &ca_key, now).unwrap();

        let user_key = generate_rsa_key(2048).unwrap();
        let user_dn = SubjectDn::parse("/C=CH/O=SimFed/CN=alice").unwrap();
        let public = PKey::public_key_from_pem(&user_key.public_key_to_pem().unwrap()).unwrap();
        let cert = sign_certificate(SignParams {
            subject: &user_dn,
            issuer: &dn_to_name(&ca_dn).unwrap(),
            public_key: &public,
            signing_key: &ca_key,
            serial: 7,
            not_before: now,
            not_after: now + 1_000_000,
            custom_extensions: vec![],
            is_ca: false,
        })
        .unwrap();

        assert!(cert.verify(&ca.public_key().unwrap()).unwrap());
        assert_eq!(cert_validity(&cert).unwrap(), (now, now + 1_000_000));
        assert_eq!(name_to_dn(cert.subject_name()).unwrap(), user_dn);
    }
}
