//! Simulated VO membership service: a membership table plus an issuer
//! key that signs attribute grants embedded in proxy certificates.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use openssl::hash::MessageDigest;
use openssl::pkey::{PKey, Private, Public};
use openssl::sign::{Signer, Verifier};
use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::error::{Error, Result};
use crate::model::{Fqan, SubjectDn};
use crate::x509;

#[derive(Debug, Clone, Serialize)]
struct GrantPayload<'a> {
    fqans: &'a [Fqan],
    holder: &'a SubjectDn,
    issuer: &'a str,
    not_before: Timestamp,
    not_after: Timestamp,
}

/// Signed list of FQANs bound to a holder DN and a validity window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeGrant {
    pub fqans: Vec<Fqan>,
    pub holder: SubjectDn,
    pub issuer: String,
    pub not_before: Timestamp,
    pub not_after: Timestamp,
    /// Base64 RSA-SHA256 signature by the VO membership issuer.
    pub signature: String,
}

impl AttributeGrant {
    fn payload_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&GrantPayload {
            fqans: &self.fqans,
            holder: &self.holder,
            issuer: &self.issuer,
            not_before: self.not_before,
            not_after: self.not_after,
        })
        .expect("grant payload serializes")
    }

    pub fn verify(&self, issuer_key: &PKey<Public>) -> Result<()> {
        let sig = B64
            .decode(&self.signature)
            .map_err(|e| Error::AttributeDenied(format!("signature not base64: {e}")))?;
        let mut verifier = Verifier::new(MessageDigest::sha256(), issuer_key)?;
        if verifier.verify_oneshot(&sig, &self.payload_bytes())? {
            Ok(())
        } else {
            Err(Error::AttributeDenied("grant signature invalid".into()))
        }
    }
}

#[derive(Debug, Clone)]
pub struct VomsConfig {
    pub issuer: String,
    /// Validity window of issued grants.
    pub grant_validity: u64,
}

impl Default for VomsConfig {
    fn default() -> Self {
        VomsConfig {
            issuer: "sim-voms".into(),
            grant_validity: 43_200,
        }
    }
}

/// In-process VO membership service.
pub struct VomsSim {
    config: VomsConfig,
    key: PKey<Private>,
    /// vo name -> member subject DNs (canonical form)
    members: Mutex<BTreeMap<String, BTreeSet<String>>>,
}

impl VomsSim {
    pub fn new(config: VomsConfig) -> Result<Self> {
        Ok(VomsSim {
            config,
            key: x509::generate_rsa_key(2048)?,
            members: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn issuer_public_key_pem(&self) -> Vec<u8> {
        self.key.public_key_to_pem().expect("public key PEM")
    }

    pub fn issuer_public_key(&self) -> PKey<Public> {
        PKey::public_key_from_pem(&self.issuer_public_key_pem()).expect("public key parses")
    }

    pub fn add_member(&self, vo: &str, holder: &SubjectDn) {
        self.members
            .lock()
            .unwrap()
            .entry(vo.to_string())
            .or_default()
            .insert(holder.canonical());
    }

    pub fn known_vo(&self, vo: &str) -> bool {
        self.members.lock().unwrap().contains_key(vo)
    }

    /// Issue a grant covering exactly the requested FQANs, in request
    /// order. Denied outright if the holder is not a member of the VO
    /// behind any requested FQAN.
    pub fn fetch_grant(
        &self,
        holder: &SubjectDn,
        fqans_requested: &[Fqan],
        now: Timestamp,
    ) -> Result<AttributeGrant> {
        {
            let members = self.members.lock().unwrap();
            for fqan in fqans_requested {
                let member = members
                    .get(&fqan.vo)
                    .map(|set| set.contains(&holder.canonical()))
                    .unwrap_or(false);
                if !member {
                    return Err(Error::AttributeDenied(format!(
                        "{} is not a member of VO {}",
                        holder, fqan.vo
                    )));
                }
            }
        }
        let mut grant = AttributeGrant {
            fqans: fqans_requested.to_vec(),
            holder: holder.clone(),
            issuer: self.config.issuer.clone(),
            not_before: now,
            not_after: now + self.config.grant_validity as i64,
            signature: String::new(),
        };
        let mut signer = Signer::new(MessageDigest::sha256(), &self.key)?;
        let sig = signer.sign_oneshot_to_vec(&grant.payload_bytes())?;
        grant.signature = B64.encode(sig);
        Ok(grant)
    }
}
