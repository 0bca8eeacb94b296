//! Simulated identity provider and service provider: sessions,
//! assertion issuance, logout, and the assertion-renewal redirect state
//! machine.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Mutex;

use openssl::pkey::{PKey, Private, Public};

use crate::clock::Timestamp;
use crate::error::{Error, Result};
use crate::model::{Assertion, DEFAULT_ASSERTION_VALIDITY, DEFAULT_SESSION_VALIDITY};
use crate::secrets;
use crate::x509;

/// Cookie naming the service-provider session.
pub const SP_SESSION_COOKIE: &str = "sp-session";
/// Cookie naming the identity-provider session.
pub const IDP_SESSION_COOKIE: &str = "idp-session";

#[derive(Debug, Clone)]
pub struct IdpSession {
    pub id: String,
    pub user_id: String,
    pub created_at: Timestamp,
    pub validity: u64,
}

impl IdpSession {
    pub fn active(&self, now: Timestamp) -> bool {
        now <= self.created_at + self.validity as i64
    }
}

#[derive(Debug, Clone)]
pub struct SpSession {
    pub session_id: String,
    /// May be long expired while the session itself is still active.
    pub assertion: Assertion,
    pub created_at: Timestamp,
    pub validity: u64,
}

impl SpSession {
    pub fn active(&self, now: Timestamp) -> bool {
        now <= self.created_at + self.validity as i64
    }
}

/// One hop of a redirect chain. Only GET is representable: the renewal
/// choreography has no way to carry a request body across hops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RedirectStep {
    pub url: String,
    /// Cookies still attached to the request at this hop.
    pub cookies: BTreeMap<String, String>,
    /// True only for hops that would need the user at the keyboard.
    pub interactive: bool,
}

impl RedirectStep {
    fn new(url: impl Into<String>, cookies: BTreeMap<String, String>) -> Self {
        RedirectStep {
            url: url.into(),
            cookies,
            interactive: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SsoConfig {
    pub issuer: String,
    pub assertion_validity: u64,
    pub session_validity: u64,
    /// Upper bound on the length of URLs that can be carried through
    /// the renewal chain.
    pub return_url_limit: usize,
    /// Cookies that survive the logout hop; everything else is dropped
    /// there, as state routinely is in long redirect chains.
    pub cookie_whitelist: BTreeSet<String>,
    /// Base URLs used when rendering redirect traces.
    pub logout_url: String,
    pub renew_url: String,
    pub reauth_url: String,
}

impl Default for SsoConfig {
    fn default() -> Self {
        SsoConfig {
            issuer: "sim-idp".into(),
            assertion_validity: DEFAULT_ASSERTION_VALIDITY,
            session_validity: DEFAULT_SESSION_VALIDITY,
            return_url_limit: 2_000,
            cookie_whitelist: [
                IDP_SESSION_COOKIE,
                crate::store::LOCATION_COOKIE,
                crate::store::SECRET_COOKIE,
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            logout_url: "/sp/logout".into(),
            renew_url: "/renew".into(),
            reauth_url: "/sp/login".into(),
        }
    }
}

#[derive(Default)]
struct SsoState {
    users: BTreeSet<String>,
    idp_sessions: HashMap<String, IdpSession>,
    sp_sessions: HashMap<String, SpSession>,
}

/// In-process IdP + SP pair with a shared user registry.
pub struct SsoSim {
    config: SsoConfig,
    idp_key: PKey<Private>,
    state: Mutex<SsoState>,
}

impl SsoSim {
    pub fn new(config: SsoConfig) -> Result<Self> {
        Ok(SsoSim {
            config,
            idp_key: x509::generate_rsa_key(2048)?,
            state: Mutex::new(SsoState::default()),
        })
    }

    pub fn config(&self) -> &SsoConfig {
        &self.config
    }

    /// PEM public key against which issued assertions verify.
    pub fn idp_public_key_pem(&self) -> Vec<u8> {
        self.idp_key.public_key_to_pem().expect("public key PEM")
    }

    pub fn idp_public_key(&self) -> PKey<Public> {
        PKey::public_key_from_pem(&self.idp_public_key_pem()).expect("public key parses")
    }

    pub fn register_user(&self, user_id: &str) {
        self.state.lock().unwrap().users.insert(user_id.to_string());
    }

    /// Interactive login at the identity provider. Each call creates an
    /// independent session.
    pub fn idp_login(&self, user_id: &str, now: Timestamp) -> Result<IdpSession> {
        let mut state = self.state.lock().unwrap();
        if !state.users.contains(user_id) {
            return Err(Error::UnknownUser(user_id.to_string()));
        }
        let session = IdpSession {
            id: secrets::token(),
            user_id: user_id.to_string(),
            created_at: now,
            validity: self.config.session_validity,
        };
        state.idp_sessions.insert(session.id.clone(), session.clone());
        Ok(session)
    }

    pub fn idp_session(&self, id: &str) -> Option<IdpSession> {
        self.state.lock().unwrap().idp_sessions.get(id).cloned()
    }

    /// Issue a fresh signed assertion against an active IdP session.
    /// An inactive session is the one case that requires the user to
    /// log in again.
    pub fn issue_assertion(&self, idp_session_id: &str, now: Timestamp) -> Result<Assertion> {
        let state = self.state.lock().unwrap();
        let session = state
            .idp_sessions
            .get(idp_session_id)
            .ok_or(Error::SessionExpired)?;
        if !session.active(now) {
            return Err(Error::SessionExpired);
        }
        let mut attributes = BTreeMap::new();
        attributes.insert("home-organization".to_string(), self.config.issuer.clone());
        Assertion::sign(
            &session.user_id,
            &self.config.issuer,
            now,
            self.config.assertion_validity,
            attributes,
            &self.idp_key,
        )
    }

    /// Cache an assertion in a new SP session.
    pub fn sp_create_session(&self, assertion: Assertion, now: Timestamp) -> SpSession {
        let session = SpSession {
            session_id: secrets::token(),
            assertion,
            created_at: now,
            validity: self.config.session_validity,
        };
        self.state
            .lock()
            .unwrap()
            .sp_sessions
            .insert(session.session_id.clone(), session.clone());
        session
    }

    pub fn sp_session(&self, id: &str) -> Option<SpSession> {
        self.state.lock().unwrap().sp_sessions.get(id).cloned()
    }

    /// Destroy an SP session and redirect to `return_url`, carried
    /// verbatim. Cookies outside the whitelist are dropped at this hop.
    pub fn sp_logout(&self, session_id: &str, return_url: &str) -> Result<RedirectStep> {
        let mut state = self.state.lock().unwrap();
        if state.sp_sessions.remove(session_id).is_none() {
            return Err(Error::NoSuchSession(session_id.to_string()));
        }
        Ok(RedirectStep::new(return_url, BTreeMap::new()))
    }

    /// Full renewal choreography for a session whose cached assertion
    /// may be stale: logout, renewal URL, transparent re-authentication,
    /// and return to `original_url`. No hop is interactive as long as
    /// the IdP session is alive.
    pub fn renew_assertion_flow(
        &self,
        sp_session_id: &str,
        idp_session_id: &str,
        original_url: &str,
        now: Timestamp,
    ) -> Result<(SpSession, Vec<RedirectStep>)> {
        if original_url.len() > self.config.return_url_limit {
            return Err(Error::UrlTooLong {
                len: original_url.len(),
                limit: self.config.return_url_limit,
            });
        }
        {
            let state = self.state.lock().unwrap();
            if !state.sp_sessions.contains_key(sp_session_id) {
                return Err(Error::NoSuchSession(sp_session_id.to_string()));
            }
            match state.idp_sessions.get(idp_session_id) {
                Some(s) if s.active(now) => {}
                _ => return Err(Error::SessionExpired),
            }
        }

        let renew_target = encode_return_url(&self.config.renew_url, original_url);
        let mut trace = Vec::new();
        let survivors = |cookies: &BTreeMap<String, String>| -> BTreeMap<String, String> {
            cookies
                .iter()
                .filter(|(k, _)| self.config.cookie_whitelist.contains(*k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        };

        let mut cookies = BTreeMap::new();
        cookies.insert(SP_SESSION_COOKIE.to_string(), sp_session_id.to_string());
        cookies.insert(IDP_SESSION_COOKIE.to_string(), idp_session_id.to_string());

        // hop 1: SP logout, return address points at the renewal URL
        trace.push(RedirectStep::new(
            format!("{}?return={renew_target}", self.config.logout_url),
            cookies.clone(),
        ));
        self.sp_logout(sp_session_id, &renew_target)?;
        let cookies = survivors(&cookies);

        // hop 2: renewal URL, no SP session any more
        trace.push(RedirectStep::new(renew_target, cookies.clone()));

        // hop 3: transparent re-authentication at the IdP
        trace.push(RedirectStep::new(self.config.reauth_url.clone(), cookies.clone()));
        let assertion = self.issue_assertion(idp_session_id, now)?;
        let session = self.sp_create_session(assertion, now);
        let mut cookies = cookies;
        cookies.insert(SP_SESSION_COOKIE.to_string(), session.session_id.clone());

        // hop 4: back to where the user wanted to go
        trace.push(RedirectStep::new(original_url, cookies));
        Ok((session, trace))
    }
}

const UNRESERVED: &[u8] =
    b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-._~";

/// Append `original_url` to `base` as a single percent-encoded trailing
/// path segment. Everything outside the unreserved set is escaped, so
/// the segment survives any number of redirect hops untouched.
pub fn encode_return_url(base: &str, original_url: &str) -> String {
    let mut out = String::with_capacity(base.len() + 1 + original_url.len() * 3);
    out.push_str(base);
    out.push('/');
    for b in original_url.bytes() {
        if UNRESERVED.contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// Recover the original URL from the trailing path segment of `path`.
pub fn decode_return_url(path: &str) -> Result<String> {
    let malformed = |msg: &str| Error::MalformedReturnUrl(format!("{msg}: {path}"));
    let segment = path.rsplit('/').next().ok_or_else(|| malformed("no path"))?;
    if segment.is_empty() {
        return Err(malformed("empty trailing segment"));
    }
    let bytes = segment.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'%' => {
                if i + 2 >= bytes.len() + 1 {
                    return Err(malformed("truncated escape"));
                }
                let hexpair = segment
                    .get(i + 1..i + 3)
                    .ok_or_else(|| malformed("truncated escape"))?;
                let v = u8::from_str_radix(hexpair, 16)
                    .map_err(|_| malformed("invalid escape"))?;
                out.push(v);
                i += 3;
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    String::from_utf8(out).map_err(|_| malformed("not UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: Timestamp = 1_700_000_000;

    fn sim() -> SsoSim {
        let sim = SsoSim::new(SsoConfig::default()).unwrap();
        sim.register_user("alice");
        sim
    }

    #[test]
    fn idp_login_lifetimes() {
        let sim = sim();
        let s = sim.idp_login("alice", T).unwrap();
        assert!(s.active(T + 28_800));
        assert!(!s.active(T + 28_801));
        let s2 = sim.idp_login("alice", T).unwrap();
        assert_ne!(s.id, s2.id);
        assert!(sim.idp_session(&s.id).is_some());
        assert!(matches!(
            sim.idp_login("mallory-unregistered", T),
            Err(Error::UnknownUser(_))
        ));
    }

    #[test]
    fn assertion_issuance() {
        let sim = sim();
        let s = sim.idp_login("alice", T).unwrap();
        let a = sim.issue_assertion(&s.id, T).unwrap();
        assert_eq!(a.issued_at, T);
        assert_eq!(a.validity, 300);
        a.verify(&sim.idp_public_key()).unwrap();
        assert!(matches!(
            sim.issue_assertion(&s.id, T + 28_801),
            Err(Error::SessionExpired)
        ));
    }

    #[test]
    fn sp_logout_semantics() {
        let sim = sim();
        let idp = sim.idp_login("alice", T).unwrap();
        let a = sim.issue_assertion(&idp.id, T).unwrap();
        let sp = sim.sp_create_session(a, T);
        let step = sim
            .sp_logout(&sp.session_id, "https://portal/app?x=1&y=2")
            .unwrap();
        assert_eq!(step.url, "https://portal/app?x=1&y=2");
        assert!(sim.sp_session(&sp.session_id).is_none());
        assert!(matches!(
            sim.sp_logout(&sp.session_id, "https://portal/app"),
            Err(Error::NoSuchSession(_))
        ));
    }

    #[test]
    fn renewal_happy_path() {
        let sim = sim();
        let idp = sim.idp_login("alice", T).unwrap();
        let a = sim.issue_assertion(&idp.id, T).unwrap();
        let sp = sim.sp_create_session(a, T);
        // assertion stale, sessions alive: the exact situation renewal exists for
        let now = T + 400;
        assert!(sim.sp_session(&sp.session_id).unwrap().assertion.expired(now));
        assert!(sim.sp_session(&sp.session_id).unwrap().active(now));

        let original = "https://portal/app";
        let (new_sp, trace) = sim
            .renew_assertion_flow(&sp.session_id, &idp.id, original, now)
            .unwrap();
        assert_eq!(new_sp.assertion.issued_at, now);
        assert!(!new_sp.assertion.expired(now));
        assert!(sim.sp_session(&sp.session_id).is_none());
        assert_ne!(new_sp.session_id, sp.session_id);
        assert!(trace.len() <= 5);
        assert_eq!(trace.last().unwrap().url, original);
        assert!(trace.iter().all(|s| !s.interactive));
    }

    #[test]
    fn renewal_trace_matches_hand_enumerated_state_machine() {
        // Independent enumeration of the redirect choreography:
        // logout (with renewal return address) -> renewal URL ->
        // transparent re-auth -> original URL.
        let sim = sim();
        let idp = sim.idp_login("alice", T).unwrap();
        let a = sim.issue_assertion(&idp.id, T).unwrap();
        let sp = sim.sp_create_session(a, T);
        let original = "https://portal/app?job=7";
        let (_, trace) = sim
            .renew_assertion_flow(&sp.session_id, &idp.id, original, T + 400)
            .unwrap();

        let encoded = encode_return_url("/renew", original);
        let expected = [
            format!("/sp/logout?return={encoded}"),
            encoded.clone(),
            "/sp/login".to_string(),
            original.to_string(),
        ];
        let urls: Vec<_> = trace.iter().map(|s| s.url.clone()).collect();
        assert_eq!(urls, expected);
    }

    #[test]
    fn renewal_errors() {
        let sim = sim();
        let idp = sim.idp_login("alice", T).unwrap();
        let a = sim.issue_assertion(&idp.id, T).unwrap();
        let sp = sim.sp_create_session(a, T);

        let long_url = format!("https://portal/{}", "x".repeat(10_000));
        assert!(matches!(
            sim.renew_assertion_flow(&sp.session_id, &idp.id, &long_url, T + 400),
            Err(Error::UrlTooLong { .. })
        ));
        assert!(matches!(
            sim.renew_assertion_flow(&sp.session_id, &idp.id, "https://p/app", T + 30_000),
            Err(Error::SessionExpired)
        ));
    }

    #[test]
    fn logout_hop_drops_unlisted_cookies() {
        let sim = sim();
        let idp = sim.idp_login("alice", T).unwrap();
        let a = sim.issue_assertion(&idp.id, T).unwrap();
        let sp = sim.sp_create_session(a, T);
        let (_, trace) = sim
            .renew_assertion_flow(&sp.session_id, &idp.id, "https://p/app", T + 400)
            .unwrap();
        // after the logout hop the SP session cookie is gone, the IdP
        // session cookie survives
        assert!(trace[0].cookies.contains_key(SP_SESSION_COOKIE));
        assert!(!trace[1].cookies.contains_key(SP_SESSION_COOKIE));
        assert!(trace[1].cookies.contains_key(IDP_SESSION_COOKIE));
    }

    #[test]
    fn return_url_codec() {
        let enc = encode_return_url("https://sp/renew", "https://sp/app?x=1");
        assert!(enc.starts_with("https://sp/renew/"));
        assert_eq!(decode_return_url(&enc).unwrap(), "https://sp/app?x=1");
        assert!(matches!(
            decode_return_url("https://sp/renew/"),
            Err(Error::MalformedReturnUrl(_))
        ));
        let tricky = "https://sp/a%2Fb/c?d=%&e=/";
        assert_eq!(
            decode_return_url(&encode_return_url("/renew", tricky)).unwrap(),
            tricky
        );
        assert!(decode_return_url("/renew/%GG").is_err());
        assert!(decode_return_url("/renew/abc%2").is_err());
    }
}
