//! The two web-facing pieces that tie everything together: the
//! credential endpoints (`/gcl/...`) a portal delegates issuance to,
//! and the portal-side guards that decide, per request, whether a user
//! still has fresh credentials or must be bounced through issuance.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use openssl::x509::X509;
use tiny_http::Request;

use crate::client::{NewSlcsOverrides, SlcsFactory};
use crate::clock::SharedClock;
use crate::error::{Error, Result};
use crate::model::{Assertion, Credential, Fqan};
use crate::proxy::{NewProxyOptions, ProxyFactory};
use crate::services::{
    cookies, form_encode, respond_redirect, respond_text, spawn_service, split_query,
    ServiceHandle,
};
use crate::sso::{decode_return_url, encode_return_url, SP_SESSION_COOKIE};
use crate::store::{self, LOCATION_COOKIE, SECRET_COOKIE};
use crate::x509;

/// Environment variable names handed to guarded applications.
pub const ENV_USER_CERT: &str = "X509_USER_CERT";
pub const ENV_USER_KEY: &str = "X509_USER_KEY";
pub const ENV_USER_PROXY: &str = "X509_USER_PROXY";

// ---------------------------------------------------------------------------
// credential endpoints

#[derive(Debug, Clone)]
pub struct GclConfig {
    /// Base URL of the SSO service (assertion download, login, logout).
    pub sso_base: String,
    /// When set, handshake locations must resolve under this prefix.
    pub prefix_allowlist: Option<PathBuf>,
    /// Require the marker-file handshake on every credential write.
    pub require_handshake: bool,
    pub return_url_limit: usize,
}

impl GclConfig {
    pub fn new(sso_base: &str) -> Self {
        GclConfig {
            sso_base: sso_base.to_string(),
            prefix_allowlist: None,
            require_handshake: false,
            return_url_limit: 2_000,
        }
    }
}

/// Shared state of the credential endpoints. Passphrases of issued keys
/// stay in this process; they are never sent over HTTP.
pub struct GclService {
    config: GclConfig,
    slcs: SlcsFactory,
    proxy: ProxyFactory,
    clock: SharedClock,
    passphrases: Mutex<HashMap<PathBuf, String>>,
}

/// HTTP status for errors surfacing at the credential endpoints:
/// authentication problems are 401, authorization problems 403, caller
/// mistakes 400, and anything going wrong during issuance itself 502.
fn gcl_status(e: &Error) -> u16 {
    match e {
        Error::NoSuchSession(_) | Error::SessionExpired | Error::ExpiredAssertion
        | Error::UnknownUser(_) => 401,
        Error::HandshakeRejected | Error::PrefixViolation(_) | Error::DnMismatch(_) => 403,
        Error::UnknownVo(_) | Error::MalformedReturnUrl(_) | Error::UrlTooLong { .. } => 400,
        _ => 502,
    }
}

fn respond_gcl_error(request: Request, e: &Error) {
    respond_gcl_error_status(request, gcl_status(e), e)
}

fn respond_gcl_error_status(request: Request, status: u16, e: &Error) {
    let body = serde_json::json!({ "error": e.category(), "detail": e.to_string() });
    let response = tiny_http::Response::from_string(body.to_string())
        .with_status_code(status)
        .with_header(
            tiny_http::Header::from_bytes("Content-Type", "application/json").expect("header"),
        );
    let _ = request.respond(response);
}

/// Download the assertion cached in the caller's SP session over the
/// back channel.
fn fetch_assertion(sso_base: &str, sp_session: &str) -> Result<Assertion> {
    let response = ureq::AgentBuilder::new()
        .redirects(0)
        .build()
        .get(&format!("{sso_base}/idp/assert"))
        .set("Cookie", &format!("{SP_SESSION_COOKIE}={sp_session}"))
        .call();
    match response {
        Ok(r) => {
            let text = r.into_string().map_err(|e| Error::Http(e.to_string()))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Http(format!("bad assertion payload: {e}")))
        }
        Err(ureq::Error::Status(status, r)) => {
            let body = r.into_string().unwrap_or_default();
            Err(crate::services::decode_error(status, &body))
        }
        Err(e) => Err(Error::Http(e.to_string())),
    }
}

impl GclService {
    pub fn new(
        config: GclConfig,
        slcs: SlcsFactory,
        proxy: ProxyFactory,
        clock: SharedClock,
    ) -> Self {
        GclService {
            config,
            slcs,
            proxy,
            clock,
            passphrases: Mutex::new(HashMap::new()),
        }
    }

    /// Passphrase of a key this service issued, if any.
    pub fn passphrase_for(&self, key_path: &Path) -> Option<String> {
        self.passphrases.lock().unwrap().get(key_path).cloned()
    }

    /// Consume the handshake cookies if the configuration requires the
    /// handshake; returns the authorized target directory.
    fn consume_handshake(&self, jar: &BTreeMap<String, String>) -> Result<Option<PathBuf>> {
        if !self.config.require_handshake {
            return Ok(None);
        }
        let (location, secret) = match (jar.get(LOCATION_COOKIE), jar.get(SECRET_COOKIE)) {
            (Some(l), Some(s)) => (PathBuf::from(l), s),
            _ => return Err(Error::HandshakeRejected),
        };
        store::consume_handshake(&location, secret, self.config.prefix_allowlist.as_deref())?;
        Ok(Some(location))
    }

    /// Redirect into the assertion-renewal choreography and back to
    /// `self_url`.
    fn renewal_redirect(&self, base: &str, self_url: &str, request: Request) {
        let renew = encode_return_url(&format!("{base}/gcl/renew"), self_url);
        let target = format!(
            "{}/sp/logout?return={}",
            self.config.sso_base,
            form_encode(&renew)
        );
        respond_redirect(request, &target, &[]);
    }

    fn handle_slcs_init(
        self: &Arc<Self>,
        base: &str,
        url: &str,
        query: &BTreeMap<String, String>,
        jar: &BTreeMap<String, String>,
        request: Request,
    ) {
        let Some(sp_session) = jar.get(SP_SESSION_COOKIE) else {
            return respond_gcl_error(request, &Error::NoSuchSession("no SP session".into()));
        };
        let assertion = match fetch_assertion(&self.config.sso_base, sp_session) {
            Ok(a) => a,
            Err(e) => return respond_gcl_error(request, &e),
        };
        if assertion.expired(self.clock.now()) {
            // stale assertion: renew it, then come back here
            return self.renewal_redirect(base, &format!("{base}{url}"), request);
        }
        let target = match self.consume_handshake(jar) {
            Ok(t) => t,
            Err(e) => return respond_gcl_error(request, &e),
        };
        let overrides = match &target {
            Some(dir) => NewSlcsOverrides {
                certificate_path: Some(dir.join("cert.pem")),
                key_path: Some(dir.join("key.pem")),
                passphrase: None,
            },
            None => NewSlcsOverrides::default(),
        };
        let result = match query.get("lifetime").and_then(|v| v.parse().ok()) {
            Some(lifetime) => self.slcs.new_slcs_with_lifetime(&assertion, &overrides, lifetime),
            None => self.slcs.new_slcs(&assertion, &overrides),
        };
        let credential = match result {
            Ok(c) => c,
            Err(e) => return respond_gcl_error(request, &e),
        };
        self.passphrases.lock().unwrap().insert(
            credential.private_key_path.clone(),
            credential.passphrase.clone(),
        );
        match query.get("return") {
            Some(ret) => respond_redirect(request, ret, &[]),
            None => respond_text(
                request,
                200,
                format!(
                    "certificate={}\nkey={}\n",
                    credential.certificate_path.display(),
                    credential.private_key_path.display()
                ),
            ),
        }
    }

    fn handle_proxy_init(
        self: &Arc<Self>,
        base: &str,
        url: &str,
        query: &BTreeMap<String, String>,
        jar: &BTreeMap<String, String>,
        request: Request,
    ) {
        let Some(sp_session) = jar.get(SP_SESSION_COOKIE) else {
            return respond_gcl_error(request, &Error::NoSuchSession("no SP session".into()));
        };
        let assertion = match fetch_assertion(&self.config.sso_base, sp_session) {
            Ok(a) => a,
            Err(e) => return respond_gcl_error(request, &e),
        };
        if assertion.expired(self.clock.now()) {
            return self.renewal_redirect(base, &format!("{base}{url}"), request);
        }

        let (Some(cert_path), Some(key_path)) = (query.get("cert"), query.get("key")) else {
            return respond_gcl_error(
                request,
                &Error::MalformedReturnUrl("cert and key parameters required".into()),
            );
        };
        let cert_path = PathBuf::from(cert_path);
        let key_path = PathBuf::from(key_path);
        if !cert_path.is_file() || !key_path.is_file() {
            return respond_gcl_error_status(
                request,
                404,
                &Error::StorageFailed(format!("no credential at {}", cert_path.display())),
            );
        }

        let target = match self.consume_handshake(jar) {
            Ok(t) => t,
            Err(e) => return respond_gcl_error(request, &e),
        };

        let fqans = match parse_vos(query.get("vos").map(String::as_str).unwrap_or("")) {
            Ok(f) => f,
            Err(e) => return respond_gcl_error(request, &e),
        };
        let passphrase = match query
            .get("passphrase")
            .cloned()
            .or_else(|| self.passphrase_for(&key_path))
        {
            Some(p) => p,
            None => {
                return respond_gcl_error(
                    request,
                    &Error::IssuanceFailed(format!(
                        "no passphrase known for {}",
                        key_path.display()
                    )),
                )
            }
        };
        let credential = match load_credential(&cert_path, &key_path, passphrase) {
            Ok(c) => c,
            Err(e) => return respond_gcl_error(request, &e),
        };
        // the session holder and the credential owner must be the same
        // person
        let expected_cn = assertion.subject.clone();
        let cn_matches = credential
            .subject
            .rdns()
            .iter()
            .any(|(k, v)| k == "CN" && *v == expected_cn);
        if !cn_matches {
            return respond_gcl_error(
                request,
                &Error::DnMismatch(format!(
                    "credential {} is not held by {expected_cn}",
                    credential.subject
                )),
            );
        }

        let options = NewProxyOptions {
            lifetime: query.get("lifetime").and_then(|v| v.parse().ok()),
            output_path: target.map(|dir| dir.join("proxy.pem")),
        };
        let proxy = match self.proxy.new_proxy(&credential, &fqans, &options) {
            Ok(p) => p,
            Err(e @ Error::AttributeDenied(_)) => {
                // upstream said no: a gateway problem, not a client one
                return respond_gcl_error_status(request, 502, &e);
            }
            Err(e) => return respond_gcl_error(request, &e),
        };
        match query.get("return") {
            Some(ret) => respond_redirect(request, ret, &[]),
            None => respond_text(
                request,
                200,
                format!("proxy={}\n", proxy.proxy_path.display()),
            ),
        }
    }

    fn handle_renew(
        self: &Arc<Self>,
        base: &str,
        url: &str,
        path: &str,
        jar: &BTreeMap<String, String>,
        request: Request,
    ) {
        let original = match decode_return_url(path) {
            Ok(u) => u,
            Err(e) => return respond_gcl_error(request, &e),
        };
        if original.len() > self.config.return_url_limit {
            return respond_gcl_error(
                request,
                &Error::UrlTooLong {
                    len: original.len(),
                    limit: self.config.return_url_limit,
                },
            );
        }
        let self_url = format!("{base}{url}");
        let assertion = jar
            .get(SP_SESSION_COOKIE)
            .and_then(|sp| fetch_assertion(&self.config.sso_base, sp).ok());
        match assertion {
            // logged out mid-chain: a transparent re-auth restores the
            // session, then this URL runs again
            None => respond_redirect(
                request,
                &format!(
                    "{}/sp/login?return={}",
                    self.config.sso_base,
                    form_encode(&self_url)
                ),
                &[],
            ),
            Some(a) if a.expired(self.clock.now()) => respond_redirect(
                request,
                &format!(
                    "{}/sp/logout?return={}",
                    self.config.sso_base,
                    form_encode(&self_url)
                ),
                &[],
            ),
            Some(_) => respond_redirect(request, &original, &[]),
        }
    }
}

/// Parse a comma-separated VO/FQAN list; bare names are whole-VO
/// requests.
pub fn parse_vos(raw: &str) -> Result<Vec<Fqan>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            if item.starts_with('/') {
                Fqan::parse(item)
            } else {
                Fqan::parse(&format!("/{item}"))
            }
        })
        .collect()
}

/// Rebuild a [`Credential`] from its on-disk parts.
fn load_credential(cert_path: &Path, key_path: &Path, passphrase: String) -> Result<Credential> {
    let pem = std::fs::read(cert_path)
        .map_err(|e| Error::StorageFailed(format!("read {}: {e}", cert_path.display())))?;
    let cert =
        X509::from_pem(&pem).map_err(|e| Error::Crypto(format!("bad certificate: {e}")))?;
    let (not_before, not_after) = x509::cert_validity(&cert)?;
    Ok(Credential {
        certificate_path: cert_path.to_path_buf(),
        private_key_path: key_path.to_path_buf(),
        passphrase,
        subject: x509::name_to_dn(cert.subject_name())?,
        not_before,
        not_after,
    })
}

/// HTTP front of [`GclService`].
pub fn spawn_gcl(service: Arc<GclService>) -> ServiceHandle {
    spawn_service(move |base, request| {
        let url = request.url().to_string();
        let (path, query) = split_query(&url);
        let jar = cookies(&request);
        match path {
            "/gcl/slcs-init" => service.handle_slcs_init(base, &url, &query, &jar, request),
            "/gcl/voms-proxy-init" => service.handle_proxy_init(base, &url, &query, &jar, request),
            p if p.starts_with("/gcl/renew/") => {
                service.handle_renew(base, &url, p, &jar, request)
            }
            _ => respond_text(request, 404, "not found"),
        }
    })
}

// ---------------------------------------------------------------------------
// portal guards

#[derive(Debug, Clone)]
pub struct PortalConfig {
    pub gcl_base: String,
    pub sso_base: String,
    /// Handshake directories are created here; doubles as the prefix
    /// allowlist on the endpoint side.
    pub store_root: PathBuf,
    /// A certificate is fresh only with at least this much lifetime
    /// left.
    pub min_remaining_certificate: u64,
    pub min_remaining_proxy: u64,
    /// VOs requested for every proxy.
    pub vos: Vec<String>,
}

impl PortalConfig {
    pub fn new(gcl_base: &str, sso_base: &str, store_root: impl Into<PathBuf>) -> Self {
        PortalConfig {
            gcl_base: gcl_base.to_string(),
            sso_base: sso_base.to_string(),
            store_root: store_root.into(),
            min_remaining_certificate: 86_400,
            min_remaining_proxy: 300,
            vos: vec!["life".to_string()],
        }
    }
}

#[derive(Debug, Clone, Default)]
struct UserPaths {
    certificate: Option<PathBuf>,
    key: Option<PathBuf>,
    proxy: Option<PathBuf>,
}

/// Result of a guard pass: either the request may proceed with
/// credential locations in its environment, or the browser must be sent
/// through issuance first.
#[derive(Debug, Clone)]
pub enum GuardOutcome {
    Pass { env: BTreeMap<String, String> },
    Redirect {
        url: String,
        set_cookies: Vec<(String, String)>,
    },
}

/// The portal: tracks per-user credential locations and decides when to
/// delegate to the credential endpoints.
pub struct Portal {
    config: PortalConfig,
    clock: SharedClock,
    users: Mutex<HashMap<String, UserPaths>>,
}

impl Portal {
    pub fn new(config: PortalConfig, clock: SharedClock) -> Result<Self> {
        std::fs::create_dir_all(&config.store_root).map_err(|e| {
            Error::StorageFailed(format!("create {}: {e}", config.store_root.display()))
        })?;
        Ok(Portal {
            config,
            clock,
            users: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &PortalConfig {
        &self.config
    }

    /// Both guards in order: certificate first, proxy second. `app_url`
    /// is where the browser returns after issuance.
    pub fn guard(&self, user: &str, app_url: &str) -> Result<GuardOutcome> {
        match self.guard_certificate(user, app_url)? {
            GuardOutcome::Pass { .. } => {}
            redirect => return Ok(redirect),
        }
        match self.guard_proxy(user, app_url)? {
            GuardOutcome::Pass { .. } => {}
            redirect => return Ok(redirect),
        }
        let users = self.users.lock().unwrap();
        let paths = users.get(user).cloned().unwrap_or_default();
        let mut env = BTreeMap::new();
        if let (Some(cert), Some(key), Some(proxy)) = (paths.certificate, paths.key, paths.proxy)
        {
            env.insert(ENV_USER_CERT.to_string(), cert.display().to_string());
            env.insert(ENV_USER_KEY.to_string(), key.display().to_string());
            env.insert(ENV_USER_PROXY.to_string(), proxy.display().to_string());
        }
        Ok(GuardOutcome::Pass { env })
    }

    /// Fresh certificate on disk, or a redirect into certificate
    /// issuance with a brand-new handshake.
    pub fn guard_certificate(&self, user: &str, app_url: &str) -> Result<GuardOutcome> {
        let now = self.clock.now();
        {
            let users = self.users.lock().unwrap();
            if let Some(paths) = users.get(user) {
                if let (Some(cert), Some(key)) = (&paths.certificate, &paths.key) {
                    if store::freshness_check(cert, self.config.min_remaining_certificate, now)
                        && key.is_file()
                    {
                        return Ok(GuardOutcome::Pass { env: BTreeMap::new() });
                    }
                }
            }
        }
        let handshake = store::prepare_handshake(&self.config.store_root, user)?;
        {
            let mut users = self.users.lock().unwrap();
            let paths = users.entry(user.to_string()).or_default();
            paths.certificate = Some(handshake.location.join("cert.pem"));
            paths.key = Some(handshake.location.join("key.pem"));
        }
        Ok(GuardOutcome::Redirect {
            url: format!(
                "{}/gcl/slcs-init?return={}",
                self.config.gcl_base,
                form_encode(app_url)
            ),
            set_cookies: vec![
                (
                    LOCATION_COOKIE.to_string(),
                    handshake.location.display().to_string(),
                ),
                (SECRET_COOKIE.to_string(), handshake.secret),
            ],
        })
    }

    /// Fresh proxy on disk, or a redirect into proxy issuance. Requires
    /// the certificate guard to have passed.
    pub fn guard_proxy(&self, user: &str, app_url: &str) -> Result<GuardOutcome> {
        let now = self.clock.now();
        let (cert, key) = {
            let users = self.users.lock().unwrap();
            let paths = users.get(user).cloned().unwrap_or_default();
            if let Some(proxy) = &paths.proxy {
                if store::freshness_check(proxy, self.config.min_remaining_proxy, now) {
                    return Ok(GuardOutcome::Pass { env: BTreeMap::new() });
                }
            }
            match (paths.certificate, paths.key) {
                (Some(c), Some(k)) => (c, k),
                _ => {
                    return Err(Error::StorageFailed(format!(
                        "no certificate on record for {user}"
                    )))
                }
            }
        };
        let handshake = store::prepare_handshake(&self.config.store_root, user)?;
        {
            let mut users = self.users.lock().unwrap();
            let paths = users.entry(user.to_string()).or_default();
            paths.proxy = Some(handshake.location.join("proxy.pem"));
        }
        Ok(GuardOutcome::Redirect {
            url: format!(
                "{}/gcl/voms-proxy-init?cert={}&key={}&vos={}&return={}",
                self.config.gcl_base,
                form_encode(&cert.display().to_string()),
                form_encode(&key.display().to_string()),
                form_encode(&self.config.vos.join(",")),
                form_encode(app_url)
            ),
            set_cookies: vec![
                (
                    LOCATION_COOKIE.to_string(),
                    handshake.location.display().to_string(),
                ),
                (SECRET_COOKIE.to_string(), handshake.secret),
            ],
        })
    }
}

/// HTTP front of the portal: `/app` is the guarded application page,
/// `/login` bootstraps the SP session via transparent re-auth.
pub fn spawn_portal(portal: Arc<Portal>) -> ServiceHandle {
    spawn_service(move |base, request| {
        let url = request.url().to_string();
        let (path, _query) = split_query(&url);
        let jar = cookies(&request);
        match path {
            // unguarded landing page; visiting it only needs a session
            "/welcome" => respond_text(request, 200, "welcome\n"),
            "/login" => {
                let target = format!(
                    "{}/sp/login?return={}",
                    portal.config.sso_base,
                    form_encode(&format!("{base}/app"))
                );
                respond_redirect(request, &target, &[]);
            }
            "/app" => {
                let assertion = jar
                    .get(SP_SESSION_COOKIE)
                    .and_then(|sp| fetch_assertion(&portal.config.sso_base, sp).ok());
                let Some(assertion) = assertion else {
                    return respond_redirect(request, &format!("{base}/login"), &[]);
                };
                let app_url = format!("{base}/app");
                match portal.guard(&assertion.subject, &app_url) {
                    Ok(GuardOutcome::Pass { env }) => {
                        let mut body = String::new();
                        for (k, v) in &env {
                            body.push_str(&format!("{k}={v}\n"));
                        }
                        body.push_str(&format!("user={}\n", assertion.subject));
                        respond_text(request, 200, body);
                    }
                    Ok(GuardOutcome::Redirect { url, set_cookies }) => {
                        respond_redirect(request, &url, &set_cookies);
                    }
                    Err(e) => respond_gcl_error(request, &e),
                }
            }
            _ => respond_text(request, 404, "not found"),
        }
    })
}
