//! Loopback HTTP services wrapping the simulators, plus the small
//! client helpers the rest of the crate uses to talk to them.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tiny_http::{Header, Request, Response, Server};

use crate::ca::SlcsCa;
use crate::clock::SharedClock;
use crate::error::{Error, Result};
use crate::model::{Assertion, CertificateConstraints, Fqan, SubjectDn};
use crate::sso::{SsoSim, IDP_SESSION_COOKIE, SP_SESSION_COOKIE};
use crate::voms::{AttributeGrant, VomsSim};

const WORKERS: usize = 4;

/// Running loopback service. Dropping the handle stops the workers.
pub struct ServiceHandle {
    base_url: String,
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn base_url(&self) -> &str {
        &self.base_url
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        // unblock wakes exactly one blocked worker
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Bind an ephemeral loopback port and dispatch requests to `handler`
/// on a small worker pool.
pub fn spawn_service<F>(handler: F) -> ServiceHandle
where
    F: Fn(&str, Request) + Send + Sync + 'static,
{
    let server = Arc::new(Server::http("127.0.0.1:0").expect("bind loopback"));
    let addr = server.server_addr().to_ip().expect("ip address");
    let base_url = format!("http://{addr}");
    let handler = Arc::new(handler);
    let workers = (0..WORKERS)
        .map(|_| {
            let server = server.clone();
            let handler = handler.clone();
            let base = base_url.clone();
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    handler(&base, request);
                }
            })
        })
        .collect();
    ServiceHandle {
        base_url,
        server,
        workers,
    }
}

// ---------------------------------------------------------------------------
// request/response plumbing

pub fn cookies(request: &Request) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for header in request.headers() {
        if header.field.equiv("Cookie") {
            for pair in header.value.as_str().split(';') {
                if let Some((k, v)) = pair.trim().split_once('=') {
                    out.insert(k.to_string(), v.to_string());
                }
            }
        }
    }
    out
}

/// Split a request URL into (path, query map).
pub fn split_query(url: &str) -> (&str, BTreeMap<String, String>) {
    match url.split_once('?') {
        None => (url, BTreeMap::new()),
        Some((path, query)) => {
            let mut map = BTreeMap::new();
            for pair in query.split('&') {
                if let Some((k, v)) = pair.split_once('=') {
                    map.insert(k.to_string(), form_decode(v));
                } else if !pair.is_empty() {
                    map.insert(pair.to_string(), String::new());
                }
            }
            (path, map)
        }
    }
}

pub fn form_encode(value: &str) -> String {
    let mut out = String::new();
    for b in value.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'.' | b'_' | b'~' => {
                out.push(b as char)
            }
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

pub fn form_decode(value: &str) -> String {
    crate::sso::decode_return_url(&format!("/{value}")).unwrap_or_else(|_| value.to_string())
}

fn header(name: &str, value: &str) -> Header {
    Header::from_bytes(name.as_bytes(), value.as_bytes()).expect("valid header")
}

pub fn respond_json<T: Serialize>(request: Request, value: &T) {
    let body = serde_json::to_string(value).expect("serializable");
    let response = Response::from_string(body)
        .with_header(header("Content-Type", "application/json"));
    let _ = request.respond(response);
}

pub fn respond_text(request: Request, status: u16, body: impl Into<String>) {
    let response = Response::from_string(body.into()).with_status_code(status);
    let _ = request.respond(response);
}

/// 303 redirect, optionally setting or deleting cookies.
pub fn respond_redirect(request: Request, location: &str, set_cookies: &[(String, String)]) {
    let mut response = Response::from_string("")
        .with_status_code(303)
        .with_header(header("Location", location));
    for (name, value) in set_cookies {
        let cookie = if value.is_empty() {
            format!("{name}=; Max-Age=0; Path=/")
        } else {
            format!("{name}={value}; Path=/")
        };
        response = response.with_header(header("Set-Cookie", &cookie));
    }
    let _ = request.respond(response);
}

#[derive(Debug, Serialize, Deserialize)]
struct ErrorWire {
    error: String,
    detail: String,
}

fn error_status(e: &Error) -> u16 {
    match e {
        Error::ExpiredAssertion => 401,
        Error::SessionExpired => 401,
        Error::NoSuchSession(_) => 401,
        Error::UnknownUser(_) => 401,
        Error::HandshakeRejected | Error::PrefixViolation(_) => 403,
        Error::UnknownVo(_) => 400,
        Error::MalformedReturnUrl(_) | Error::UrlTooLong { .. } => 400,
        Error::InvalidToken | Error::DnMismatch(_) | Error::WeakKey { .. } => 403,
        Error::InvalidAssertion(_) => 403,
        Error::AttributeDenied(_) => 403,
        _ => 500,
    }
}

pub fn respond_error(request: Request, e: &Error) {
    let body = serde_json::to_string(&ErrorWire {
        error: e.category().to_string(),
        detail: e.to_string(),
    })
    .expect("error serializes");
    let response = Response::from_string(body)
        .with_status_code(error_status(e))
        .with_header(header("Content-Type", "application/json"));
    let _ = request.respond(response);
}

pub(crate) fn decode_error(status: u16, body: &str) -> Error {
    match serde_json::from_str::<ErrorWire>(body) {
        Ok(wire) => match wire.error.as_str() {
            "ExpiredAssertion" => Error::ExpiredAssertion,
            "SessionExpired" => Error::SessionExpired,
            "NoSuchSession" => Error::NoSuchSession(wire.detail),
            "UnknownUser" => Error::UnknownUser(wire.detail),
            "InvalidToken" => Error::InvalidToken,
            "DnMismatch" => Error::DnMismatch(wire.detail),
            "InvalidAssertion" => Error::InvalidAssertion(wire.detail),
            "UnknownVo" => Error::UnknownVo(wire.detail),
            "AttributeDenied" => Error::AttributeDenied(wire.detail),
            "HandshakeRejected" => Error::HandshakeRejected,
            "PrefixViolation" => Error::PrefixViolation(wire.detail),
            "WeakKey" => Error::IssuanceFailed(wire.detail),
            other => Error::Http(format!("{other}: {}", wire.detail)),
        },
        Err(_) => Error::Http(format!("status {status}: {body}")),
    }
}

fn handle_ureq_error(e: ureq::Error) -> (u16, String) {
    match e {
        ureq::Error::Status(status, response) => {
            let body = response.into_string().unwrap_or_default();
            (status, body)
        }
        other => (0, other.to_string()),
    }
}

pub fn post_json<Req: Serialize, Resp: DeserializeOwned>(url: &str, body: &Req) -> Result<Resp> {
    match ureq::post(url).send_json(serde_json::to_value(body).expect("serializable")) {
        Ok(response) => {
            let text = response
                .into_string()
                .map_err(|e| Error::Http(e.to_string()))?;
            serde_json::from_str(&text).map_err(|e| Error::Http(format!("bad response: {e}")))
        }
        Err(e) => {
            let (status, body) = handle_ureq_error(e);
            if status == 0 {
                Err(Error::Http(body))
            } else {
                Err(decode_error(status, &body))
            }
        }
    }
}

pub fn post_json_for_text<Req: Serialize>(url: &str, body: &Req) -> Result<String> {
    match ureq::post(url).send_json(serde_json::to_value(body).expect("serializable")) {
        Ok(response) => response.into_string().map_err(|e| Error::Http(e.to_string())),
        Err(e) => {
            let (status, body) = handle_ureq_error(e);
            if status == 0 {
                Err(Error::Http(body))
            } else {
                Err(decode_error(status, &body))
            }
        }
    }
}

pub fn get_text(url: &str) -> Result<String> {
    match ureq::get(url).call() {
        Ok(response) => response.into_string().map_err(|e| Error::Http(e.to_string())),
        Err(e) => {
            let (status, body) = handle_ureq_error(e);
            if status == 0 {
                Err(Error::Http(body))
            } else {
                Err(decode_error(status, &body))
            }
        }
    }
}

pub fn read_body(request: &mut Request) -> Result<String> {
    let mut body = String::new();
    request
        .as_reader()
        .read_to_string(&mut body)
        .map_err(|e| Error::Http(format!("body read: {e}")))?;
    Ok(body)
}

// ---------------------------------------------------------------------------
// wire formats

/// Response of `POST /slcs/login`.
#[derive(Debug, Serialize, Deserialize)]
pub struct LoginResponseWire {
    pub dn: String,
    pub token: String,
    pub constraints: CertificateConstraints,
}

/// Body of `POST /slcs/certificate`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CertificateRequestWire {
    pub csr_pem: String,
    pub token: String,
    pub lifetime: u64,
}

/// Body of `POST /voms/<vo>/grant`.
#[derive(Debug, Serialize, Deserialize)]
pub struct GrantRequestWire {
    pub holder: String,
    pub fqans: Vec<String>,
}

// ---------------------------------------------------------------------------
// SSO service

/// HTTP front of [`SsoSim`]: assertion download, transparent re-auth,
/// logout, and the assertion-renewal servlet.
pub fn spawn_sso(sim: Arc<SsoSim>, clock: SharedClock) -> ServiceHandle {
    spawn_service(move |base, request| {
        let url = request.url().to_string();
        let (path, query) = split_query(&url);
        let jar = cookies(&request);
        let now = clock.now();
        match path {
            "/idp/assert" => match jar
                .get(SP_SESSION_COOKIE)
                .and_then(|id| sim.sp_session(id))
            {
                Some(session) if session.active(now) => {
                    respond_json(request, &session.assertion)
                }
                Some(_) => respond_error(request, &Error::SessionExpired),
                None => respond_error(request, &Error::NoSuchSession("no SP session".into())),
            },
            "/sp/login" => {
                let Some(ret) = query.get("return") else {
                    return respond_text(request, 400, "missing return parameter");
                };
                let idp_session = jar
                    .get(IDP_SESSION_COOKIE)
                    .and_then(|id| sim.idp_session(id));
                match idp_session {
                    Some(s) if s.active(now) => match sim.issue_assertion(&s.id, now) {
                        Ok(assertion) => {
                            let session = sim.sp_create_session(assertion, now);
                            respond_redirect(
                                request,
                                ret,
                                &[(SP_SESSION_COOKIE.to_string(), session.session_id)],
                            );
                        }
                        Err(e) => respond_error(request, &e),
                    },
                    _ => respond_error(request, &Error::SessionExpired),
                }
            }
            "/sp/logout" => {
                let Some(ret) = query.get("return") else {
                    return respond_text(request, 400, "missing return parameter");
                };
                let Some(session_id) = jar.get(SP_SESSION_COOKIE) else {
                    return respond_error(
                        request,
                        &Error::NoSuchSession("no SP session cookie".into()),
                    );
                };
                match sim.sp_logout(session_id, ret) {
                    Ok(step) => {
                        // drop everything outside the whitelist: the
                        // redirect chain loses ordinary state here
                        let mut deletions: Vec<(String, String)> = jar
                            .keys()
                            .filter(|k| !sim.config().cookie_whitelist.contains(*k))
                            .map(|k| (k.clone(), String::new()))
                            .collect();
                        deletions.push((SP_SESSION_COOKIE.to_string(), String::new()));
                        respond_redirect(request, &step.url, &deletions);
                    }
                    Err(e) => respond_error(request, &e),
                }
            }
            p if p.starts_with("/renew/") => {
                handle_renew(&sim, base, &url, p, &jar, now, request)
            }
            _ => respond_text(request, 404, "not found"),
        }
    })
}

/// The renewal servlet: decides, per visit, whether to log the SP
/// session out, re-authenticate, or send the browser back to the page
/// it came from.
fn handle_renew(
    sim: &SsoSim,
    base: &str,
    full_url: &str,
    path: &str,
    jar: &BTreeMap<String, String>,
    now: i64,
    request: Request,
) {
    let original = match crate::sso::decode_return_url(path) {
        Ok(url) => url,
        Err(e) => return respond_error(request, &e),
    };
    if original.len() > sim.config().return_url_limit {
        return respond_error(
            request,
            &Error::UrlTooLong {
                len: original.len(),
                limit: sim.config().return_url_limit,
            },
        );
    }
    let self_url = format!("{base}{full_url}");
    let session = jar.get(SP_SESSION_COOKIE).and_then(|id| sim.sp_session(id));
    match session {
        None => {
            // no session: a transparent re-authentication will create one
            let target = format!("{base}/sp/login?return={}", form_encode(&self_url));
            respond_redirect(request, &target, &[]);
        }
        Some(s) if s.assertion.expired(now) => {
            let target = format!("{base}/sp/logout?return={}", form_encode(&self_url));
            respond_redirect(request, &target, &[]);
        }
        Some(_) => respond_redirect(request, &original, &[]),
    }
}

// ---------------------------------------------------------------------------
// CA service

/// HTTP front of [`SlcsCa`]: login and certificate signing, plus the CA
/// certificate itself for trust-anchor distribution.
pub fn spawn_ca(ca: Arc<SlcsCa>, clock: SharedClock) -> ServiceHandle {
    spawn_service(move |_base, mut request| {
        let url = request.url().to_string();
        let (path, _) = split_query(&url);
        let now = clock.now();
        match path {
            "/slcs/login" => {
                let body = match read_body(&mut request) {
                    Ok(b) => b,
                    Err(e) => return respond_error(request, &e),
                };
                let assertion: Assertion = match serde_json::from_str(&body) {
                    Ok(a) => a,
                    Err(e) => {
                        return respond_error(
                            request,
                            &Error::InvalidAssertion(format!("unparseable assertion: {e}")),
                        )
                    }
                };
                match ca.slcs_login(&assertion, now) {
                    Ok(resp) => respond_json(
                        request,
                        &LoginResponseWire {
                            dn: resp.dn.canonical(),
                            token: resp.auth_token,
                            constraints: resp.constraints,
                        },
                    ),
                    Err(e) => respond_error(request, &e),
                }
            }
            "/slcs/certificate" => {
                let body = match read_body(&mut request) {
                    Ok(b) => b,
                    Err(e) => return respond_error(request, &e),
                };
                let wire: CertificateRequestWire = match serde_json::from_str(&body) {
                    Ok(w) => w,
                    Err(e) => {
                        return respond_error(
                            request,
                            &Error::IssuanceFailed(format!("bad request: {e}")),
                        )
                    }
                };
                match ca.sign_csr(wire.csr_pem.as_bytes(), &wire.token, wire.lifetime, now) {
                    Ok(pem) => respond_text(request, 200, String::from_utf8_lossy(&pem)),
                    Err(e) => respond_error(request, &e),
                }
            }
            "/slcs/ca-certificate" => {
                respond_text(request, 200, String::from_utf8_lossy(&ca.ca_certificate_pem()))
            }
            _ => respond_text(request, 404, "not found"),
        }
    })
}

// ---------------------------------------------------------------------------
// VOMS service

/// HTTP front of [`VomsSim`]: `POST /voms/<vo>/grant`.
pub fn spawn_voms(sim: Arc<VomsSim>, clock: SharedClock) -> ServiceHandle {
    spawn_service(move |_base, mut request| {
        let url = request.url().to_string();
        let (path, _) = split_query(&url);
        let now = clock.now();
        let Some(rest) = path.strip_prefix("/voms/") else {
            return respond_text(request, 404, "not found");
        };
        let Some(vo) = rest.strip_suffix("/grant") else {
            return respond_text(request, 404, "not found");
        };
        if !sim.known_vo(vo) {
            return respond_error(request, &Error::UnknownVo(vo.to_string()));
        }
        let body = match read_body(&mut request) {
            Ok(b) => b,
            Err(e) => return respond_error(request, &e),
        };
        let wire: GrantRequestWire = match serde_json::from_str(&body) {
            Ok(w) => w,
            Err(e) => {
                return respond_error(request, &Error::AttributeDenied(format!("bad request: {e}")))
            }
        };
        let holder = match SubjectDn::parse(&wire.holder) {
            Ok(dn) => dn,
            Err(e) => return respond_error(request, &e),
        };
        let fqans: std::result::Result<Vec<Fqan>, Error> =
            wire.fqans.iter().map(|s| Fqan::parse(s)).collect();
        let fqans = match fqans {
            Ok(f) => f,
            Err(e) => return respond_error(request, &e),
        };
        match sim.fetch_grant(&holder, &fqans, now) {
            Ok(grant) => respond_json(request, &grant),
            Err(e) => respond_error(request, &e),
        }
    })
}

/// Client side of the VOMS endpoint.
pub fn fetch_grant_http(
    endpoint_base: &str,
    vo: &str,
    holder: &SubjectDn,
    fqans: &[Fqan],
) -> Result<AttributeGrant> {
    let url = format!("{endpoint_base}/voms/{vo}/grant");
    post_json(
        &url,
        &GrantRequestWire {
            holder: holder.canonical(),
            fqans: fqans.iter().map(Fqan::canonical).collect(),
        },
    )
}
