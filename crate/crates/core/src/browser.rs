//! Minimal scripted browser: follows redirect chains with a cookie
//! jar, recording every hop. Used by the demo driver and the
//! choreography tests; no interactive step is ever possible here, which
//! is exactly the point.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct BrowserResult {
    pub status: u16,
    pub body: String,
    pub final_url: String,
    /// Every URL visited, requests and redirect targets alike.
    pub trace: Vec<String>,
}

impl BrowserResult {
    /// Number of redirect responses encountered.
    pub fn redirect_hops(&self) -> usize {
        self.trace.len() - 1
    }
}

pub struct Browser {
    jar: BTreeMap<String, String>,
    agent: ureq::Agent,
    max_hops: usize,
}

impl Default for Browser {
    fn default() -> Self {
        Browser::new()
    }
}

impl Browser {
    pub fn new() -> Self {
        Browser {
            jar: BTreeMap::new(),
            agent: ureq::AgentBuilder::new().redirects(0).build(),
            max_hops: 30,
        }
    }

    pub fn set_cookie(&mut self, name: &str, value: &str) {
        self.jar.insert(name.to_string(), value.to_string());
    }

    pub fn cookie(&self, name: &str) -> Option<&str> {
        self.jar.get(name).map(String::as_str)
    }

    fn cookie_header(&self) -> String {
        self.jar
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join("; ")
    }

    fn apply_set_cookies(&mut self, headers: &[String]) {
        for raw in headers {
            let mut parts = raw.split(';');
            let Some((name, value)) = parts.next().and_then(|p| p.trim().split_once('=')) else {
                continue;
            };
            let delete = value.is_empty()
                || parts.any(|attr| attr.trim().eq_ignore_ascii_case("max-age=0"));
            if delete {
                self.jar.remove(name);
            } else {
                self.jar.insert(name.to_string(), value.to_string());
            }
        }
    }

    /// GET `url`, following 3xx redirects until a non-redirect response
    /// or the hop limit.
    pub fn get(&mut self, url: &str) -> Result<BrowserResult> {
        let mut current = url.to_string();
        let mut trace = vec![current.clone()];
        for _ in 0..self.max_hops {
            let request = self.agent.get(&current).set("Cookie", &self.cookie_header());
            let response = match request.call() {
                Ok(r) => r,
                Err(ureq::Error::Status(_, r)) => r,
                Err(e) => return Err(Error::Http(e.to_string())),
            };
            let set_cookies: Vec<String> = response
                .all("Set-Cookie")
                .into_iter()
                .map(String::from)
                .collect();
            self.apply_set_cookies(&set_cookies);
            let status = response.status();
            if (300..400).contains(&status) {
                let location = response
                    .header("Location")
                    .ok_or_else(|| Error::Http("redirect without Location".into()))?;
                current = resolve(&current, location);
                trace.push(current.clone());
                continue;
            }
            let body = response
                .into_string()
                .map_err(|e| Error::Http(e.to_string()))?;
            return Ok(BrowserResult {
                status,
                body,
                final_url: current,
                trace,
            });
        }
        Err(Error::Http(format!(
            "redirect chain exceeded {} hops: {trace:?}",
            self.max_hops
        )))
    }
}

fn resolve(current: &str, location: &str) -> String {
    if location.starts_with("http://") || location.starts_with("https://") {
        return location.to_string();
    }
    // path-absolute: keep scheme and authority of the current URL
    let origin_end = current
        .find("://")
        .map(|i| {
            current[i + 3..]
                .find('/')
                .map(|j| i + 3 + j)
                .unwrap_or(current.len())
        })
        .unwrap_or(0);
    format!("{}{}", &current[..origin_end], location)
}
