//! Filesystem persistence, the modification-time freshness check and
//! the marker-file handshake that authorizes cross-process credential
//! writes.

use std::fs;
use std::io::Write;
use std::os::unix::fs::OpenOptionsExt;
use std::path::{Component, Path, PathBuf};

use crate::clock::Timestamp;
use crate::error::{Error, Result};
use crate::secrets;

/// Fixed name of the marker file inside a handshake directory.
pub const MARKER_FILE: &str = ".fedcert-marker";
/// Suffix of the sidecar metadata file recording a credential's
/// lifetime at write time.
pub const SIDECAR_SUFFIX: &str = ".meta";

/// Cookie names carrying the handshake location and secret.
pub const LOCATION_COOKIE: &str = "gcl-location";
pub const SECRET_COOKIE: &str = "gcl-secret";

/// Directory `L` plus random secret `K` authorizing a single credential
/// write into `L`.
#[derive(Debug, Clone)]
pub struct MarkerHandshake {
    pub location: PathBuf,
    pub secret: String,
}

/// Layout of the on-disk credential store: everything lives under
/// `root`, key material with owner-only permissions.
#[derive(Debug, Clone)]
pub struct StoreLayout {
    root: PathBuf,
}

impl StoreLayout {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)
            .map_err(|e| Error::StorageFailed(format!("create {}: {e}", root.display())))?;
        Ok(StoreLayout { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn user_dir(&self, user_id: &str) -> PathBuf {
        self.root.join("users").join(user_id)
    }
}

/// Create a fresh directory `L` under `root` and write a random secret
/// `K` into its marker file. The returned pair travels to the
/// credential endpoints as HTTP cookies.
pub fn prepare_handshake(root: &Path, user_id: &str) -> Result<MarkerHandshake> {
    let location = root.join(format!("{user_id}-{}", secrets::hex_name()));
    fs::create_dir_all(root)
        .and_then(|_| fs::create_dir(&location))
        .map_err(|e| Error::StorageFailed(format!("create {}: {e}", location.display())))?;
    let secret = secrets::token();
    let marker = location.join(MARKER_FILE);
    write_private(&marker, secret.as_bytes())?;
    Ok(MarkerHandshake { location, secret })
}

/// Validate and consume a handshake: the marker in `location` must hold
/// exactly `secret`, and `location` must resolve under
/// `prefix_allowlist` when one is configured. On success the marker is
/// deleted, so each handshake authorizes at most one write.
///
/// A wrong secret leaves the marker in place: guessing must not be able
/// to invalidate a legitimate pending handshake.
pub fn consume_handshake(
    location: &Path,
    secret: &str,
    prefix_allowlist: Option<&Path>,
) -> Result<()> {
    // reject traversal segments before touching the filesystem
    if location
        .components()
        .any(|c| matches!(c, Component::ParentDir))
    {
        return Err(Error::PrefixViolation(location.display().to_string()));
    }
    let canonical = fs::canonicalize(location).map_err(|_| Error::HandshakeRejected)?;
    if let Some(prefix) = prefix_allowlist {
        let prefix = fs::canonicalize(prefix)
            .map_err(|e| Error::StorageFailed(format!("bad prefix {}: {e}", prefix.display())))?;
        if !canonical.starts_with(&prefix) {
            return Err(Error::PrefixViolation(canonical.display().to_string()));
        }
    }
    let marker = canonical.join(MARKER_FILE);
    let contents = fs::read_to_string(&marker).map_err(|_| Error::HandshakeRejected)?;
    if contents != secret {
        return Err(Error::HandshakeRejected);
    }
    // rename is atomic: under concurrent replay exactly one caller wins
    let claimed = canonical.join(format!("{MARKER_FILE}.{}", secrets::hex_name()));
    fs::rename(&marker, &claimed).map_err(|_| Error::HandshakeRejected)?;
    let _ = fs::remove_file(&claimed);
    Ok(())
}

/// Prove a credential file is still valid for at least `min_remaining`
/// seconds using only file metadata and the sidecar written at store
/// time. Never parses the certificate; a missing file is stale, not an
/// error.
pub fn freshness_check(path: &Path, min_remaining: u64, now: Timestamp) -> bool {
    let Ok(meta) = fs::metadata(path) else {
        return false;
    };
    let Ok(mtime) = meta.modified() else {
        return false;
    };
    let mtime = match mtime.duration_since(std::time::UNIX_EPOCH) {
        Ok(d) => d.as_secs() as i64,
        Err(_) => return false,
    };
    let Some(not_after) = read_sidecar(path) else {
        return false;
    };
    let lifetime_at_write = not_after - mtime;
    (now - mtime) < lifetime_at_write - min_remaining as i64
}

/// One-line sidecar: `not-after=<unix-seconds>`.
pub fn write_sidecar(path: &Path, not_after: Timestamp) -> Result<()> {
    let sidecar = sidecar_path(path);
    fs::write(&sidecar, format!("not-after={not_after}\n"))
        .map_err(|e| Error::StorageFailed(format!("write {}: {e}", sidecar.display())))
}

pub fn read_sidecar(path: &Path) -> Option<Timestamp> {
    let text = fs::read_to_string(sidecar_path(path)).ok()?;
    text.trim().strip_prefix("not-after=")?.parse().ok()
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(SIDECAR_SUFFIX);
    path.with_file_name(name)
}

/// Write `contents` to `path` with owner-only permissions, atomically
/// within the target directory (temp file + rename).
pub fn write_private(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::StorageFailed(format!("no parent: {}", path.display())))?;
    let tmp = dir.join(format!(".tmp-{}", secrets::hex_name()));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .mode(0o600)
            .open(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::StorageFailed(format!("write {}: {e}", path.display()))
    })
}
