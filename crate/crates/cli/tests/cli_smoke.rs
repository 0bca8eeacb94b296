//! The two credential subcommands, chained the way a user would run
//! them: slcs-init first, then proxy-init against its output.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedcert"))
}

fn field<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no `{key}:` line in:\n{stdout}"))
}

#[test]
fn slcs_init_then_proxy_init() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("run");

    let output = bin()
        .args(["slcs-init", "--lifetime", "7200"])
        .arg("--store-dir")
        .arg(&store)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&output.stdout).to_string();
    assert!(output.status.success(), "{stdout}");
    assert_eq!(field(&stdout, "subject"), "/C=CH/O=SimFed/CN=alice");
    let cert = field(&stdout, "certificate").to_string();
    let key = field(&stdout, "key").to_string();
    let passphrase = field(&stdout, "passphrase").to_string();

    let output = bin()
        .args(["proxy-init", "--cert", &cert, "--key", &key])
        .args(["--passphrase", &passphrase, "--vos", "life"])
        .arg("--store-dir")
        .arg(&store)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&output.stdout).to_string();
    assert!(
        output.status.success(),
        "{stdout}\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let proxy = field(&stdout, "proxy");
    assert!(std::path::Path::new(proxy).is_file());
    assert!(stdout.contains("attribute: /life"), "{stdout}");
}

#[test]
fn oversized_lifetime_is_clamped_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let output = bin()
        .args(["slcs-init", "--lifetime", "3000000"])
        .arg("--store-dir")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("(1000000s)"), "{stdout}");
    assert!(String::from_utf8_lossy(&output.stderr).contains("clamping"));
}
