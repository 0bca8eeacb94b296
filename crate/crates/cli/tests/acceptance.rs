//! Acceptance gate for the credential bridge. Eight criteria, each
//! printed as a single PASS/FAIL line; the test fails if any criterion
//! does. Run with `cargo test --test acceptance -- --nocapture` to see
//! the lines on success too.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use fedcert::ca::{CaConfig, SlcsCa};
use fedcert::clock::MockClock;
use fedcert::model::SubjectDn;
use fedcert::proxy::{self, NewProxyOptions, ProxyFactory, ProxyFactoryConfig, VomsEndpoint};
use fedcert::services::{form_encode, spawn_ca, spawn_voms};
use fedcert::sso::{SsoConfig, SsoSim};
use fedcert::stack::{SimStack, StackConfig};
use fedcert::store::{self, LOCATION_COOKIE, MARKER_FILE, SECRET_COOKIE};
use fedcert::voms::{VomsConfig, VomsSim};
use fedcert::{oracle, x509, Clock, Error, SharedClock};

const T: i64 = 1_700_000_000;

/// Everything issued anywhere in this suite lands here so criterion 2
/// can verify it under the second, unrelated X.509 implementation.
#[derive(Default)]
struct Produced {
    /// (chain leaf-first, trust anchor PEM, instant the chain must be
    /// valid at)
    chains: Mutex<Vec<(Vec<String>, String, i64)>>,
}

impl Produced {
    fn add(&self, chain: Vec<String>, anchor: impl Into<String>, now: i64) {
        self.chains.lock().unwrap().push((chain, anchor.into(), now));
    }
}

struct CaWorld {
    sso: SsoSim,
    ca: Arc<SlcsCa>,
    csr_pem: Vec<u8>,
}

/// One CA plus one pre-generated client keypair/CSR, reused across the
/// high-volume criteria so key generation does not dominate the run.
fn ca_world() -> CaWorld {
    let sso = SsoSim::new(SsoConfig::default()).unwrap();
    sso.register_user("alice");
    let ca = Arc::new(SlcsCa::new(CaConfig::default(), &sso.idp_public_key_pem(), T).unwrap());
    let key = x509::generate_rsa_key(2048).unwrap();
    let csr_pem = x509::build_csr(&key, &ca.map_dn("alice").unwrap()).unwrap();
    CaWorld { sso, ca, csr_pem }
}

fn assertion(w: &CaWorld) -> fedcert::Assertion {
    let session = w.sso.idp_login("alice", T).unwrap();
    w.sso.issue_assertion(&session.id, T).unwrap()
}

/// Criterion 1: requested lifetimes are capped at exactly
/// min(requested, 1_000_000) seconds, proven by parsing the issued
/// not-before/not-after with the independent parser.
fn lifetime_cap(produced: &Produced) {
    let w = ca_world();
    let anchor = String::from_utf8(w.ca.ca_certificate_pem()).unwrap();
    let mut rng = StdRng::seed_from_u64(0x1879);
    for _ in 0..100 {
        let requested: u64 = rng.gen_range(1..=3_000_000);
        let login = w.ca.slcs_login(&assertion(&w), T).unwrap();
        let pem = w
            .ca
            .sign_csr(&w.csr_pem, &login.auth_token, requested, T)
            .unwrap();
        let pem = String::from_utf8(pem).unwrap();
        let (not_before, not_after) = oracle::cert_window(&pem).unwrap();
        assert_eq!(
            (not_after - not_before) as u64,
            requested.min(1_000_000),
            "requested {requested}"
        );
        produced.add(vec![pem], anchor.clone(), T);
    }
}

/// Criterion 3: a stale assertion inside a live session is renewed
/// transparently (at most 5 redirect hops, no interactive step); a dead
/// session fails with SessionExpired. Deterministic under a mock clock.
fn renewal_choreography(produced: &Produced) {
    for assertion_age in [301i64, 28_799] {
        let dir = tempfile::tempdir().unwrap();
        let clock = MockClock::new(T);
        let stack = SimStack::boot(StackConfig::new(dir.path()), clock.clone() as SharedClock)
            .unwrap();
        let mut browser = stack.browser_for("alice").unwrap();
        let bootstrap = format!(
            "{}/sp/login?return={}",
            stack.sso_base(),
            form_encode(&format!("{}/welcome", stack.portal_base()))
        );
        assert_eq!(browser.get(&bootstrap).unwrap().status, 200);
        clock.advance(assertion_age);

        let handshake = store::prepare_handshake(&stack.portal_root(), "alice").unwrap();
        browser.set_cookie(LOCATION_COOKIE, handshake.location.to_str().unwrap());
        browser.set_cookie(SECRET_COOKIE, &handshake.secret);
        let result = browser
            .get(&format!("{}/gcl/slcs-init", stack.gcl_base()))
            .unwrap();
        assert_eq!(result.status, 200, "age {assertion_age}: {}", result.body);
        assert!(
            result.redirect_hops() <= 5,
            "age {assertion_age}: {} hops: {:?}",
            result.redirect_hops(),
            result.trace
        );
        assert!(
            result.trace.iter().any(|u| u.contains("/gcl/renew/")),
            "renewal chain missing: {:?}",
            result.trace
        );
        let cert_path = result
            .body
            .lines()
            .find_map(|l| l.strip_prefix("certificate="))
            .unwrap()
            .to_string();
        let pem = std::fs::read_to_string(&cert_path).unwrap();
        let anchor = std::fs::read_to_string(dir.path().join("ca.pem")).unwrap();
        produced.add(vec![pem], anchor, clock.now());
    }

    // dead session: past the 28_800 s session validity nothing renews
    let dir = tempfile::tempdir().unwrap();
    let clock = MockClock::new(T);
    let stack =
        SimStack::boot(StackConfig::new(dir.path()), clock.clone() as SharedClock).unwrap();
    let mut browser = stack.browser_for("alice").unwrap();
    let bootstrap = format!(
        "{}/sp/login?return={}",
        stack.sso_base(),
        form_encode(&format!("{}/welcome", stack.portal_base()))
    );
    assert_eq!(browser.get(&bootstrap).unwrap().status, 200);
    clock.advance(28_801);
    let handshake = store::prepare_handshake(&stack.portal_root(), "alice").unwrap();
    browser.set_cookie(LOCATION_COOKIE, handshake.location.to_str().unwrap());
    browser.set_cookie(SECRET_COOKIE, &handshake.secret);
    let result = browser
        .get(&format!("{}/gcl/slcs-init", stack.gcl_base()))
        .unwrap();
    assert_eq!(result.status, 401, "{}", result.body);
    assert!(result.body.contains("SessionExpired"), "{}", result.body);
}

/// Criterion 4: 1_000 forged handshake pairs authorize nothing; 1_000
/// legitimate pairs each authorize exactly once, even under 16-way
/// concurrent replay.
fn handshake_soundness() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("allowed");
    std::fs::create_dir(&root).unwrap();
    let outside = dir.path().join("outside");
    std::fs::create_dir(&outside).unwrap();

    let mut forged_successes = 0usize;
    for i in 0..1_000u32 {
        let result = match i % 4 {
            // random K against a real pending L
            0 => {
                let h = store::prepare_handshake(&root, "u").unwrap();
                let r = store::consume_handshake(&h.location, "guessed-secret", Some(&root));
                assert!(h.location.join(MARKER_FILE).exists(), "guess burned marker");
                r
            }
            // replayed K after the one legitimate use
            1 => {
                let h = store::prepare_handshake(&root, "u").unwrap();
                store::consume_handshake(&h.location, &h.secret, Some(&root)).unwrap();
                store::consume_handshake(&h.location, &h.secret, Some(&root))
            }
            // traversal path for L
            2 => {
                let h = store::prepare_handshake(&root, "u").unwrap();
                let name = h.location.file_name().unwrap().to_os_string();
                let dodged = root.join("..").join("allowed").join(name);
                store::consume_handshake(&dodged, &h.secret, Some(&root))
            }
            // L outside the configured prefix, with its real K
            _ => {
                let h = store::prepare_handshake(&outside, "u").unwrap();
                store::consume_handshake(&h.location, &h.secret, Some(&root))
            }
        };
        if result.is_ok() {
            forged_successes += 1;
        }
    }
    assert_eq!(forged_successes, 0);

    for _ in 0..1_000u32 {
        let h = store::prepare_handshake(&root, "u").unwrap();
        let wins = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..16 {
                scope.spawn(|| {
                    if store::consume_handshake(&h.location, &h.secret, Some(&root)).is_ok() {
                        wins.fetch_add(1, Ordering::SeqCst);
                    }
                });
            }
        });
        assert_eq!(wins.load(Ordering::SeqCst), 1);
    }
}

/// Criterion 5: one auth token, 16 concurrent signing attempts, exactly
/// one certificate; a hundred times over.
fn token_single_use(produced: &Produced) {
    let w = ca_world();
    let anchor = String::from_utf8(w.ca.ca_certificate_pem()).unwrap();
    for round in 0..100 {
        let login = w.ca.slcs_login(&assertion(&w), T).unwrap();
        let outcomes = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..16 {
                scope.spawn(|| {
                    let r = w.ca.sign_csr(&w.csr_pem, &login.auth_token, 1_000, T);
                    outcomes.lock().unwrap().push(r);
                });
            }
        });
        let outcomes = outcomes.into_inner().unwrap();
        let ok: Vec<_> = outcomes.iter().filter(|r| r.is_ok()).collect();
        let invalid = outcomes
            .iter()
            .filter(|r| matches!(r, Err(Error::InvalidToken)))
            .count();
        assert_eq!(ok.len(), 1, "round {round}");
        assert_eq!(invalid, 15, "round {round}");
        let pem = String::from_utf8(outcomes.into_iter().find_map(|r| r.ok()).unwrap()).unwrap();
        produced.add(vec![pem], anchor.clone(), T);
    }
}

/// Criterion 6: the proxy path works with SSO and CA gone, the
/// certificate path works with VOMS gone.
fn factory_independence(produced: &Produced) {
    let clock = MockClock::new(T);

    // phase one: issue a credential over HTTP, then take down SSO + CA
    let store_dir = tempfile::tempdir().unwrap();
    let (credential, anchor) = {
        let sso = SsoSim::new(SsoConfig::default()).unwrap();
        sso.register_user("alice");
        let ca =
            Arc::new(SlcsCa::new(CaConfig::default(), &sso.idp_public_key_pem(), T).unwrap());
        let ca_service = spawn_ca(ca.clone(), clock.clone() as SharedClock);
        let factory = fedcert::client::SlcsFactory::new(
            fedcert::client::SlcsFactoryConfig::new(
                ca_service.base_url(),
                store_dir.path().join("creds"),
                ca.ca_certificate_pem(),
            ),
            clock.clone() as SharedClock,
        )
        .unwrap();
        let session = sso.idp_login("alice", T).unwrap();
        let a = sso.issue_assertion(&session.id, T).unwrap();
        let credential = factory
            .new_slcs(&a, &fedcert::client::NewSlcsOverrides::default())
            .unwrap();
        (credential, String::from_utf8(ca.ca_certificate_pem()).unwrap())
        // sso, ca and ca_service all dropped here
    };

    // phase two: proxies from the pre-provisioned credential only need
    // VOMS
    let voms = Arc::new(VomsSim::new(VomsConfig::default()).unwrap());
    voms.add_member("life", &credential.subject);
    let voms_service = spawn_voms(voms.clone(), clock.clone() as SharedClock);
    let proxy_dir = tempfile::tempdir().unwrap();
    let factory = ProxyFactory::new(
        ProxyFactoryConfig::new(proxy_dir.path()).with_vo(
            "life",
            VomsEndpoint {
                base_url: voms_service.base_url().to_string(),
                issuer_public_key_pem: voms.issuer_public_key_pem(),
            },
        ),
        clock.clone() as SharedClock,
    )
    .unwrap();
    let the_proxy = factory
        .new_proxy(
            &credential,
            &[fedcert::Fqan::parse("/life").unwrap()],
            &NewProxyOptions::default(),
        )
        .unwrap();
    let report = proxy::verify_proxy(
        &the_proxy,
        anchor.as_bytes(),
        Some(&voms.issuer_public_key()),
        clock.now(),
    );
    assert!(report.ok, "{:?}", report.reasons);
    produced.add(the_proxy.chain.clone(), anchor.clone(), clock.now());
    drop(voms_service);

    // phase three: certificates never needed VOMS in the first place
    let sso = SsoSim::new(SsoConfig::default()).unwrap();
    sso.register_user("alice");
    let ca = Arc::new(SlcsCa::new(CaConfig::default(), &sso.idp_public_key_pem(), T).unwrap());
    let ca_service = spawn_ca(ca.clone(), clock.clone() as SharedClock);
    let factory = fedcert::client::SlcsFactory::new(
        fedcert::client::SlcsFactoryConfig::new(
            ca_service.base_url(),
            store_dir.path().join("creds2"),
            ca.ca_certificate_pem(),
        ),
        clock.clone() as SharedClock,
    )
    .unwrap();
    let session = sso.idp_login("alice", T).unwrap();
    let a = sso.issue_assertion(&session.id, T).unwrap();
    let credential = factory
        .new_slcs(&a, &fedcert::client::NewSlcsOverrides::default())
        .unwrap();
    let pem = std::fs::read_to_string(&credential.certificate_path).unwrap();
    produced.add(
        vec![pem],
        String::from_utf8(ca.ca_certificate_pem()).unwrap(),
        T,
    );
}

/// Criterion 7: the metadata-only freshness check agrees with ground
/// truth derived by parsing the certificate, on 1_000 randomized
/// (write-time, lifetime, check-time, min-remaining) tuples.
fn freshness_oracle_agreement(produced: &Produced) {
    let dir = tempfile::tempdir().unwrap();
    let ca_key = x509::generate_rsa_key(2048).unwrap();
    let ca_dn = SubjectDn::parse("/C=CH/O=SimFed/CN=freshness-ca").unwrap();
    let ca_cert = x509::self_signed_ca(&ca_dn, &ca_key, T).unwrap();
    let anchor = String::from_utf8(ca_cert.to_pem().unwrap()).unwrap();
    let subject = SubjectDn::parse("/C=CH/O=SimFed/CN=alice").unwrap();
    let leaf_key = x509::generate_rsa_key(2048).unwrap();
    let leaf_public = openssl::pkey::PKey::public_key_from_pem(
        &leaf_key.public_key_to_pem().unwrap(),
    )
    .unwrap();

    let mut rng = StdRng::seed_from_u64(0x3820);
    let mut agreements = 0usize;
    for i in 0..1_000u32 {
        let write_time: i64 = T + rng.gen_range(0..5_000_000);
        let lifetime: i64 = rng.gen_range(1..=2_000_000);
        let check_time: i64 = write_time + rng.gen_range(-1_000..2_100_000);
        let min_remaining: u64 = rng.gen_range(0..2_500_000);

        let issuer_name = ca_cert.subject_name();
        let cert = x509::sign_certificate(x509::SignParams {
            subject: &subject,
            issuer: issuer_name,
            public_key: &leaf_public,
            signing_key: &ca_key,
            serial: x509::random_serial(),
            not_before: write_time,
            not_after: write_time + lifetime,
            custom_extensions: vec![],
            is_ca: false,
        })
        .unwrap();
        let pem = String::from_utf8(cert.to_pem().unwrap()).unwrap();
        let path = dir.path().join(format!("c{i}.pem"));
        std::fs::write(&path, &pem).unwrap();
        let (_, not_after) = oracle::cert_window(&pem).unwrap();
        store::write_sidecar(&path, not_after).unwrap();
        filetime::set_file_mtime(&path, filetime::FileTime::from_unix_time(write_time, 0))
            .unwrap();

        // ground truth straight from the parsed certificate, with the
        // same strict inequality the store promises
        let truth = check_time < not_after - min_remaining as i64;
        let checked = store::freshness_check(&path, min_remaining, check_time);
        assert_eq!(
            checked, truth,
            "write={write_time} life={lifetime} check={check_time} min={min_remaining}"
        );
        agreements += 1;
        produced.add(vec![pem], anchor.clone(), write_time);
    }
    assert_eq!(agreements, 1_000);
}

/// Criterion 8: the end-to-end demo exits 0 and leaves behind a
/// credential plus an attribute-bearing proxy for "/life".
fn end_to_end_demo(produced: &Produced) {
    let dir = tempfile::tempdir().unwrap();
    let store_dir = dir.path().join("run");
    let output = Command::new(env!("CARGO_BIN_EXE_fedcert"))
        .args(["demo-flow", "--self-contained", "--user", "alice"])
        .arg("--store-dir")
        .arg(&store_dir)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&output.stdout).to_string();
    assert!(
        output.status.success(),
        "demo exited {:?}\nstdout: {stdout}\nstderr: {}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
    let grab = |k: &str| {
        stdout
            .lines()
            .find_map(|l| l.trim().strip_prefix(&format!("{k}=")))
            .unwrap_or_else(|| panic!("no {k} in demo output:\n{stdout}"))
            .to_string()
    };
    let cert_path = grab("X509_USER_CERT");
    let proxy_path = grab("X509_USER_PROXY");

    let anchor = std::fs::read_to_string(store_dir.join("ca.pem")).unwrap();
    let now = fedcert::system_clock().now();
    let bundle = proxy::load_proxy_bundle(&proxy_path.clone().into()).unwrap();
    assert!(
        bundle.fqans.iter().any(|f| f.canonical() == "/life"),
        "{:?}",
        bundle.fqans
    );
    produced.add(bundle.chain.clone(), anchor.clone(), now);
    produced.add(
        vec![std::fs::read_to_string(&cert_path).unwrap()],
        anchor,
        now,
    );
}

/// Criterion 2: everything the other criteria produced verifies under
/// the independent X.509 implementation.
fn oracle_chain_verification(produced: &Produced) {
    let chains = produced.chains.lock().unwrap();
    assert!(chains.len() >= 1_200, "only {} artifacts collected", chains.len());
    let mut failures = 0usize;
    for (chain, anchor, now) in chains.iter() {
        let reasons = oracle::verify_chain(chain, anchor, *now);
        if !reasons.is_empty() {
            eprintln!("chain failed oracle verification: {reasons:?}");
            failures += 1;
        }
    }
    assert_eq!(failures, 0, "of {} chains", chains.len());
}

#[test]
fn acceptance() {
    let produced = Produced::default();
    let criteria: Vec<(usize, &str, Box<dyn Fn(&Produced)>)> = vec![
        (1, "lifetime cap", Box::new(lifetime_cap)),
        (3, "renewal choreography", Box::new(renewal_choreography)),
        (4, "handshake soundness", Box::new(|_| handshake_soundness())),
        (5, "token single-use", Box::new(token_single_use)),
        (6, "factory independence", Box::new(factory_independence)),
        (7, "freshness oracle agreement", Box::new(freshness_oracle_agreement)),
        (8, "end-to-end demo", Box::new(end_to_end_demo)),
        (2, "independent chain verification", Box::new(oracle_chain_verification)),
    ];

    let mut results: BTreeMap<usize, (&str, Option<String>)> = BTreeMap::new();
    for (number, name, run) in &criteria {
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&produced)));
        let failure = outcome.err().map(|payload| {
            payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into())
        });
        results.insert(*number, (name, failure));
    }

    let mut failed = 0usize;
    for (number, (name, failure)) in &results {
        match failure {
            None => println!("ACCEPTANCE {number} ({name}): PASS"),
            Some(reason) => {
                failed += 1;
                println!("ACCEPTANCE {number} ({name}): FAIL — {reason}");
            }
        }
    }
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
