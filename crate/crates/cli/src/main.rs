//! `fedcert`: desk-scale driver for the credential bridge. Every
//! subcommand boots the full simulator stack in-process, so a single
//! invocation exercises the real HTTP choreography end to end.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use fedcert::client::{NewSlcsOverrides, SlcsFactory, SlcsFactoryConfig};
use fedcert::clock::MockClock;
use fedcert::{Clock, SharedClock};
use fedcert::proxy::{self, NewProxyOptions, ProxyFactory, ProxyFactoryConfig, VomsEndpoint};
use fedcert::stack::{SimStack, StackConfig};
use fedcert::{Fqan, MAX_CERT_LIFETIME};

#[derive(Parser)]
#[command(name = "fedcert", version, about = "Federated login to X.509 credential bridge")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Obtain a short-lived certificate from the (simulated) online CA.
    SlcsInit {
        /// Federated identity to log in as.
        #[arg(long, default_value = "alice")]
        user: String,
        /// Where stack state and issued credentials are kept.
        #[arg(long, default_value = "fedcert-run")]
        store_dir: PathBuf,
        /// Requested certificate lifetime in seconds; values above the
        /// CA maximum are clamped.
        #[arg(long)]
        lifetime: Option<u64>,
        /// Optional `key = value` configuration file overriding the
        /// factory defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Derive an attribute-bearing proxy from an issued credential.
    ProxyInit {
        #[arg(long)]
        cert: PathBuf,
        #[arg(long)]
        key: PathBuf,
        /// Passphrase protecting the private key.
        #[arg(long)]
        passphrase: String,
        /// Comma-separated VOs or FQANs to request attributes for.
        #[arg(long, default_value = "life")]
        vos: String,
        #[arg(long)]
        lifetime: Option<u64>,
        /// Identity owning the credential (for VO membership).
        #[arg(long, default_value = "alice")]
        user: String,
        #[arg(long, default_value = "fedcert-run")]
        store_dir: PathBuf,
    },
    /// Run the whole portal flow through a scripted browser and print
    /// every redirect hop.
    DemoFlow {
        #[arg(long, default_value = "alice")]
        user: String,
        #[arg(long, default_value = "fedcert-run")]
        store_dir: PathBuf,
        /// Let the login assertion go stale first, forcing the renewal
        /// choreography into the chain.
        #[arg(long)]
        stale_assertion: bool,
        /// Boot all services in-process (the only supported mode;
        /// accepted for symmetry with deployment scripts).
        #[arg(long)]
        self_contained: bool,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::SlcsInit {
            user,
            store_dir,
            lifetime,
            config,
        } => slcs_init(&user, &store_dir, lifetime, config.as_deref()),
        Command::ProxyInit {
            cert,
            key,
            passphrase,
            vos,
            lifetime,
            user,
            store_dir,
        } => proxy_init(&cert, &key, &passphrase, &vos, lifetime, &user, &store_dir),
        Command::DemoFlow {
            user,
            store_dir,
            stale_assertion,
            self_contained: _,
        } => demo_flow(&user, &store_dir, stale_assertion),
    }
}

fn boot(user: &str, store_dir: &std::path::Path) -> anyhow::Result<(SimStack, Arc<MockClock>)> {
    let clock = MockClock::new(fedcert::system_clock().now());
    let mut config = StackConfig::new(store_dir);
    config.users = vec![user.to_string()];
    config.memberships = vec![("life".to_string(), user.to_string())];
    let stack = SimStack::boot(config, clock.clone() as SharedClock)
        .context("boot simulator stack")?;
    Ok((stack, clock))
}

fn slcs_init(
    user: &str,
    store_dir: &std::path::Path,
    lifetime: Option<u64>,
    config: Option<&std::path::Path>,
) -> anyhow::Result<()> {
    let (stack, clock) = boot(user, store_dir)?;
    let now = clock.now();
    let session = stack.sso.idp_login(user, now)?;
    let assertion = stack.sso.issue_assertion(&session.id, now)?;

    let factory_config = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("read {}", path.display()))?;
            SlcsFactoryConfig::from_properties(&text)?
        }
        None => SlcsFactoryConfig::new(
            stack.ca_base(),
            store_dir.join("credentials"),
            stack.ca.ca_certificate_pem(),
        ),
    };
    let factory = SlcsFactory::new(factory_config, clock.clone() as SharedClock)?;

    let lifetime = match lifetime {
        Some(requested) if requested > MAX_CERT_LIFETIME => {
            eprintln!(
                "warning: requested lifetime {requested}s exceeds the CA maximum, \
                 clamping to {MAX_CERT_LIFETIME}s"
            );
            MAX_CERT_LIFETIME
        }
        Some(requested) => requested,
        None => MAX_CERT_LIFETIME,
    };
    let credential =
        factory.new_slcs_with_lifetime(&assertion, &NewSlcsOverrides::default(), lifetime)?;
    println!("subject: {}", credential.subject);
    println!("certificate: {}", credential.certificate_path.display());
    println!("key: {}", credential.private_key_path.display());
    println!("passphrase: {}", credential.passphrase);
    println!(
        "valid: {} .. {} ({}s)",
        credential.not_before,
        credential.not_after,
        credential.not_after - credential.not_before
    );
    Ok(())
}

fn proxy_init(
    cert: &std::path::Path,
    key: &std::path::Path,
    passphrase: &str,
    vos: &str,
    lifetime: Option<u64>,
    user: &str,
    store_dir: &std::path::Path,
) -> anyhow::Result<()> {
    let (stack, clock) = boot(user, store_dir)?;
    let fqans: Vec<Fqan> = fedcert::gateway::parse_vos(vos)?;
    for fqan in &fqans {
        stack
            .voms
            .add_member(&fqan.vo, &proxy::certificate_subject(cert)?);
    }

    let mut config = ProxyFactoryConfig::new(store_dir.join("proxies"));
    for fqan in &fqans {
        config = config.with_vo(
            &fqan.vo,
            VomsEndpoint {
                base_url: stack.voms_base().to_string(),
                issuer_public_key_pem: stack.voms.issuer_public_key_pem(),
            },
        );
    }
    let factory = ProxyFactory::new(config, clock.clone() as SharedClock)?;

    let cert_subject = proxy::certificate_subject(cert)?;
    let pem = std::fs::read(cert).with_context(|| format!("read {}", cert.display()))?;
    let parsed = openssl_free_validity(&pem)?;
    let credential = fedcert::Credential {
        certificate_path: cert.to_path_buf(),
        private_key_path: key.to_path_buf(),
        passphrase: passphrase.to_string(),
        subject: cert_subject,
        not_before: parsed.0,
        not_after: parsed.1,
    };
    let options = NewProxyOptions {
        lifetime,
        output_path: None,
    };
    let proxy = factory.new_proxy(&credential, &fqans, &options)?;
    println!("proxy: {}", proxy.proxy_path.display());
    println!("valid until: {}", proxy.not_after);
    for fqan in &proxy.fqans {
        println!("attribute: {fqan}");
    }
    Ok(())
}

fn openssl_free_validity(pem: &[u8]) -> anyhow::Result<(i64, i64)> {
    // validity comes from the certificate itself; the x509 helpers in
    // the library do the parsing
    let cert = openssl::x509::X509::from_pem(pem).context("parse certificate")?;
    Ok(fedcert::x509::cert_validity(&cert)?)
}

fn demo_flow(user: &str, store_dir: &std::path::Path, stale_assertion: bool) -> anyhow::Result<()> {
    let (stack, clock) = boot(user, store_dir)?;
    let mut browser = stack.browser_for(user)?;

    if stale_assertion {
        // establish the SP session now, against a page without guards,
        // so its cached assertion can age out before /app is visited
        let bootstrap = format!(
            "{}/sp/login?return={}",
            stack.sso_base(),
            fedcert::services::form_encode(&format!("{}/welcome", stack.portal_base()))
        );
        let first = browser.get(&bootstrap)?;
        println!("session established ({} hops)", first.redirect_hops());
        clock.advance(301);
        println!("-- assertion is now 301s old (validity 300s) --");
    }

    let result = browser.get(&stack.app_url())?;
    println!("redirect chain:");
    for (i, url) in result.trace.iter().enumerate() {
        println!("  {i:2}: {url}");
    }
    println!("final status: {}", result.status);
    println!("{}", result.body.trim_end());
    if result.status != 200 {
        bail!("portal flow did not end on the application page");
    }
    Ok(())
}
