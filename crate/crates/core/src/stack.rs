//! Everything-in-one-process bootstrap: identity provider, CA, VO
//! membership service, credential endpoints and portal, wired together
//! over loopback HTTP. Used by the CLI's self-contained mode and by the
//! end-to-end tests.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::browser::Browser;
use crate::ca::{CaConfig, SlcsCa};
use crate::client::{SlcsFactory, SlcsFactoryConfig};
use crate::clock::SharedClock;
use crate::error::Result;
use crate::gateway::{spawn_gcl, spawn_portal, GclConfig, GclService, Portal, PortalConfig};
use crate::proxy::{ProxyFactory, ProxyFactoryConfig, VomsEndpoint};
use crate::services::{spawn_ca, spawn_sso, spawn_voms, ServiceHandle};
use crate::sso::{SsoConfig, SsoSim, IDP_SESSION_COOKIE};
use crate::voms::{VomsConfig, VomsSim};

/// Knobs for a simulator stack. The defaults give one user in one VO
/// with the marker-file handshake enforced.
#[derive(Debug, Clone)]
pub struct StackConfig {
    pub root: PathBuf,
    pub users: Vec<String>,
    /// `(vo, user)` memberships; every named VO gets its own service.
    pub memberships: Vec<(String, String)>,
    pub require_handshake: bool,
    /// VOs the portal requests for every proxy.
    pub portal_vos: Vec<String>,
}

impl StackConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StackConfig {
            root: root.into(),
            users: vec!["alice".to_string()],
            memberships: vec![("life".to_string(), "alice".to_string())],
            require_handshake: true,
            portal_vos: vec!["life".to_string()],
        }
    }
}

/// A running stack. Dropping it stops all services.
pub struct SimStack {
    pub sso: Arc<SsoSim>,
    pub ca: Arc<SlcsCa>,
    pub voms: Arc<VomsSim>,
    pub gcl: Arc<GclService>,
    pub portal: Arc<Portal>,
    pub clock: SharedClock,
    root: PathBuf,
    sso_service: ServiceHandle,
    ca_service: ServiceHandle,
    voms_service: ServiceHandle,
    gcl_service: ServiceHandle,
    portal_service: ServiceHandle,
}

impl SimStack {
    pub fn boot(config: StackConfig, clock: SharedClock) -> Result<SimStack> {
        let now = clock.now();

        let sso = Arc::new(SsoSim::new(SsoConfig::default())?);
        for user in &config.users {
            sso.register_user(user);
        }
        let sso_service = spawn_sso(sso.clone(), clock.clone());

        let ca = Arc::new(SlcsCa::new(
            CaConfig::default(),
            &sso.idp_public_key_pem(),
            now,
        )?);
        let ca_service = spawn_ca(ca.clone(), clock.clone());

        // distribute the trust anchor the way a deployment would:
        // as a file relying parties can point their verifiers at
        std::fs::create_dir_all(&config.root).map_err(|e| {
            crate::error::Error::StorageFailed(format!("create {}: {e}", config.root.display()))
        })?;
        std::fs::write(config.root.join("ca.pem"), ca.ca_certificate_pem()).map_err(|e| {
            crate::error::Error::StorageFailed(format!("write trust anchor: {e}"))
        })?;

        let voms = Arc::new(VomsSim::new(VomsConfig::default())?);
        for (vo, user) in &config.memberships {
            voms.add_member(vo, &ca.map_dn(user)?);
        }
        let voms_service = spawn_voms(voms.clone(), clock.clone());

        let store_root = config.root.join("store");
        let slcs_factory = SlcsFactory::new(
            SlcsFactoryConfig::new(
                ca_service.base_url(),
                store_root.join("certificates"),
                ca.ca_certificate_pem(),
            ),
            clock.clone(),
        )?;
        let mut proxy_config = ProxyFactoryConfig::new(store_root.join("proxies"));
        for vo in config
            .memberships
            .iter()
            .map(|(vo, _)| vo)
            .chain(config.portal_vos.iter())
        {
            proxy_config = proxy_config.with_vo(
                vo,
                VomsEndpoint {
                    base_url: voms_service.base_url().to_string(),
                    issuer_public_key_pem: voms.issuer_public_key_pem(),
                },
            );
        }
        let proxy_factory = ProxyFactory::new(proxy_config, clock.clone())?;

        let portal_root = config.root.join("portal");
        std::fs::create_dir_all(&portal_root).map_err(|e| {
            crate::error::Error::StorageFailed(format!(
                "create {}: {e}",
                portal_root.display()
            ))
        })?;
        let mut gcl_config = GclConfig::new(sso_service.base_url());
        gcl_config.require_handshake = config.require_handshake;
        if config.require_handshake {
            gcl_config.prefix_allowlist = Some(portal_root.clone());
        }
        let gcl = Arc::new(GclService::new(
            gcl_config,
            slcs_factory,
            proxy_factory,
            clock.clone(),
        ));
        let gcl_service = spawn_gcl(gcl.clone());

        let mut portal_config = PortalConfig::new(
            gcl_service.base_url(),
            sso_service.base_url(),
            &portal_root,
        );
        portal_config.vos = config.portal_vos.clone();
        let portal = Arc::new(Portal::new(portal_config, clock.clone())?);
        let portal_service = spawn_portal(portal.clone());

        Ok(SimStack {
            sso,
            ca,
            voms,
            gcl,
            portal,
            clock,
            root: config.root,
            sso_service,
            ca_service,
            voms_service,
            gcl_service,
            portal_service,
        })
    }

    pub fn sso_base(&self) -> &str {
        self.sso_service.base_url()
    }

    pub fn ca_base(&self) -> &str {
        self.ca_service.base_url()
    }

    pub fn voms_base(&self) -> &str {
        self.voms_service.base_url()
    }

    pub fn gcl_base(&self) -> &str {
        self.gcl_service.base_url()
    }

    pub fn portal_base(&self) -> &str {
        self.portal_service.base_url()
    }

    pub fn app_url(&self) -> String {
        format!("{}/app", self.portal_base())
    }

    pub fn portal_root(&self) -> PathBuf {
        self.portal.config().store_root.clone()
    }

    pub fn store_root(&self) -> &Path {
        &self.root
    }

    /// Browser already holding an interactive IdP session for `user`.
    pub fn browser_for(&self, user: &str) -> Result<Browser> {
        let session = self.sso.idp_login(user, self.clock.now())?;
        let mut browser = Browser::new();
        browser.set_cookie(IDP_SESSION_COOKIE, &session.id);
        Ok(browser)
    }
}
