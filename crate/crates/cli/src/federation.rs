//! Bootstrapping a federation directory and starting its services.

use std::collections::BTreeMap;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use gridbox_core::anonymizer::SiteKey;
use gridbox_core::catalogue::{Catalogue, CatalogueClient, CatalogueService};
use gridbox_core::node::{CatalogueConfig, DurabilitySetting, Node, NodeApi, NodeClient, NodeConfig, NodeOptions, NodeService};
use gridbox_core::proto::{serve, Credentials, Dialer, Role, Roster, ServerHandle, TcpDialer};
use rand::RngCore;
use tracing::{info, warn};

pub const ROSTER_FILE: &str = "roster.json";
pub const CATALOGUE_CONFIG: &str = "catalogue.toml";
pub const OPERATOR_ID: &str = "operator";
pub const OPERATOR_TOKEN: &str = "operator.token";

#[derive(Debug, Clone)]
pub struct InitOptions {
    pub nodes: usize,
    pub host: String,
    /// The catalogue listens here; node `i` on `base_port + 1 + i`.
    pub base_port: u16,
    pub durability: DurabilitySetting,
}

/// Node ids `node-a`, `node-b`, ...
pub fn node_ids(count: usize) -> Vec<String> {
    (0..count).map(|i| format!("node-{}", (b'a' + i as u8) as char)).collect()
}

fn random_secret() -> String {
    let mut bytes = [0u8; 32];
    rand::thread_rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

#[cfg(unix)]
fn restrict(path: &Path) -> Result<()> {
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(path, fs::Permissions::from_mode(0o600))?;
    Ok(())
}

#[cfg(not(unix))]
fn restrict(_path: &Path) -> Result<()> {
    Ok(())
}

fn write_secret(path: &Path, creds: &Credentials) -> Result<()> {
    creds.save(path)?;
    restrict(path)
}

/// Writes the roster, catalogue and node configurations, credentials and
/// site keys of a fresh federation into `dir`. Returns the files written.
pub fn init(dir: &Path, opts: &InitOptions) -> Result<Vec<PathBuf>> {
    ensure!((1..=26).contains(&opts.nodes), "a federation has 1 to 26 nodes");
    ensure!(
        usize::from(opts.base_port) + opts.nodes < usize::from(u16::MAX),
        "port range starting at {} does not fit",
        opts.base_port
    );
    if dir.join(ROSTER_FILE).exists() {
        bail!("{} already holds a federation", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    let catalogue_addr = format!("{}:{}", opts.host, opts.base_port);

    let operator = Credentials::new(OPERATOR_ID, random_secret());
    let mut roster = Roster::default();
    roster.members.push(operator.roster_entry(Role::Client, None));
    let token = dir.join(OPERATOR_TOKEN);
    write_secret(&token, &operator)?;
    written.push(token);

    for (i, id) in node_ids(opts.nodes).into_iter().enumerate() {
        let listen = format!("{}:{}", opts.host, usize::from(opts.base_port) + 1 + i);
        let creds = Credentials::new(id.clone(), random_secret());
        roster.members.push(creds.roster_entry(Role::Node, Some(listen.clone())));
        let cred_path = dir.join(format!("{id}.cred"));
        write_secret(&cred_path, &creds)?;
        let key_path = dir.join(format!("{id}.key"));
        SiteKey::generate().save(&key_path)?;
        restrict(&key_path)?;
        let cfg = NodeConfig {
            node_id: id.clone(),
            listen,
            data_dir: PathBuf::from("data").join(&id),
            catalogue: catalogue_addr.clone(),
            roster: ROSTER_FILE.into(),
            credentials: format!("{id}.cred").into(),
            site_key: format!("{id}.key").into(),
            placement_threshold_bytes: gridbox_core::node::config::DEFAULT_PLACEMENT_THRESHOLD,
            workers: 4,
            durability: opts.durability,
        };
        let cfg_path = dir.join(format!("{id}.toml"));
        fs::write(&cfg_path, cfg.to_toml())?;
        written.extend([cred_path, key_path, cfg_path]);
    }

    let cat = CatalogueConfig {
        listen: catalogue_addr,
        log: "catalogue.log".into(),
        roster: ROSTER_FILE.into(),
        durability: opts.durability,
    };
    let cat_path = dir.join(CATALOGUE_CONFIG);
    fs::write(&cat_path, cat.to_toml())?;
    written.push(cat_path);
    let roster_path = dir.join(ROSTER_FILE);
    roster.save(&roster_path)?;
    written.push(roster_path);
    Ok(written)
}

/// A service started by [`start_catalogue`] or [`start_node`].
pub struct Running {
    pub name: String,
    pub handle: ServerHandle,
}

pub fn start_catalogue(cfg: &CatalogueConfig) -> Result<Running> {
    let roster = Roster::load(&cfg.roster).with_context(|| format!("loading roster {}", cfg.roster.display()))?;
    let catalogue = Catalogue::open(&cfg.log, cfg.durability.into())
        .with_context(|| format!("opening catalogue log {}", cfg.log.display()))?;
    let listener = TcpListener::bind(&cfg.listen).with_context(|| format!("binding {}", cfg.listen))?;
    let handle = serve(listener, Arc::new(roster), Arc::new(CatalogueService::new(catalogue)));
    info!(addr = %handle.local_addr(), "catalogue listening");
    Ok(Running { name: "catalogue".into(), handle })
}

pub fn start_node(cfg: &NodeConfig) -> Result<Running> {
    let roster = Roster::load(&cfg.roster).with_context(|| format!("loading roster {}", cfg.roster.display()))?;
    let creds = Credentials::load(&cfg.credentials)
        .with_context(|| format!("loading credentials {}", cfg.credentials.display()))?;
    ensure!(
        creds.node_id == cfg.node_id,
        "credentials are for `{}`, not `{}`",
        creds.node_id,
        cfg.node_id
    );
    let site_key = SiteKey::load(&cfg.site_key).with_context(|| format!("loading site key {}", cfg.site_key.display()))?;
    let dialer: Arc<dyn Dialer> = Arc::new(TcpDialer::default());
    let catalogue = Arc::new(CatalogueClient::new(dialer.clone(), cfg.catalogue.clone(), creds.clone()));
    let node = Arc::new(Node::open(
        NodeOptions {
            node_id: cfg.node_id.clone(),
            data_dir: cfg.data_dir.clone(),
            site_key,
            workers: cfg.workers,
        },
        catalogue,
    )?);
    match node.reconcile() {
        Ok(0) => {}
        Ok(n) => info!(node = %cfg.node_id, removed = n, "orphaned replicas removed"),
        Err(e) => warn!(node = %cfg.node_id, error = %e, "catalogue reconciliation skipped"),
    }
    let peers: BTreeMap<String, Arc<dyn NodeApi>> = roster
        .nodes()
        .into_iter()
        .filter(|(id, _)| id != &cfg.node_id)
        .map(|(id, addr)| {
            let client: Arc<dyn NodeApi> = Arc::new(NodeClient::new(id.clone(), addr, dialer.clone(), creds.clone()));
            (id, client)
        })
        .collect();
    let service = Arc::new(NodeService::new(node, peers, cfg.placement_threshold_bytes));
    let listener = TcpListener::bind(&cfg.listen).with_context(|| format!("binding {}", cfg.listen))?;
    let handle = serve(listener, Arc::new(roster), service);
    info!(node = %cfg.node_id, addr = %handle.local_addr(), "node listening");
    Ok(Running { name: cfg.node_id.clone(), handle })
}

/// Starts the catalogue and then every node the roster of `dir` lists.
pub fn start_all(dir: &Path) -> Result<Vec<Running>> {
    let cat = CatalogueConfig::load(&dir.join(CATALOGUE_CONFIG))?;
    let mut running = vec![start_catalogue(&cat)?];
    let roster = Roster::load(&dir.join(ROSTER_FILE))?;
    for id in roster.nodes().keys() {
        let cfg = NodeConfig::load(&dir.join(format!("{id}.toml")))?;
        running.push(start_node(&cfg)?);
    }
    Ok(running)
}
