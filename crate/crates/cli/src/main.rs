use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gridbox_cli::exit;
use gridbox_cli::federation::{self, InitOptions};
use gridbox_cli::render::{self, Format};
use gridbox_core::catalogue::LogicalFileName;
use gridbox_core::corpus;
use gridbox_core::mediator::{parse_query, token_offset};
use gridbox_core::node::{CatalogueConfig, DurabilitySetting, IngestReport, Invocation, JobSpec, NodeClient, NodeConfig, Outcome};
use gridbox_core::proto::{Credentials, TcpDialer};
use gridbox_core::Error;
use serde_json::Value;
use tracing_subscriber::EnvFilter;

/// Client and service launcher for a federation of grid-box nodes.
///
/// Exit codes: 0 success, 1 user error, 2 environment error (unreachable
/// node, IO), 3 degraded success (partial result or failed job inputs).
#[derive(Debug, Parser)]
#[command(name = "gridbox", version)]
struct Cli {
    /// Address of the node to talk to.
    #[arg(long, global = true, env = "GRIDBOX_NODE")]
    node: Option<String>,
    /// Credentials file (`{"node_id", "secret"}`) to authenticate with.
    #[arg(long, global = true, env = "GRIDBOX_TOKEN")]
    token: Option<PathBuf>,
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write configuration, credentials and keys for a new federation.
    Init {
        dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        nodes: usize,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Catalogue port; nodes take the following ports.
        #[arg(long, default_value_t = 7400)]
        base_port: u16,
        #[arg(long, value_enum, default_value_t = Durability::Sync)]
        durability: Durability,
    },
    /// Run services in the foreground until killed.
    Serve {
        #[command(subcommand)]
        what: Serve,
    },
    /// Ingest study containers. Paths must be readable by the node.
    Ingest {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Files ingested concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run a federated query, e.g. `FIND image PROJECT view WHERE laterality = L`.
    Query { query: String },
    /// Run an algorithm over images across the federation.
    Job {
        algorithm: String,
        lfns: Vec<String>,
        /// Also take every image matching this predicate as input.
        #[arg(long = "where")]
        where_: Option<String>,
        /// Print the placement decision.
        #[arg(long)]
        explain: bool,
        /// Algorithm parameter `name=value`; the value is read as JSON when it parses.
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, Value)>,
        /// Placement threshold in bytes for this job.
        #[arg(long)]
        threshold: Option<u64>,
    },
    /// Write a deterministic synthetic corpus with a ground-truth manifest.
    GenCorpus {
        #[arg(long, short = 'n')]
        count: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect the replica catalogue through a node.
    Catalogue {
        #[command(subcommand)]
        op: CatalogueOp,
    },
}

#[derive(Debug, Subcommand)]
enum Serve {
    Catalogue {
        #[arg(long)]
        config: PathBuf,
    },
    Node {
        #[arg(long)]
        config: PathBuf,
    },
    /// The catalogue and every node of a federation directory in one process.
    All { dir: PathBuf },
}

#[derive(Debug, Subcommand)]
enum CatalogueOp {
    /// List logical file names under a prefix.
    Ls {
        #[arg(default_value = "/")]
        prefix: String,
        #[arg(long, default_value_t = 1000)]
        limit: usize,
    },
    /// Show the replicas of one logical file name.
    Resolve { lfn: String },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Durability {
    Sync,
    Flush,
}

impl From<Durability> for DurabilitySetting {
    fn from(d: Durability) -> Self {
        match d {
            Durability::Sync => DurabilitySetting::Sync,
            Durability::Flush => DurabilitySetting::Flush,
        }
    }
}

fn parse_param(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("`{s}` is not name=value"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()));
    Ok((k.to_owned(), value))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USER } else { exit::OK });
        }
    };
    let serving = matches!(cli.command, Command::Serve { .. });
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(if serving { "info" } else { "warn" }));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::classify(&e))
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let format = cli.format;
    match &cli.command {
        Command::Init { dir, nodes, host, base_port, durability } => {
            let opts = InitOptions {
                nodes: *nodes,
                host: host.clone(),
                base_port: *base_port,
                durability: (*durability).into(),
            };
            let files = federation::init(dir, &opts)?;
            println!("initialized {} nodes in {} ({} files)", nodes, dir.display(), files.len());
            println!("operator token: {}", dir.join(federation::OPERATOR_TOKEN).display());
            Ok(exit::OK)
        }
        Command::Serve { what } => serve(what),
        Command::Ingest { files, jobs } => ingest(&connect(&cli)?, files, *jobs),
        Command::Query { query: text } => query(&connect(&cli)?, text, format),
        Command::Job { algorithm, lfns, where_, explain, params, threshold } => {
            let mut spec = JobSpec::new(algorithm.clone(), Vec::new());
            spec.params = params.iter().cloned().collect();
            // Validate locally so a bad request never leaves the machine.
            Invocation::from_spec(&spec)?;
            for l in lfns {
                spec.inputs.push(LogicalFileName::new(l.clone())?);
            }
            job(&connect(&cli)?, spec, where_.as_deref(), *explain, *threshold, format)
        }
        Command::GenCorpus { count, seed, out } => {
            let manifest = corpus::write_corpus(*count, *seed, out)?;
            let images: usize = manifest.studies.iter().map(|s| s.images.len()).sum();
            println!(
                "wrote {} studies ({images} images) to {}; manifest {}",
                manifest.studies.len(),
                out.display(),
                out.join(corpus::MANIFEST_FILE).display()
            );
            Ok(exit::OK)
        }
        Command::Catalogue { op } => catalogue(&connect(&cli)?, op, format),
    }
}

fn connect(cli: &Cli) -> Result<NodeClient> {
    let Some(addr) = cli.node.as_deref() else {
        bail!("--node <addr> is required for this command");
    };
    let Some(token) = cli.token.as_deref() else {
        bail!("--token <file> is required for this command");
    };
    let creds = Credentials::load(token).with_context(|| format!("reading token {}", token.display()))?;
    Ok(NodeClient::new(addr, addr, Arc::new(TcpDialer::default()), creds))
}

fn serve(what: &Serve) -> Result<u8> {
    let running = match what {
        Serve::Catalogue { config } => vec![federation::start_catalogue(&CatalogueConfig::load(config)?)?],
        Serve::Node { config } => vec![federation::start_node(&NodeConfig::load(config)?)?],
        Serve::All { dir } => federation::start_all(dir)?,
    };
    let mut out = std::io::stdout().lock();
    for r in &running {
        writeln!(out, "listening {} {}", r.name, r.handle.local_addr())?;
    }
    writeln!(out, "ready")?;
    out.flush()?;
    drop(out);
    loop {
        std::thread::park();
    }
}

/// Prints a query syntax error with a caret under the offending position.
fn syntax_error(text: &str, e: &Error) -> Option<u8> {
    let Error::QuerySyntax { position, message } = e else {
        return None;
    };
    eprintln!("error: query syntax at position {position}: {message}");
    eprintln!("  {text}");
    eprintln!("  {}^", " ".repeat(text[..token_offset(text, *position)].chars().count()));
    Some(exit::USER)
}

fn query(client: &NodeClient, text: &str, format: Format) -> Result<u8> {
    if let Err(e) = parse_query(text) {
        return syntax_error(text, &e).ok_or_else(|| e.into());
    }
    let rs = client.federated_query(text)?;
    print!("{}", render::result_set(&rs, format));
    if format == Format::Table {
        eprintln!("{} rows from {}", rs.rows.len(), rs.answered.join(", "));
    }
    if rs.is_partial() {
        eprintln!("warning: partial result; unreachable: {}", rs.unreachable.join(", "));
        return Ok(exit::DEGRADED);
    }
    Ok(exit::OK)
}

fn job(
    client: &NodeClient,
    mut spec: JobSpec,
    selection: Option<&str>,
    explain: bool,
    threshold: Option<u64>,
    format: Format,
) -> Result<u8> {
    let mut degraded = false;
    if let Some(predicate) = selection {
        let text = format!("FIND image PROJECT lfn WHERE {predicate}");
        if let Err(e) = parse_query(&text) {
            return syntax_error(&text, &e).ok_or_else(|| e.into());
        }
        let rs = client.federated_query(&text)?;
        if rs.is_partial() {
            eprintln!("warning: input selection is partial; unreachable: {}", rs.unreachable.join(", "));
            degraded = true;
        }
        for row in &rs.rows {
            if let Some(lfn) = row.values.get("lfn").and_then(Value::as_str) {
                spec.inputs.push(LogicalFileName::new(lfn)?);
            }
        }
        if spec.inputs.is_empty() {
            eprintln!("no images match `{predicate}`");
            return Ok(if degraded { exit::DEGRADED } else { exit::OK });
        }
    }
    if spec.inputs.is_empty() {
        bail!("no job inputs: name lfns or use --where");
    }
    spec.inputs.sort();
    spec.inputs.dedup();
    let result = client.run_federated_job(spec, threshold)?;
    print!("{}", render::job_result(&result, format, explain));
    let failed = result.entries.iter().filter(|e| e.outcome != Outcome::Ok).count();
    if failed > 0 {
        eprintln!("warning: {failed} of {} inputs did not produce output", result.entries.len());
        degraded = true;
    }
    if result.is_partial() {
        eprintln!("warning: unreachable: {}", result.unreachable.join(", "));
        degraded = true;
    }
    Ok(if degraded { exit::DEGRADED } else { exit::OK })
}

fn ingest_one(client: &NodeClient, path: &Path) -> Result<IngestReport> {
    let abs = std::fs::canonicalize(path)
        .map_err(|e| anyhow::anyhow!("{e}"))
        .with_context(|| format!("resolving {}", path.display()))?;
    Ok(client.ingest(abs)?)
}

fn ingest(client: &NodeClient, files: &[PathBuf], jobs: usize) -> Result<u8> {
    let results: Mutex<Vec<Option<Result<IngestReport>>>> = Mutex::new(files.iter().map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, files.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(path) = files.get(i) else { break };
                let r = ingest_one(client, path);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let mut code = exit::OK;
    let (mut ok, mut records, mut images) = (0, 0, 0);
    for (path, r) in files.iter().zip(results.into_inner().expect("results lock")) {
        match r.expect("every file attempted") {
            Ok(report) => {
                ok += 1;
                records += report.records.len();
                images += report.lfns.len();
                println!(
                    "OK\t{}\t{}\t{}\t{} records\t{} images",
                    path.display(),
                    report.study_uid,
                    report.pseudonym,
                    report.records.len(),
                    report.lfns.len()
                );
            }
            Err(e) => {
                code = code.max(exit::classify(&e).min(exit::ENVIRONMENT));
                println!("FAIL\t{}\t{e:#}", path.display());
            }
        }
    }
    println!("ingested {ok} of {} files ({records} records, {images} images)", files.len());
    Ok(code)
}

fn catalogue(client: &NodeClient, op: &CatalogueOp, format: Format) -> Result<u8> {
    match op {
        CatalogueOp::Ls { prefix, limit } => {
            let mut after: Option<String> = None;
            let mut shown = 0;
            let mut out = std::io::stdout().lock();
            while shown < *limit {
                let page = client.list(prefix, (*limit - shown).min(1000), after.as_deref())?;
                for name in &page.names {
                    writeln!(out, "{name}")?;
                }
                shown += page.names.len();
                match page.next {
                    Some(n) => after = Some(n),
                    None => break,
                }
            }
            Ok(exit::OK)
        }
        CatalogueOp::Resolve { lfn } => {
            let replicas = client.resolve(&LogicalFileName::new(lfn.clone())?)?;
            print!("{}", render::replicas(&replicas, format));
            Ok(exit::OK)
        }
    }
}
