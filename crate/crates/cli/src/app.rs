//! `ecakp` command line.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ecakp_core::client::{
    self, exit, ClientError, LicenseStore, NullRenderer, PlaybackContext, PlaybackMode, TransportError,
};
use ecakp_core::container::{self, pack, PackagingSecret};
use ecakp_core::guard::{
    self, ExecOutcome, Guard, GuardPolicy, GuardReport, NetworkGate, OsExecutor, OsProcesses, StaticProcesses,
};
use ecakp_core::identity::{self, FakeProbe, HostProbe, SystemProbe};
use ecakp_core::licensing::{self, LicenseFile, ServerKey, ServerPublicKey};
use ecakp_core::server::{ActivationService, FaultPoint, PolicyMode};
use ecakp_core::simulation::{self, ScenarioConfig};
use ecakp_core::ContentId;

use crate::api::{self, AppState, RegisterProduct, ADMIN_TOKEN_VAR};
use crate::transport::{AdminClient, HttpTransport};

/// Aborts the server right after the N-th durable ledger append, before the
/// response is written. Test hook for crash recovery.
pub const FAULT_ABORT_VAR: &str = "ECAKP_FAULT_ABORT_AFTER_APPENDS";

const PINNED_KEY_FILE: &str = "server.pub";

#[derive(Debug, Parser)]
#[command(name = "ecakp", version, about = "Encrypted courseware packaging, activation and playback")]
pub struct Cli {
    /// Configuration directory (licenses, pinned server key).
    #[arg(long, global = true, env = "ECAKP_HOME")]
    pub home: Option<PathBuf>,
    /// Machine probe: `host` or `fake:<file>` with name=value lines.
    #[arg(long, global = true, default_value = "host")]
    pub probe: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the activation server.
    Serve {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8750")]
        listen: String,
        /// Signing key file, created on first start. Defaults to LEDGER/server.key.
        #[arg(long)]
        key: Option<PathBuf>,
    },
    /// Encrypt a media file into a container.
    Pack {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Content id (32 hex chars); random when omitted.
        #[arg(long)]
        id: Option<String>,
        /// Where to keep the packaging secret. Defaults to OUTPUT.secret.
        #[arg(long)]
        secret_out: Option<PathBuf>,
    },
    /// Register a packed title with the server.
    Register {
        #[command(flatten)]
        admin: AdminArgs,
        #[arg(long)]
        secret: PathBuf,
        #[arg(long, default_value = "fair-use:1")]
        policy: PolicyMode,
    },
    /// Change the policy of a registered title.
    Policy {
        #[command(flatten)]
        admin: AdminArgs,
        #[arg(long)]
        id: String,
        #[arg(long)]
        policy: PolicyMode,
    },
    /// Show ledger statistics for a title.
    Stats {
        #[command(flatten)]
        admin: AdminArgs,
        #[arg(long)]
        id: String,
    },
    /// Activate a title on this machine.
    Activate {
        #[arg(long)]
        id: String,
        #[arg(long)]
        email: String,
        #[arg(long)]
        server: String,
        /// Expected server public key (hex). Pinned on first use otherwise.
        #[arg(long)]
        server_key: Option<String>,
    },
    /// Verify, decrypt and play a container.
    Play(PlayArgs),
    #[command(subcommand)]
    Guard(GuardCommand),
    #[command(subcommand)]
    License(LicenseCommand),
    /// Print this machine's attributes and fingerprint.
    Fingerprint,
    /// Run the activation-population scenario.
    Simulate {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
pub struct AdminArgs {
    #[arg(long)]
    pub server: String,
    #[arg(long, env = ADMIN_TOKEN_VAR, hide_env_values = true)]
    pub token: String,
}

#[derive(Debug, Args)]
pub struct GuardArgs {
    /// `name,id` snapshot file instead of the live process table.
    #[arg(long)]
    pub processes: Option<PathBuf>,
    /// File of `allow <name>` / `flag <pattern>` lines.
    #[arg(long)]
    pub guard_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlayArgs {
    pub file: PathBuf,
    #[arg(long)]
    pub license: Option<PathBuf>,
    /// Decrypt to a temporary file, hand it off, delete it.
    #[arg(long)]
    pub temp_file: bool,
    #[arg(long)]
    pub temp_dir: Option<PathBuf>,
    /// Report what the guard would stop without touching anything (default).
    #[arg(long, conflicts_with = "live_guard")]
    pub dry_run_guard: bool,
    /// Actually terminate processes. Needs --i-understand and ECAKP_GUARD_LIVE=kill-processes.
    #[arg(long)]
    pub live_guard: bool,
    #[arg(long)]
    pub i_understand: bool,
    #[arg(long)]
    pub server_key: Option<String>,
    #[command(flatten)]
    pub guard: GuardArgs,
}

#[derive(Debug, Subcommand)]
pub enum GuardCommand {
    /// List the processes playback would stop.
    Scan {
        #[command(flatten)]
        guard: GuardArgs,
        #[arg(long)]
        live: bool,
        #[arg(long)]
        i_understand: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum LicenseCommand {
    /// Print license fields and signature validity.
    Inspect {
        file: PathBuf,
        #[arg(long)]
        server_key: Option<String>,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    if let Some(c) = e.downcast_ref::<ClientError>() {
        return c.exit_code();
    }
    exit::FAILURE
}

pub fn run(cli: Cli) -> Result<i32> {
    let home = cli.home.clone().unwrap_or_else(client::default_config_dir);
    match cli.command {
        Command::Serve { ledger, listen, key } => serve(&ledger, &listen, key),
        Command::Pack { input, output, id, secret_out } => cmd_pack(&input, &output, id.as_deref(), secret_out),
        Command::Register { admin, secret, policy } => {
            let secret = read_secret(&secret)?;
            let body = RegisterProduct { content_id: secret.content_id(), master_key: *secret.master_key(), policy };
            AdminClient::new(&admin.server, admin.token).register(&body)?;
            println!("registered {} with policy {policy}", body.content_id);
            Ok(exit::SUCCESS)
        }
        Command::Policy { admin, id, policy } => {
            let id = parse_id(&id)?;
            AdminClient::new(&admin.server, admin.token).set_policy(id, policy)?;
            println!("policy for {id} set to {policy}");
            Ok(exit::SUCCESS)
        }
        Command::Stats { admin, id } => {
            let stats = AdminClient::new(&admin.server, admin.token).stats(parse_id(&id)?)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(exit::SUCCESS)
        }
        Command::Activate { id, email, server, server_key } => {
            activate(&home, &*probe(&cli.probe)?, &id, &email, &server, server_key.as_deref())
        }
        Command::Play(args) => play(&home, &*probe(&cli.probe)?, args),
        Command::Guard(GuardCommand::Scan { guard, live, i_understand }) => guard_scan(&guard, live, i_understand),
        Command::License(LicenseCommand::Inspect { file, server_key }) => inspect(&home, &file, server_key.as_deref()),
        Command::Fingerprint => {
            let attrs = identity::collect_attributes(&*probe(&cli.probe)?)?;
            for (n, v) in attrs.entries() {
                println!("{n}={v}");
            }
            println!("fingerprint: {}", identity::fingerprint(&attrs).digest_hex());
            Ok(exit::SUCCESS)
        }
        Command::Simulate { seed, json } => {
            let mut cfg = ScenarioConfig::default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = simulation::run_scenario(&cfg);
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{report}");
            }
            Ok(exit::SUCCESS)
        }
    }
}

fn probe(spec: &str) -> Result<Box<dyn SystemProbe>> {
    match spec.split_once(':') {
        None if spec == "host" => Ok(Box::new(HostProbe)),
        Some(("fake", path)) => Ok(Box::new(FakeProbe::from_file(path)?)),
        _ => bail!("unknown probe {spec:?}; use `host` or `fake:<file>`"),
    }
}

fn parse_id(s: &str) -> Result<ContentId> {
    ContentId::parse_hex(s).map_err(|_| ClientError::Input(format!("content id must be 32 hex characters, got {s:?}")).into())
}

fn serve(ledger: &Path, listen: &str, key: Option<PathBuf>) -> Result<i32> {
    fs::create_dir_all(ledger).with_context(|| format!("creating {}", ledger.display()))?;
    let key_path = key.unwrap_or_else(|| ledger.join("server.key"));
    let key = ServerKey::load_or_create(&key_path).with_context(|| format!("server key {}", key_path.display()))?;
    let mut service = ActivationService::open(ledger, key).with_context(|| format!("opening ledger {}", ledger.display()))?;

    if let Some(n) = std::env::var(FAULT_ABORT_VAR).ok().and_then(|v| v.parse::<u64>().ok()) {
        let seen = AtomicU64::new(0);
        service = service.with_fault_hook(move |point| {
            if point == FaultPoint::AfterAppend && seen.fetch_add(1, Ordering::SeqCst) + 1 >= n {
                eprintln!("fault injection: aborting after {n} appends");
                std::process::abort();
            }
        });
    }

    let admin_token = std::env::var(ADMIN_TOKEN_VAR).ok().filter(|t| !t.is_empty());
    if admin_token.is_none() {
        eprintln!("warning: {ADMIN_TOKEN_VAR} not set, admin endpoints disabled");
    }
    let state = AppState { service: Arc::new(service), admin_token };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen).await.with_context(|| format!("binding {listen}"))?;
        println!("listening on {}", listener.local_addr()?);
        std::io::stdout().flush()?;
        api::serve(listener, state).await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(exit::SUCCESS)
}

fn cmd_pack(input: &Path, output: &Path, id: Option<&str>, secret_out: Option<PathBuf>) -> Result<i32> {
    let id = id.map(parse_id).transpose()?.unwrap_or_else(ContentId::random);
    let secret = PackagingSecret::generate(id);
    let reader = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let sealed = pack(reader, id, &secret)?;
    sealed.write_file(output)?;
    let secret_path = secret_out.unwrap_or_else(|| {
        let mut p = output.as_os_str().to_owned();
        p.push(".secret");
        PathBuf::from(p)
    });
    write_secret(&secret_path, &secret)?;
    println!("content_id: {id}");
    println!("container: {}", output.display());
    println!("secret: {}", secret_path.display());
    Ok(exit::SUCCESS)
}

fn write_secret(path: &Path, secret: &PackagingSecret) -> Result<()> {
    let text = format!("content_id={}\nnonce_seed={}\n", secret.content_id(), hex::encode(secret.nonce_seed()));
    client::ensure_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_secret(path: &Path) -> Result<PackagingSecret> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let field = |name: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(name).and_then(|r| r.strip_prefix('=')))
            .map(str::trim)
            .ok_or_else(|| anyhow!("{}: missing {name}", path.display()))
    };
    let id = parse_id(field("content_id")?)?;
    let seed: [u8; 32] = hex::decode(field("nonce_seed")?)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| anyhow!("{}: nonce_seed must be 64 hex chars", path.display()))?;
    Ok(PackagingSecret::from_seed(seed, id))
}

/// Server key for verification: explicit flag, else the pinned copy, else
/// fetched once from the server and pinned.
fn resolve_server_key(home: &Path, explicit: Option<&str>, fetch: Option<&HttpTransport>) -> Result<ServerPublicKey> {
    let pin_path = home.join(PINNED_KEY_FILE);
    let pinned = match fs::read_to_string(&pin_path) {
        Ok(s) => Some(ServerPublicKey::parse_hex(s.trim()).with_context(|| format!("pinned key {}", pin_path.display()))?),
        Err(_) => None,
    };
    let key = match (explicit, &pinned, fetch) {
        (Some(hex), _, _) => ServerPublicKey::parse_hex(hex)?,
        (None, Some(k), _) => return Ok(*k),
        (None, None, Some(t)) => {
            let k = t.server_key()?;
            eprintln!("pinning server key {}", k.to_hex());
            k
        }
        (None, None, None) => bail!("no server key pinned in {}; activate first or pass --server-key", home.display()),
    };
    if pinned.is_none() {
        client::ensure_parent(&pin_path)?;
        fs::write(&pin_path, format!("{}\n", key.to_hex()))?;
    }
    Ok(key)
}

fn activate(
    home: &Path,
    probe: &dyn SystemProbe,
    id: &str,
    email: &str,
    server: &str,
    server_key: Option<&str>,
) -> Result<i32> {
    let req = client::build_request(id, email, probe)?;
    let gate = NetworkGate::default();
    let transport = HttpTransport::new(server, gate.clone());
    let key = resolve_server_key(home, server_key, Some(&transport))?;
    let store = LicenseStore::new(home);

    let mut attempt = 0;
    let activated = loop {
        attempt += 1;
        match client::request_activation(&transport, &gate, &req, &key, &store) {
            Err(ClientError::Transport(TransportError { retryable: true, message })) if attempt < 3 => {
                eprintln!("attempt {attempt} failed ({message}), retrying");
                std::thread::sleep(Duration::from_millis(300 * attempt));
            }
            other => break other?,
        }
    };
    println!("activation granted for {}", activated.license.content_id);
    println!("license: {}", activated.path.display());
    Ok(exit::SUCCESS)
}

fn build_guard(args: &GuardArgs, live: bool, understood: bool) -> Result<Guard> {
    let policy = match &args.guard_config {
        Some(p) => GuardPolicy::from_file(p)?,
        None => GuardPolicy::default(),
    };
    let source: Box<dyn guard::ProcessSource + Send + Sync> = match &args.processes {
        Some(p) => Box::new(StaticProcesses::from_file(p)?),
        None => Box::new(OsProcesses),
    };
    let mut g = Guard { policy, source, ..Guard::dry_run(StaticProcesses::default()) };
    if live || understood {
        g.executor = Arc::new(OsExecutor::acknowledged(live, understood)?);
        g.dry_run = false;
    }
    Ok(g)
}

fn print_report(r: &GuardReport) {
    let mode = if r.dry_run { "dry run" } else { "live" };
    println!("guard ({mode}): scanned {}, kill set {}", r.scanned, r.kill_set.len());
    for (t, outcome) in &r.executed {
        let flag = if t.flagged { " [virtual drive]" } else { "" };
        let what = match outcome {
            ExecOutcome::Killed => "killed".to_string(),
            ExecOutcome::Failed(e) => format!("FAILED: {e}"),
            ExecOutcome::SkippedDryRun => "would stop".to_string(),
        };
        println!("  {} (pid {}){flag}: {what}", t.name, t.pid);
    }
}

fn guard_scan(args: &GuardArgs, live: bool, understood: bool) -> Result<i32> {
    let g = build_guard(args, live, understood)?;
    let report = g.run()?;
    print_report(&report);
    Ok(if report.failures() > 0 { exit::GUARD_REFUSED } else { exit::SUCCESS })
}

fn read_content_id(path: &Path) -> Result<ContentId, ClientError> {
    let mut prefix = Vec::with_capacity(1024);
    File::open(path)?.take(64 * 1024).read_to_end(&mut prefix)?;
    Ok(container::parse_header(&prefix)?.content_id)
}

fn play(home: &Path, probe: &dyn SystemProbe, args: PlayArgs) -> Result<i32> {
    let id = read_content_id(&args.file)?;
    let store = LicenseStore::new(home);
    let license_path = args.license.clone().unwrap_or_else(|| store.path_for(&id));
    if !license_path.exists() {
        bail!("no license for {id} at {}; run `ecakp activate` first", license_path.display());
    }
    let key = resolve_server_key(home, args.server_key.as_deref(), None)?;
    let attrs = identity::collect_attributes(probe)?;
    let guard = build_guard(&args.guard, args.live_guard, args.i_understand)?;
    let ctx = PlaybackContext::new(key, attrs);
    let mode = if args.temp_file {
        PlaybackMode::TempFile { dir: args.temp_dir.clone().unwrap_or_else(std::env::temp_dir) }
    } else {
        PlaybackMode::InMemory
    };

    let session = client::play(&ctx, &args.file, &license_path, &guard, &mode, &mut NullRenderer)?;
    print_report(&session.guard_report);
    println!("content_id: {}", session.content_id);
    println!("bytes_played: {}", session.bytes_played);
    println!("crc_ok: {}", session.crc_ok);
    if let Some(p) = &session.temp_path {
        println!("temp_file: {} (removed)", p.display());
    }
    Ok(if session.crc_ok { exit::SUCCESS } else { exit::TAMPERED })
}

fn inspect(home: &Path, file: &Path, server_key: Option<&str>) -> Result<i32> {
    let lic = LicenseFile::read_file(file).map_err(ClientError::from)?;
    println!("content_id: {}", lic.content_id);
    println!("fingerprint: {}", hex::encode(lic.fingerprint_digest));
    println!("attributes: {}", lic.attribute_digests.len());
    println!("issued_at: {}", lic.issued_at);
    let key = resolve_server_key(home, server_key, None).ok();
    match key {
        Some(k) if licensing::verify_license(&lic, &k) => {
            println!("signature: valid");
            Ok(exit::SUCCESS)
        }
        Some(_) => {
            println!("signature: INVALID");
            Ok(exit::TAMPERED)
        }
        None => {
            println!("signature: unknown (no server key)");
            Ok(exit::SUCCESS)
        }
    }
}
