//! The installed player: activation handshake, license storage and the
//! guarded decrypt-and-play flow.

use std::fmt;
use std::fs;
use std::io::{self, Read, Seek, Write};
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use thiserror::Error;

use crate::container::{self, ContainerError, ContentId, EncryptedContainer};
use crate::guard::{Guard, GuardError, GuardReport, NetworkGate, Phase};
use crate::identity::{self, AttributeSet, IdentityError, SystemProbe};
use crate::licensing::{self, LicenseError, LicenseFile, ServerPublicKey};
use crate::server::wire::validate_email;
use crate::server::{ActivationRequest, ActivationResponse, ActivationService, DenialReason, ServiceError};

/// Exit codes shared by every CLI path.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const DENIED: i32 = 2;
    pub const TAMPERED: i32 = 3;
    pub const GUARD_REFUSED: i32 = 4;
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Gate(#[from] GuardError),
    #[error("activation server unreachable: {0}")]
    Transport(#[from] TransportError),
    #[error("{}", denial_message(*.0))]
    Denied(DenialReason),
    #[error("server response failed verification")]
    Verification,
    #[error("license is for content {license}, container holds {container}")]
    WrongContent { license: ContentId, container: ContentId },
    #[error(transparent)]
    License(#[from] LicenseError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("playback refused by guard: {0}")]
    GuardRefused(String),
    #[error("playback sink failed: {0}")]
    Sink(#[source] io::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ClientError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Denied(_) | ClientError::WrongContent { .. } | ClientError::License(LicenseError::WrongMachine) => {
                exit::DENIED
            }
            ClientError::Verification
            | ClientError::License(LicenseError::BadSignature | LicenseError::Corrupt | LicenseError::Parse(_))
            | ClientError::Container(
                ContainerError::Authentication
                | ContainerError::Corrupt(_)
                | ContainerError::Framing(_)
                | ContainerError::NotContainer
                | ContainerError::Unprotected
                | ContainerError::UnsupportedVersion(_),
            ) => exit::TAMPERED,
            ClientError::GuardRefused(_) => exit::GUARD_REFUSED,
            _ => exit::FAILURE,
        }
    }
}

/// User-facing text for a refusal.
pub fn denial_message(reason: DenialReason) -> &'static str {
    match reason {
        DenialReason::LimitReached => "activation refused: this copy has used all of its activations",
        DenialReason::Stolen => "activation refused: this copy has been marked as stolen and is no longer valid",
        DenialReason::UnknownContent => "activation refused: the content id is not known to the server",
        DenialReason::WrongMachine => "activation refused: this copy is already activated on a different computer",
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct TransportError {
    pub retryable: bool,
    pub message: String,
}

impl TransportError {
    pub fn retryable(message: impl Into<String>) -> Self {
        Self { retryable: true, message: message.into() }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self { retryable: false, message: message.into() }
    }
}

/// Carries an activation request to the server.
pub trait ActivationTransport {
    fn send(&self, req: &ActivationRequest) -> Result<ActivationResponse, TransportError>;
}

/// Direct in-process transport, used by tests and local tooling.
impl ActivationTransport for ActivationService {
    fn send(&self, req: &ActivationRequest) -> Result<ActivationResponse, TransportError> {
        self.activate(req).map_err(|e| match e {
            ServiceError::Storage(_) => TransportError::retryable(e.to_string()),
            _ => TransportError::fatal(e.to_string()),
        })
    }
}

/// Parses the user's input and fingerprints this machine.
pub fn build_request(content_id: &str, email: &str, probe: &dyn SystemProbe) -> Result<ActivationRequest, ClientError> {
    let id = ContentId::parse_hex(content_id).map_err(|_| {
        ClientError::Input(format!(
            "content id must be exactly 32 hexadecimal characters (got {:?})",
            content_id.trim()
        ))
    })?;
    let email = email.trim();
    validate_email(email).map_err(ClientError::Input)?;
    let attrs = identity::collect_attributes(probe)?;
    Ok(ActivationRequest::new(id, &identity::fingerprint(&attrs), email))
}

/// Default per-user configuration directory.
///
/// `$ECAKP_HOME`, else `$XDG_CONFIG_HOME/ecakp`, else `~/.config/ecakp`,
/// else `%APPDATA%\ecakp`.
pub fn default_config_dir() -> PathBuf {
    let env = |k: &str| std::env::var_os(k).filter(|v| !v.is_empty()).map(PathBuf::from);
    env("ECAKP_HOME")
        .or_else(|| env("XDG_CONFIG_HOME").map(|p| p.join("ecakp")))
        .or_else(|| env("HOME").map(|p| p.join(".config").join("ecakp")))
        .or_else(|| env("APPDATA").map(|p| p.join("ecakp")))
        .unwrap_or_else(|| PathBuf::from(".ecakp"))
}

/// One `.eclic` file per content id under `<config>/licenses`.
#[derive(Debug, Clone)]
pub struct LicenseStore {
    dir: PathBuf,
}

impl LicenseStore {
    pub fn new(config_dir: impl AsRef<Path>) -> Self {
        Self { dir: config_dir.as_ref().join("licenses") }
    }

    pub fn path_for(&self, id: &ContentId) -> PathBuf {
        self.dir.join(format!("{id}.{}", licensing::FILE_EXTENSION))
    }

    pub fn save(&self, lic: &LicenseFile) -> Result<PathBuf, LicenseError> {
        let path = self.path_for(&lic.content_id);
        lic.write_file(&path)?;
        Ok(path)
    }

    pub fn load(&self, id: &ContentId) -> Result<LicenseFile, LicenseError> {
        LicenseFile::read_file(self.path_for(id))
    }
}

#[derive(Debug)]
pub struct Activated {
    pub license: LicenseFile,
    pub path: PathBuf,
}

/// Sends the request and, on a grant, verifies and stores the license.
///
/// A refusal is returned as [`ClientError::Denied`]. A license that does not
/// verify against `server_key` is never written.
pub fn request_activation(
    transport: &dyn ActivationTransport,
    gate: &NetworkGate,
    req: &ActivationRequest,
    server_key: &ServerPublicKey,
    store: &LicenseStore,
) -> Result<Activated, ClientError> {
    gate.check()?;
    match transport.send(req)? {
        ActivationResponse::Denied { reason } => Err(ClientError::Denied(reason)),
        ActivationResponse::Granted { license } => {
            let matches_request = license.content_id == req.content_id && license.fingerprint_digest == req.fingerprint;
            if !matches_request || !licensing::verify_license(&license, server_key) {
                return Err(ClientError::Verification);
            }
            let path = store.save(&license)?;
            Ok(Activated { license, path })
        }
    }
}

/// Receives decrypted media. `temp_path` is set in temp-file mode.
pub trait PlaybackSink {
    fn render(&mut self, media: &mut dyn Read, temp_path: Option<&Path>) -> io::Result<()>;
}

/// Discards the media; the player's own counters do the checking.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullRenderer;

impl PlaybackSink for NullRenderer {
    fn render(&mut self, media: &mut dyn Read, _temp_path: Option<&Path>) -> io::Result<()> {
        io::copy(media, &mut io::sink()).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlaybackMode {
    InMemory,
    /// Write plaintext to a uniquely named `Temp*` file in `dir`, hand it
    /// to the sink, delete it afterwards.
    TempFile { dir: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeKind {
    InMemory,
    TempFile,
}

#[derive(Debug, Clone)]
pub struct PlaybackSession {
    pub content_id: ContentId,
    pub bytes_played: u64,
    pub crc_ok: bool,
    pub mode: ModeKind,
    /// Path used in temp-file mode; already deleted when the session returns.
    pub temp_path: Option<PathBuf>,
    pub guard_report: GuardReport,
    /// When the first plaintext byte was handed to the sink.
    pub started_at: SystemTime,
}

/// Machine-side inputs for playback.
#[derive(Debug, Clone)]
pub struct PlaybackContext {
    pub server_key: ServerPublicKey,
    pub attributes: AttributeSet,
    pub tolerance: usize,
    pub gate: NetworkGate,
}

impl PlaybackContext {
    pub fn new(server_key: ServerPublicKey, attributes: AttributeSet) -> Self {
        Self { server_key, attributes, tolerance: identity::DEFAULT_TOLERANCE, gate: NetworkGate::default() }
    }
}

struct Metered<R> {
    inner: R,
    count: u64,
    crc: crc32fast::Hasher,
}

impl<R: Read> Read for Metered<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.count += n as u64;
        self.crc.update(&buf[..n]);
        Ok(n)
    }
}

struct PhaseRestore<'a>(&'a NetworkGate);

impl Drop for PhaseRestore<'_> {
    fn drop(&mut self) {
        self.0.enter(Phase::Activation);
    }
}

/// Verifies the license, runs the guard, decrypts and streams to `sink`.
///
/// Order: license signature and machine match, then the guard (network
/// closed for the rest of the session), then key unwrap and container
/// authentication, and only then the first plaintext byte.
pub fn play(
    ctx: &PlaybackContext,
    container_path: &Path,
    license_path: &Path,
    guard: &Guard,
    mode: &PlaybackMode,
    sink: &mut dyn PlaybackSink,
) -> Result<PlaybackSession, ClientError> {
    let license = LicenseFile::read_file(license_path)?;
    let sealed = EncryptedContainer::read_file(container_path)?;
    if license.content_id != sealed.content_id() {
        return Err(ClientError::WrongContent { license: license.content_id, container: sealed.content_id() });
    }
    licensing::check_license(&license, &ctx.server_key, &ctx.attributes, ctx.tolerance)?;

    ctx.gate.enter(Phase::Playback);
    let _restore = PhaseRestore(&ctx.gate);
    let guard_report = guard.run().map_err(|e| ClientError::GuardRefused(format!("cannot list processes: {e}")))?;
    if !guard_report.dry_run && guard_report.failures() > 0 {
        return Err(ClientError::GuardRefused(format!(
            "{} of {} processes could not be stopped",
            guard_report.failures(),
            guard_report.kill_set.len()
        )));
    }

    let key = licensing::unwrap_content_key(&license, &ctx.server_key, &ctx.attributes, ctx.tolerance)?;
    let plaintext = container::unpack(&sealed, &key)?;

    let started_at = SystemTime::now();
    let (metered, temp_path, kind) = match mode {
        PlaybackMode::InMemory => {
            let mut m = Metered { inner: plaintext.as_slice(), count: 0, crc: crc32fast::Hasher::new() };
            sink.render(&mut m, None).map_err(ClientError::Sink)?;
            ((m.count, m.crc.finalize()), None, ModeKind::InMemory)
        }
        PlaybackMode::TempFile { dir } => {
            // removed on drop, including when the sink fails
            let mut tmp = tempfile::Builder::new().prefix("Temp").tempfile_in(dir)?;
            tmp.write_all(&plaintext)?;
            tmp.flush()?;
            drop(plaintext);
            let path = tmp.path().to_path_buf();
            let mut file = tmp.reopen()?;
            file.rewind()?;
            let mut m = Metered { inner: file, count: 0, crc: crc32fast::Hasher::new() };
            let rendered = sink.render(&mut m, Some(&path));
            drop(m.inner);
            tmp.close()?;
            rendered.map_err(ClientError::Sink)?;
            ((m.count, m.crc.finalize()), Some(path), ModeKind::TempFile)
        }
    };
    let (bytes_played, crc) = metered;

    Ok(PlaybackSession {
        content_id: sealed.content_id(),
        bytes_played,
        crc_ok: crc == sealed.crc32() && bytes_played as u32 == sealed.isize(),
        mode: kind,
        temp_path,
        guard_report,
        started_at,
    })
}

impl fmt::Display for PlaybackSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "content {} played: {} bytes, crc {}, guard stopped {} of {} scanned processes{}",
            self.content_id,
            self.bytes_played,
            if self.crc_ok { "ok" } else { "MISMATCH" },
            self.guard_report.kill_set.len(),
            self.guard_report.scanned,
            if self.guard_report.dry_run { " (dry run)" } else { "" }
        )
    }
}

/// Creates the directory for a file path if needed.
pub fn ensure_parent(path: &Path) -> io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::{pack, PackagingSecret};
    use crate::guard::{FakeExecutor, GuardPolicy, ProcessInfo, StaticProcesses};
    use crate::identity::{FakeProbe, EXPECTED_ATTRIBUTES};
    use crate::licensing::ServerKey;
    use crate::server::PolicyMode;
    use std::sync::Arc;

    fn probe(tag: &str) -> FakeProbe {
        FakeProbe::new(EXPECTED_ATTRIBUTES.iter().map(|n| (*n, format!("{n}-{tag}"))))
    }

    struct Fixture {
        dir: tempfile::TempDir,
        svc: ActivationService,
        id: ContentId,
        container: PathBuf,
        plaintext: Vec<u8>,
    }

    fn fixture(policy: PolicyMode) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let svc = ActivationService::in_memory(ServerKey::from_seed([4; 32]));
        let id = ContentId::from_bytes([0x5A; 16]);
        let secret = PackagingSecret::generate(id);
        svc.register_product(id, *secret.master_key(), policy).unwrap();
        let plaintext: Vec<u8> = (0..50_000u32).map(|i| (i % 251) as u8).collect();
        let container = dir.path().join("lesson.ecakp");
        pack(plaintext.as_slice(), id, &secret).unwrap().write_file(&container).unwrap();
        Fixture { dir, svc, id, container, plaintext }
    }

    fn activate(f: &Fixture, tag: &str) -> Result<Activated, ClientError> {
        let req = build_request(&f.id.to_hex(), "student@example.edu", &probe(tag)).unwrap();
        let store = LicenseStore::new(f.dir.path().join(tag));
        request_activation(&f.svc, &NetworkGate::default(), &req, &f.svc.public_key(), &store)
    }

    fn ctx(f: &Fixture, tag: &str) -> PlaybackContext {
        PlaybackContext::new(f.svc.public_key(), identity::collect_attributes(&probe(tag)).unwrap())
    }

    fn quiet_guard() -> Guard {
        Guard::dry_run(StaticProcesses(vec![ProcessInfo::new("svchost", 4), ProcessInfo::new("obs64", 9)]))
    }

    #[test]
    fn request_input_rules() {
        let p = probe("a");
        let ok = build_request("00ff00ff00ff00ff00ff00ff00ff00ff", "a@b.c", &p).unwrap();
        assert_eq!(ok.attribute_digests.len(), 6);
        assert!(matches!(build_request(&"0".repeat(31), "a@b.c", &p), Err(ClientError::Input(m)) if m.contains("32 hexadecimal")));
        assert!(matches!(build_request(&"0".repeat(32), "nope", &p), Err(ClientError::Input(_))));
        let upper = build_request("00FF00FF00FF00FF00FF00FF00FF00FF", "a@b.c", &p).unwrap();
        assert_eq!(upper.content_id.to_hex(), "00ff00ff00ff00ff00ff00ff00ff00ff");
    }

    #[test]
    fn activate_and_play_in_memory() {
        let f = fixture(PolicyMode::Strict);
        let act = activate(&f, "a").unwrap();
        assert!(act.path.exists());
        let s = play(&ctx(&f, "a"), &f.container, &act.path, &quiet_guard(), &PlaybackMode::InMemory, &mut NullRenderer)
            .unwrap();
        assert!(s.crc_ok);
        assert_eq!(s.bytes_played, f.plaintext.len() as u64);
        assert_eq!(s.guard_report.kill_set.len(), 1);
        assert!(s.guard_report.timestamp <= s.started_at);
    }

    #[test]
    fn denied_writes_nothing() {
        let f = fixture(PolicyMode::MassiveFraudPrevention { threshold: 1 });
        activate(&f, "a").unwrap();
        let err = activate(&f, "b").unwrap_err();
        assert!(matches!(err, ClientError::Denied(DenialReason::Stolen)));
        assert!(err.to_string().contains("stolen"));
        assert_eq!(err.exit_code(), exit::DENIED);
        assert!(!f.dir.path().join("b").exists());
    }

    #[test]
    fn tampered_license_in_transit_rejected() {
        struct Tamper<'a>(&'a ActivationService);
        impl ActivationTransport for Tamper<'_> {
            fn send(&self, req: &ActivationRequest) -> Result<ActivationResponse, TransportError> {
                match self.0.send(req)? {
                    ActivationResponse::Granted { mut license } => {
                        license.issued_at += 1;
                        Ok(ActivationResponse::Granted { license })
                    }
                    other => Ok(other),
                }
            }
        }
        let f = fixture(PolicyMode::MonitorOnly);
        let req = build_request(&f.id.to_hex(), "a@b.c", &probe("a")).unwrap();
        let store = LicenseStore::new(f.dir.path().join("t"));
        let err = request_activation(&Tamper(&f.svc), &NetworkGate::default(), &req, &f.svc.public_key(), &store)
            .unwrap_err();
        assert_eq!(err.to_string(), "server response failed verification");
        assert!(!store.path_for(&f.id).exists());
    }

    #[test]
    fn gate_blocks_activation_during_playback() {
        struct MustNotConnect;
        impl ActivationTransport for MustNotConnect {
            fn send(&self, _: &ActivationRequest) -> Result<ActivationResponse, TransportError> {
                panic!("transport reached while gate closed");
            }
        }
        let f = fixture(PolicyMode::MonitorOnly);
        let gate = NetworkGate::default();
        gate.enter(Phase::Playback);
        let req = build_request(&f.id.to_hex(), "a@b.c", &probe("a")).unwrap();
        let err = request_activation(&MustNotConnect, &gate, &req, &f.svc.public_key(), &LicenseStore::new(f.dir.path()))
            .unwrap_err();
        assert!(matches!(err, ClientError::Gate(GuardError::NetworkBlocked(Phase::Playback))));
    }

    #[test]
    fn other_machine_refused_before_decryption() {
        struct Untouched;
        impl PlaybackSink for Untouched {
            fn render(&mut self, _: &mut dyn Read, _: Option<&Path>) -> io::Result<()> {
                panic!("sink reached");
            }
        }
        let f = fixture(PolicyMode::Strict);
        let act = activate(&f, "a").unwrap();
        let guard = quiet_guard();
        let err = play(&ctx(&f, "b"), &f.container, &act.path, &guard, &PlaybackMode::InMemory, &mut Untouched)
            .unwrap_err();
        assert!(matches!(err, ClientError::License(LicenseError::WrongMachine)));
        assert_eq!(err.exit_code(), exit::DENIED);
    }

    #[test]
    fn temp_file_removed_even_when_sink_fails() {
        struct FailMidway {
            seen: Option<PathBuf>,
        }
        impl PlaybackSink for FailMidway {
            fn render(&mut self, media: &mut dyn Read, temp: Option<&Path>) -> io::Result<()> {
                let p = temp.unwrap();
                assert!(p.exists());
                assert!(p.file_name().unwrap().to_str().unwrap().starts_with("Temp"));
                self.seen = Some(p.to_path_buf());
                let mut buf = [0u8; 1000];
                media.read_exact(&mut buf)?;
                Err(io::Error::other("renderer crashed"))
            }
        }
        let f = fixture(PolicyMode::MonitorOnly);
        let act = activate(&f, "a").unwrap();
        let tmp_dir = f.dir.path().join("tmp");
        fs::create_dir(&tmp_dir).unwrap();
        let mode = PlaybackMode::TempFile { dir: tmp_dir.clone() };
        let mut sink = FailMidway { seen: None };
        let err = play(&ctx(&f, "a"), &f.container, &act.path, &quiet_guard(), &mode, &mut sink).unwrap_err();
        assert!(matches!(err, ClientError::Sink(_)));
        assert!(!sink.seen.unwrap().exists());
        assert_eq!(fs::read_dir(&tmp_dir).unwrap().count(), 0);

        let s = play(&ctx(&f, "a"), &f.container, &act.path, &quiet_guard(), &mode, &mut NullRenderer).unwrap();
        assert!(s.crc_ok);
        assert_eq!(s.mode, ModeKind::TempFile);
        assert!(!s.temp_path.unwrap().exists());
        assert_eq!(fs::read_dir(&tmp_dir).unwrap().count(), 0);
    }

    #[test]
    fn live_guard_failure_vetoes_playback() {
        let f = fixture(PolicyMode::MonitorOnly);
        let act = activate(&f, "a").unwrap();
        let guard = Guard {
            policy: GuardPolicy::default(),
            source: Box::new(StaticProcesses(vec![ProcessInfo::new("screenrec", 77)])),
            executor: Arc::new(FakeExecutor::failing_on(["screenrec"])),
            self_name: "ecakp".into(),
            dry_run: false,
        };
        let c = ctx(&f, "a");
        let err = play(&c, &f.container, &act.path, &guard, &PlaybackMode::InMemory, &mut NullRenderer).unwrap_err();
        assert_eq!(err.exit_code(), exit::GUARD_REFUSED);
        assert_eq!(c.gate.phase(), Phase::Activation);
    }

    #[test]
    fn tampered_container_is_exit_3() {
        let f = fixture(PolicyMode::MonitorOnly);
        let act = activate(&f, "a").unwrap();
        let mut bytes = fs::read(&f.container).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&f.container, bytes).unwrap();
        let err = play(&ctx(&f, "a"), &f.container, &act.path, &quiet_guard(), &PlaybackMode::InMemory, &mut NullRenderer)
            .unwrap_err();
        assert!(matches!(err, ClientError::Container(ContainerError::Authentication)));
        assert_eq!(err.exit_code(), exit::TAMPERED);
    }
}
