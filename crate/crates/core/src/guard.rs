//! Playback guard: decides which running programs must stop before content
//! is shown, and keeps the network closed outside the activation phase.
//!
//! Terminating processes goes through a [`ProcessExecutor`]. Dry-run is the
//! default everywhere; [`OsExecutor`] is only used when a caller opts in.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU8, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, SystemTime};

use thiserror::Error;

/// Programs left running during playback unless configured otherwise.
pub const DEFAULT_ALLOWLIST: [&str; 16] = [
    "svchost", "lsass", "services", "winlogon", "csrss", "smss", "System", "notepad", "Idle", "spoolsv", "alg",
    "WINWORD", "AcroRd32", "explorer", "devenv", "sqlservr",
];

/// Name fragments that mark a kill-set entry as a virtual drive tool.
pub const DEFAULT_FLAG_PATTERNS: [&str; 4] = ["DTLite", "Alcohol", "VirtualCloneDrive", "VCDDaemon"];

/// Environment variable that must be set to this value for live enforcement.
pub const LIVE_ACK_VAR: &str = "ECAKP_GUARD_LIVE";
pub const LIVE_ACK_VALUE: &str = "kill-processes";

#[derive(Debug, Error)]
pub enum GuardError {
    #[error("network access is blocked during {0}")]
    NetworkBlocked(Phase),
    #[error("process snapshot line {line}: {msg}")]
    Snapshot { line: usize, msg: String },
    #[error("guard config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("live enforcement requires --live, --i-understand and {LIVE_ACK_VAR}={LIVE_ACK_VALUE}")]
    LiveNotAcknowledged,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Activation,
    Playback,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Activation => "activation",
            Phase::Playback => "playback",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateState {
    Allowed,
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkRule {
    pub activation: GateState,
    pub playback: GateState,
}

impl Default for NetworkRule {
    fn default() -> Self {
        Self { activation: GateState::Allowed, playback: GateState::Blocked }
    }
}

/// Allowlist and network rule. The player itself is always spared.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardPolicy {
    /// Exact, case-sensitive process names left alone.
    pub allowlist: BTreeSet<String>,
    pub flag_patterns: Vec<String>,
    pub network_rule: NetworkRule,
}

impl Default for GuardPolicy {
    fn default() -> Self {
        Self {
            allowlist: DEFAULT_ALLOWLIST.iter().map(|s| s.to_string()).collect(),
            flag_patterns: DEFAULT_FLAG_PATTERNS.iter().map(|s| s.to_string()).collect(),
            network_rule: NetworkRule::default(),
        }
    }
}

impl GuardPolicy {
    /// Parses a config file of `allow <name>` and `flag <pattern>` lines.
    /// Any `allow` line replaces the default allowlist; likewise for `flag`.
    pub fn parse_config(text: &str) -> Result<Self, GuardError> {
        let mut policy = Self::default();
        let mut allow = BTreeSet::new();
        let mut flags = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| GuardError::Config { line: i + 1, msg: msg.to_owned() };
            let (key, value) = line.split_once(char::is_whitespace).ok_or_else(|| err("expected `allow <name>` or `flag <pattern>`"))?;
            let value = value.trim();
            match key {
                "allow" => {
                    allow.insert(value.to_owned());
                }
                "flag" => flags.push(value.to_owned()),
                _ => return Err(err("unknown directive")),
            }
        }
        if !allow.is_empty() {
            policy.allowlist = allow;
        }
        if !flags.is_empty() {
            policy.flag_patterns = flags;
        }
        Ok(policy)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, GuardError> {
        Self::parse_config(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProcessInfo {
    pub name: String,
    pub pid: u32,
}

impl ProcessInfo {
    pub fn new(name: impl Into<String>, pid: u32) -> Self {
        Self { name: name.into(), pid }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KillTarget {
    pub name: String,
    pub pid: u32,
    /// Matched one of the policy's flag patterns.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KillSet {
    pub scanned: usize,
    pub targets: Vec<KillTarget>,
}

/// Every process whose name is neither allowlisted nor `self_name`.
pub fn scan(processes: &[ProcessInfo], policy: &GuardPolicy, self_name: &str) -> KillSet {
    let targets = processes
        .iter()
        .filter(|p| p.name != self_name && !policy.allowlist.contains(&p.name))
        .map(|p| KillTarget {
            name: p.name.clone(),
            pid: p.pid,
            flagged: policy.flag_patterns.iter().any(|pat| p.name.contains(pat.as_str())),
        })
        .collect();
    KillSet { scanned: processes.len(), targets }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecOutcome {
    Killed,
    Failed(String),
    SkippedDryRun,
}

pub trait ProcessExecutor {
    fn terminate(&self, target: &KillTarget) -> Result<(), String>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardReport {
    pub scanned: usize,
    pub kill_set: Vec<KillTarget>,
    pub executed: Vec<(KillTarget, ExecOutcome)>,
    pub network_gate: GateState,
    pub dry_run: bool,
    pub timestamp: SystemTime,
}

impl GuardReport {
    pub fn count(&self, f: impl Fn(&ExecOutcome) -> bool) -> usize {
        self.executed.iter().filter(|(_, o)| f(o)).count()
    }

    pub fn failures(&self) -> usize {
        self.count(|o| matches!(o, ExecOutcome::Failed(_)))
    }
}

/// Terminates every target, recording failures and moving on.
pub fn enforce(kill_set: &KillSet, executor: &dyn ProcessExecutor, dry_run: bool) -> GuardReport {
    let executed = kill_set
        .targets
        .iter()
        .map(|t| {
            let outcome = if dry_run {
                ExecOutcome::SkippedDryRun
            } else {
                match executor.terminate(t) {
                    Ok(()) => ExecOutcome::Killed,
                    Err(e) => ExecOutcome::Failed(e),
                }
            };
            (t.clone(), outcome)
        })
        .collect();
    GuardReport {
        scanned: kill_set.scanned,
        kill_set: kill_set.targets.clone(),
        executed,
        network_gate: GateState::Blocked,
        dry_run,
        timestamp: SystemTime::now(),
    }
}

pub fn network_gate(phase: Phase, policy: &GuardPolicy) -> GateState {
    match phase {
        Phase::Activation => policy.network_rule.activation,
        Phase::Playback => policy.network_rule.playback,
    }
}

/// Process-wide phase switch consulted before any connection is opened.
#[derive(Debug, Clone)]
pub struct NetworkGate {
    phase: Arc<AtomicU8>,
    policy: Arc<GuardPolicy>,
}

impl NetworkGate {
    pub fn new(policy: GuardPolicy) -> Self {
        Self { phase: Arc::new(AtomicU8::new(0)), policy: Arc::new(policy) }
    }

    pub fn phase(&self) -> Phase {
        match self.phase.load(Ordering::SeqCst) {
            0 => Phase::Activation,
            _ => Phase::Playback,
        }
    }

    pub fn enter(&self, phase: Phase) {
        self.phase.store(matches!(phase, Phase::Playback) as u8, Ordering::SeqCst);
    }

    pub fn check(&self) -> Result<(), GuardError> {
        let phase = self.phase();
        match network_gate(phase, &self.policy) {
            GateState::Allowed => Ok(()),
            GateState::Blocked => Err(GuardError::NetworkBlocked(phase)),
        }
    }
}

impl Default for NetworkGate {
    fn default() -> Self {
        Self::new(GuardPolicy::default())
    }
}

pub trait ProcessSource {
    fn processes(&self) -> io::Result<Vec<ProcessInfo>>;
}

/// Fixed process list, e.g. loaded from a `name,id` snapshot file.
#[derive(Debug, Clone, Default)]
pub struct StaticProcesses(pub Vec<ProcessInfo>);

impl StaticProcesses {
    pub fn parse(text: &str) -> Result<Self, GuardError> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| GuardError::Snapshot { line: i + 1, msg: msg.to_owned() };
            let (name, id) = line.rsplit_once(',').ok_or_else(|| err("expected name,id"))?;
            let pid = id.trim().parse().map_err(|_| err("process id is not a number"))?;
            out.push(ProcessInfo::new(name.trim(), pid));
        }
        Ok(Self(out))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, GuardError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

impl ProcessSource for StaticProcesses {
    fn processes(&self) -> io::Result<Vec<ProcessInfo>> {
        Ok(self.0.clone())
    }
}

/// Lists the host's processes (Linux `/proc`).
#[derive(Debug, Clone, Copy, Default)]
pub struct OsProcesses;

impl ProcessSource for OsProcesses {
    #[cfg(target_os = "linux")]
    fn processes(&self) -> io::Result<Vec<ProcessInfo>> {
        let mut out = Vec::new();
        for entry in fs::read_dir("/proc")? {
            let Ok(entry) = entry else { continue };
            let Some(pid) = entry.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) else { continue };
            // processes may exit between listing and reading
            if let Ok(comm) = fs::read_to_string(entry.path().join("comm")) {
                out.push(ProcessInfo::new(comm.trim_end(), pid));
            }
        }
        out.sort_by_key(|p| p.pid);
        Ok(out)
    }

    #[cfg(not(target_os = "linux"))]
    fn processes(&self) -> io::Result<Vec<ProcessInfo>> {
        Err(io::Error::new(io::ErrorKind::Unsupported, "process listing is only implemented for Linux"))
    }
}

/// Sends `SIGKILL`. Only constructed behind the live opt-in.
#[derive(Debug)]
pub struct OsExecutor {
    _private: (),
}

impl OsExecutor {
    /// Requires the CLI flags and the environment acknowledgment.
    pub fn acknowledged(live_flag: bool, understood_flag: bool) -> Result<Self, GuardError> {
        let env_ok = std::env::var(LIVE_ACK_VAR).map(|v| v == LIVE_ACK_VALUE).unwrap_or(false);
        if live_flag && understood_flag && env_ok {
            Ok(Self { _private: () })
        } else {
            Err(GuardError::LiveNotAcknowledged)
        }
    }
}

impl ProcessExecutor for OsExecutor {
    #[cfg(unix)]
    fn terminate(&self, target: &KillTarget) -> Result<(), String> {
        let pid = libc::pid_t::try_from(target.pid).map_err(|_| "pid out of range".to_string())?;
        if pid <= 1 || target.pid == std::process::id() {
            return Err("refusing to signal init or self".into());
        }
        // SAFETY: kill(2) has no memory-safety preconditions.
        let rc = unsafe { libc::kill(pid, libc::SIGKILL) };
        if rc == 0 {
            Ok(())
        } else {
            Err(io::Error::last_os_error().to_string())
        }
    }

    #[cfg(not(unix))]
    fn terminate(&self, _target: &KillTarget) -> Result<(), String> {
        Err("process termination is only implemented for Unix".into())
    }
}

/// Records calls instead of terminating anything; fails on chosen names.
#[derive(Debug, Default)]
pub struct FakeExecutor {
    fail_names: BTreeSet<String>,
    calls: Mutex<Vec<KillTarget>>,
}

impl FakeExecutor {
    pub fn failing_on<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        Self { fail_names: names.into_iter().map(Into::into).collect(), calls: Mutex::default() }
    }

    pub fn calls(&self) -> Vec<KillTarget> {
        self.calls.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }
}

impl ProcessExecutor for FakeExecutor {
    fn terminate(&self, target: &KillTarget) -> Result<(), String> {
        self.calls.lock().unwrap_or_else(|p| p.into_inner()).push(target.clone());
        if self.fail_names.contains(&target.name) {
            Err(format!("access denied terminating {}", target.name))
        } else {
            Ok(())
        }
    }
}

/// Name the guard treats as "self".
pub fn current_process_name() -> String {
    std::env::current_exe()
        .ok()
        .and_then(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "ecakp".to_owned())
}

/// Everything needed to run the guard once.
pub struct Guard {
    pub policy: GuardPolicy,
    pub source: Box<dyn ProcessSource + Send + Sync>,
    pub executor: Arc<dyn ProcessExecutor + Send + Sync>,
    pub self_name: String,
    pub dry_run: bool,
}

impl Guard {
    /// Dry-run guard over `source` with the default policy.
    pub fn dry_run(source: impl ProcessSource + Send + Sync + 'static) -> Self {
        Self {
            policy: GuardPolicy::default(),
            source: Box::new(source),
            executor: Arc::new(FakeExecutor::default()),
            self_name: current_process_name(),
            dry_run: true,
        }
    }

    pub fn run(&self) -> io::Result<GuardReport> {
        run_once(&*self.source, &self.policy, &self.self_name, &*self.executor, self.dry_run)
    }
}

fn run_once(
    source: &dyn ProcessSource,
    policy: &GuardPolicy,
    self_name: &str,
    executor: &dyn ProcessExecutor,
    dry_run: bool,
) -> io::Result<GuardReport> {
    let kill_set = scan(&source.processes()?, policy, self_name);
    let mut report = enforce(&kill_set, executor, dry_run);
    report.network_gate = network_gate(Phase::Playback, policy);
    Ok(report)
}

impl fmt::Debug for Guard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Guard")
            .field("policy", &self.policy)
            .field("self_name", &self.self_name)
            .field("dry_run", &self.dry_run)
            .finish_non_exhaustive()
    }
}

/// Periodic rescan on a background thread; stops when dropped.
pub struct Rescanner {
    stop: Arc<AtomicBool>,
    handle: Option<thread::JoinHandle<()>>,
    reports: mpsc::Receiver<io::Result<GuardReport>>,
}

impl Rescanner {
    pub fn spawn(guard: Guard, interval: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, reports) = mpsc::channel();
        let flag = Arc::clone(&stop);
        let handle = thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                if tx.send(guard.run()).is_err() {
                    break;
                }
                thread::park_timeout(interval);
            }
        });
        Self { stop, handle: Some(handle), reports }
    }

    pub fn reports(&self) -> &mpsc::Receiver<io::Result<GuardReport>> {
        &self.reports
    }
}

impl Drop for Rescanner {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            h.thread().unpark();
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn procs(names: &[&str]) -> Vec<ProcessInfo> {
        names.iter().enumerate().map(|(i, n)| ProcessInfo::new(*n, 100 + i as u32)).collect()
    }

    #[test]
    fn spares_allowlist_and_self() {
        let ks = scan(&procs(&["svchost", "explorer", "obs-recorder", "ecakp"]), &GuardPolicy::default(), "ecakp");
        assert_eq!(ks.scanned, 4);
        assert_eq!(ks.targets.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(), ["obs-recorder"]);
    }

    #[test]
    fn empty_and_fully_allowed() {
        assert!(scan(&[], &GuardPolicy::default(), "x").targets.is_empty());
        let all: Vec<&str> = DEFAULT_ALLOWLIST.to_vec();
        assert!(scan(&procs(&all), &GuardPolicy::default(), "x").targets.is_empty());
    }

    #[test]
    fn names_are_case_sensitive() {
        let ks = scan(&procs(&["Explorer", "explorer", "system", "System"]), &GuardPolicy::default(), "x");
        let names: Vec<_> = ks.targets.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["Explorer", "system"]);
    }

    #[test]
    fn dry_run_touches_nothing() {
        let ks = scan(&procs(&["a", "b", "c"]), &GuardPolicy::default(), "x");
        let exec = FakeExecutor::default();
        let r = enforce(&ks, &exec, true);
        assert!(exec.calls().is_empty());
        assert_eq!(r.executed.len(), 3);
        assert!(r.executed.iter().all(|(_, o)| *o == ExecOutcome::SkippedDryRun));
    }

    #[test]
    fn one_failure_does_not_stop_enforcement() {
        let ks = scan(&procs(&["rec1", "rec2", "rec3"]), &GuardPolicy::default(), "x");
        let exec = FakeExecutor::failing_on(["rec2"]);
        let r = enforce(&ks, &exec, false);
        assert_eq!(exec.calls().len(), 3);
        assert_eq!(r.count(|o| *o == ExecOutcome::Killed), 2);
        assert_eq!(r.failures(), 1);
    }

    #[test]
    fn empty_kill_set_report() {
        let r = enforce(&KillSet { scanned: 7, targets: vec![] }, &FakeExecutor::default(), false);
        assert_eq!(r.scanned, 7);
        assert!(r.kill_set.is_empty() && r.executed.is_empty());
    }

    #[test]
    fn gate_by_phase() {
        let p = GuardPolicy::default();
        assert_eq!(network_gate(Phase::Activation, &p), GateState::Allowed);
        assert_eq!(network_gate(Phase::Playback, &p), GateState::Blocked);
        let gate = NetworkGate::new(p);
        assert!(gate.check().is_ok());
        gate.enter(Phase::Playback);
        assert!(matches!(gate.check(), Err(GuardError::NetworkBlocked(Phase::Playback))));
    }

    #[test]
    fn flag_patterns_tag_targets() {
        let ks = scan(&procs(&["DTLite", "obs64"]), &GuardPolicy::default(), "x");
        assert!(ks.targets[0].flagged);
        assert!(!ks.targets[1].flagged);
    }

    #[test]
    fn config_overrides() {
        let p = GuardPolicy::parse_config("# site policy\nallow vlc\nallow explorer\nflag Capture\n").unwrap();
        assert_eq!(p.allowlist.len(), 2);
        assert_eq!(p.flag_patterns, ["Capture"]);
        assert!(GuardPolicy::parse_config("deny x").is_err());
        assert_eq!(GuardPolicy::parse_config("").unwrap(), GuardPolicy::default());
    }

    #[test]
    fn snapshot_file_format() {
        let s = StaticProcesses::parse("svchost,4\n# c\nobs recorder, 88\n").unwrap();
        assert_eq!(s.0, vec![ProcessInfo::new("svchost", 4), ProcessInfo::new("obs recorder", 88)]);
        assert!(StaticProcesses::parse("svchost").is_err());
        assert!(StaticProcesses::parse("svchost,x").is_err());
    }

    #[test]
    fn live_executor_needs_every_acknowledgment() {
        assert!(OsExecutor::acknowledged(true, false).is_err());
        assert!(OsExecutor::acknowledged(false, true).is_err());
        if std::env::var(LIVE_ACK_VAR).is_err() {
            assert!(OsExecutor::acknowledged(true, true).is_err());
        }
    }

    #[cfg(target_os = "linux")]
    #[test]
    fn os_listing_includes_self() {
        let me = std::process::id();
        assert!(OsProcesses.processes().unwrap().iter().any(|p| p.pid == me));
    }

    #[test]
    fn rescanner_emits_reports() {
        let r = Rescanner::spawn(Guard::dry_run(StaticProcesses(procs(&["a"]))), Duration::from_millis(5));
        for _ in 0..2 {
            let rep = r.reports().recv_timeout(Duration::from_secs(5)).unwrap().unwrap();
            assert_eq!(rep.kill_set.len(), 1);
        }
    }

    proptest! {
        #[test]
        fn kill_set_disjoint_from_allowlist_and_self(
            names in proptest::collection::vec(prop_oneof![
                proptest::sample::select(DEFAULT_ALLOWLIST.to_vec()).prop_map(String::from),
                "[a-zA-Z]{1,8}",
            ], 0..40),
            self_idx in any::<prop::sample::Index>(),
            fail_mask in any::<u64>(),
        ) {
            let p = GuardPolicy::default();
            let list: Vec<ProcessInfo> = names.iter().enumerate().map(|(i, n)| ProcessInfo::new(n.clone(), i as u32)).collect();
            let self_name = if names.is_empty() { "ecakp".to_string() } else { names[self_idx.index(names.len())].clone() };
            let ks = scan(&list, &p, &self_name);
            prop_assert_eq!(&scan(&list, &p, &self_name), &ks);
            for t in &ks.targets {
                prop_assert!(!p.allowlist.contains(&t.name));
                prop_assert_ne!(&t.name, &self_name);
            }
            let failing: Vec<String> = ks.targets.iter().enumerate()
                .filter(|(i, _)| fail_mask & (1 << (i % 64)) != 0).map(|(_, t)| t.name.clone()).collect();
            let r = enforce(&ks, &FakeExecutor::failing_on(failing), false);
            prop_assert_eq!(r.executed.len(), ks.targets.len());
        }
    }
}
