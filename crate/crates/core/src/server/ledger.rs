//! Activation history and its on-disk form.
//!
//! A ledger directory holds two files:
//!
//! * `products.snapshot`: the registration table (content id, master key,
//!   policy), rewritten atomically on every registration change.
//! * `activations.log`: append-only activation records, one per request.
//!   Each record is `u32 len | payload | u32 crc32(payload)`, little-endian.
//!   A torn record at the tail (crash mid-append) is dropped on load.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::ContentId;
use crate::crypto::{Digest256, DIGEST_LEN, KEY_LEN};
use crate::licensing::write_atomic;

use super::policy::{granted_machines, status_of, PolicyMode};

pub const LOG_FILE: &str = "activations.log";
pub const SNAPSHOT_FILE: &str = "products.snapshot";

const SNAPSHOT_MAGIC: &[u8; 4] = b"ECSN";
const RECORD_VERSION: u8 = 1;
const MAX_RECORD: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Granted,
    Denied,
    DeniedStolen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProductStatus {
    Active,
    Stolen,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationRecord {
    pub fingerprint_digest: Digest256,
    pub attribute_digests: Vec<Digest256>,
    pub email: String,
    pub timestamp: u64,
    pub outcome: Outcome,
}

impl ActivationRecord {
    pub fn new(
        fingerprint_digest: Digest256,
        attribute_digests: Vec<Digest256>,
        email: impl Into<String>,
        timestamp: u64,
        outcome: Outcome,
    ) -> Self {
        Self { fingerprint_digest, attribute_digests, email: email.into(), timestamp, outcome }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Registration {
    pub master_key: [u8; KEY_LEN],
    pub policy: PolicyMode,
}

impl std::fmt::Debug for Registration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registration").field("policy", &self.policy).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerStats {
    pub grants: u64,
    pub denials: u64,
    pub distinct_machines: u64,
    pub status: ProductStatus,
}

/// Registration plus append-only history for one content id.
#[derive(Debug, Clone)]
pub struct ProductLedger {
    pub registration: Registration,
    history: Vec<ActivationRecord>,
}

impl ProductLedger {
    pub fn new(registration: Registration) -> Self {
        Self { registration, history: Vec::new() }
    }

    pub fn history(&self) -> &[ActivationRecord] {
        &self.history
    }

    pub fn append(&mut self, record: ActivationRecord) {
        self.history.push(record);
    }

    pub fn status(&self) -> ProductStatus {
        status_of(&self.history)
    }

    pub fn stats(&self) -> LedgerStats {
        let grants = self.history.iter().filter(|r| r.outcome == Outcome::Granted).count() as u64;
        LedgerStats {
            grants,
            denials: self.history.len() as u64 - grants,
            distinct_machines: granted_machines(&self.history).len() as u64,
            status: self.status(),
        }
    }
}

fn encode_policy(p: &PolicyMode, out: &mut Vec<u8>) {
    let (tag, arg) = match *p {
        PolicyMode::MonitorOnly => (0u8, 0u32),
        PolicyMode::MassiveFraudPrevention { threshold } => (1, threshold),
        PolicyMode::FairUse { extra_activations } => (2, extra_activations),
        PolicyMode::Strict => (3, 0),
    };
    out.push(tag);
    out.extend_from_slice(&arg.to_le_bytes());
}

fn decode_policy(tag: u8, arg: u32) -> Result<PolicyMode, LedgerError> {
    Ok(match tag {
        0 => PolicyMode::MonitorOnly,
        1 => PolicyMode::MassiveFraudPrevention { threshold: arg },
        2 => PolicyMode::FairUse { extra_activations: arg },
        3 => PolicyMode::Strict,
        t => return Err(LedgerError::Corrupt(format!("unknown policy tag {t}"))),
    })
}

fn encode_outcome(o: Outcome) -> u8 {
    match o {
        Outcome::Granted => 0,
        Outcome::Denied => 1,
        Outcome::DeniedStolen => 2,
    }
}

fn decode_outcome(b: u8) -> Result<Outcome, LedgerError> {
    Ok(match b {
        0 => Outcome::Granted,
        1 => Outcome::Denied,
        2 => Outcome::DeniedStolen,
        t => return Err(LedgerError::Corrupt(format!("unknown outcome {t}"))),
    })
}

pub fn encode_record(content_id: &ContentId, r: &ActivationRecord) -> Vec<u8> {
    let mut p = Vec::with_capacity(64 + r.attribute_digests.len() * DIGEST_LEN + r.email.len());
    p.push(RECORD_VERSION);
    p.extend_from_slice(content_id.as_bytes());
    p.extend_from_slice(&r.fingerprint_digest);
    p.push(r.attribute_digests.len() as u8);
    for d in &r.attribute_digests {
        p.extend_from_slice(d);
    }
    let email = &r.email.as_bytes()[..r.email.len().min(u16::MAX as usize)];
    p.extend_from_slice(&(email.len() as u16).to_le_bytes());
    p.extend_from_slice(email);
    p.extend_from_slice(&r.timestamp.to_le_bytes());
    p.push(encode_outcome(r.outcome));

    let mut framed = Vec::with_capacity(p.len() + 8);
    framed.extend_from_slice(&(p.len() as u32).to_le_bytes());
    framed.extend_from_slice(&p);
    framed.extend_from_slice(&crc32fast::hash(&p).to_le_bytes());
    framed
}

fn decode_payload(p: &[u8]) -> Result<(ContentId, ActivationRecord), LedgerError> {
    let bad = || LedgerError::Corrupt("malformed activation record".into());
    let mut r = p;
    let mut take = |n: usize| -> Result<&[u8], LedgerError> {
        if r.len() < n {
            return Err(bad());
        }
        let (h, t) = r.split_at(n);
        r = t;
        Ok(h)
    };
    if take(1)?[0] != RECORD_VERSION {
        return Err(LedgerError::Corrupt("unknown record version".into()));
    }
    let content_id = ContentId::from_slice(take(16)?).map_err(|_| bad())?;
    let fingerprint_digest: Digest256 = take(DIGEST_LEN)?.try_into().unwrap();
    let n = take(1)?[0] as usize;
    let mut attribute_digests = Vec::with_capacity(n);
    for _ in 0..n {
        attribute_digests.push(take(DIGEST_LEN)?.try_into().unwrap());
    }
    let elen = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
    let email = String::from_utf8(take(elen)?.to_vec()).map_err(|_| bad())?;
    let timestamp = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let outcome = decode_outcome(take(1)?[0])?;
    if !r.is_empty() {
        return Err(bad());
    }
    Ok((content_id, ActivationRecord { fingerprint_digest, attribute_digests, email, timestamp, outcome }))
}

/// Splits a log into records. Returns the decoded records and the byte
/// length of the valid prefix; anything after it is a torn tail.
pub fn decode_log(bytes: &[u8]) -> Result<(Vec<(ContentId, ActivationRecord)>, usize), LedgerError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let rest = &bytes[pos..];
        if rest.len() < 4 {
            break;
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        if rest.len() < 8 + len {
            // runs past end of file: torn tail
            break;
        }
        if len > MAX_RECORD {
            return Err(LedgerError::Corrupt(format!("oversized record at offset {pos}")));
        }
        let payload = &rest[4..4 + len];
        let crc = u32::from_le_bytes(rest[4 + len..8 + len].try_into().unwrap());
        if crc32fast::hash(payload) != crc {
            if pos + 8 + len == bytes.len() {
                break;
            }
            return Err(LedgerError::Corrupt(format!("checksum mismatch at offset {pos}")));
        }
        out.push(decode_payload(payload)?);
        pos += 8 + len;
    }
    Ok((out, pos))
}

pub fn encode_snapshot(products: &BTreeMap<ContentId, Registration>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.push(1);
    out.extend_from_slice(&(products.len() as u32).to_le_bytes());
    for (id, reg) in products {
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&reg.master_key);
        encode_policy(&reg.policy, &mut out);
    }
    out.extend_from_slice(&crc32fast::hash(&out).to_le_bytes());
    out
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<BTreeMap<ContentId, Registration>, LedgerError> {
    let bad = |m: &str| LedgerError::Corrupt(format!("snapshot: {m}"));
    if bytes.len() < 13 || &bytes[..4] != SNAPSHOT_MAGIC || bytes[4] != 1 {
        return Err(bad("bad header"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(bad("checksum mismatch"));
    }
    let count = u32::from_le_bytes(body[5..9].try_into().unwrap()) as usize;
    const ENTRY: usize = 16 + KEY_LEN + 5;
    let entries = &body[9..];
    if entries.len() != count * ENTRY {
        return Err(bad("length mismatch"));
    }
    let mut out = BTreeMap::new();
    for e in entries.chunks_exact(ENTRY) {
        let id = ContentId::from_slice(&e[..16]).unwrap();
        let master_key = e[16..48].try_into().unwrap();
        let policy = decode_policy(e[48], u32::from_le_bytes(e[49..53].try_into().unwrap()))?;
        out.insert(id, Registration { master_key, policy });
    }
    Ok(out)
}

/// Durable storage for a ledger directory.
#[derive(Debug)]
pub struct LedgerStore {
    dir: PathBuf,
    log: Mutex<File>,
}

impl LedgerStore {
    /// Opens (creating if needed) a ledger directory and loads its contents.
    /// A torn final log record is truncated away.
    pub fn open(dir: impl AsRef<Path>) -> Result<(Self, BTreeMap<ContentId, ProductLedger>), LedgerError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;

        let registrations = match fs::read(dir.join(SNAPSHOT_FILE)) {
            Ok(b) => decode_snapshot(&b)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        let mut products: BTreeMap<ContentId, ProductLedger> =
            registrations.into_iter().map(|(id, r)| (id, ProductLedger::new(r))).collect();

        let log_path = dir.join(LOG_FILE);
        let bytes = match fs::read(&log_path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let (records, valid) = decode_log(&bytes)?;
        for (id, rec) in records {
            products
                .get_mut(&id)
                .ok_or_else(|| LedgerError::Corrupt(format!("activation record for unregistered content {id}")))?
                .append(rec);
        }
        let log = OpenOptions::new().create(true).read(true).append(true).open(&log_path)?;
        if valid < bytes.len() {
            log.set_len(valid as u64)?;
            log.sync_all()?;
        }
        Ok((Self { dir, log: Mutex::new(log) }, products))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Appends one record with a single write and syncs it to disk.
    pub fn append(&self, content_id: &ContentId, record: &ActivationRecord) -> io::Result<()> {
        let framed = encode_record(content_id, record);
        let mut log = self.log.lock().unwrap_or_else(|p| p.into_inner());
        log.write_all(&framed)?;
        log.sync_data()
    }

    pub fn write_snapshot(&self, products: &BTreeMap<ContentId, Registration>) -> io::Result<()> {
        write_atomic(&self.dir.join(SNAPSHOT_FILE), &encode_snapshot(products))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(n: u8, outcome: Outcome) -> ActivationRecord {
        ActivationRecord::new([n; 32], vec![[n; 32], [n ^ 1; 32]], format!("user{n}@example.org"), 1_700_000_000 + n as u64, outcome)
    }

    #[test]
    fn record_round_trip() {
        let id = ContentId::from_bytes([4; 16]);
        let mut log = Vec::new();
        for (i, o) in [Outcome::Granted, Outcome::Denied, Outcome::DeniedStolen].into_iter().enumerate() {
            log.extend(encode_record(&id, &rec(i as u8, o)));
        }
        let (records, valid) = decode_log(&log).unwrap();
        assert_eq!(valid, log.len());
        assert_eq!(records.len(), 3);
        assert_eq!(records[2], (id, rec(2, Outcome::DeniedStolen)));
    }

    #[test]
    fn torn_tail_is_dropped() {
        let id = ContentId::from_bytes([4; 16]);
        let mut log = encode_record(&id, &rec(1, Outcome::Granted));
        let first = log.len();
        let second = encode_record(&id, &rec(2, Outcome::Granted));
        for cut in 1..second.len() {
            let mut torn = log.clone();
            torn.extend_from_slice(&second[..cut]);
            let (records, valid) = decode_log(&torn).unwrap();
            assert_eq!(records.len(), 1, "cut {cut}");
            assert_eq!(valid, first);
        }
        log.extend(second);
        assert_eq!(decode_log(&log).unwrap().0.len(), 2);
    }

    #[test]
    fn mid_log_corruption_is_an_error() {
        let id = ContentId::from_bytes([4; 16]);
        let mut log = encode_record(&id, &rec(1, Outcome::Granted));
        log.extend(encode_record(&id, &rec(2, Outcome::Granted)));
        log[10] ^= 0xFF;
        assert!(matches!(decode_log(&log), Err(LedgerError::Corrupt(_))));
    }

    #[test]
    fn snapshot_round_trip_and_checksum() {
        let mut m = BTreeMap::new();
        m.insert(ContentId::from_bytes([1; 16]), Registration { master_key: [2; 32], policy: PolicyMode::Strict });
        m.insert(
            ContentId::from_bytes([3; 16]),
            Registration { master_key: [4; 32], policy: PolicyMode::MassiveFraudPrevention { threshold: 7 } },
        );
        let bytes = encode_snapshot(&m);
        assert_eq!(decode_snapshot(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(decode_snapshot(&bad).is_err());
    }

    #[test]
    fn store_reopen_truncates_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let id = ContentId::from_bytes([8; 16]);
        {
            let (store, _) = LedgerStore::open(dir.path()).unwrap();
            let mut regs = BTreeMap::new();
            regs.insert(id, Registration { master_key: [0; 32], policy: PolicyMode::MonitorOnly });
            store.write_snapshot(&regs).unwrap();
            store.append(&id, &rec(1, Outcome::Granted)).unwrap();
        }
        let log_path = dir.path().join(LOG_FILE);
        let good_len = fs::metadata(&log_path).unwrap().len();
        let mut f = OpenOptions::new().append(true).open(&log_path).unwrap();
        f.write_all(&encode_record(&id, &rec(2, Outcome::Granted))[..7]).unwrap();
        drop(f);

        let (store, products) = LedgerStore::open(dir.path()).unwrap();
        assert_eq!(products[&id].history().len(), 1);
        assert_eq!(fs::metadata(&log_path).unwrap().len(), good_len);
        store.append(&id, &rec(3, Outcome::Granted)).unwrap();
        drop(store);
        let (_, products) = LedgerStore::open(dir.path()).unwrap();
        assert_eq!(products[&id].stats().grants, 2);
    }
}
