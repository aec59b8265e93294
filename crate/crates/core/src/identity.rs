//! Machine attributes and the fingerprint derived from them.
//!
//! The fingerprint digest is `SHA-256` over the canonical serialization
//! `name=value\n` for every attribute in name order. Each attribute is also
//! hashed on its own (`SHA-256("name=value")`) so a stored fingerprint can be
//! compared against a live machine attribute by attribute, tolerating a
//! bounded amount of hardware drift.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::crypto::{self, Digest256};

pub const CPU_MODEL: &str = "cpu_model";
pub const BOARD_SERIAL: &str = "board_serial";
pub const DISK_SERIAL: &str = "disk_serial";
pub const MAC_ADDRESS: &str = "mac_address";
pub const OS_FAMILY: &str = "os_family";
pub const HOSTNAME: &str = "hostname";

/// Attributes every probe is asked for.
pub const EXPECTED_ATTRIBUTES: [&str; 6] = [CPU_MODEL, BOARD_SERIAL, DISK_SERIAL, MAC_ADDRESS, OS_FAMILY, HOSTNAME];

pub const UNAVAILABLE: &str = "unavailable";

/// Number of attributes allowed to drift before a machine counts as different.
pub const DEFAULT_TOLERANCE: usize = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdentityError {
    #[error("cannot fingerprint this machine: no attribute is available")]
    NoAttributes,
    #[error("attribute {0:?} reported more than once")]
    DuplicateAttribute(String),
    #[error("invalid attribute name {0:?}")]
    InvalidName(String),
    #[error("probe file: {0}")]
    ProbeFile(String),
}

/// Source of raw machine attributes. Order of the returned pairs does not
/// matter; `None` marks an attribute the probe could not read.
pub trait SystemProbe {
    fn snapshot(&self) -> Vec<(String, Option<String>)>;
}

/// Canonical attribute set: unique names, sorted, values trimmed and
/// lowercased, missing values spelled `unavailable`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttributeSet {
    entries: Vec<(String, String)>,
}

impl AttributeSet {
    pub fn new<N, V>(raw: impl IntoIterator<Item = (N, Option<V>)>) -> Result<Self, IdentityError>
    where
        N: AsRef<str>,
        V: AsRef<str>,
    {
        let mut map = BTreeMap::new();
        for (name, value) in raw {
            let name = name.as_ref().trim();
            if name.is_empty() || name.contains(['=', '\n', '\r']) {
                return Err(IdentityError::InvalidName(name.to_owned()));
            }
            let value = value.map(|v| canonical_value(v.as_ref())).filter(|v| !v.is_empty());
            if map.insert(name.to_owned(), value.unwrap_or_else(|| UNAVAILABLE.to_owned())).is_some() {
                return Err(IdentityError::DuplicateAttribute(name.to_owned()));
            }
        }
        Ok(Self { entries: map.into_iter().collect() })
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.entries
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
            .map(|i| self.entries[i].1.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copy with one attribute replaced or added.
    pub fn with(&self, name: &str, value: &str) -> Self {
        let mut raw: Vec<(String, Option<String>)> = self
            .entries
            .iter()
            .filter(|(n, _)| n != name)
            .map(|(n, v)| (n.clone(), Some(v.clone())))
            .collect();
        raw.push((name.to_owned(), Some(value.to_owned())));
        Self::new(raw).expect("names already validated")
    }

    /// `name=value\n` per attribute, in name order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (n, v) in &self.entries {
            out.extend_from_slice(n.as_bytes());
            out.push(b'=');
            out.extend_from_slice(v.as_bytes());
            out.push(b'\n');
        }
        out
    }
}

fn canonical_value(v: &str) -> String {
    v.trim().replace(['\n', '\r'], " ").to_lowercase()
}

/// Queries the probe for every expected attribute and canonicalizes the
/// result. Expected attributes the probe omits are recorded as unavailable.
pub fn collect_attributes(probe: &dyn SystemProbe) -> Result<AttributeSet, IdentityError> {
    let mut raw = probe.snapshot();
    let present: BTreeSet<String> = raw.iter().map(|(n, _)| n.trim().to_owned()).collect();
    for name in EXPECTED_ATTRIBUTES {
        if !present.contains(name) {
            raw.push((name.to_owned(), None));
        }
    }
    let set = AttributeSet::new(raw)?;
    if set.entries.iter().all(|(_, v)| v == UNAVAILABLE) {
        return Err(IdentityError::NoAttributes);
    }
    Ok(set)
}

/// The system identity a license is locked to.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MachineFingerprint {
    pub digest: Digest256,
    /// One digest per attribute, in canonical name order.
    pub attribute_digests: Vec<Digest256>,
}

impl MachineFingerprint {
    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }
}

pub fn fingerprint(attrs: &AttributeSet) -> MachineFingerprint {
    let attribute_digests = attrs
        .entries
        .iter()
        .map(|(n, v)| crypto::hash(&[n.as_bytes(), b"=", v.as_bytes()]))
        .collect();
    MachineFingerprint { digest: crypto::hash(&[&attrs.canonical_bytes()]), attribute_digests }
}

/// Number of attributes that differ between two per-attribute digest lists.
///
/// Attribute digests commit to the attribute name, so a name present on one
/// side only shows up as a mismatch.
pub fn attribute_mismatches(stored: &[Digest256], current: &[Digest256]) -> usize {
    let a: BTreeSet<&Digest256> = stored.iter().collect();
    let b: BTreeSet<&Digest256> = current.iter().collect();
    a.difference(&b).count().max(b.difference(&a).count())
}

/// True when at most `tolerance` attributes changed since `stored` was taken.
pub fn matches(stored: &MachineFingerprint, current: &AttributeSet, tolerance: usize) -> bool {
    let live = fingerprint(current);
    if tolerance == 0 {
        return live.digest == stored.digest;
    }
    attribute_mismatches(&stored.attribute_digests, &live.attribute_digests) <= tolerance
}

/// Probe backed by fixed values, used for tests and `--probe fake:<file>`.
#[derive(Debug, Clone, Default)]
pub struct FakeProbe {
    values: Vec<(String, Option<String>)>,
}

impl FakeProbe {
    pub fn new<N: Into<String>, V: Into<String>>(values: impl IntoIterator<Item = (N, V)>) -> Self {
        Self { values: values.into_iter().map(|(n, v)| (n.into(), Some(v.into()))).collect() }
    }

    pub fn without(mut self, name: &str) -> Self {
        for (n, v) in &mut self.values {
            if n == name {
                *v = None;
            }
        }
        self
    }

    /// Parses `name=value` lines. Blank lines and `#` comments are ignored;
    /// an empty value means the attribute is unavailable.
    pub fn parse(text: &str) -> Result<Self, IdentityError> {
        let mut values = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (n, v) = line
                .split_once('=')
                .ok_or_else(|| IdentityError::ProbeFile(format!("line {}: expected name=value", i + 1)))?;
            let v = v.trim();
            values.push((n.trim().to_owned(), (!v.is_empty()).then(|| v.to_owned())));
        }
        Ok(Self { values })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, IdentityError> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| IdentityError::ProbeFile(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }
}

impl SystemProbe for FakeProbe {
    fn snapshot(&self) -> Vec<(String, Option<String>)> {
        self.values.clone()
    }
}

/// Read-only probe of the running host.
///
/// On Linux this reads `/proc` and `/sys`; elsewhere only the OS family and
/// hostname are reported.
#[derive(Debug, Clone, Copy, Default)]
pub struct HostProbe;

impl SystemProbe for HostProbe {
    fn snapshot(&self) -> Vec<(String, Option<String>)> {
        vec![
            (CPU_MODEL.into(), host::cpu_model()),
            (BOARD_SERIAL.into(), host::board_serial()),
            (DISK_SERIAL.into(), host::disk_serial()),
            (MAC_ADDRESS.into(), host::mac_address()),
            (OS_FAMILY.into(), Some(std::env::consts::OS.to_owned())),
            (HOSTNAME.into(), host::hostname()),
        ]
    }
}

mod host {
    use super::*;

    fn read_trimmed(path: impl AsRef<Path>) -> Option<String> {
        let s = fs::read_to_string(path).ok()?;
        let s = s.trim();
        (!s.is_empty()).then(|| s.to_owned())
    }

    fn sorted_dir(path: &str) -> io::Result<Vec<std::path::PathBuf>> {
        let mut v: Vec<_> = fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        v.sort();
        Ok(v)
    }

    pub fn cpu_model() -> Option<String> {
        let info = fs::read_to_string("/proc/cpuinfo").ok()?;
        info.lines()
            .find(|l| l.starts_with("model name") || l.starts_with("Hardware") || l.starts_with("cpu model"))
            .and_then(|l| l.split_once(':'))
            .map(|(_, v)| v.trim().to_owned())
    }

    pub fn board_serial() -> Option<String> {
        ["/sys/class/dmi/id/board_serial", "/sys/class/dmi/id/product_uuid", "/etc/machine-id"]
            .iter()
            .find_map(read_trimmed)
    }

    pub fn disk_serial() -> Option<String> {
        sorted_dir("/sys/block").ok()?.into_iter().find_map(|dev| {
            let name = dev.file_name()?.to_str()?.to_owned();
            if name.starts_with("loop") || name.starts_with("ram") {
                return None;
            }
            read_trimmed(dev.join("device/serial")).or_else(|| read_trimmed(dev.join("serial")))
        })
    }

    pub fn mac_address() -> Option<String> {
        sorted_dir("/sys/class/net").ok()?.into_iter().find_map(|iface| {
            if iface.file_name()? == "lo" {
                return None;
            }
            read_trimmed(iface.join("address")).filter(|a| a != "00:00:00:00:00:00")
        })
    }

    pub fn hostname() -> Option<String> {
        read_trimmed("/proc/sys/kernel/hostname")
            .or_else(|| read_trimmed("/etc/hostname"))
            .or_else(|| std::env::var("COMPUTERNAME").ok())
            .or_else(|| std::env::var("HOSTNAME").ok())
    }
}
