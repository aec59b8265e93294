//! Per-product activation policies and the pure decision function.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crypto::Digest256;

use super::ledger::{ActivationRecord, Outcome, ProductStatus};

/// Threshold used when massive-fraud prevention is chosen without one.
pub const DEFAULT_FRAUD_THRESHOLD: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PolicyMode {
    /// Grant everything, only record.
    MonitorOnly,
    /// Grant up to `threshold` distinct machines, then mark the copy stolen
    /// and refuse everyone from then on.
    MassiveFraudPrevention { threshold: u32 },
    /// One machine plus `extra_activations` complimentary ones; re-activating
    /// a known machine is free.
    FairUse { extra_activations: u32 },
    /// A single machine; re-activation on that machine only.
    Strict,
}

impl PolicyMode {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            PolicyMode::MassiveFraudPrevention { threshold: 0 } => Err("fraud threshold must be at least 1".into()),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyMode::MonitorOnly => f.write_str("monitor"),
            PolicyMode::MassiveFraudPrevention { threshold } => write!(f, "fraud:{threshold}"),
            PolicyMode::FairUse { extra_activations } => write!(f, "fair-use:{extra_activations}"),
            PolicyMode::Strict => f.write_str("strict"),
        }
    }
}

/// Parses `monitor`, `strict`, `fair-use[:N]` or `fraud[:T]`.
impl FromStr for PolicyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |default: u32| -> Result<u32, String> {
            arg.map_or(Ok(default), |a| a.parse().map_err(|_| format!("invalid number {a:?} in policy {s:?}")))
        };
        let mode = match (name, arg) {
            ("monitor" | "monitor-only", None) => PolicyMode::MonitorOnly,
            ("strict", None) => PolicyMode::Strict,
            ("fair-use", _) => PolicyMode::FairUse { extra_activations: num(1)? },
            ("fraud" | "massive-fraud", _) => PolicyMode::MassiveFraudPrevention { threshold: num(DEFAULT_FRAUD_THRESHOLD)? },
            _ => return Err(format!("unknown policy {s:?}; expected monitor, strict, fair-use[:N] or fraud[:T]")),
        };
        mode.validate()?;
        Ok(mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenialReason {
    LimitReached,
    Stolen,
    UnknownContent,
    WrongMachine,
}

impl DenialReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DenialReason::LimitReached => "limit_reached",
            DenialReason::Stolen => "stolen",
            DenialReason::UnknownContent => "unknown_content",
            DenialReason::WrongMachine => "wrong_machine",
        }
    }
}

impl fmt::Display for DenialReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Granted,
    Denied(DenialReason),
    MarkStolenAndDeny,
}

impl Decision {
    pub fn outcome(&self) -> Outcome {
        match self {
            Decision::Granted => Outcome::Granted,
            Decision::Denied(DenialReason::Stolen) | Decision::MarkStolenAndDeny => Outcome::DeniedStolen,
            Decision::Denied(_) => Outcome::Denied,
        }
    }

    pub fn is_granted(&self) -> bool {
        matches!(self, Decision::Granted)
    }
}

/// Status implied by a product's history: stolen once any request was
/// refused as stolen.
pub fn status_of(history: &[ActivationRecord]) -> ProductStatus {
    if history.iter().any(|r| r.outcome == Outcome::DeniedStolen) {
        ProductStatus::Stolen
    } else {
        ProductStatus::Active
    }
}

/// Distinct fingerprints that have been granted at least once.
pub fn granted_machines(history: &[ActivationRecord]) -> BTreeSet<&Digest256> {
    history.iter().filter(|r| r.outcome == Outcome::Granted).map(|r| &r.fingerprint_digest).collect()
}

/// Decides one activation request. Pure in `(policy, history, fingerprint)`.
///
/// A stolen copy is refused under every mode; a machine that was granted
/// before is granted again under every mode.
pub fn decide(policy: &PolicyMode, history: &[ActivationRecord], fingerprint: &Digest256) -> Decision {
    if status_of(history) == ProductStatus::Stolen {
        return Decision::Denied(DenialReason::Stolen);
    }
    let granted = granted_machines(history);
    if granted.contains(fingerprint) {
        return Decision::Granted;
    }
    let distinct = granted.len() as u64;
    match *policy {
        PolicyMode::MonitorOnly => Decision::Granted,
        PolicyMode::MassiveFraudPrevention { threshold } => {
            if distinct < threshold as u64 {
                Decision::Granted
            } else {
                Decision::MarkStolenAndDeny
            }
        }
        PolicyMode::FairUse { extra_activations } => {
            if distinct < 1 + extra_activations as u64 {
                Decision::Granted
            } else {
                Decision::Denied(DenialReason::LimitReached)
            }
        }
        PolicyMode::Strict => {
            if distinct == 0 {
                Decision::Granted
            } else {
                Decision::Denied(DenialReason::WrongMachine)
            }
        }
    }
}
