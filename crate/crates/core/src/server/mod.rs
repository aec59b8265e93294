//! The activation authority: product registrations, per-copy policies, the
//! activation ledger and license issuance.

pub mod ledger;
pub mod policy;
mod service;
pub mod wire;

pub use ledger::{ActivationRecord, LedgerError, LedgerStats, LedgerStore, Outcome, ProductStatus, Registration};
pub use policy::{decide, Decision, DenialReason, PolicyMode, DEFAULT_FRAUD_THRESHOLD};
pub use service::{ActivationService, FaultPoint, ServiceError};
pub use wire::{ActivationRequest, ActivationResponse};
