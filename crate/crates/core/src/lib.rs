//! Content protection toolkit: seal media into encrypted GZIP-framed
//! containers, lock per-title content keys to a machine fingerprint, run
//! per-copy activation policies against an append-only ledger, and play
//! content back behind a process guard.
//!
//! The lifecycle, end to end:
//!
//! 1. A producer calls [`container::pack`] with a fresh [`container::PackagingSecret`].
//! 2. The installed client collects an [`identity::AttributeSet`] and derives a
//!    [`identity::MachineFingerprint`].
//! 3. The client sends an [`server::ActivationRequest`] to the activation
//!    service, which applies the product's [`server::PolicyMode`].
//! 4. On a grant the service issues a signed [`licensing::LicenseFile`].
//! 5. [`client::play`] runs the [`guard`], unwraps the content key and
//!    streams the recovered plaintext into a sink.
//!
//! The toolkit-wide primitives are fixed: SHA-256 for every digest,
//! XChaCha20-Poly1305 for authenticated encryption and Ed25519 for license
//! signatures.

pub mod client;
pub mod container;
pub mod crypto;
pub mod guard;
pub mod identity;
pub mod licensing;
pub mod server;
pub mod simulation;

pub use container::{ContainerError, ContainerHeader, ContentId, EncryptedContainer, PackagingSecret};
pub use identity::{AttributeSet, MachineFingerprint, SystemProbe};
pub use licensing::{LicenseError, LicenseFile, ServerKey};
pub use server::{ActivationRequest, ActivationResponse, ActivationService, DenialReason, PolicyMode};
