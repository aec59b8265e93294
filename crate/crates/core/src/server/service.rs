use std::collections::BTreeMap;
use std::io;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use thiserror::Error;

use crate::container::ContentId;
use crate::crypto::KEY_LEN;
use crate::identity::MachineFingerprint;
use crate::licensing::{self, ServerKey, ServerPublicKey};

use super::ledger::{ActivationRecord, LedgerError, LedgerStats, LedgerStore, ProductLedger, Registration};
use super::policy::{decide, Decision, DenialReason, PolicyMode};
use super::wire::{ActivationRequest, ActivationResponse};

#[derive(Debug, Error)]
pub enum ServiceError {
    /// Malformed request; nothing was recorded.
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("content {0} is already registered")]
    Conflict(ContentId),
    #[error("content {0} is not registered")]
    NotFound(ContentId),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("ledger write failed: {0}")]
    Storage(#[from] io::Error),
}

/// Points where tests can inject a crash.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    /// The activation record is durable but the response has not been sent.
    AfterAppend,
}

type FaultHook = Box<dyn Fn(FaultPoint) + Send + Sync>;

/// Thread-safe activation server state.
///
/// Requests for one content id are serialized by that product's mutex, which
/// covers decide, license issuance and the ledger append. Different products
/// proceed in parallel.
pub struct ActivationService {
    products: RwLock<BTreeMap<ContentId, Arc<Mutex<ProductLedger>>>>,
    // Mirror of the registration table; its lock orders snapshot writes.
    registrations: Mutex<BTreeMap<ContentId, Registration>>,
    store: Option<LedgerStore>,
    signer: Mutex<ServerKey>,
    public: ServerPublicKey,
    fault: Option<FaultHook>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl ActivationService {
    /// A service without persistence.
    pub fn in_memory(key: ServerKey) -> Self {
        Self::build(key, None, BTreeMap::new())
    }

    /// Loads the ledger directory `dir` and persists every change to it.
    pub fn open(dir: impl AsRef<Path>, key: ServerKey) -> Result<Self, LedgerError> {
        let (store, products) = LedgerStore::open(dir)?;
        Ok(Self::build(key, Some(store), products))
    }

    fn build(key: ServerKey, store: Option<LedgerStore>, products: BTreeMap<ContentId, ProductLedger>) -> Self {
        let registrations = products.iter().map(|(id, p)| (*id, p.registration.clone())).collect();
        Self {
            products: RwLock::new(products.into_iter().map(|(id, p)| (id, Arc::new(Mutex::new(p)))).collect()),
            registrations: Mutex::new(registrations),
            store,
            public: key.public_key(),
            signer: Mutex::new(key),
            fault: None,
        }
    }

    pub fn with_fault_hook(mut self, hook: impl Fn(FaultPoint) + Send + Sync + 'static) -> Self {
        self.fault = Some(Box::new(hook));
        self
    }

    pub fn public_key(&self) -> ServerPublicKey {
        self.public
    }

    fn product(&self, id: &ContentId) -> Option<Arc<Mutex<ProductLedger>>> {
        self.products.read().unwrap_or_else(|p| p.into_inner()).get(id).cloned()
    }

    pub fn products(&self) -> Vec<ContentId> {
        self.products.read().unwrap_or_else(|p| p.into_inner()).keys().copied().collect()
    }

    pub fn register_product(
        &self,
        content_id: ContentId,
        master_key: [u8; KEY_LEN],
        policy: PolicyMode,
    ) -> Result<(), ServiceError> {
        policy.validate().map_err(ServiceError::InvalidPolicy)?;
        let mut regs = lock(&self.registrations);
        if regs.contains_key(&content_id) {
            return Err(ServiceError::Conflict(content_id));
        }
        let reg = Registration { master_key, policy };
        let mut next = regs.clone();
        next.insert(content_id, reg.clone());
        if let Some(store) = &self.store {
            store.write_snapshot(&next)?;
        }
        *regs = next;
        self.products
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(content_id, Arc::new(Mutex::new(ProductLedger::new(reg))));
        Ok(())
    }

    /// Changes the policy for future requests. History and a stolen status
    /// are left untouched.
    pub fn set_policy(&self, content_id: ContentId, policy: PolicyMode) -> Result<(), ServiceError> {
        policy.validate().map_err(ServiceError::InvalidPolicy)?;
        let mut regs = lock(&self.registrations);
        let product = self.product(&content_id).ok_or(ServiceError::NotFound(content_id))?;
        let mut next = regs.clone();
        next.get_mut(&content_id).ok_or(ServiceError::NotFound(content_id))?.policy = policy;
        if let Some(store) = &self.store {
            store.write_snapshot(&next)?;
        }
        *regs = next;
        lock(&product).registration.policy = policy;
        Ok(())
    }

    pub fn ledger_stats(&self, content_id: ContentId) -> Result<LedgerStats, ServiceError> {
        let product = self.product(&content_id).ok_or(ServiceError::NotFound(content_id))?;
        let stats = lock(&product).stats();
        Ok(stats)
    }

    pub fn policy(&self, content_id: ContentId) -> Result<PolicyMode, ServiceError> {
        let product = self.product(&content_id).ok_or(ServiceError::NotFound(content_id))?;
        let policy = lock(&product).registration.policy;
        Ok(policy)
    }

    pub fn history(&self, content_id: ContentId) -> Result<Vec<ActivationRecord>, ServiceError> {
        let product = self.product(&content_id).ok_or(ServiceError::NotFound(content_id))?;
        let history = lock(&product).history().to_vec();
        Ok(history)
    }

    /// Applies the product's policy to one request.
    ///
    /// Every decided request leaves exactly one ledger record, written
    /// durably before a license is handed back. Requests for unknown content
    /// are refused without a record; malformed requests are protocol errors.
    pub fn activate(&self, req: &ActivationRequest) -> Result<ActivationResponse, ServiceError> {
        req.validate().map_err(ServiceError::Protocol)?;
        let Some(product) = self.product(&req.content_id) else {
            return Ok(ActivationResponse::Denied { reason: DenialReason::UnknownContent });
        };
        let mut product = lock(&product);

        let decision = decide(&product.registration.policy, product.history(), &req.fingerprint);
        let license = match decision {
            Decision::Granted => {
                let fp = MachineFingerprint { digest: req.fingerprint, attribute_digests: req.attribute_digests.clone() };
                let signer = lock(&self.signer);
                Some(licensing::issue_license(req.content_id, &fp, &product.registration.master_key, &signer))
            }
            _ => None,
        };

        let record = ActivationRecord::new(
            req.fingerprint,
            req.attribute_digests.clone(),
            req.email.clone(),
            licensing::unix_now(),
            decision.outcome(),
        );
        if let Some(store) = &self.store {
            store.append(&req.content_id, &record)?;
        }
        if let Some(hook) = &self.fault {
            hook(FaultPoint::AfterAppend);
        }
        product.append(record);

        Ok(match (decision, license) {
            (Decision::Granted, Some(license)) => ActivationResponse::Granted { license },
            (Decision::Denied(reason), _) => ActivationResponse::Denied { reason },
            (Decision::MarkStolenAndDeny, _) => ActivationResponse::Denied { reason: DenialReason::Stolen },
            (Decision::Granted, None) => unreachable!("grant always carries a license"),
        })
    }
}

impl std::fmt::Debug for ActivationService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ActivationService")
            .field("public", &self.public)
            .field("persistent", &self.store.is_some())
            .finish_non_exhaustive()
    }
}
