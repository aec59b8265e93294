//! Activation messages exchanged between client and server.
//!
//! Both travel as JSON; digests and the license are lowercase hex.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::container::ContentId;
use crate::crypto::{hex_serde, Digest256};
use crate::identity::MachineFingerprint;
use crate::licensing::LicenseFile;

use super::policy::DenialReason;

pub const WIRE_VERSION: u32 = 1;
const MAX_ATTRIBUTE_DIGESTS: usize = 64;
const MAX_EMAIL_LEN: usize = 254;

fn wire_version() -> u32 {
    WIRE_VERSION
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationRequest {
    #[serde(default = "wire_version")]
    pub version: u32,
    pub content_id: ContentId,
    #[serde(with = "hex_serde")]
    pub fingerprint: Digest256,
    #[serde(with = "hex_serde::list")]
    pub attribute_digests: Vec<Digest256>,
    pub email: String,
}

impl ActivationRequest {
    pub fn new(content_id: ContentId, fp: &MachineFingerprint, email: impl Into<String>) -> Self {
        Self {
            version: WIRE_VERSION,
            content_id,
            fingerprint: fp.digest,
            attribute_digests: fp.attribute_digests.clone(),
            email: email.into(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.version != WIRE_VERSION {
            return Err(format!("unsupported protocol version {}", self.version));
        }
        validate_email(&self.email)?;
        if self.attribute_digests.is_empty() || self.attribute_digests.len() > MAX_ATTRIBUTE_DIGESTS {
            return Err(format!("expected 1 to {MAX_ATTRIBUTE_DIGESTS} attribute digests"));
        }
        Ok(())
    }
}

/// One `@`, non-empty local and domain parts, no whitespace.
pub fn validate_email(email: &str) -> Result<(), String> {
    let err = || format!("invalid e-mail address {email:?}");
    if email.len() > MAX_EMAIL_LEN || email.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return Err(err());
    }
    match email.split_once('@') {
        Some((local, domain)) if !local.is_empty() && !domain.is_empty() && !domain.contains('@') => Ok(()),
        _ => Err(err()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum ActivationResponse {
    Granted {
        #[serde(with = "license_hex")]
        license: LicenseFile,
    },
    Denied {
        reason: DenialReason,
    },
}

mod license_hex {
    use super::*;
    use serde::de::Error as _;

    pub fn serialize<S: Serializer>(lic: &LicenseFile, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(lic.to_bytes()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<LicenseFile, D::Error> {
        let raw = hex::decode(String::deserialize(d)?).map_err(D::Error::custom)?;
        LicenseFile::from_bytes(&raw).map_err(D::Error::custom)
    }
}
