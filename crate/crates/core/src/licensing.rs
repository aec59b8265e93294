//! Node-locked license files.
//!
//! A license carries the title's content key wrapped under
//! `SHA-256(fingerprint_digest || "wrap")` and an Ed25519 signature from the
//! activation server over every other field. Unwrapping requires both a valid
//! signature and a live machine that matches the stored fingerprint within
//! the configured tolerance. Because the wrap key comes from the *stored*
//! digest, a machine that drifted by a few attributes still recovers the key.
//!
//! Binary layout (`.eclic`), all integers little-endian:
//!
//! ```text
//! "ECLC" | version u8 = 1
//! u32 len | content_id (16)
//! u32 len | fingerprint_digest (32)
//! u32 len | attribute_digests (32 * n)
//! u32 len | wrapped_key (48)
//! u32 len | wrap_nonce (24)
//! u32 len | issued_at (u64, seconds since the Unix epoch)
//! u32 len | signature (64)         <- over every byte before this field
//! ```

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use thiserror::Error;

use crate::container::ContentId;
use crate::crypto::{self, Digest256, DIGEST_LEN, KEY_LEN, NONCE_LEN, TAG_LEN};
use crate::identity::{self, AttributeSet, MachineFingerprint};

pub const FILE_EXTENSION: &str = "eclic";
const MAGIC: &[u8; 4] = b"ECLC";
const FORMAT_VERSION: u8 = 1;
const WRAPPED_LEN: usize = KEY_LEN + TAG_LEN;
const SIGNATURE_LEN: usize = 64;
const MAX_ATTRIBUTES: usize = 64;

#[derive(Debug, Error)]
pub enum LicenseError {
    #[error("malformed license file: {0}")]
    Parse(&'static str),
    #[error("license signature is not valid")]
    BadSignature,
    #[error("license not valid for this machine")]
    WrongMachine,
    #[error("license key wrap is corrupt")]
    Corrupt,
    #[error("invalid server key: {0}")]
    InvalidKey(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// The activation server's signing identity.
pub struct ServerKey {
    signing: SigningKey,
}

impl ServerKey {
    pub fn generate() -> Self {
        Self::from_seed(crypto::random_bytes())
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self { signing: SigningKey::from_bytes(&seed) }
    }

    pub fn seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn public_key(&self) -> ServerPublicKey {
        ServerPublicKey(self.signing.verifying_key())
    }

    /// Loads a 32-byte seed, creating one if the file does not exist yet.
    pub fn load_or_create(path: impl AsRef<Path>) -> Result<Self, LicenseError> {
        let path = path.as_ref();
        match fs::read(path) {
            Ok(bytes) => {
                let seed: [u8; 32] = bytes
                    .as_slice()
                    .try_into()
                    .map_err(|_| LicenseError::InvalidKey(format!("{} is not a 32-byte seed", path.display())))?;
                Ok(Self::from_seed(seed))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let key = Self::generate();
                write_atomic(path, &key.seed())?;
                Ok(key)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn sign(&self, msg: &[u8]) -> [u8; SIGNATURE_LEN] {
        self.signing.sign(msg).to_bytes()
    }
}

impl fmt::Debug for ServerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerKey").field("public", &self.public_key()).finish_non_exhaustive()
    }
}

/// Verification half of [`ServerKey`], distributed with the client.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct ServerPublicKey(VerifyingKey);

impl ServerPublicKey {
    pub fn from_bytes(bytes: &[u8; 32]) -> Result<Self, LicenseError> {
        VerifyingKey::from_bytes(bytes).map(Self).map_err(|e| LicenseError::InvalidKey(e.to_string()))
    }

    pub fn parse_hex(s: &str) -> Result<Self, LicenseError> {
        let raw = hex::decode(s.trim()).map_err(|e| LicenseError::InvalidKey(e.to_string()))?;
        let arr: [u8; 32] = raw
            .as_slice()
            .try_into()
            .map_err(|_| LicenseError::InvalidKey("expected 32 bytes".into()))?;
        Self::from_bytes(&arr)
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }
}

impl fmt::Debug for ServerPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ServerPublicKey({})", self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LicenseFile {
    pub content_id: ContentId,
    pub fingerprint_digest: Digest256,
    pub attribute_digests: Vec<Digest256>,
    pub wrapped_key: [u8; WRAPPED_LEN],
    pub wrap_nonce: [u8; NONCE_LEN],
    pub issued_at: u64,
    pub server_signature: [u8; SIGNATURE_LEN],
}

fn wrap_key(fingerprint_digest: &Digest256) -> [u8; KEY_LEN] {
    crypto::hash(&[fingerprint_digest, b"wrap"])
}

fn put_field(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

impl LicenseFile {
    /// Canonical serialization of every field covered by the signature.
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(256 + self.attribute_digests.len() * DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        put_field(&mut out, self.content_id.as_bytes());
        put_field(&mut out, &self.fingerprint_digest);
        put_field(&mut out, &self.attribute_digests.concat());
        put_field(&mut out, &self.wrapped_key);
        put_field(&mut out, &self.wrap_nonce);
        put_field(&mut out, &self.issued_at.to_le_bytes());
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.signed_bytes();
        put_field(&mut out, &self.server_signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LicenseError> {
        let mut r = FieldReader { rest: bytes };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(LicenseError::Parse("bad magic"));
        }
        if r.take(1)?[0] != FORMAT_VERSION {
            return Err(LicenseError::Parse("unsupported version"));
        }
        let content_id = ContentId::from_slice(r.field_exact(ContentId::LEN)?).expect("length checked");
        let fingerprint_digest = r.field_array::<DIGEST_LEN>()?;
        let digests = r.field()?;
        if digests.len() % DIGEST_LEN != 0 || digests.len() / DIGEST_LEN > MAX_ATTRIBUTES {
            return Err(LicenseError::Parse("attribute digest list length"));
        }
        let attribute_digests = digests.chunks_exact(DIGEST_LEN).map(|c| c.try_into().unwrap()).collect();
        let wrapped_key = r.field_array::<WRAPPED_LEN>()?;
        let wrap_nonce = r.field_array::<NONCE_LEN>()?;
        let issued_at = u64::from_le_bytes(r.field_array::<8>()?);
        let server_signature = r.field_array::<SIGNATURE_LEN>()?;
        if !r.rest.is_empty() {
            return Err(LicenseError::Parse("trailing bytes"));
        }
        Ok(Self {
            content_id,
            fingerprint_digest,
            attribute_digests,
            wrapped_key,
            wrap_nonce,
            issued_at,
            server_signature,
        })
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, LicenseError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<(), LicenseError> {
        write_atomic(path.as_ref(), &self.to_bytes())?;
        Ok(())
    }

    /// The fingerprint this license was issued for.
    pub fn stored_fingerprint(&self) -> MachineFingerprint {
        MachineFingerprint { digest: self.fingerprint_digest, attribute_digests: self.attribute_digests.clone() }
    }
}

struct FieldReader<'a> {
    rest: &'a [u8],
}

impl<'a> FieldReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LicenseError> {
        if self.rest.len() < n {
            return Err(LicenseError::Parse("truncated"));
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    fn field(&mut self) -> Result<&'a [u8], LicenseError> {
        let len = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        self.take(len)
    }

    fn field_exact(&mut self, n: usize) -> Result<&'a [u8], LicenseError> {
        let f = self.field()?;
        if f.len() != n {
            return Err(LicenseError::Parse("field length"));
        }
        Ok(f)
    }

    fn field_array<const N: usize>(&mut self) -> Result<[u8; N], LicenseError> {
        Ok(self.field_exact(N)?.try_into().unwrap())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Wraps `master_key` for the machine `fp` and signs the result.
pub fn issue_license(
    content_id: ContentId,
    fp: &MachineFingerprint,
    master_key: &[u8; KEY_LEN],
    signing_key: &ServerKey,
) -> LicenseFile {
    issue_license_at(content_id, fp, master_key, signing_key, unix_now())
}

pub fn issue_license_at(
    content_id: ContentId,
    fp: &MachineFingerprint,
    master_key: &[u8; KEY_LEN],
    signing_key: &ServerKey,
    issued_at: u64,
) -> LicenseFile {
    let wrap_nonce: [u8; NONCE_LEN] = crypto::random_bytes();
    let sealed = crypto::seal(&wrap_key(&fp.digest), &wrap_nonce, content_id.as_bytes(), master_key);
    let mut lic = LicenseFile {
        content_id,
        fingerprint_digest: fp.digest,
        attribute_digests: fp.attribute_digests.clone(),
        wrapped_key: sealed.try_into().expect("32-byte key plus 16-byte tag"),
        wrap_nonce,
        issued_at,
        server_signature: [0; SIGNATURE_LEN],
    };
    lic.server_signature = signing_key.sign(&lic.signed_bytes());
    lic
}

pub fn verify_license(lic: &LicenseFile, server: &ServerPublicKey) -> bool {
    let sig = Signature::from_bytes(&lic.server_signature);
    server.0.verify(&lic.signed_bytes(), &sig).is_ok()
}

/// Recovers the content key on a machine that matches the license.
///
/// Both gates are checked here: the server signature first, then the
/// fingerprint match. Nothing is decrypted unless both pass.
pub fn unwrap_content_key(
    lic: &LicenseFile,
    server: &ServerPublicKey,
    current: &AttributeSet,
    tolerance: usize,
) -> Result<[u8; KEY_LEN], LicenseError> {
    check_license(lic, server, current, tolerance)?;
    let key = crypto::open(
        &wrap_key(&lic.fingerprint_digest),
        &lic.wrap_nonce,
        lic.content_id.as_bytes(),
        &lic.wrapped_key,
    )
    .map_err(|_| LicenseError::Corrupt)?;
    Ok(key.try_into().expect("wrapped key is 32 bytes"))
}

/// Signature and machine gates without touching the wrapped key.
pub fn check_license(
    lic: &LicenseFile,
    server: &ServerPublicKey,
    current: &AttributeSet,
    tolerance: usize,
) -> Result<(), LicenseError> {
    if !verify_license(lic, server) {
        return Err(LicenseError::BadSignature);
    }
    if !identity::matches(&lic.stored_fingerprint(), current, tolerance) {
        return Err(LicenseError::WrongMachine);
    }
    Ok(())
}
