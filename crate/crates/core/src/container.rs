//! Sealed media containers.
//!
//! A container is a GZIP member whose header carries an `EC` extra subfield
//! (content id and cipher nonce) and whose body is the DEFLATE stream of the
//! plaintext, encrypted with XChaCha20-Poly1305 using the header bytes as
//! associated data. The GZIP trailer (CRC-32 and ISIZE) still describes the
//! plaintext, so it doubles as an integrity check after decryption.
//!
//! ```text
//! 1F 8B 08 FLG | MTIME(4)=0 | XFL=0 | OS=FF | XLEN(2, LE)
//! 'E' 'C' | LEN(2, LE) | version=01 | content id (16) | nonce (24)
//! ciphertext | tag (16) | CRC32 (4, LE) | ISIZE (4, LE)
//! ```

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::crypto::{self, KEY_LEN, NONCE_LEN, TAG_LEN};

pub const GZIP_ID1: u8 = 0x1F;
pub const GZIP_ID2: u8 = 0x8B;
pub const METHOD_DEFLATE: u8 = 0x08;
pub const CONTAINER_VERSION: u8 = 1;
pub const FILE_EXTENSION: &str = "ecakp";

const FHCRC: u8 = 0x02;
const FEXTRA: u8 = 0x04;
const FNAME: u8 = 0x08;
const FCOMMENT: u8 = 0x10;
const FRESERVED: u8 = 0xE0;
const OS_UNKNOWN: u8 = 0xFF;
const SUBFIELD_ID: [u8; 2] = *b"EC";
const SUBFIELD_LEN: usize = 1 + ContentId::LEN + NONCE_LEN;
const FIXED_LEN: usize = 10;
const TRAILER_LEN: usize = 8;

/// Serialized length of the header this crate writes.
pub const HEADER_LEN: usize = FIXED_LEN + 2 + 4 + SUBFIELD_LEN;

const CHUNK: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not an ECAKP container")]
    NotContainer,
    #[error("unprotected gzip stream")]
    Unprotected,
    #[error("framing error: {0}")]
    Framing(&'static str),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    /// A bad key and a modified payload are indistinguishable on purpose.
    #[error("wrong key or tampered payload")]
    Authentication,
    #[error("corrupt content: {0}")]
    Corrupt(&'static str),
    #[error("invalid content id: {0}")]
    InvalidContentId(String),
    #[error("packaging secret was derived for content {expected}, not {actual}")]
    SecretMismatch { expected: ContentId, actual: ContentId },
    #[error("packaging error: {0}")]
    Packaging(#[source] io::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// 16-byte title identifier, shown to users as 32 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentId([u8; ContentId::LEN]);

impl ContentId {
    pub const LEN: usize = 16;

    pub const fn from_bytes(bytes: [u8; Self::LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, ContainerError> {
        let arr: [u8; Self::LEN] = bytes.try_into().map_err(|_| {
            ContainerError::InvalidContentId(format!("expected {} bytes, got {}", Self::LEN, bytes.len()))
        })?;
        Ok(Self(arr))
    }

    pub fn random() -> Self {
        Self(crypto::random_bytes())
    }

    pub fn as_bytes(&self) -> &[u8; Self::LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Accepts upper or lower case; always 32 hex digits.
    pub fn parse_hex(s: &str) -> Result<Self, ContainerError> {
        let s = s.trim();
        if s.len() != Self::LEN * 2 {
            return Err(ContainerError::InvalidContentId(format!(
                "expected {} hexadecimal characters, got {}",
                Self::LEN * 2,
                s.len()
            )));
        }
        let bytes = hex::decode(s.to_ascii_lowercase()).map_err(|_| {
            ContainerError::InvalidContentId(format!("expected {} hexadecimal characters", Self::LEN * 2))
        })?;
        Self::from_slice(&bytes)
    }
}

impl fmt::Display for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentId({})", self.to_hex())
    }
}

impl FromStr for ContentId {
    type Err = ContainerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_hex(s)
    }
}

impl serde::Serialize for ContentId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> serde::Deserialize<'de> for ContentId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        Self::parse_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Per-title secret held by the producer.
///
/// `master_key = SHA-256(nonce_seed || content_id)`; the cipher nonce is the
/// first 24 bytes of `SHA-256(nonce_seed || "nonce")`.
#[derive(Clone)]
pub struct PackagingSecret {
    content_id: ContentId,
    nonce_seed: [u8; 32],
    master_key: [u8; KEY_LEN],
}

impl PackagingSecret {
    /// Draws a fresh seed from the operating system's CSPRNG.
    pub fn generate(content_id: ContentId) -> Self {
        Self::from_seed(crypto::random_bytes(), content_id)
    }

    pub fn from_seed(nonce_seed: [u8; 32], content_id: ContentId) -> Self {
        let master_key = crypto::hash(&[&nonce_seed, content_id.as_bytes()]);
        Self { content_id, nonce_seed, master_key }
    }

    pub fn content_id(&self) -> ContentId {
        self.content_id
    }

    pub fn nonce_seed(&self) -> &[u8; 32] {
        &self.nonce_seed
    }

    pub fn master_key(&self) -> &[u8; KEY_LEN] {
        &self.master_key
    }

    pub fn nonce(&self) -> [u8; NONCE_LEN] {
        let d = crypto::hash(&[&self.nonce_seed, b"nonce"]);
        let mut n = [0u8; NONCE_LEN];
        n.copy_from_slice(&d[..NONCE_LEN]);
        n
    }
}

impl fmt::Debug for PackagingSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PackagingSecret").field("content_id", &self.content_id).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub version: u8,
    pub content_id: ContentId,
    pub nonce: [u8; NONCE_LEN],
}

impl ContainerHeader {
    pub fn new(content_id: ContentId, nonce: [u8; NONCE_LEN]) -> Self {
        Self { version: CONTAINER_VERSION, content_id, nonce }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(&[GZIP_ID1, GZIP_ID2, METHOD_DEFLATE, FEXTRA]);
        out.extend_from_slice(&[0, 0, 0, 0]); // MTIME
        out.push(0); // XFL
        out.push(OS_UNKNOWN);
        out.extend_from_slice(&((4 + SUBFIELD_LEN) as u16).to_le_bytes());
        out.extend_from_slice(&SUBFIELD_ID);
        out.extend_from_slice(&(SUBFIELD_LEN as u16).to_le_bytes());
        out.push(self.version);
        out.extend_from_slice(self.content_id.as_bytes());
        out.extend_from_slice(&self.nonce);
        debug_assert_eq!(out.len(), HEADER_LEN);
        out
    }
}

/// Parses the GZIP header at the start of `bytes` and extracts the `EC`
/// subfield.
pub fn parse_header(bytes: &[u8]) -> Result<ContainerHeader, ContainerError> {
    parse_header_with_len(bytes).map(|(h, _)| h)
}

/// Like [`parse_header`], also returning how many bytes the header occupies.
pub fn parse_header_with_len(bytes: &[u8]) -> Result<(ContainerHeader, usize), ContainerError> {
    let gzip_magic = [GZIP_ID1, GZIP_ID2];
    if bytes.iter().zip(&gzip_magic).any(|(a, b)| a != b) {
        return Err(ContainerError::NotContainer);
    }
    if bytes.len() >= 3 && bytes[2] != METHOD_DEFLATE {
        return Err(ContainerError::Framing("unsupported compression method"));
    }
    if bytes.len() < FIXED_LEN {
        return Err(ContainerError::Framing("truncated header"));
    }
    let flags = bytes[3];
    if flags & FRESERVED != 0 {
        return Err(ContainerError::Framing("reserved header flag set"));
    }
    if flags & FEXTRA == 0 {
        return Err(ContainerError::Unprotected);
    }

    let mut pos = FIXED_LEN;
    let xlen = read_u16(bytes, pos)? as usize;
    pos += 2;
    let extra = bytes.get(pos..pos + xlen).ok_or(ContainerError::Framing("truncated extra field"))?;
    pos += xlen;

    let mut found: Option<&[u8]> = None;
    let mut rest = extra;
    while !rest.is_empty() {
        if rest.len() < 4 {
            return Err(ContainerError::Framing("malformed extra subfield"));
        }
        let id = [rest[0], rest[1]];
        let len = u16::from_le_bytes([rest[2], rest[3]]) as usize;
        let data = rest.get(4..4 + len).ok_or(ContainerError::Framing("extra subfield length exceeds field"))?;
        if id == SUBFIELD_ID {
            if found.is_some() {
                return Err(ContainerError::Framing("duplicate EC subfield"));
            }
            found = Some(data);
        }
        rest = &rest[4 + len..];
    }
    let data = found.ok_or(ContainerError::Unprotected)?;
    let version = *data.first().ok_or(ContainerError::Framing("empty EC subfield"))?;
    if version != CONTAINER_VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    if data.len() != SUBFIELD_LEN {
        return Err(ContainerError::Framing("EC subfield length mismatch"));
    }
    let content_id = ContentId::from_slice(&data[1..1 + ContentId::LEN])?;
    let mut nonce = [0u8; NONCE_LEN];
    nonce.copy_from_slice(&data[1 + ContentId::LEN..]);

    for flag in [FNAME, FCOMMENT] {
        if flags & flag != 0 {
            let nul = bytes[pos..]
                .iter()
                .position(|&b| b == 0)
                .ok_or(ContainerError::Framing("unterminated header string"))?;
            pos += nul + 1;
        }
    }
    if flags & FHCRC != 0 {
        let stored = read_u16(bytes, pos)?;
        let actual = crc32fast::hash(&bytes[..pos]) as u16;
        if stored != actual {
            return Err(ContainerError::Framing("header CRC mismatch"));
        }
        pos += 2;
    }

    Ok((ContainerHeader { version, content_id, nonce }, pos))
}

fn read_u16(bytes: &[u8], at: usize) -> Result<u16, ContainerError> {
    bytes
        .get(at..at + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or(ContainerError::Framing("truncated header"))
}

/// A parsed or freshly packed container.
#[derive(Clone, PartialEq, Eq)]
pub struct EncryptedContainer {
    header: ContainerHeader,
    // Exact header bytes as they appear in the file; authenticated as AAD.
    header_raw: Vec<u8>,
    // Ciphertext followed by the 16-byte tag.
    sealed: Vec<u8>,
    crc32: u32,
    isize: u32,
}

impl EncryptedContainer {
    pub fn header(&self) -> &ContainerHeader {
        &self.header
    }

    pub fn content_id(&self) -> ContentId {
        self.header.content_id
    }

    pub fn payload(&self) -> &[u8] {
        &self.sealed[..self.sealed.len() - TAG_LEN]
    }

    pub fn auth_tag(&self) -> &[u8] {
        &self.sealed[self.sealed.len() - TAG_LEN..]
    }

    /// CRC-32 of the original plaintext.
    pub fn crc32(&self) -> u32 {
        self.crc32
    }

    /// Original plaintext length modulo 2^32.
    pub fn isize(&self) -> u32 {
        self.isize
    }

    pub fn serialized_len(&self) -> usize {
        self.header_raw.len() + self.sealed.len() + TRAILER_LEN
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&self.header_raw)?;
        w.write_all(&self.sealed)?;
        w.write_all(&self.crc32.to_le_bytes())?;
        w.write_all(&self.isize.to_le_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let (header, header_len) = parse_header_with_len(bytes)?;
        let body = &bytes[header_len..];
        if body.len() < TAG_LEN + TRAILER_LEN {
            return Err(ContainerError::Framing("truncated body"));
        }
        let (sealed, trailer) = body.split_at(body.len() - TRAILER_LEN);
        Ok(Self {
            header,
            header_raw: bytes[..header_len].to_vec(),
            sealed: sealed.to_vec(),
            crc32: u32::from_le_bytes(trailer[..4].try_into().unwrap()),
            isize: u32::from_le_bytes(trailer[4..].try_into().unwrap()),
        })
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

impl fmt::Debug for EncryptedContainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncryptedContainer")
            .field("header", &self.header)
            .field("payload_len", &self.payload().len())
            .field("crc32", &format_args!("{:#010x}", self.crc32))
            .field("isize", &self.isize)
            .finish()
    }
}

/// Compresses, then encrypts, everything `plaintext` yields.
pub fn pack<R: Read>(
    mut plaintext: R,
    content_id: ContentId,
    secret: &PackagingSecret,
) -> Result<EncryptedContainer, ContainerError> {
    if secret.content_id() != content_id {
        return Err(ContainerError::SecretMismatch { expected: secret.content_id(), actual: content_id });
    }
    let header = ContainerHeader::new(content_id, secret.nonce());
    let header_raw = header.to_bytes();

    let mut crc = crc32fast::Hasher::new();
    let mut total: u64 = 0;
    let mut deflate = DeflateEncoder::new(Vec::new(), Compression::default());
    let mut buf = vec![0u8; CHUNK];
    loop {
        let n = match plaintext.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(ContainerError::Packaging(e)),
        };
        crc.update(&buf[..n]);
        total += n as u64;
        deflate.write_all(&buf[..n]).map_err(ContainerError::Packaging)?;
    }
    let compressed = deflate.finish().map_err(ContainerError::Packaging)?;
    let sealed = crypto::seal(secret.master_key(), &header.nonce, &header_raw, &compressed);

    Ok(EncryptedContainer { header, header_raw, sealed, crc32: crc.finalize(), isize: total as u32 })
}

/// Authenticates and decrypts, inflates, then checks the GZIP trailer.
pub fn unpack(container: &EncryptedContainer, content_key: &[u8; KEY_LEN]) -> Result<Vec<u8>, ContainerError> {
    let compressed = crypto::open(content_key, &container.header.nonce, &container.header_raw, &container.sealed)
        .map_err(|_| ContainerError::Authentication)?;
    let mut plaintext = Vec::with_capacity(container.isize as usize);
    DeflateDecoder::new(compressed.as_slice())
        .read_to_end(&mut plaintext)
        .map_err(|_| ContainerError::Corrupt("inflate failed"))?;
    if crc32fast::hash(&plaintext) != container.crc32 {
        return Err(ContainerError::Corrupt("CRC-32 mismatch"));
    }
    if plaintext.len() as u32 != container.isize {
        return Err(ContainerError::Corrupt("ISIZE mismatch"));
    }
    Ok(plaintext)
}
