// SPDX-License-Identifier: Apache-2.0

//! Transparent encryption for files, channels and console streams.
//!
//! Everything the host stores for a shielded stream is a sequence of
//! [`ShieldedBlock`]s sealed with AES-256-GCM. The associated data binds the
//! stream id and block index, the nonce binds realm, stream, index and epoch,
//! so a block moved, replayed or spliced from elsewhere fails to open.

use std::fmt;

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce, Tag};
use hkdf::Hkdf;
use sha2::Sha256;
use thiserror::Error;

use crate::granule::RealmId;

pub const BLOCK_SIZE: usize = 4096;
pub const TAG_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;
/// block_index, epoch, ciphertext length.
const BLOCK_HEADER_LEN: usize = 12;
/// Encoded size of a full file block.
pub const FILE_RECORD_LEN: usize = BLOCK_HEADER_LEN + NONCE_LEN + BLOCK_SIZE + TAG_LEN;
pub const FILE_MAGIC: &[u8; 4] = b"FSHD";
pub const FILE_HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShieldError {
    #[error("plaintext of {0} bytes exceeds the block size")]
    BlockTooLarge(usize),
    #[error("authentication failed")]
    AuthFailure,
    #[error("malformed shielded record")]
    Malformed,
}

#[derive(Clone, PartialEq, Eq)]
pub struct Key([u8; 32]);

impl Key {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Key(..)")
    }
}

/// HKDF-SHA256 extract-and-expand: `ikm` is the world provisioning key,
/// `salt` the realm measurement, `info` a purpose label.
pub fn derive_key(ikm: &[u8], salt: &[u8], label: &str) -> Key {
    let hk = Hkdf::<Sha256>::new(Some(salt), ikm);
    let mut out = [0u8; 32];
    hk.expand(label.as_bytes(), &mut out)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    Key(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyLabel {
    File,
    Channel,
    Console,
}

impl KeyLabel {
    fn as_str(self) -> &'static str {
        match self {
            KeyLabel::File => "fasco/file",
            KeyLabel::Channel => "fasco/channel",
            KeyLabel::Console => "fasco/console",
        }
    }
}

/// Per-realm keys. Held only inside the System Realm and by tenant tooling.
#[derive(Debug, Clone)]
pub struct RealmKeySet {
    pub realm: RealmId,
    pub file_key: Key,
    pub channel_key: Key,
    pub console_key: Key,
}

impl RealmKeySet {
    pub fn derive(provisioning: &Key, measurement: &[u8; 32], realm: RealmId) -> Self {
        let d = |l: KeyLabel| derive_key(provisioning.as_bytes(), measurement, l.as_str());
        Self {
            realm,
            file_key: d(KeyLabel::File),
            channel_key: d(KeyLabel::Channel),
            console_key: d(KeyLabel::Console),
        }
    }
}

/// Pre-shared session key for a socket pair between two measured endpoints.
/// Symmetric in the two measurements.
pub fn channel_session_key(provisioning: &Key, a: &[u8; 32], b: &[u8; 32], pair: u32) -> Key {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(lo);
    salt[32..].copy_from_slice(hi);
    derive_key(
        provisioning.as_bytes(),
        &salt,
        &format!("{}/{pair}", KeyLabel::Channel.as_str()),
    )
}

/// Where a block lives; determines its nonce and associated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockAddress {
    pub realm: RealmId,
    pub stream: u16,
    pub index: u32,
    pub epoch: u32,
}

impl BlockAddress {
    pub fn nonce(&self) -> [u8; NONCE_LEN] {
        let mut n = [0u8; NONCE_LEN];
        n[0..2].copy_from_slice(&(self.realm.0 as u16).to_le_bytes());
        n[2..4].copy_from_slice(&self.stream.to_le_bytes());
        n[4..8].copy_from_slice(&self.index.to_le_bytes());
        n[8..12].copy_from_slice(&self.epoch.to_le_bytes());
        n
    }
}

fn associated_data(stream: u16, index: u32) -> [u8; 8] {
    let mut ad = [0u8; 8];
    ad[0..4].copy_from_slice(&u32::from(stream).to_le_bytes());
    ad[4..8].copy_from_slice(&index.to_le_bytes());
    ad
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShieldedBlock {
    pub block_index: u32,
    pub epoch: u32,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl ShieldedBlock {
    pub fn encoded_len(&self) -> usize {
        BLOCK_HEADER_LEN + NONCE_LEN + self.ciphertext.len() + TAG_LEN
    }

    /// `block_index | epoch | ct_len` (u32 LE each), nonce, ciphertext, tag.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.block_index.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    /// Decodes one block from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize), ShieldError> {
        let u32_at = |at: usize| -> Result<u32, ShieldError> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or(ShieldError::Malformed)
        };
        let block_index = u32_at(0)?;
        let epoch = u32_at(4)?;
        let ct_len = u32_at(8)? as usize;
        if ct_len > BLOCK_SIZE {
            return Err(ShieldError::Malformed);
        }
        let total = BLOCK_HEADER_LEN + NONCE_LEN + ct_len + TAG_LEN;
        if bytes.len() < total {
            return Err(ShieldError::Malformed);
        }
        let mut nonce = [0u8; NONCE_LEN];
        nonce.copy_from_slice(&bytes[12..24]);
        let ciphertext = bytes[24..24 + ct_len].to_vec();
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(&bytes[24 + ct_len..total]);
        Ok((
            Self {
                block_index,
                epoch,
                nonce,
                ciphertext,
                tag,
            },
            total,
        ))
    }
}

pub fn seal_block(
    key: &Key,
    addr: BlockAddress,
    plaintext: &[u8],
) -> Result<ShieldedBlock, ShieldError> {
    if plaintext.len() > BLOCK_SIZE {
        return Err(ShieldError::BlockTooLarge(plaintext.len()));
    }
    let cipher = Aes256Gcm::new(key.as_bytes().into());
    let nonce = addr.nonce();
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(
            Nonce::from_slice(&nonce),
            &associated_data(addr.stream, addr.index),
            &mut buf,
        )
        .map_err(|_| ShieldError::BlockTooLarge(plaintext.len()))?;
    Ok(ShieldedBlock {
        block_index: addr.index,
        epoch: addr.epoch,
        nonce,
        ciphertext: buf,
        tag: tag.into(),
    })
}

/// Opens a block expected at `(stream, index)`. Nothing is returned unless
/// the tag verifies.
pub fn open_block(
    key: &Key,
    stream: u16,
    index: u32,
    block: &ShieldedBlock,
) -> Result<Vec<u8>, ShieldError> {
    let cipher = Aes256Gcm::new(key.as_bytes().into());
    let mut buf = block.ciphertext.clone();
    cipher
        .decrypt_in_place_detached(
            Nonce::from_slice(&block.nonce),
            &associated_data(stream, index),
            &mut buf,
            Tag::from_slice(&block.tag),
        )
        .map_err(|_| ShieldError::AuthFailure)?;
    Ok(buf)
}

/// Header of a shielded file on the host store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileHeader {
    pub stream_id: u32,
    pub epoch: u32,
}

impl FileHeader {
    pub fn encode(&self) -> [u8; FILE_HEADER_LEN] {
        let mut out = [0u8; FILE_HEADER_LEN];
        out[0..4].copy_from_slice(FILE_MAGIC);
        out[4..8].copy_from_slice(&self.stream_id.to_le_bytes());
        out[8..12].copy_from_slice(&self.epoch.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ShieldError> {
        if bytes.len() < FILE_HEADER_LEN || &bytes[0..4] != FILE_MAGIC {
            return Err(ShieldError::Malformed);
        }
        Ok(Self {
            stream_id: u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")),
            epoch: u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")),
        })
    }

    /// Byte offset of block `index` in the file.
    pub fn record_offset(index: u32) -> u64 {
        FILE_HEADER_LEN as u64 + u64::from(index) * FILE_RECORD_LEN as u64
    }
}

/// Console and channel streams: records sealed with a monotonically
/// increasing sequence number as the block index.
#[derive(Debug)]
pub struct StreamSealer {
    key: Key,
    realm: RealmId,
    stream: u16,
    next_seq: u32,
}

impl StreamSealer {
    pub fn new(key: Key, realm: RealmId, stream: u16) -> Self {
        Self {
            key,
            realm,
            stream,
            next_seq: 0,
        }
    }

    pub fn next_seq(&self) -> u32 {
        self.next_seq
    }

    /// Seals `bytes` into as many records as needed, returning their
    /// concatenated encoding.
    pub fn seal(&mut self, bytes: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        let chunks: Vec<&[u8]> = if bytes.is_empty() {
            vec![bytes]
        } else {
            bytes.chunks(BLOCK_SIZE).collect()
        };
        for chunk in chunks {
            let addr = BlockAddress {
                realm: self.realm,
                stream: self.stream,
                index: self.next_seq,
                epoch: 0,
            };
            let block = seal_block(&self.key, addr, chunk).expect("chunk fits a block");
            out.extend_from_slice(&block.encode());
            self.next_seq += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StreamError {
    #[error("record {seq} missing (found {found})")]
    Gap { seq: u32, found: u32 },
    #[error("record {seq} failed authentication")]
    Auth { seq: u32 },
    #[error("truncated record after {seq}")]
    Truncated { seq: u32 },
}

/// Reader side of a [`StreamSealer`]: reproduces the byte stream in order,
/// or reports where it was tampered with.
pub fn open_stream(key: &Key, stream: u16, mut bytes: &[u8]) -> Result<Vec<u8>, StreamError> {
    let mut out = Vec::new();
    let mut seq = 0u32;
    while !bytes.is_empty() {
        let (block, used) =
            ShieldedBlock::decode(bytes).map_err(|_| StreamError::Truncated { seq })?;
        if block.block_index != seq {
            // Try to authenticate under the claimed index first so that a
            // relabelled record is an auth failure, a deleted one a gap.
            return match open_block(key, stream, block.block_index, &block) {
                Ok(_) => Err(StreamError::Gap {
                    seq,
                    found: block.block_index,
                }),
                Err(_) => Err(StreamError::Auth { seq }),
            };
        }
        let pt = open_block(key, stream, seq, &block).map_err(|_| StreamError::Auth { seq })?;
        out.extend_from_slice(&pt);
        bytes = &bytes[used..];
        seq += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(b: u8) -> Key {
        Key::from_bytes([b; 32])
    }

    fn addr(index: u32) -> BlockAddress {
        BlockAddress {
            realm: RealmId(1),
            stream: 3,
            index,
            epoch: 0,
        }
    }

    #[test]
    fn seal_open_round_trip() {
        let k = key(1);
        let b = seal_block(&k, addr(0), b"secret page").unwrap();
        assert_eq!(open_block(&k, 3, 0, &b).unwrap(), b"secret page");
        assert_ne!(b.ciphertext, b"secret page");
    }

    #[test]
    fn same_plaintext_different_index_differs() {
        let k = key(1);
        let a = seal_block(&k, addr(0), &[7u8; 64]).unwrap();
        let b = seal_block(&k, addr(1), &[7u8; 64]).unwrap();
        assert_ne!(a.ciphertext, b.ciphertext);
        assert_ne!(a.nonce, b.nonce);
    }

    #[test]
    fn oversized_block_rejected() {
        assert_eq!(
            seal_block(&key(1), addr(0), &[0u8; BLOCK_SIZE + 1]),
            Err(ShieldError::BlockTooLarge(BLOCK_SIZE + 1))
        );
    }

    #[test]
    fn reordered_block_fails() {
        let k = key(1);
        let b3 = seal_block(&k, addr(3), b"three").unwrap();
        assert_eq!(open_block(&k, 3, 5, &b3), Err(ShieldError::AuthFailure));
    }

    #[test]
    fn bit_flip_truncated_tag_and_wrong_key_fail() {
        let k = key(1);
        let b = seal_block(&k, addr(0), b"payload bytes").unwrap();
        let mut flipped = b.clone();
        flipped.ciphertext[2] ^= 0x10;
        assert_eq!(
            open_block(&k, 3, 0, &flipped),
            Err(ShieldError::AuthFailure)
        );

        let enc = b.encode();
        assert_eq!(
            ShieldedBlock::decode(&enc[..enc.len() - 4]),
            Err(ShieldError::Malformed)
        );
        let mut short_tag = b.clone();
        short_tag.tag[12..].fill(0);
        assert_eq!(
            open_block(&k, 3, 0, &short_tag),
            Err(ShieldError::AuthFailure)
        );

        assert_eq!(open_block(&key(2), 3, 0, &b), Err(ShieldError::AuthFailure));
    }

    #[test]
    fn encode_decode_fixed_layout() {
        let b = seal_block(&key(1), addr(9), &[0u8; BLOCK_SIZE]).unwrap();
        let enc = b.encode();
        assert_eq!(enc.len(), FILE_RECORD_LEN);
        assert_eq!(&enc[0..4], &9u32.to_le_bytes());
        let (back, used) = ShieldedBlock::decode(&enc).unwrap();
        assert_eq!(used, enc.len());
        assert_eq!(back, b);
    }

    #[test]
    fn file_header_layout() {
        let h = FileHeader {
            stream_id: 0x0102,
            epoch: 7,
        };
        let enc = h.encode();
        assert_eq!(&enc[..], b"FSHD\x02\x01\x00\x00\x07\x00\x00\x00");
        assert_eq!(FileHeader::decode(&enc).unwrap(), h);
        assert_eq!(
            FileHeader::decode(b"XXXX00000000"),
            Err(ShieldError::Malformed)
        );
        assert_eq!(FileHeader::record_offset(2), 12 + 2 * 4136);
    }

    #[test]
    fn derived_keys_are_separated() {
        let prov = key(9);
        let m1 = [1u8; 32];
        let m2 = [2u8; 32];
        let a = RealmKeySet::derive(&prov, &m1, RealmId(1));
        let b = RealmKeySet::derive(&prov, &m2, RealmId(2));
        assert_ne!(a.file_key, a.channel_key);
        assert_ne!(a.file_key, a.console_key);
        assert_ne!(a.channel_key, a.console_key);
        assert_ne!(a.file_key, b.file_key);
        assert_eq!(
            channel_session_key(&prov, &m1, &m2, 4),
            channel_session_key(&prov, &m2, &m1, 4)
        );
        assert_ne!(
            channel_session_key(&prov, &m1, &m2, 4),
            channel_session_key(&prov, &m1, &m2, 5)
        );
    }

    #[test]
    fn console_stream_round_trip_and_gap() {
        let k = key(4);
        let mut s = StreamSealer::new(k.clone(), RealmId(1), 1);
        let mut log = Vec::new();
        let mut expected = Vec::new();
        let mut offsets = Vec::new();
        for i in 0..100u32 {
            let msg = format!("line {i}\n");
            offsets.push(log.len());
            log.extend_from_slice(&s.seal(msg.as_bytes()));
            expected.extend_from_slice(msg.as_bytes());
        }
        assert_eq!(open_stream(&k, 1, &log).unwrap(), expected);
        assert!(!log.windows(4).any(|w| w == b"line"));

        let mut cut = log[..offsets[50]].to_vec();
        cut.extend_from_slice(&log[offsets[51]..]);
        assert_eq!(
            open_stream(&k, 1, &cut),
            Err(StreamError::Gap { seq: 50, found: 51 })
        );
    }
}
