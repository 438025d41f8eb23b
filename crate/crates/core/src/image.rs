// SPDX-License-Identifier: Apache-2.0

//! Sealed container images.
//!
//! Layout, little-endian:
//!
//! ```text
//! "FSC1" | version u16 | nonce [12] | sha256(plaintext) [32] | payload_len u32 | payload
//! ```
//!
//! The payload is AES-256-GCM ciphertext followed by its 16-byte tag. The
//! whole header is the associated data, so the claimed hash cannot be swapped
//! without breaking the tag.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::shielded_io::{derive_key, Key, NONCE_LEN, TAG_LEN};

pub const IMAGE_MAGIC: &[u8; 4] = b"FSC1";
pub const IMAGE_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + NONCE_LEN + 32 + 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("malformed image")]
    Malformed,
    #[error("unsupported image version {0}")]
    UnsupportedVersion(u16),
    #[error("image authentication failed")]
    AuthFailure,
    #[error("image hash does not match its header")]
    MeasurementMismatch,
}

pub fn measure(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

fn image_key(provisioning: &Key) -> Key {
    derive_key(provisioning.as_bytes(), b"", "fasco/image")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedImage {
    bytes: Vec<u8>,
}

impl EncryptedImage {
    pub fn seal(provisioning: &Key, plaintext: &[u8], nonce: [u8; NONCE_LEN]) -> Self {
        Self::seal_claiming(provisioning, plaintext, nonce, measure(plaintext))
    }

    /// Seals `plaintext` under a header that claims `hash`. Only useful to
    /// build images whose header lies about their contents.
    pub fn seal_claiming(
        provisioning: &Key,
        plaintext: &[u8],
        nonce: [u8; NONCE_LEN],
        hash: [u8; 32],
    ) -> Self {
        let payload_len = (plaintext.len() + TAG_LEN) as u32;
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(IMAGE_MAGIC);
        header.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
        header.extend_from_slice(&nonce);
        header.extend_from_slice(&hash);
        header.extend_from_slice(&payload_len.to_le_bytes());
        let cipher = Aes256Gcm::new(image_key(provisioning).as_bytes().into());
        let ct = cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: plaintext,
                    aad: &header,
                },
            )
            .expect("image fits AES-GCM limits");
        let mut bytes = header;
        bytes.extend_from_slice(&ct);
        Self { bytes }
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, ImageError> {
        if bytes.len() < HEADER_LEN + TAG_LEN || &bytes[0..4] != IMAGE_MAGIC {
            return Err(ImageError::Malformed);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != IMAGE_VERSION {
            return Err(ImageError::UnsupportedVersion(version));
        }
        let payload_len = u32::from_le_bytes(
            bytes[HEADER_LEN - 4..HEADER_LEN]
                .try_into()
                .expect("4 bytes"),
        );
        if bytes.len() != HEADER_LEN + payload_len as usize {
            return Err(ImageError::Malformed);
        }
        Ok(Self { bytes })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Mutable access to the raw bytes, for tamper tests.
    pub fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.bytes
    }

    pub fn claimed_hash(&self) -> [u8; 32] {
        self.bytes[18..50].try_into().expect("32 bytes")
    }

    /// Decrypts and verifies the image. Returns the plaintext and its
    /// recomputed measurement; nothing is returned unless both checks pass.
    pub fn open(&self, provisioning: &Key) -> Result<(Vec<u8>, [u8; 32]), ImageError> {
        let header = &self.bytes[..HEADER_LEN];
        let nonce = &header[6..18];
        let cipher = Aes256Gcm::new(image_key(provisioning).as_bytes().into());
        let pt = cipher
            .decrypt(
                Nonce::from_slice(nonce),
                Payload {
                    msg: &self.bytes[HEADER_LEN..],
                    aad: header,
                },
            )
            .map_err(|_| ImageError::AuthFailure)?;
        let m = measure(&pt);
        if m != self.claimed_hash() {
            return Err(ImageError::MeasurementMismatch);
        }
        Ok((pt, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Key {
        Key::from_bytes([0x42; 32])
    }

    #[test]
    fn round_trip_and_header_layout() {
        let img = EncryptedImage::seal(&prov(), b"program text", [7; 12]);
        let b = img.as_bytes();
        assert_eq!(&b[0..4], b"FSC1");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..18], &[7; 12]);
        assert_eq!(b.len(), HEADER_LEN + 12 + TAG_LEN);
        let (pt, m) = img.open(&prov()).unwrap();
        assert_eq!(pt, b"program text");
        assert_eq!(m, img.claimed_hash());
        let again = EncryptedImage::from_bytes(b.to_vec()).unwrap();
        assert_eq!(again, img);
    }

    #[test]
    fn any_flip_fails_authentication() {
        let img = EncryptedImage::seal(&prov(), b"program text", [7; 12]);
        for i in [
            0usize,
            20,
            HEADER_LEN,
            HEADER_LEN + 5,
            img.as_bytes().len() - 1,
        ] {
            let mut bad = img.clone();
            bad.bytes_mut()[i] ^= 1;
            assert!(bad.open(&prov()).is_err(), "flip at {i}");
        }
        assert_eq!(
            img.open(&Key::from_bytes([1; 32])),
            Err(ImageError::AuthFailure)
        );
    }

    #[test]
    fn lying_header_is_a_measurement_mismatch() {
        let img = EncryptedImage::seal_claiming(&prov(), b"abc", [0; 12], [9; 32]);
        assert_eq!(img.open(&prov()), Err(ImageError::MeasurementMismatch));
    }

    #[test]
    fn parse_rejects_garbage() {
        assert_eq!(
            EncryptedImage::from_bytes(b"nope".to_vec()),
            Err(ImageError::Malformed)
        );
        let mut b = EncryptedImage::seal(&prov(), b"x", [0; 12])
            .as_bytes()
            .to_vec();
        b[4] = 9;
        assert_eq!(
            EncryptedImage::from_bytes(b),
            Err(ImageError::UnsupportedVersion(9))
        );
    }
}
