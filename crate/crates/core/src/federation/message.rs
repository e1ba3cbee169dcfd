//! Shared-parameter snapshot exchanged between a client and the server.
//!
//! Little-endian layout:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8 | magic `FORLAMSG` |
//! | 4 | u32 version |
//! | 8 | u64 client id |
//! | 8 | u64 round |
//! | 4 | u32 sample count `n_c` |
//! | 8 | architecture fingerprint |
//! | 4 | u32 payload byte length |
//! | 4·P | f32 payload (adapter block, then slot-attention block) |
//! | 4 | CRC32 of all preceding bytes |

use crate::{Error, Result};

pub const MSG_MAGIC: &[u8; 8] = b"FORLAMSG";
pub const MSG_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 44;
/// Header plus trailing checksum.
pub const MSG_OVERHEAD: usize = HEADER_LEN + 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamMessage {
    pub client_id: u64,
    pub round: u64,
    pub n_c: u32,
    pub fingerprint: [u8; 8],
    pub payload: Vec<f32>,
}

impl ParamMessage {
    pub fn encoded_len(&self) -> usize {
        MSG_OVERHEAD + 4 * self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MSG_MAGIC);
        out.extend_from_slice(&MSG_VERSION.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.n_c.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&((4 * self.payload.len()) as u32).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Checksum first, so any corrupted byte surfaces as [`Error::Crc`].
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MSG_OVERHEAD {
            return Err(Error::Truncated("param message"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        if &body[..8] != MSG_MAGIC {
            return Err(Error::BadMagic { expected: "FORLAMSG" });
        }
        let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(body[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != MSG_VERSION {
            return Err(Error::Version(version));
        }
        let payload_len = u32_at(40) as usize;
        if payload_len % 4 != 0 || body.len() - HEADER_LEN != payload_len {
            return Err(Error::Truncated("param message payload"));
        }
        Ok(ParamMessage {
            client_id: u64_at(12),
            round: u64_at(20),
            n_c: u32_at(28),
            fingerprint: body[32..40].try_into().unwrap(),
            payload: body[HEADER_LEN..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg() -> ParamMessage {
        ParamMessage {
            client_id: 7,
            round: 3,
            n_c: 40,
            fingerprint: *b"abcdefgh",
            payload: vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = msg();
        let bytes = m.encode();
        assert_eq!(bytes.len(), 48 + 16);
        assert_eq!(&bytes[..8], b"FORLAMSG");
        let back = ParamMessage::decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.payload[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn corruption_and_truncation_are_typed() {
        let mut bytes = msg().encode();
        bytes[50] ^= 0x40;
        assert!(matches!(ParamMessage::decode(&bytes), Err(Error::Crc { .. })));
        let bytes = msg().encode();
        assert!(matches!(ParamMessage::decode(&bytes[..20]), Err(Error::Truncated(_))));
    }

    #[test]
    fn version_checked() {
        let mut bytes = msg().encode();
        bytes[8] = 9;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(ParamMessage::decode(&bytes), Err(Error::Version(9))));
    }
}
