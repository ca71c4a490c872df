use std::fmt;

use crate::bitframe::BitVector;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    /// Correcting -> Reference: the correcting side's parity of every block in a pass.
    BlockParities = 0,
    /// Reference -> Correcting: one mismatch bit per block.
    ParityReplies = 1,
    /// Correcting -> Reference: `(block, node)` pairs whose parity is requested.
    BinaryQueries = 2,
    /// Reference -> Correcting: one parity bit per query.
    BinaryReplies = 3,
    /// Correcting -> Reference: 64-bit digest salt.
    VerifyChallenge = 4,
    /// Reference -> Correcting: 64-bit salted digest of the reference frame.
    VerifyReply = 5,
    /// Correcting -> Reference: final status bit (1 = verified).
    FrameDone = 6,
    /// Parameter agreement before any frame is processed.
    Handshake = 7,
}

impl MessageKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        use MessageKind::*;
        Some(match v {
            0 => BlockParities,
            1 => ParityReplies,
            2 => BinaryQueries,
            3 => BinaryReplies,
            4 => VerifyChallenge,
            5 => VerifyReply,
            6 => FrameDone,
            7 => Handshake,
            _ => return None,
        })
    }

    /// Whether this kind carries parity information from the reference side.
    pub fn is_disclosure(self) -> bool {
        matches!(self, MessageKind::ParityReplies | MessageKind::BinaryReplies)
    }
}

/// A bit string of arbitrary length (including zero), packed LSB-first.
/// Bits past `bit_len` in the last byte are always zero.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct Payload {
    bytes: Vec<u8>,
    bit_len: u32,
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Payload({} bits)", self.bit_len)
    }
}

impl Payload {
    pub fn empty() -> Self {
        Payload::default()
    }

    /// Takes ownership of packed bytes; fails if the padding is not zero.
    pub fn from_packed(bytes: Vec<u8>, bit_len: u32) -> Result<Self> {
        if bytes.len() != (bit_len as usize).div_ceil(8) {
            return Err(Error::Decode(format!(
                "{} bytes for a {bit_len}-bit payload",
                bytes.len()
            )));
        }
        let rem = bit_len % 8;
        if rem != 0 && bytes.last().is_some_and(|&b| b >> rem != 0) {
            return Err(Error::Decode("non-zero payload padding".into()));
        }
        Ok(Payload { bytes, bit_len })
    }

    pub fn from_bits<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut bytes = Vec::new();
        let mut n = 0u32;
        for b in bits {
            if n % 8 == 0 {
                bytes.push(0);
            }
            if b {
                *bytes.last_mut().unwrap() |= 1 << (n % 8);
            }
            n += 1;
        }
        Payload { bytes, bit_len: n }
    }

    pub fn from_bitvector(v: &BitVector) -> Self {
        Payload {
            bytes: v.to_bytes(),
            bit_len: v.len() as u32,
        }
    }

    pub fn from_u64(v: u64) -> Self {
        Payload {
            bytes: v.to_le_bytes().to_vec(),
            bit_len: 64,
        }
    }

    /// Little-endian `u32` pairs, 64 bits per entry.
    pub fn from_index_pairs(pairs: &[(u32, u32)]) -> Self {
        let mut bytes = Vec::with_capacity(pairs.len() * 8);
        for &(a, b) in pairs {
            bytes.extend_from_slice(&a.to_le_bytes());
            bytes.extend_from_slice(&b.to_le_bytes());
        }
        Payload {
            bit_len: (bytes.len() * 8) as u32,
            bytes,
        }
    }

    pub fn bit_len(&self) -> u32 {
        self.bit_len
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.bit_len as usize);
        (self.bytes[i / 8] >> (i % 8)) & 1 == 1
    }

    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.bit_len as usize).map(move |i| self.bit(i))
    }

    pub fn as_u64(&self) -> Result<u64> {
        if self.bit_len != 64 {
            return Err(Error::Protocol(format!(
                "expected a 64-bit payload, got {} bits",
                self.bit_len
            )));
        }
        Ok(u64::from_le_bytes(self.bytes[..8].try_into().unwrap()))
    }

    pub fn as_index_pairs(&self) -> Result<Vec<(u32, u32)>> {
        if self.bit_len % 64 != 0 {
            return Err(Error::Protocol(format!(
                "index list payload of {} bits",
                self.bit_len
            )));
        }
        Ok(self
            .bytes
            .chunks_exact(8)
            .map(|c| {
                (
                    u32::from_le_bytes(c[..4].try_into().unwrap()),
                    u32::from_le_bytes(c[4..].try_into().unwrap()),
                )
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProtocolMessage {
    pub frame_id: u32,
    pub kind: MessageKind,
    pub pass_index: u8,
    pub payload: Payload,
}

impl ProtocolMessage {
    pub fn new(frame_id: u32, kind: MessageKind, pass_index: u8, payload: Payload) -> Self {
        ProtocolMessage {
            frame_id,
            kind,
            pass_index,
            payload,
        }
    }
}
