//! Wire format for batched protocol packets and the links that carry them.
//!
//! A packet bundles every message one worker produced in one communication
//! round. Layout, all integers little-endian:
//!
//! ```text
//! "CRC1" | session_id u64 | round u32 | count u16 | count x submessage
//! submessage = frame_id u32 | kind u8 | pass u8 | bit_len u32 | ceil(bit_len/8) bytes
//! ```
//!
//! Two links implement [`PacketSink`] / [`PacketSource`]: an in-process
//! simulated link with configurable one-way latency ([`sim`]) and a TCP link
//! with a `u32` length prefix per packet ([`tcp`]).

pub mod sim;
pub mod tcp;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::cascade::{MessageKind, Payload, ProtocolMessage};
use crate::error::{Error, Result};

pub use sim::{sim_pair, ChannelConfig};
pub use tcp::{tcp_accept, tcp_connect, tcp_link};

pub const MAGIC: [u8; 4] = *b"CRC1";
pub const HEADER_BYTES: usize = 18;
pub const SUBMESSAGE_HEADER_BYTES: usize = 10;
pub const MAX_SUBMESSAGES: usize = u16::MAX as usize;

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Packet {
    pub session_id: u64,
    pub round: u32,
    pub messages: Vec<ProtocolMessage>,
}

impl Packet {
    pub fn new(session_id: u64, round: u32, messages: Vec<ProtocolMessage>) -> Self {
        Packet {
            session_id,
            round,
            messages,
        }
    }

    /// A packet with no submessages; keeps both round counters in step.
    pub fn heartbeat(session_id: u64, round: u32) -> Self {
        Packet::new(session_id, round, Vec::new())
    }

    pub fn is_heartbeat(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES
            + self
                .messages
                .iter()
                .map(|m| SUBMESSAGE_HEADER_BYTES + m.payload.bytes().len())
                .sum::<usize>()
    }

    /// Parity bits carried from the reference side.
    pub fn disclosed_bits(&self) -> u64 {
        self.messages
            .iter()
            .filter(|m| m.kind.is_disclosure())
            .map(|m| m.payload.bit_len() as u64)
            .sum()
    }
}

pub fn encode_packet(p: &Packet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(p.encoded_len());
    encode_into(p, &mut out)?;
    Ok(out)
}

/// Appends the encoding of `p` to `out`.
pub fn encode_into(p: &Packet, out: &mut Vec<u8>) -> Result<()> {
    if p.messages.len() > MAX_SUBMESSAGES {
        return Err(Error::Protocol(format!(
            "{} submessages exceed the per-packet limit; use batch()",
            p.messages.len()
        )));
    }
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&p.session_id.to_le_bytes());
    out.extend_from_slice(&p.round.to_le_bytes());
    out.extend_from_slice(&(p.messages.len() as u16).to_le_bytes());
    for m in &p.messages {
        out.extend_from_slice(&m.frame_id.to_le_bytes());
        out.push(m.kind as u8);
        out.push(m.pass_index);
        out.extend_from_slice(&m.payload.bit_len().to_le_bytes());
        out.extend_from_slice(m.payload.bytes());
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Decode(format!(
                    "truncated packet: need {n} bytes at offset {}, have {}",
                    self.at,
                    self.buf.len() - self.at
                ))
            })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes one packet from the front of `buf`. Returns it with the number of
/// bytes consumed; nothing is returned unless the whole packet is valid.
pub fn decode_packet(buf: &[u8]) -> Result<(Packet, usize)> {
    let mut r = Reader { buf, at: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Decode(format!("bad magic {magic:02x?}")));
    }
    let session_id = r.u64()?;
    let round = r.u32()?;
    let count = r.u16()? as usize;
    // Each submessage needs at least its header; reject absurd counts before
    // allocating.
    if count * SUBMESSAGE_HEADER_BYTES > buf.len() - r.at {
        return Err(Error::Decode(format!(
            "{count} submessages cannot fit in {} bytes",
            buf.len() - r.at
        )));
    }
    let mut messages = Vec::with_capacity(count);
    for _ in 0..count {
        let frame_id = r.u32()?;
        let kind_byte = r.u8()?;
        let kind = MessageKind::from_u8(kind_byte)
            .ok_or_else(|| Error::Decode(format!("unknown message kind {kind_byte}")))?;
        let pass_index = r.u8()?;
        let bit_len = r.u32()?;
        let bytes = r.take((bit_len as usize).div_ceil(8))?;
        let payload = Payload::from_packed(bytes.to_vec(), bit_len)?;
        messages.push(ProtocolMessage::new(frame_id, kind, pass_index, payload));
    }
    Ok((
        Packet {
            session_id,
            round,
            messages,
        },
        r.at,
    ))
}

/// Packs one round's messages, splitting into continuation packets with
/// the same round number past [`MAX_SUBMESSAGES`]. No messages yields a
/// single heartbeat.
pub fn batch(session_id: u64, round: u32, msgs: Vec<ProtocolMessage>) -> Vec<Packet> {
    if msgs.is_empty() {
        return vec![Packet::heartbeat(session_id, round)];
    }
    let mut out = Vec::with_capacity(msgs.len().div_ceil(MAX_SUBMESSAGES));
    let mut rest = msgs;
    while !rest.is_empty() {
        let tail = rest.split_off(rest.len().min(MAX_SUBMESSAGES));
        out.push(Packet::new(session_id, round, rest));
        rest = tail;
    }
    out
}

/// Sending half of a link.
pub trait PacketSink: Send {
    fn send(&mut self, packet: &Packet) -> Result<()>;
}

/// Receiving half of a link. `recv` blocks until a packet arrives and
/// returns [`Error::Disconnected`] once the peer is gone.
pub trait PacketSource: Send {
    fn recv(&mut self) -> Result<Packet>;
}

/// Both halves of one endpoint.
pub struct Link {
    pub sink: Box<dyn PacketSink>,
    pub source: Box<dyn PacketSource>,
}

impl Link {
    pub fn new(sink: impl PacketSink + 'static, source: impl PacketSource + 'static) -> Self {
        Link {
            sink: Box::new(sink),
            source: Box::new(source),
        }
    }

    /// Counts reference-side parity bits arriving on this endpoint.
    pub fn tapped(self) -> (Link, DisclosureTap) {
        let tap = DisclosureTap::default();
        let source = TappedSource {
            inner: self.source,
            tap: tap.clone(),
        };
        (
            Link {
                sink: self.sink,
                source: Box::new(source),
            },
            tap,
        )
    }
}

/// Independent count of disclosed parity bits seen on the wire.
#[derive(Clone, Debug, Default)]
pub struct DisclosureTap(Arc<AtomicU64>);

impl DisclosureTap {
    pub fn bits(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

struct TappedSource {
    inner: Box<dyn PacketSource>,
    tap: DisclosureTap,
}

impl PacketSource for TappedSource {
    fn recv(&mut self) -> Result<Packet> {
        let p = self.inner.recv()?;
        self.tap.0.fetch_add(p.disclosed_bits(), Ordering::Relaxed);
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_message(rng: &mut ChaCha8Rng) -> ProtocolMessage {
        let bits = rng.random_range(0..700usize);
        let payload = Payload::from_bits((0..bits).map(|_| rng.random::<bool>()));
        ProtocolMessage::new(
            rng.random(),
            MessageKind::from_u8(rng.random_range(0..8)).unwrap(),
            rng.random(),
            payload,
        )
    }

    fn random_packet(rng: &mut ChaCha8Rng) -> Packet {
        let n = rng.random_range(0..12);
        Packet::new(
            rng.random(),
            rng.random(),
            (0..n).map(|_| random_message(rng)).collect(),
        )
    }

    #[test]
    fn header_widths() {
        let empty = Packet::heartbeat(7, 3);
        assert_eq!(encode_packet(&empty).unwrap().len(), 18);
        let parities = ProtocolMessage::new(
            1,
            MessageKind::BlockParities,
            1,
            Payload::from_bits(vec![true; 512]),
        );
        let p = Packet::new(7, 3, vec![parities]);
        assert_eq!(encode_packet(&p).unwrap().len(), 18 + 10 + 64);
        assert_eq!(p.encoded_len(), 92);
    }

    #[test]
    fn exact_layout() {
        let msg = ProtocolMessage::new(
            0x0102_0304,
            MessageKind::BinaryReplies,
            5,
            Payload::from_bits([true, false, true]),
        );
        let bytes = encode_packet(&Packet::new(0x1122_3344_5566_7788, 9, vec![msg])).unwrap();
        let expected: Vec<u8> = [
            &b"CRC1"[..],
            &[0x88, 0x77, 0x66, 0x55, 0x44, 0x33, 0x22, 0x11],
            &[9, 0, 0, 0],
            &[1, 0],
            &[4, 3, 2, 1, 3, 5],
            &[3, 0, 0, 0],
            &[0b101],
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn random_packets_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = random_packet(&mut rng);
            let bytes = encode_packet(&p).unwrap();
            let (q, used) = decode_packet(&bytes).unwrap();
            assert_eq!(q, p);
            assert_eq!(used, bytes.len());
        }
    }

    #[test]
    fn decoding_consumes_one_packet_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random_packet(&mut rng), random_packet(&mut rng));
        let mut bytes = encode_packet(&a).unwrap();
        let first = bytes.len();
        encode_into(&b, &mut bytes).unwrap();
        let (pa, used) = decode_packet(&bytes).unwrap();
        assert_eq!((pa, used), (a, first));
        assert_eq!(decode_packet(&bytes[used..]).unwrap().0, b);
    }

    #[test]
    fn malformed_buffers_are_rejected() {
        let msg = ProtocolMessage::new(1, MessageKind::ParityReplies, 1, Payload::from_bits([true; 5]));
        let good = encode_packet(&Packet::new(1, 1, vec![msg])).unwrap();
        for cut in 0..good.len() {
            assert!(matches!(decode_packet(&good[..cut]), Err(Error::Decode(_))), "cut {cut}");
        }
        let mut bad_magic = good.clone();
        bad_magic[3] = b'2';
        assert!(decode_packet(&bad_magic).is_err());
        let mut bad_kind = good.clone();
        bad_kind[HEADER_BYTES + 4] = 8;
        assert!(decode_packet(&bad_kind).is_err());
        let mut bad_padding = good.clone();
        *bad_padding.last_mut().unwrap() |= 0x80;
        assert!(decode_packet(&bad_padding).is_err());
        let mut bad_count = good;
        bad_count[16] = 2;
        assert!(decode_packet(&bad_count).is_err());
    }

    #[test]
    fn random_buffers_never_misparse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut accepted = 0;
        for i in 0..100_000 {
            let buf = match i % 3 {
                // Pure noise.
                0 => {
                    let mut b = vec![0u8; rng.random_range(0..64)];
                    rng.fill_bytes(&mut b);
                    b
                }
                // Valid magic, noise after it.
                1 => {
                    let mut b = vec![0u8; rng.random_range(4..64)];
                    rng.fill_bytes(&mut b);
                    b[..4].copy_from_slice(&MAGIC);
                    b
                }
                // A valid packet with a few corrupted bytes and a random cut.
                _ => {
                    let mut b = encode_packet(&random_packet(&mut rng)).unwrap();
                    for _ in 0..rng.random_range(0..3) {
                        let at = rng.random_range(0..b.len());
                        b[at] = rng.random();
                    }
                    if rng.random_bool(0.5) {
                        let keep = rng.random_range(0..=b.len());
                        b.truncate(keep);
                    }
                    b
                }
            };
            if let Ok((p, used)) = decode_packet(&buf) {
                // Anything accepted must re-encode to exactly the bytes consumed.
                assert_eq!(encode_packet(&p).unwrap(), buf[..used]);
                accepted += 1;
            }
        }
        assert!(accepted > 0);
    }

    #[test]
    fn batching_splits_large_rounds() {
        let msg = ProtocolMessage::new(0, MessageKind::FrameDone, 0, Payload::from_bits([true]));
        let packets = batch(4, 11, vec![msg.clone(); 70_000]);
        assert_eq!(
            packets.iter().map(|p| p.messages.len()).collect::<Vec<_>>(),
            vec![65_535, 4_465]
        );
        assert!(packets.iter().all(|p| p.round == 11 && p.session_id == 4));
        assert_eq!(batch(4, 2, vec![msg.clone(); 4]).len(), 1);
        let hb = batch(4, 2, Vec::new());
        assert_eq!(hb.len(), 1);
        assert!(hb[0].is_heartbeat());
        assert!(encode_packet(&Packet::new(0, 0, vec![msg; 65_536])).is_err());
    }

    proptest! {
        #[test]
        fn codec_round_trip(
            session in any::<u64>(),
            round in any::<u32>(),
            msgs in prop::collection::vec(
                (any::<u32>(), 0u8..8, any::<u8>(), prop::collection::vec(any::<bool>(), 0..200)),
                0..6,
            ),
        ) {
            let messages = msgs
                .into_iter()
                .map(|(f, k, p, bits)| {
                    ProtocolMessage::new(f, MessageKind::from_u8(k).unwrap(), p, Payload::from_bits(bits))
                })
                .collect();
            let p = Packet::new(session, round, messages);
            let bytes = encode_packet(&p).unwrap();
            prop_assert_eq!(bytes.len(), p.encoded_len());
            prop_assert_eq!(decode_packet(&bytes).unwrap(), (p, bytes.len()));
        }
    }
}
