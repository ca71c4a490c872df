//! Packet encoding: layout, round trip and batching.

use qkd_cascade::cascade::{MessageKind, Payload, ProtocolMessage};
use qkd_cascade::transport::{batch, decode_packet, encode_packet, Packet};

fn main() -> qkd_cascade::Result<()> {
    let msgs = vec![
        ProtocolMessage::new(3, MessageKind::BlockParities, 1, Payload::from_bits([true, false, true])),
        ProtocolMessage::new(3, MessageKind::BinaryQueries, 2, Payload::from_index_pairs(&[(5, 2), (9, 3)])),
        ProtocolMessage::new(4, MessageKind::VerifyChallenge, 0, Payload::from_u64(0xDEAD_BEEF)),
    ];
    let packet = Packet::new(17, 1, msgs);
    let bytes = encode_packet(&packet)?;
    println!("{} messages -> {} bytes", packet.messages.len(), bytes.len());
    for row in bytes.chunks(16) {
        println!("  {}", row.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" "));
    }
    let (decoded, used) = decode_packet(&bytes)?;
    println!("decoded {used} bytes, identical: {}", decoded == packet);

    let many = (0..70_000)
        .map(|i| ProtocolMessage::new(i, MessageKind::ParityReplies, 1, Payload::from_bits([i % 2 == 0])))
        .collect();
    let parts = batch(17, 2, many);
    let sizes: Vec<_> = parts.iter().map(|p| p.messages.len()).collect();
    println!("70000 messages split into packets of {sizes:?}");
    Ok(())
}
