//! Packets over a TCP stream, each preceded by its length as a `u32` LE.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use super::{decode_packet, encode_into, Link, Packet, PacketSink, PacketSource};
use crate::error::{Error, Result};

/// Largest frame accepted from the peer.
pub const MAX_PACKET_BYTES: usize = 1 << 28;

pub struct TcpSink {
    out: BufWriter<TcpStream>,
    buf: Vec<u8>,
}

pub struct TcpSource {
    input: BufReader<TcpStream>,
    buf: Vec<u8>,
}

/// Splits a connected stream into a link.
pub fn tcp_link(stream: TcpStream) -> Result<Link> {
    stream.set_nodelay(true)?;
    let read_half = stream.try_clone()?;
    Ok(Link::new(
        TcpSink {
            out: BufWriter::new(stream),
            buf: Vec::new(),
        },
        TcpSource {
            input: BufReader::new(read_half),
            buf: Vec::new(),
        },
    ))
}

/// Connects, retrying until `timeout` so the peer may start listening late.
pub fn tcp_connect(addr: impl ToSocketAddrs + Copy, timeout: Duration) -> Result<Link> {
    let start = Instant::now();
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return tcp_link(s),
            Err(_) if start.elapsed() < timeout => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => return Err(e.into()),
        }
    }
}

/// Accepts one connection.
pub fn tcp_accept(listener: &TcpListener) -> Result<Link> {
    let (stream, _) = listener.accept()?;
    tcp_link(stream)
}

impl PacketSink for TcpSink {
    fn send(&mut self, packet: &Packet) -> Result<()> {
        self.buf.clear();
        self.buf.extend_from_slice(&[0; 4]);
        encode_into(packet, &mut self.buf)?;
        let len = (self.buf.len() - 4) as u32;
        self.buf[..4].copy_from_slice(&len.to_le_bytes());
        self.out.write_all(&self.buf).map_err(disconnect)?;
        self.out.flush().map_err(disconnect)
    }
}

impl PacketSource for TcpSource {
    fn recv(&mut self) -> Result<Packet> {
        let mut len = [0u8; 4];
        self.input.read_exact(&mut len).map_err(disconnect)?;
        let len = u32::from_le_bytes(len) as usize;
        if len > MAX_PACKET_BYTES {
            return Err(Error::Decode(format!("{len}-byte packet exceeds the limit")));
        }
        self.buf.resize(len, 0);
        self.input.read_exact(&mut self.buf).map_err(disconnect)?;
        let (p, used) = decode_packet(&self.buf)?;
        if used != len {
            return Err(Error::Decode(format!(
                "{} trailing bytes after packet",
                len - used
            )));
        }
        Ok(p)
    }
}

impl Drop for TcpSink {
    /// Signals end-of-stream to the peer even while the read half lives on.
    fn drop(&mut self) {
        let _ = self.out.flush();
        let _ = self.out.get_ref().shutdown(Shutdown::Write);
    }
}

fn disconnect(e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::BrokenPipe => Error::Disconnected,
        _ => Error::Io(e),
    }
}
