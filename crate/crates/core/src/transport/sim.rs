//! In-process link with configurable one-way latency.
//!
//! Packets are encoded on send and decoded on receipt, so the simulated
//! path exercises the same codec as the socket path. Each direction is a
//! FIFO queue; a packet becomes visible `latency + U(0, jitter)` after it
//! was sent, but never before the packet ahead of it.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{decode_packet, encode_packet, Link, Packet, PacketSink, PacketSource};
use crate::error::{param, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelConfig {
    /// One-way latency in milliseconds.
    pub latency_ms: f64,
    /// Upper bound of the uniform extra delay, in milliseconds.
    pub jitter_ms: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            latency_ms: 0.0,
            jitter_ms: 0.0,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn new(latency_ms: f64, jitter_ms: f64, seed: u64) -> Result<Self> {
        let cfg = ChannelConfig {
            latency_ms,
            jitter_ms,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.latency_ms >= 0.0 && self.latency_ms.is_finite()) {
            return Err(param(format!("latency must be >= 0 ms, got {}", self.latency_ms)));
        }
        if !(self.jitter_ms >= 0.0 && self.jitter_ms.is_finite()) {
            return Err(param(format!("jitter must be >= 0 ms, got {}", self.jitter_ms)));
        }
        Ok(())
    }
}

#[derive(Default)]
struct Queue {
    packets: VecDeque<(Instant, Vec<u8>)>,
    closed: bool,
}

#[derive(Default)]
struct Pipe {
    queue: Mutex<Queue>,
    ready: Condvar,
}

pub struct SimSink {
    pipe: Arc<Pipe>,
    latency: Duration,
    jitter_ms: f64,
    rng: ChaCha8Rng,
    last_due: Option<Instant>,
}

pub struct SimSource {
    pipe: Arc<Pipe>,
}

/// One direction of a simulated link.
pub fn sim_channel(cfg: ChannelConfig) -> Result<(SimSink, SimSource)> {
    cfg.validate()?;
    let pipe = Arc::new(Pipe::default());
    Ok((
        SimSink {
            pipe: pipe.clone(),
            latency: Duration::from_secs_f64(cfg.latency_ms / 1e3),
            jitter_ms: cfg.jitter_ms,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            last_due: None,
        },
        SimSource { pipe },
    ))
}

/// Two connected endpoints. The directions draw jitter from distinct
/// streams derived from `cfg.seed`.
pub fn sim_pair(cfg: ChannelConfig) -> Result<(Link, Link)> {
    let (a_tx, b_rx) = sim_channel(cfg)?;
    let back = ChannelConfig {
        seed: cfg.seed ^ 0x9E37_79B9_7F4A_7C15,
        ..cfg
    };
    let (b_tx, a_rx) = sim_channel(back)?;
    Ok((Link::new(a_tx, a_rx), Link::new(b_tx, b_rx)))
}

impl PacketSink for SimSink {
    fn send(&mut self, packet: &Packet) -> Result<()> {
        let bytes = encode_packet(packet)?;
        let extra = if self.jitter_ms > 0.0 {
            Duration::from_secs_f64(self.rng.random_range(0.0..=self.jitter_ms) / 1e3)
        } else {
            Duration::ZERO
        };
        let mut due = Instant::now() + self.latency + extra;
        if let Some(last) = self.last_due {
            due = due.max(last);
        }
        self.last_due = Some(due);
        let mut q = self.pipe.queue.lock().expect("sim queue poisoned");
        if q.closed {
            return Err(Error::Disconnected);
        }
        q.packets.push_back((due, bytes));
        drop(q);
        self.pipe.ready.notify_one();
        Ok(())
    }
}

impl Drop for SimSink {
    fn drop(&mut self) {
        if let Ok(mut q) = self.pipe.queue.lock() {
            q.closed = true;
        }
        self.pipe.ready.notify_all();
    }
}

impl Drop for SimSource {
    fn drop(&mut self) {
        if let Ok(mut q) = self.pipe.queue.lock() {
            q.closed = true;
            q.packets.clear();
        }
    }
}

impl PacketSource for SimSource {
    fn recv(&mut self) -> Result<Packet> {
        let mut q = self.pipe.queue.lock().expect("sim queue poisoned");
        loop {
            let now = Instant::now();
            match q.packets.front() {
                Some(&(due, _)) if due <= now => {
                    let (_, bytes) = q.packets.pop_front().unwrap();
                    drop(q);
                    let (p, _) = decode_packet(&bytes)?;
                    return Ok(p);
                }
                Some(&(due, _)) => {
                    q = self.pipe.ready.wait_timeout(q, due - now).expect("sim queue poisoned").0;
                }
                None if q.closed => return Err(Error::Disconnected),
                None => q = self.pipe.ready.wait(q).expect("sim queue poisoned"),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{MessageKind, Payload, ProtocolMessage};
    use std::thread;

    fn numbered(i: u32) -> Packet {
        Packet::new(
            1,
            i,
            vec![ProtocolMessage::new(i, MessageKind::FrameDone, 0, Payload::from_bits([true]))],
        )
    }

    #[test]
    fn zero_latency_is_immediate_fifo() {
        let (mut tx, mut rx) = sim_channel(ChannelConfig::default()).unwrap();
        for i in 0..5 {
            tx.send(&numbered(i)).unwrap();
        }
        for i in 0..5 {
            assert_eq!(rx.recv().unwrap(), numbered(i));
        }
    }

    #[test]
    fn order_survives_latency_and_jitter() {
        let (mut tx, mut rx) = sim_channel(ChannelConfig::new(1.0, 3.0, 5).unwrap()).unwrap();
        for i in 0..10 {
            tx.send(&numbered(i)).unwrap();
        }
        for i in 0..10 {
            assert_eq!(rx.recv().unwrap().round, i);
        }
    }

    #[test]
    fn round_trip_time_is_bounded() {
        let (l, j) = (3.0, 1.0);
        let (a, b) = sim_pair(ChannelConfig::new(l, j, 9).unwrap()).unwrap();
        let (mut a_tx, mut a_rx) = (a.sink, a.source);
        let (mut b_tx, mut b_rx) = (b.sink, b.source);
        let echo = thread::spawn(move || {
            for _ in 0..5 {
                let p = b_rx.recv().unwrap();
                b_tx.send(&p).unwrap();
            }
        });
        for i in 0..5 {
            let t = Instant::now();
            a_tx.send(&numbered(i)).unwrap();
            assert_eq!(a_rx.recv().unwrap().round, i);
            let rtt = t.elapsed().as_secs_f64() * 1e3;
            assert!(rtt >= 2.0 * l, "rtt {rtt} ms");
            // Scheduling slack on a loaded machine on top of 2(L + J).
            assert!(rtt <= 2.0 * (l + j) + 5.0, "rtt {rtt} ms");
        }
        echo.join().unwrap();
    }

    #[test]
    fn dropped_sender_disconnects_after_draining() {
        let (mut tx, mut rx) = sim_channel(ChannelConfig::new(0.5, 0.0, 0).unwrap()).unwrap();
        tx.send(&numbered(0)).unwrap();
        drop(tx);
        assert_eq!(rx.recv().unwrap().round, 0);
        assert!(matches!(rx.recv(), Err(Error::Disconnected)));
    }

    #[test]
    fn negative_latency_is_rejected() {
        assert!(ChannelConfig::new(-1.0, 0.0, 0).is_err());
        assert!(ChannelConfig::new(1.0, f64::NAN, 0).is_err());
    }
}
