//! Multi-pipeline scheduling of frame sessions over one link.
//!
//! Each worker owns `stages` session slots. Per communication round it
//! steps every slot in fixed order, sends all their messages as one packet,
//! and blocks for the peer's packet for that round; with `S` stages one
//! round trip serves `S` frames. A finished slot is refilled from the
//! worker's own frame buffer. Workers share the link: packets carry the
//! worker index as session id and a reader thread routes them.
//!
//! The correcting side drives. The reference side answers every packet,
//! with a heartbeat if it has nothing to say, and stops once all frames
//! assigned to a worker are finished; both sides know the assignment from
//! the handshake.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::bitframe::{generate_frame_pair, Frame};
use crate::cascade::{
    CorrectingSession, FrameRecord, MessageKind, Payload, ProtocolContext, ProtocolMessage,
    ReferenceSession, Role,
};
use crate::error::{param, Error, Result};
use crate::transport::{
    batch, sim_pair, ChannelConfig, Link, Packet, PacketSink, PacketSource, MAX_SUBMESSAGES,
};

/// Session id reserved for the handshake.
pub const CONTROL_SESSION: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    pub workers: usize,
    pub stages: usize,
    /// Frames are pulled from the source in chunks of this many bits.
    pub input_buffer_bits: u64,
    /// Upper bound on input bits a single worker processes.
    pub stop_after_bits: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            workers: thread::available_parallelism().map_or(1, |n| n.get()),
            stages: 4,
            input_buffer_bits: 10 << 20,
            stop_after_bits: Some(1 << 30),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, frame_bits: usize) -> Result<()> {
        if self.workers == 0 || self.stages == 0 {
            return Err(param("workers and stages must be at least 1"));
        }
        if self.input_buffer_bits < frame_bits as u64 {
            return Err(param(format!(
                "input buffer of {} bits cannot hold a {frame_bits}-bit frame",
                self.input_buffer_bits
            )));
        }
        Ok(())
    }

    /// Frame ids worker `w` processes, in order.
    pub fn assignment(&self, frames: u64, frame_bits: usize, w: usize) -> Vec<u32> {
        let cap = self
            .stop_after_bits
            .map_or(u64::MAX, |b| b / frame_bits as u64);
        (w as u64..frames)
            .step_by(self.workers)
            .take(cap.min(usize::MAX as u64) as usize)
            .map(|id| id as u32)
            .collect()
    }
}

/// Supplies the local party's copy of a frame.
pub trait FrameSource: Send + Sync {
    fn frame(&self, id: u32) -> Result<Frame>;
}

/// Simulated raw key: frames from a binary symmetric channel, seeded per
/// frame, as held by one side.
#[derive(Clone, Debug)]
pub struct BscFrames {
    pub frame_bits: usize,
    pub qber: f64,
    pub seed: u64,
    pub side: Role,
}

impl FrameSource for BscFrames {
    fn frame(&self, id: u32) -> Result<Frame> {
        let (a, b) = generate_frame_pair(id, self.frame_bits, self.qber, self.seed)?;
        Ok(match self.side {
            Role::Reference => a,
            Role::Correcting => b,
        })
    }
}

/// Pulls frames from a source a buffer-load at a time.
struct FrameBuffer {
    ids: VecDeque<u32>,
    ready: VecDeque<Frame>,
    chunk: usize,
    source: Arc<dyn FrameSource>,
}

impl FrameBuffer {
    fn new(ids: Vec<u32>, chunk: usize, source: Arc<dyn FrameSource>) -> Self {
        FrameBuffer {
            ids: ids.into(),
            ready: VecDeque::new(),
            chunk: chunk.max(1),
            source,
        }
    }

    fn next(&mut self) -> Result<Option<Frame>> {
        if self.ready.is_empty() {
            for _ in 0..self.chunk {
                match self.ids.pop_front() {
                    Some(id) => self.ready.push_back(self.source.frame(id)?),
                    None => break,
                }
            }
        }
        Ok(self.ready.pop_front())
    }
}

/// Parameters both parties must agree on before any frame is exchanged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Agreement {
    fields: Vec<(String, String)>,
}

impl Agreement {
    pub fn new(ctx: &ProtocolContext, cfg: &PipelineConfig, frames: u64) -> Self {
        let s = ctx.schedule();
        let mut fields = vec![
            ("frame_bits".to_string(), s.n.to_string()),
            ("mode".to_string(), s.kind.label().to_string()),
            ("passes".to_string(), s.passes().to_string()),
        ];
        for (i, k) in s.k.iter().enumerate() {
            fields.push((format!("k{}", i + 1), k.to_string()));
        }
        fields.extend([
            ("session_seed".to_string(), ctx.session_seed().to_string()),
            ("stages".to_string(), cfg.stages.to_string()),
            ("workers".to_string(), cfg.workers.to_string()),
            ("frames".to_string(), frames.to_string()),
            (
                "stop_after_bits".to_string(),
                cfg.stop_after_bits.map_or("none".into(), |b| b.to_string()),
            ),
        ]);
        Agreement { fields }
    }

    fn to_message(&self) -> ProtocolMessage {
        let text: String = self
            .fields
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let bytes = text.into_bytes();
        let bits = (bytes.len() * 8) as u32;
        ProtocolMessage::new(
            0,
            MessageKind::Handshake,
            0,
            Payload::from_packed(bytes, bits).expect("whole bytes"),
        )
    }

    fn from_message(msg: &ProtocolMessage) -> Result<Self> {
        if msg.kind != MessageKind::Handshake {
            return Err(Error::Protocol(format!("expected Handshake, got {:?}", msg.kind)));
        }
        let text = std::str::from_utf8(msg.payload.bytes())
            .map_err(|e| Error::Decode(format!("handshake text: {e}")))?;
        let fields = text
            .lines()
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Decode(format!("handshake line {l:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(Agreement { fields })
    }

    /// Fails on the first field where the two sides differ.
    pub fn check(&self, peer: &Agreement) -> Result<()> {
        let theirs: HashMap<&str, &str> = peer
            .fields
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .collect();
        for (k, v) in &self.fields {
            let p = theirs.get(k.as_str()).copied().unwrap_or("<missing>");
            if p != v {
                return Err(Error::Handshake {
                    field: k.clone(),
                    local: v.clone(),
                    peer: p.to_string(),
                });
            }
        }
        if peer.fields.len() != self.fields.len() {
            return Err(Error::Handshake {
                field: "field_count".into(),
                local: self.fields.len().to_string(),
                peer: peer.fields.len().to_string(),
            });
        }
        Ok(())
    }
}

/// Exchanges agreements over `link` and checks them.
pub fn handshake(link: &mut Link, local: &Agreement) -> Result<()> {
    link.sink
        .send(&Packet::new(CONTROL_SESSION, 0, vec![local.to_message()]))?;
    let p = link.source.recv()?;
    if p.session_id != CONTROL_SESSION || p.messages.len() != 1 {
        return Err(Error::Protocol("expected a handshake packet".into()));
    }
    local.check(&Agreement::from_message(&p.messages[0])?)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WorkerStats {
    pub busy: Duration,
    pub wait: Duration,
    pub rounds: u64,
    pub completed: u64,
    pub failed: u64,
    /// Sessions started over the run.
    pub sessions: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SchedulerStats {
    pub workers: Vec<WorkerStats>,
    pub wall: Duration,
}

impl SchedulerStats {
    pub fn rounds(&self) -> u64 {
        self.workers.iter().map(|w| w.rounds).sum()
    }

    pub fn completed(&self) -> u64 {
        self.workers.iter().map(|w| w.completed).sum()
    }

    pub fn failed(&self) -> u64 {
        self.workers.iter().map(|w| w.failed).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameOutcome {
    pub record: FrameRecord,
    /// Remaining differences against the reference copy, when an audit
    /// source was supplied.
    pub residual_errors: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct PipelineReport {
    /// One per frame, by frame id.
    pub outcomes: Vec<FrameOutcome>,
    pub stats: SchedulerStats,
    /// Parity bits counted on the wire, independently of the sessions.
    pub tapped_disclosure_bits: u64,
}

impl PipelineReport {
    pub fn records(&self) -> Vec<FrameRecord> {
        self.outcomes.iter().map(|o| o.record.clone()).collect()
    }
}

type SharedSink = Arc<Mutex<Box<dyn PacketSink>>>;

fn send_round(sink: &SharedSink, session: u64, round: u32, msgs: Vec<ProtocolMessage>) -> Result<()> {
    let mut packets = batch(session, round, msgs);
    // A full packet announces a continuation; close an exact multiple with
    // an empty one.
    if packets.last().is_some_and(|p| p.messages.len() == MAX_SUBMESSAGES) {
        packets.push(Packet::heartbeat(session, round));
    }
    let mut sink = sink.lock().expect("sink poisoned");
    packets.iter().try_for_each(|p| sink.send(p))
}

fn recv_round(inbox: &Receiver<Packet>, round: u32) -> Result<Vec<ProtocolMessage>> {
    let mut msgs = Vec::new();
    loop {
        let p = inbox.recv().map_err(|_| Error::Disconnected)?;
        if p.round != round {
            return Err(Error::Protocol(format!(
                "packet for round {} while in round {round}",
                p.round
            )));
        }
        let more = p.messages.len() == MAX_SUBMESSAGES;
        msgs.extend(p.messages);
        if !more {
            return Ok(msgs);
        }
    }
}

/// Routes incoming packets to workers by session id until the peer closes.
fn spawn_demux(
    mut link_source: Box<dyn PacketSource>,
    inboxes: Vec<Sender<Packet>>,
) -> thread::JoinHandle<Result<()>> {
    thread::spawn(move || loop {
        match link_source.recv() {
            Ok(p) => {
                let to = inboxes.get(p.session_id as usize).ok_or_else(|| {
                    Error::Protocol(format!("packet for unknown session {}", p.session_id))
                })?;
                // A worker that already finished has nothing left to hear.
                let _ = to.send(p);
            }
            Err(Error::Disconnected) => return Ok(()),
            Err(e) => return Err(e),
        }
    })
}

/// Joins workers and the reader; the first worker error wins, then the
/// reader's.
fn finish<T>(
    workers: Vec<thread::JoinHandle<Result<T>>>,
    sink: SharedSink,
    demux: thread::JoinHandle<Result<()>>,
) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = workers
        .into_iter()
        .map(|h| h.join().expect("worker panicked"))
        .collect();
    // Closing our direction lets the peer's reader, and then ours, finish.
    drop(sink);
    let demux_result = demux.join().expect("reader panicked");
    let mut out = Vec::with_capacity(results.len());
    let mut first_err = None;
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match (first_err, demux_result) {
        (Some(Error::Disconnected), Err(e)) => Err(e),
        (Some(e), _) => Err(e),
        (None, Err(e)) => Err(e),
        (None, Ok(())) => Ok(out),
    }
}

/// Runs the correcting party over `link`: handshake, then all `frames`.
/// With `audit` (the reference party's frames), each outcome reports the
/// residual differences.
pub fn run_correcting(
    cfg: &PipelineConfig,
    ctx: &Arc<ProtocolContext>,
    frames: u64,
    link: Link,
    source: Arc<dyn FrameSource>,
    audit: Option<Arc<dyn FrameSource>>,
) -> Result<PipelineReport> {
    cfg.validate(ctx.frame_bits())?;
    let (mut link, tap) = link.tapped();
    handshake(&mut link, &Agreement::new(ctx, cfg, frames))?;
    let start = Instant::now();
    let tap_before = tap.bits();
    let sink: SharedSink = Arc::new(Mutex::new(link.sink));
    let mut inboxes = Vec::new();
    let mut handles = Vec::new();
    let chunk = (cfg.input_buffer_bits / ctx.frame_bits() as u64) as usize;
    for w in 0..cfg.workers {
        let (tx, rx) = channel();
        inboxes.push(tx);
        let buffer = FrameBuffer::new(cfg.assignment(frames, ctx.frame_bits(), w), chunk, source.clone());
        let (ctx, sink, audit, stages) = (ctx.clone(), sink.clone(), audit.clone(), cfg.stages);
        handles.push(thread::spawn(move || {
            correcting_worker(w as u64, stages, ctx, buffer, audit, sink, rx)
        }));
    }
    let demux = spawn_demux(link.source, inboxes);
    let results = finish(handles, sink, demux)?;
    let wall = start.elapsed();
    let mut outcomes = Vec::new();
    let mut workers = Vec::new();
    for (o, s) in results {
        outcomes.extend(o);
        workers.push(s);
    }
    outcomes.sort_by_key(|o| o.record.frame_id);
    Ok(PipelineReport {
        outcomes,
        stats: SchedulerStats { workers, wall },
        tapped_disclosure_bits: tap.bits() - tap_before,
    })
}

fn correcting_worker(
    session: u64,
    stages: usize,
    ctx: Arc<ProtocolContext>,
    mut buffer: FrameBuffer,
    audit: Option<Arc<dyn FrameSource>>,
    sink: SharedSink,
    inbox: Receiver<Packet>,
) -> Result<(Vec<FrameOutcome>, WorkerStats)> {
    let mut stats = WorkerStats::default();
    let mut slots: Vec<Option<CorrectingSession>> = (0..stages).map(|_| None).collect();
    let mut outcomes = Vec::new();
    let mut outgoing: Vec<ProtocolMessage> = Vec::new();
    let mut round = 0u32;
    loop {
        let t = Instant::now();
        for slot in slots.iter_mut().filter(|s| s.is_none()) {
            let Some(frame) = buffer.next()? else { break };
            let mut s = CorrectingSession::new(ctx.clone(), frame)?;
            outgoing.extend(s.step(Vec::new()).0);
            stats.sessions += 1;
            *slot = Some(s);
        }
        if outgoing.is_empty() && slots.iter().all(Option::is_none) {
            stats.busy += t.elapsed();
            return Ok((outcomes, stats));
        }
        round += 1;
        stats.rounds += 1;
        send_round(&sink, session, round, std::mem::take(&mut outgoing))?;
        stats.busy += t.elapsed();

        let t = Instant::now();
        let replies = recv_round(&inbox, round)?;
        stats.wait += t.elapsed();

        let t = Instant::now();
        let mut by_frame: HashMap<u32, Vec<ProtocolMessage>> = HashMap::new();
        for m in replies {
            by_frame.entry(m.frame_id).or_default().push(m);
        }
        for slot in slots.iter_mut() {
            let Some(s) = slot else { continue };
            let incoming = by_frame.remove(&s.frame_id()).unwrap_or_default();
            let (out, status) = s.step(incoming);
            outgoing.extend(out);
            if status.is_final() {
                let s = slot.take().unwrap();
                let record = s.record();
                if record.verified {
                    stats.completed += 1;
                } else {
                    stats.failed += 1;
                }
                let residual_errors = match &audit {
                    Some(a) => {
                        let reference = a.frame(record.frame_id)?;
                        Some(reference.bits.hamming_distance(&s.frame().bits)? as u64)
                    }
                    None => None,
                };
                outcomes.push(FrameOutcome {
                    record,
                    residual_errors,
                });
            }
        }
        if let Some(id) = by_frame.keys().next() {
            return Err(Error::Protocol(format!("reply for frame {id}, which is not in flight")));
        }
        stats.busy += t.elapsed();
    }
}

/// Reference party's summary.
#[derive(Clone, Debug)]
pub struct ReferenceReport {
    pub stats: SchedulerStats,
    /// Parity bits this side disclosed over all frames.
    pub disclosed_bits: u64,
}

/// Runs the reference party over `link` until every assigned frame is
/// finished.
pub fn run_reference(
    cfg: &PipelineConfig,
    ctx: &Arc<ProtocolContext>,
    frames: u64,
    mut link: Link,
    source: Arc<dyn FrameSource>,
) -> Result<ReferenceReport> {
    cfg.validate(ctx.frame_bits())?;
    handshake(&mut link, &Agreement::new(ctx, cfg, frames))?;
    let start = Instant::now();
    let sink: SharedSink = Arc::new(Mutex::new(link.sink));
    let chunk = (cfg.input_buffer_bits / ctx.frame_bits() as u64) as usize;
    let mut inboxes = Vec::new();
    let mut handles = Vec::new();
    for w in 0..cfg.workers {
        let (tx, rx) = channel();
        inboxes.push(tx);
        let ids = cfg.assignment(frames, ctx.frame_bits(), w);
        let buffer = FrameBuffer::new(ids.clone(), chunk, source.clone());
        let (ctx, sink) = (ctx.clone(), sink.clone());
        handles.push(thread::spawn(move || reference_worker(w as u64, ctx, ids, buffer, sink, rx)));
    }
    let demux = spawn_demux(link.source, inboxes);
    let results = finish(handles, sink, demux)?;
    let disclosed_bits = results.iter().map(|(_, d)| d).sum();
    Ok(ReferenceReport {
        stats: SchedulerStats {
            workers: results.into_iter().map(|(s, _)| s).collect(),
            wall: start.elapsed(),
        },
        disclosed_bits,
    })
}

fn reference_worker(
    session: u64,
    ctx: Arc<ProtocolContext>,
    ids: Vec<u32>,
    mut buffer: FrameBuffer,
    sink: SharedSink,
    inbox: Receiver<Packet>,
) -> Result<(WorkerStats, u64)> {
    let mut stats = WorkerStats::default();
    let mut expected: VecDeque<u32> = ids.into();
    let total = expected.len();
    let mut active: HashMap<u32, ReferenceSession> = HashMap::new();
    let mut finished: HashSet<u32> = HashSet::new();
    let mut disclosed = 0u64;
    let mut round = 0u32;
    while finished.len() < total {
        round += 1;
        let t = Instant::now();
        let msgs = recv_round(&inbox, round)?;
        stats.wait += t.elapsed();

        let t = Instant::now();
        stats.rounds += 1;
        // Group by frame, keeping the order in which frames appear.
        let mut order = Vec::new();
        let mut by_frame: HashMap<u32, Vec<ProtocolMessage>> = HashMap::new();
        for m in msgs {
            if !by_frame.contains_key(&m.frame_id) {
                order.push(m.frame_id);
            }
            by_frame.entry(m.frame_id).or_default().push(m);
        }
        let mut out = Vec::new();
        for id in order {
            let incoming = by_frame.remove(&id).unwrap();
            if finished.contains(&id) {
                // The peer confirming an abort we already reported.
                if incoming.iter().all(|m| m.kind == MessageKind::FrameDone) {
                    continue;
                }
                return Err(Error::Protocol(format!("messages for finished frame {id}")));
            }
            if !active.contains_key(&id) {
                if expected.front() != Some(&id) {
                    return Err(Error::Protocol(format!(
                        "frame {id} started out of order (expected {:?})",
                        expected.front()
                    )));
                }
                expected.pop_front();
                let frame = buffer.next()?.expect("buffer holds every assigned frame");
                debug_assert_eq!(frame.id, id);
                active.insert(id, ReferenceSession::new(ctx.clone(), frame)?);
                stats.sessions += 1;
            }
            let s = active.get_mut(&id).unwrap();
            let (replies, status) = s.step(incoming);
            out.extend(replies);
            if status.is_final() {
                let s = active.remove(&id).unwrap();
                disclosed += s.m_star();
                if status == crate::cascade::SessionStatus::Verified {
                    stats.completed += 1;
                } else {
                    stats.failed += 1;
                }
                finished.insert(id);
            }
        }
        send_round(&sink, session, round, out)?;
        stats.busy += t.elapsed();
    }
    Ok((stats, disclosed))
}

/// Both parties in one process over a simulated link; the reference party
/// runs on its own threads.
pub fn run_dual(
    cfg: &PipelineConfig,
    ctx: &Arc<ProtocolContext>,
    frames: u64,
    channel_cfg: ChannelConfig,
    reference: Arc<dyn FrameSource>,
    correcting: Arc<dyn FrameSource>,
    audit: bool,
) -> Result<(PipelineReport, ReferenceReport)> {
    let (a_link, b_link) = sim_pair(channel_cfg)?;
    let (rcfg, rctx, rsrc) = (cfg.clone(), ctx.clone(), reference.clone());
    let alice = thread::spawn(move || run_reference(&rcfg, &rctx, frames, a_link, rsrc));
    let bob = run_correcting(cfg, ctx, frames, b_link, correcting, audit.then_some(reference));
    let alice = alice.join().expect("reference party panicked");
    Ok((bob?, alice?))
}
