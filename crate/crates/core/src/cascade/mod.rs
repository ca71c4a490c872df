//! Sans-IO Cascade engine.
//!
//! A frame is reconciled by a pair of sessions: a [`CorrectingSession`]
//! that owns the noisy copy and drives every round, and a
//! [`ReferenceSession`] that only answers parity questions about its frame
//! and never modifies it. Neither performs I/O: `step` consumes the peer's
//! messages for one round and returns the messages to send.

mod correcting;
pub mod digest;
mod message;
mod reference;

use std::sync::Arc;

pub use correcting::{CorrectingSession, FrameRecord, WorkDecision};
pub use message::{MessageKind, Payload, ProtocolMessage};
pub use reference::ReferenceSession;

use crate::bitframe::{build_permutation, BitVector, Frame, PermutationTable, FRAME_BITS};
use crate::error::{param, Result};
use crate::params::BlockSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// Holds the reference string; never modified.
    Reference,
    /// Holds the noisy string and applies corrections.
    Correcting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionStatus {
    Running,
    AwaitingReplies,
    Verified,
    Failed,
}

impl SessionStatus {
    pub fn is_final(self) -> bool {
        matches!(self, SessionStatus::Verified | SessionStatus::Failed)
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolOptions {
    /// Use the comparison-tree lock bit to skip backtracking-list scans.
    pub collision_detection: bool,
    /// Accept frames shorter than `FRAME_BITS` with a scaled schedule.
    pub allow_scaled: bool,
    /// Rounds after which a frame is abandoned. `None` selects `256 * log2(N)`.
    pub round_cap: Option<u32>,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            collision_detection: true,
            allow_scaled: false,
            round_cap: None,
        }
    }
}

/// Parameters both parties must share: schedule, shuffling tables and seeds.
/// Immutable once built and shared by every session of a run.
#[derive(Debug)]
pub struct ProtocolContext {
    schedule: BlockSchedule,
    permutations: Vec<PermutationTable>,
    session_seed: u64,
    options: ProtocolOptions,
}

impl ProtocolContext {
    /// Pass 1 is unshuffled; pass `p >= 2` uses the table seeded with
    /// `session_seed + p`.
    pub fn new(
        schedule: BlockSchedule,
        session_seed: u64,
        options: ProtocolOptions,
    ) -> Result<Arc<Self>> {
        let n = schedule.n;
        if (n != FRAME_BITS || schedule.is_scaled()) && !options.allow_scaled {
            return Err(param(format!(
                "frame length {n} / scaled schedule requires scaled mode"
            )));
        }
        for (i, &k) in schedule.k.iter().enumerate() {
            if !k.is_power_of_two() || n % k != 0 {
                return Err(param(format!("pass {} block length {k} does not divide {n}", i + 1)));
            }
        }
        let permutations = (1..=schedule.passes())
            .map(|p| {
                if p == 1 {
                    Ok(PermutationTable::identity(n))
                } else {
                    build_permutation(session_seed.wrapping_add(p as u64), n)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Arc::new(ProtocolContext {
            schedule,
            permutations,
            session_seed,
            options,
        }))
    }

    pub fn schedule(&self) -> &BlockSchedule {
        &self.schedule
    }

    pub fn permutation(&self, pass: usize) -> &PermutationTable {
        &self.permutations[pass - 1]
    }

    pub fn session_seed(&self) -> u64 {
        self.session_seed
    }

    pub fn options(&self) -> &ProtocolOptions {
        &self.options
    }

    pub fn frame_bits(&self) -> usize {
        self.schedule.n
    }

    pub fn round_cap(&self) -> u32 {
        self.options
            .round_cap
            .unwrap_or(256 * self.schedule.n.trailing_zeros())
    }

    /// Shuffled view of `bits` for `pass`.
    pub(crate) fn shuffled(&self, bits: &BitVector, pass: usize) -> BitVector {
        if pass == 1 {
            return bits.clone();
        }
        crate::bitframe::apply_permutation(bits, self.permutation(pass), crate::bitframe::Direction::Forward)
            .expect("frame length checked at session start")
    }

    fn check_frame(&self, frame: &Frame) -> Result<()> {
        if frame.len() != self.schedule.n {
            return Err(param(format!(
                "frame {} has {} bits, schedule expects {}",
                frame.id,
                frame.len(),
                self.schedule.n
            )));
        }
        Ok(())
    }
}

/// Either side of a frame reconciliation.
#[derive(Debug)]
pub enum FrameSession {
    Correcting(CorrectingSession),
    Reference(ReferenceSession),
}

impl FrameSession {
    pub fn new(ctx: Arc<ProtocolContext>, frame: Frame, role: Role) -> Result<Self> {
        Ok(match role {
            Role::Correcting => FrameSession::Correcting(CorrectingSession::new(ctx, frame)?),
            Role::Reference => FrameSession::Reference(ReferenceSession::new(ctx, frame)?),
        })
    }

    pub fn role(&self) -> Role {
        match self {
            FrameSession::Correcting(_) => Role::Correcting,
            FrameSession::Reference(_) => Role::Reference,
        }
    }

    pub fn frame_id(&self) -> u32 {
        match self {
            FrameSession::Correcting(s) => s.frame_id(),
            FrameSession::Reference(s) => s.frame_id(),
        }
    }

    pub fn status(&self) -> SessionStatus {
        match self {
            FrameSession::Correcting(s) => s.status(),
            FrameSession::Reference(s) => s.status(),
        }
    }

    /// Advances one communication round.
    pub fn step(&mut self, incoming: Vec<ProtocolMessage>) -> (Vec<ProtocolMessage>, SessionStatus) {
        match self {
            FrameSession::Correcting(s) => s.step(incoming),
            FrameSession::Reference(s) => s.step(incoming),
        }
    }
}

/// Runs both sides of one frame in memory until the correcting side
/// finishes. Returns the correcting side's record and both final frames.
pub fn reconcile_in_memory(
    ctx: &Arc<ProtocolContext>,
    reference: Frame,
    correcting: Frame,
) -> Result<(FrameRecord, Frame, Frame)> {
    let mut alice = ReferenceSession::new(ctx.clone(), reference)?;
    let mut bob = CorrectingSession::new(ctx.clone(), correcting)?;
    let (mut to_alice, _) = bob.step(Vec::new());
    loop {
        let (to_bob, _) = alice.step(std::mem::take(&mut to_alice));
        if bob.status().is_final() {
            break;
        }
        to_alice = bob.step(to_bob).0;
    }
    let record = bob.record();
    Ok((record, alice.into_frame(), bob.into_frame()))
}
