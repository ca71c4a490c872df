use std::sync::Arc;

use super::digest::{frame_digest, salt_from};
use super::{MessageKind, Payload, ProtocolContext, ProtocolMessage, SessionStatus};
use crate::bitframe::Frame;
use crate::error::{Error, Result};
use crate::paritytree::{ComparisonTree, Descent, ParityTree};

/// Passes that keep a comparison tree (and hence a lock bit).
const COMPARISON_PASSES: usize = 2;

/// What the correcting side does with its pending work. Backtracked
/// blocks are drained first, smallest block length first; lists of several
/// passes may be opened before the next round, and their searches then run
/// side by side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WorkDecision {
    /// Binary-search these blocks of `pass`, all in lockstep.
    StartSearches { pass: usize, blocks: Vec<u32> },
    AdvancePass,
    BeginVerify,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Idle,
    AwaitParities,
    AwaitBinary,
    AwaitVerify,
    Done,
}

/// A binary search waiting for the remote parity of `2 * node`.
///
/// Passes without a comparison tree keep the reference side's parity of
/// every node on the root-to-`node` path in `path` (bit `d` = depth `d`).
/// That is enough to re-locate an odd sub-block after a concurrent search
/// in another pass has flipped bits inside this block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Cursor {
    block: u32,
    node: u32,
    path: u64,
}

/// Where a search stands after taking in everything currently known.
enum Next {
    /// The block's mismatch became even; nothing left to find.
    Retire,
    Leaf(usize),
    Query { node: usize, path: u64 },
}

fn depth(node: usize) -> u32 {
    usize::BITS - 1 - node.leading_zeros()
}

/// Re-walks the known path of a cursor against the current local parities.
/// Starting from the (odd) root, follows the path while it stays odd; where
/// it turns even, the sibling must be odd and its reference parity follows
/// from the parent's.
fn walk(tree: &ParityTree, block: usize, node: usize, path: u64) -> Next {
    if !tree.get_root_comparison(block) {
        return Next::Retire;
    }
    let k = tree.block_len();
    let at = |x: usize, p: u64| {
        if x >= k {
            Next::Leaf(x - k)
        } else {
            Next::Query { node: x, path: p }
        }
    };
    let dn = depth(node);
    for d in 1..=dn {
        let c = node >> (dn - d);
        let remote_c = (path >> d) & 1 == 1;
        if tree.node(block, c) ^ remote_c {
            continue;
        }
        let remote_parent = (path >> (d - 1)) & 1 == 1;
        let remote_s = remote_parent ^ remote_c;
        let prefix = path & ((1u64 << d) - 1);
        return at(c ^ 1, prefix | (remote_s as u64) << d);
    }
    at(node, path)
}

/// Per-frame outcome and counters reported by the correcting side.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrameRecord {
    pub frame_id: u32,
    pub n_bits: u64,
    pub verified: bool,
    /// Parity bits disclosed by the reference side.
    pub m_star: u64,
    pub rounds: u32,
    pub corrections: u64,
    pub backtrack_events: u64,
    /// Linear scans of a backtracking list.
    pub searchlist_calls: u64,
    /// Blocks dropped from a backtracking list because a second correction
    /// made their pending mismatch even again.
    pub collisions: u64,
    pub failure: Option<String>,
}

/// The side holding the noisy frame. Drives every round.
#[derive(Debug)]
pub struct CorrectingSession {
    ctx: Arc<ProtocolContext>,
    frame: Frame,
    pass: usize,
    trees: Vec<ParityTree>,
    comparisons: Vec<ComparisonTree>,
    backtrack: Vec<Vec<u32>>,
    /// In-flight searches, per pass.
    cursors: Vec<Vec<Cursor>>,
    /// Blocks owned by a search, per pass. A correction landing in such a
    /// block is left to the search instead of the backtracking list.
    searching: Vec<Vec<bool>>,
    /// Passes queried in the outstanding round, in message order.
    queried: Vec<usize>,
    phase: Phase,
    status: SessionStatus,
    salt: u64,
    record: FrameRecord,
}

impl CorrectingSession {
    pub fn new(ctx: Arc<ProtocolContext>, frame: Frame) -> Result<Self> {
        ctx.check_frame(&frame)?;
        let passes = ctx.schedule().passes();
        let salt = salt_from(ctx.session_seed().rotate_left(29) ^ (frame.id as u64) << 1 ^ 0x5A17);
        let record = FrameRecord {
            frame_id: frame.id,
            n_bits: frame.len() as u64,
            ..FrameRecord::default()
        };
        Ok(CorrectingSession {
            ctx,
            frame,
            pass: 0,
            trees: Vec::with_capacity(passes),
            comparisons: Vec::with_capacity(COMPARISON_PASSES),
            backtrack: vec![Vec::new(); passes],
            cursors: vec![Vec::new(); passes],
            searching: Vec::with_capacity(passes),
            queried: Vec::new(),
            phase: Phase::Idle,
            status: SessionStatus::Running,
            salt,
            record,
        })
    }

    pub fn frame_id(&self) -> u32 {
        self.frame.id
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn into_frame(self) -> Frame {
        self.frame
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    /// Last started pass (0 before the first).
    pub fn pass(&self) -> usize {
        self.pass
    }

    pub fn rounds(&self) -> u32 {
        self.record.rounds
    }

    pub fn m_star(&self) -> u64 {
        self.record.m_star
    }

    pub fn record(&self) -> FrameRecord {
        self.record.clone()
    }

    /// Parity trees plus comparison trees currently allocated.
    pub fn tree_count(&self) -> usize {
        self.trees.len() + self.comparisons.len()
    }

    pub fn tree_storage_bits(&self) -> usize {
        self.trees.iter().map(ParityTree::storage_bits).sum::<usize>()
            + self
                .comparisons
                .iter()
                .map(ComparisonTree::storage_bits)
                .sum::<usize>()
    }

    pub fn parity_tree(&self, pass: usize) -> &ParityTree {
        &self.trees[pass - 1]
    }

    pub fn comparison_tree(&self, pass: usize) -> Option<&ComparisonTree> {
        self.comparisons.get(pass - 1)
    }

    pub fn backtrack_list(&self, pass: usize) -> &[u32] {
        &self.backtrack[pass - 1]
    }

    /// `(pass, block)` of every search in flight, in query order.
    pub fn active_blocks(&self) -> Vec<(usize, u32)> {
        self.cursors
            .iter()
            .enumerate()
            .flat_map(|(p, cs)| cs.iter().map(move |c| (p + 1, c.block)))
            .collect()
    }

    /// Depth (root = 0) of the node each in-flight query descends into.
    pub fn cursor_depths(&self) -> Vec<u32> {
        self.cursors
            .iter()
            .flatten()
            .map(|c| depth(c.node as usize))
            .collect()
    }

    pub fn salt(&self) -> u64 {
        self.salt
    }

    fn block_len(&self, pass: usize) -> usize {
        self.ctx.schedule().block_len(pass)
    }

    fn has_cursors(&self) -> bool {
        self.cursors.iter().any(|c| !c.is_empty())
    }

    /// Shuffles the frame for the next pass, builds its trees and returns
    /// this side's block parities.
    pub fn start_pass(&mut self) -> Result<ProtocolMessage> {
        if self.has_cursors() {
            return Err(Error::State("binary searches still pending".into()));
        }
        if self.status.is_final() || self.pass >= self.ctx.schedule().passes() {
            return Err(Error::State(format!("cannot start pass {}", self.pass + 1)));
        }
        self.pass += 1;
        let pass = self.pass;
        let k = self.block_len(pass);
        let blocks = self.ctx.frame_bits() / k;
        let shuffled = self.ctx.shuffled(&self.frame.bits, pass);
        let tree = ParityTree::build(&shuffled, 0, k, blocks)?;
        let payload = Payload::from_bits((0..blocks).map(|b| tree.block_parity(b)));
        self.trees.push(tree);
        self.searching.push(vec![false; blocks]);
        if pass <= COMPARISON_PASSES {
            self.comparisons.push(ComparisonTree::new(k, blocks)?);
        }
        self.phase = Phase::AwaitParities;
        Ok(ProtocolMessage::new(
            self.frame.id,
            MessageKind::BlockParities,
            pass as u8,
            payload,
        ))
    }

    /// Records the reference side's per-block comparison and opens a search
    /// on every mismatched block. Returns the number of mismatches.
    pub fn compare_and_enqueue(&mut self, replies: &ProtocolMessage) -> Result<usize> {
        let pass = self.pass;
        if self.phase != Phase::AwaitParities
            || replies.kind != MessageKind::ParityReplies
            || replies.pass_index as usize != pass
        {
            return Err(Error::Protocol(format!(
                "unexpected {:?} for pass {} while starting pass {pass}",
                replies.kind, replies.pass_index
            )));
        }
        let blocks = self.trees[pass - 1].blocks();
        if replies.payload.bit_len() as usize != blocks {
            return Err(Error::Protocol(format!(
                "{} parity replies for {blocks} blocks",
                replies.payload.bit_len()
            )));
        }
        self.record.m_star += blocks as u64;
        let mut mismatched = Vec::new();
        for (b, mismatch) in replies.payload.bits().enumerate() {
            self.trees[pass - 1].set_root_comparison(b, mismatch);
            if let Some(cmp) = self.comparisons.get_mut(pass - 1) {
                cmp.set_root(b, mismatch);
            }
            if mismatch {
                mismatched.push(b as u32);
            }
        }
        self.phase = Phase::Idle;
        let count = mismatched.len();
        self.open_searches(pass, mismatched);
        Ok(count)
    }

    /// Opens a cursor on each block; blocks already narrowed to one bit are
    /// corrected at once.
    fn open_searches(&mut self, pass: usize, blocks: Vec<u32>) {
        for b in blocks {
            debug_assert!(self.trees[pass - 1].get_root_comparison(b as usize));
            debug_assert!(!self.searching[pass - 1][b as usize]);
            self.searching[pass - 1][b as usize] = true;
            let start = Cursor { block: b, node: 1, path: 0 };
            let remote_root =
                self.trees[pass - 1].node(b as usize, 1) ^ self.trees[pass - 1].get_root_comparison(b as usize);
            let next = self.locate(pass, Cursor { path: remote_root as u64, ..start });
            self.follow(pass, b, next);
        }
    }

    /// Where the search in `c` continues given everything now known.
    fn locate(&self, pass: usize, c: Cursor) -> Next {
        let b = c.block as usize;
        match self.comparisons.get(pass - 1) {
            Some(cmp) if !cmp.root(b) => Next::Retire,
            Some(cmp) => match cmp.descend(b) {
                Descent::Leaf(leaf) => Next::Leaf(leaf),
                Descent::Query(node) => Next::Query { node, path: 0 },
            },
            None => walk(&self.trees[pass - 1], b, c.node as usize, c.path),
        }
    }

    fn follow(&mut self, pass: usize, block: u32, next: Next) -> Option<usize> {
        match next {
            Next::Query { node, path } => {
                self.cursors[pass - 1].push(Cursor {
                    block,
                    node: node as u32,
                    path,
                });
                None
            }
            Next::Leaf(leaf) => {
                let pos = self.correct(pass, block as usize, leaf);
                self.searching[pass - 1][block as usize] = false;
                Some(pos)
            }
            Next::Retire => {
                self.searching[pass - 1][block as usize] = false;
                None
            }
        }
    }

    /// Queries the left child of every cursor's current node: one message
    /// per pass with searches in flight, ascending by pass.
    pub fn binary_search_round(&mut self) -> Result<Vec<ProtocolMessage>> {
        if !self.has_cursors() {
            return Err(Error::State("no active binary search".into()));
        }
        self.queried.clear();
        let mut out = Vec::new();
        for (p, cs) in self.cursors.iter().enumerate() {
            if cs.is_empty() {
                continue;
            }
            let pairs: Vec<(u32, u32)> = cs.iter().map(|c| (c.block, 2 * c.node)).collect();
            self.queried.push(p + 1);
            out.push(ProtocolMessage::new(
                self.frame.id,
                MessageKind::BinaryQueries,
                (p + 1) as u8,
                Payload::from_index_pairs(&pairs),
            ));
        }
        self.phase = Phase::AwaitBinary;
        Ok(out)
    }

    /// Descends every cursor by the reply bits; cursors that reach a leaf
    /// flip that bit and retire, and the flip is backtracked into every
    /// other started pass at once. Returns corrected frame positions.
    pub fn absorb_binary_replies(&mut self, replies: &[ProtocolMessage]) -> Result<Vec<usize>> {
        if self.phase != Phase::AwaitBinary || replies.len() != self.queried.len() {
            return Err(Error::Protocol(format!(
                "{} binary reply messages for {} query messages",
                replies.len(),
                self.queried.len()
            )));
        }
        for (msg, &pass) in replies.iter().zip(&self.queried) {
            let expected = self.cursors[pass - 1].len();
            if msg.kind != MessageKind::BinaryReplies
                || msg.pass_index as usize != pass
                || msg.payload.bit_len() as usize != expected
            {
                return Err(Error::Protocol(format!(
                    "expected {expected} BinaryReplies for pass {pass}, got {} {:?} for pass {}",
                    msg.payload.bit_len(),
                    msg.kind,
                    msg.pass_index
                )));
            }
        }
        self.phase = Phase::Idle;
        let queried = std::mem::take(&mut self.queried);
        let mut corrected = Vec::new();
        for (msg, pass) in replies.iter().zip(queried) {
            self.record.m_star += msg.payload.bit_len() as u64;
            let cursors = std::mem::take(&mut self.cursors[pass - 1]);
            for (c, remote) in cursors.into_iter().zip(msg.payload.bits()) {
                let (b, i) = (c.block as usize, c.node as usize);
                let next = match self.comparisons.get_mut(pass - 1) {
                    Some(cmp) => {
                        let left_mismatch = self.trees[pass - 1].node(b, 2 * i) ^ remote;
                        cmp.resolve(b, i, left_mismatch);
                        self.locate(pass, c)
                    }
                    None => {
                        let path = c.path | (remote as u64) << (depth(i) + 1);
                        let child = Cursor { node: 2 * c.node, path, ..c };
                        self.locate(pass, child)
                    }
                };
                corrected.extend(self.follow(pass, c.block, next));
            }
        }
        Ok(corrected)
    }

    /// Flips the bit at `leaf` of `block` in `pass`, updates every started
    /// pass's trees and backtracks. Returns the frame position.
    fn correct(&mut self, pass: usize, block: usize, leaf: usize) -> usize {
        let k = self.block_len(pass);
        let pos = self.ctx.permutation(pass).unmap(block * k + leaf);
        self.frame.bits.flip(pos);
        self.record.corrections += 1;
        for q in 1..=self.pass {
            let kq = self.block_len(q);
            let shuffled = self.ctx.permutation(q).map(pos);
            let (bq, lq) = (shuffled / kq, shuffled % kq);
            let tree = &mut self.trees[q - 1];
            tree.flip_leaf_path(bq, lq).expect("position within frame");
            tree.toggle_root_comparison(bq);
            if let Some(cmp) = self.comparisons.get_mut(q - 1) {
                cmp.flip_leaf_path(bq, lq).expect("position within frame");
                debug_assert_eq!(cmp.root(bq), self.trees[q - 1].get_root_comparison(bq));
            }
        }
        debug_assert!(!self.trees[pass - 1].get_root_comparison(block));
        self.cascade_backtrack(&[pos]);
        pos
    }

    /// Re-examines the blocks of every started pass that contain a
    /// corrected position; their mismatch parity has flipped. Blocks with a
    /// search in flight (including the one that found the error) are left
    /// to that search.
    pub fn cascade_backtrack(&mut self, corrected_positions: &[usize]) {
        for &pos in corrected_positions {
            for q in 1..=self.pass {
                let block = self.ctx.permutation(q).map(pos) / self.block_len(q);
                if !self.searching[q - 1][block] {
                    self.backtrack_block(q, block as u32);
                }
            }
        }
    }

    fn backtrack_block(&mut self, pass: usize, block: u32) {
        self.record.backtrack_events += 1;
        if self.ctx.options().collision_detection {
            if let Some(cmp) = self.comparisons.get_mut(pass - 1) {
                if !cmp.lock(block as usize) {
                    self.backtrack[pass - 1].push(block);
                    return;
                }
            }
        }
        self.search_list(pass, block);
    }

    /// Toggles `block`'s membership in the pass's backtracking list.
    fn search_list(&mut self, pass: usize, block: u32) {
        self.record.searchlist_calls += 1;
        let list = &mut self.backtrack[pass - 1];
        match list.iter().position(|&b| b == block) {
            Some(at) => {
                list.remove(at);
                self.record.collisions += 1;
            }
            None => list.push(block),
        }
    }

    /// Smallest-block pass with pending backtracked blocks first; otherwise
    /// the next pass, and after the last pass verification. The latter two
    /// apply only once no search is in flight.
    pub fn select_next_work(&self) -> WorkDecision {
        let schedule = self.ctx.schedule();
        let pending = (1..=self.pass)
            .filter(|&p| !self.backtrack[p - 1].is_empty())
            .min_by_key(|&p| (schedule.block_len(p), p));
        match pending {
            Some(pass) => WorkDecision::StartSearches {
                pass,
                blocks: self.backtrack[pass - 1].clone(),
            },
            None if self.pass < schedule.passes() => WorkDecision::AdvancePass,
            None => WorkDecision::BeginVerify,
        }
    }

    /// Compares the local digest with the reference side's.
    pub fn verify_frame(&mut self, peer_digest: u64) -> SessionStatus {
        let ok = frame_digest(&self.frame.bits, self.salt) == peer_digest;
        self.status = if ok {
            SessionStatus::Verified
        } else {
            SessionStatus::Failed
        };
        self.record.verified = ok;
        if !ok {
            self.record.failure = Some("verification digest mismatch".into());
        }
        self.phase = Phase::Done;
        self.status
    }

    fn done_message(&self) -> ProtocolMessage {
        ProtocolMessage::new(
            self.frame.id,
            MessageKind::FrameDone,
            0,
            Payload::from_bits([self.status == SessionStatus::Verified]),
        )
    }

    fn fail(&mut self, reason: String) -> Vec<ProtocolMessage> {
        self.status = SessionStatus::Failed;
        self.phase = Phase::Done;
        self.record.verified = false;
        self.record.failure = Some(reason);
        self.cursors.iter_mut().for_each(Vec::clear);
        vec![self.done_message()]
    }

    /// Counts one request round, or fails the frame once the cap is hit.
    fn emit(&mut self, msgs: Vec<ProtocolMessage>) -> Vec<ProtocolMessage> {
        let cap = self.ctx.round_cap();
        if self.record.rounds >= cap {
            return self.fail(format!("round cap {cap} exceeded"));
        }
        self.record.rounds += 1;
        self.status = SessionStatus::AwaitingReplies;
        msgs
    }

    /// Runs local work until the next request is ready.
    fn advance(&mut self) -> Vec<ProtocolMessage> {
        // One pass's list at a time: two passes searching concurrently tend
        // to chase the same error and waste disclosures.
        while !self.has_cursors() {
            let WorkDecision::StartSearches { pass, .. } = self.select_next_work() else {
                break;
            };
            let blocks = std::mem::take(&mut self.backtrack[pass - 1]);
            if let Some(cmp) = self.comparisons.get_mut(pass - 1) {
                for &b in &blocks {
                    cmp.unlock(b as usize);
                }
            }
            self.open_searches(pass, blocks);
        }
        if self.has_cursors() {
            let msgs = self.binary_search_round().expect("cursors present");
            return self.emit(msgs);
        }
        match self.select_next_work() {
            WorkDecision::StartSearches { .. } => unreachable!("lists drained above"),
            WorkDecision::AdvancePass => match self.start_pass() {
                Ok(m) => self.emit(vec![m]),
                Err(e) => self.fail(e.to_string()),
            },
            WorkDecision::BeginVerify => {
                self.phase = Phase::AwaitVerify;
                let msg = ProtocolMessage::new(
                    self.frame.id,
                    MessageKind::VerifyChallenge,
                    0,
                    Payload::from_u64(self.salt),
                );
                self.emit(vec![msg])
            }
        }
    }

    /// Consumes the reference side's replies for this frame and returns the
    /// next request. With nothing to consume while waiting, nothing changes.
    pub fn step(&mut self, incoming: Vec<ProtocolMessage>) -> (Vec<ProtocolMessage>, SessionStatus) {
        if self.status.is_final() {
            return (Vec::new(), self.status);
        }
        let out = match self.phase {
            Phase::Idle if self.pass == 0 => match self.start_pass() {
                Ok(m) => self.emit(vec![m]),
                Err(e) => self.fail(e.to_string()),
            },
            Phase::Idle | Phase::Done => Vec::new(),
            _ if incoming.is_empty() => Vec::new(),
            _ => match self.absorb(incoming) {
                Ok(out) => out,
                Err(e) => self.fail(e.to_string()),
            },
        };
        (out, self.status)
    }

    fn absorb(&mut self, incoming: Vec<ProtocolMessage>) -> Result<Vec<ProtocolMessage>> {
        if let Some(msg) = incoming.iter().find(|m| m.frame_id != self.frame.id) {
            return Err(Error::Protocol(format!(
                "reply for frame {} delivered to frame {}",
                msg.frame_id, self.frame.id
            )));
        }
        if incoming.iter().any(|m| m.kind == MessageKind::FrameDone) {
            return Err(Error::Protocol("reference side aborted the frame".into()));
        }
        self.status = SessionStatus::Running;
        match self.phase {
            Phase::AwaitBinary => {
                self.absorb_binary_replies(&incoming)?;
                Ok(self.advance())
            }
            _ if incoming.len() != 1 => Err(Error::Protocol(format!(
                "expected one reply, got {}",
                incoming.len()
            ))),
            Phase::AwaitParities => {
                self.compare_and_enqueue(&incoming[0])?;
                Ok(self.advance())
            }
            Phase::AwaitVerify => {
                let msg = &incoming[0];
                if msg.kind != MessageKind::VerifyReply {
                    return Err(Error::Protocol(format!("expected VerifyReply, got {:?}", msg.kind)));
                }
                self.verify_frame(msg.payload.as_u64()?);
                Ok(vec![self.done_message()])
            }
            Phase::Idle | Phase::Done => unreachable!("no request outstanding"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitframe::BitVector;
    use crate::cascade::ProtocolOptions;
    use crate::params::BlockSchedule;

    fn ctx(n: usize, k: &[usize], detection: bool) -> Arc<ProtocolContext> {
        let opts = ProtocolOptions {
            collision_detection: detection,
            allow_scaled: true,
            round_cap: None,
        };
        ProtocolContext::new(BlockSchedule::scaled(n, k).unwrap(), 11, opts).unwrap()
    }

    /// A session that has started `passes` passes, all reported error-free.
    fn quiet_session(ctx: Arc<ProtocolContext>, passes: usize) -> CorrectingSession {
        let n = ctx.frame_bits();
        let mut s = CorrectingSession::new(ctx.clone(), Frame::new(0, BitVector::zeros(n))).unwrap();
        for p in 1..=passes {
            s.start_pass().unwrap();
            let blocks = n / ctx.schedule().block_len(p);
            let reply = ProtocolMessage::new(
                0,
                MessageKind::ParityReplies,
                p as u8,
                Payload::from_bits(vec![false; blocks]),
            );
            assert_eq!(s.compare_and_enqueue(&reply).unwrap(), 0);
        }
        s
    }

    #[test]
    fn walk_relocates_after_a_foreign_flip() {
        // Local 1000_0000, remote 0000_0011: root parity mismatch is odd (3 diffs).
        let remote = BitVector::from_bit_str("00000011").unwrap();
        let mut local = BitVector::from_bit_str("10000000").unwrap();
        let mut tree = ParityTree::for_block(&local, 0, 8).unwrap();
        let remote_tree = ParityTree::for_block(&remote, 0, 8).unwrap();
        tree.set_root_comparison(0, tree.block_parity(0) ^ remote_tree.block_parity(0));
        // Path known down to node 2 (left half): reference parities of 1 and 2.
        let path = remote_tree.node(0, 1) as u64 | (remote_tree.node(0, 2) as u64) << 1;
        match walk(&tree, 0, 2, path) {
            Next::Query { node, .. } => assert_eq!(node, 2),
            _ => panic!("left half is odd"),
        }
        // Someone else fixes bit 0: the left half is now even, the right
        // half (two diffs) even too, so the whole block is even.
        local.flip(0);
        tree.flip_leaf_path(0, 0).unwrap();
        tree.toggle_root_comparison(0);
        assert!(matches!(walk(&tree, 0, 2, path), Next::Retire));
        // Fix bit 6 as well: the right half becomes odd and the walk moves
        // to node 3 without a further query.
        tree.flip_leaf_path(0, 6).unwrap();
        tree.toggle_root_comparison(0);
        match walk(&tree, 0, 2, path) {
            Next::Query { node, path: p } => {
                assert_eq!(node, 3);
                assert_eq!((p >> 1) & 1 == 1, remote_tree.node(0, 3));
            }
            _ => panic!("right half is odd"),
        }
    }

    #[test]
    fn first_backtrack_locks_and_appends_without_scanning() {
        let mut s = quiet_session(ctx(16, &[2, 4, 8], true), 3);
        s.backtrack_block(1, 3);
        assert_eq!(s.backtrack_list(1), &[3]);
        assert!(s.comparison_tree(1).unwrap().is_locked(3));
        assert_eq!(s.record().searchlist_calls, 0);
        // Second event on a locked block: scan finds it, the mismatch is even
        // again, it leaves the list and the lock stays.
        s.backtrack_block(1, 3);
        assert!(s.backtrack_list(1).is_empty());
        assert!(s.comparison_tree(1).unwrap().is_locked(3));
        assert_eq!((s.record().searchlist_calls, s.record().collisions), (1, 1));
        s.backtrack_block(1, 3);
        assert_eq!(s.backtrack_list(1), &[3]);
        // Passes without a comparison tree always scan.
        s.backtrack_block(3, 0);
        assert_eq!(s.record().searchlist_calls, 3);
        assert_eq!(s.record().backtrack_events, 4);
    }

    #[test]
    fn without_detection_every_backtrack_scans() {
        let mut s = quiet_session(ctx(16, &[2, 4, 8], false), 2);
        s.backtrack_block(1, 3);
        s.backtrack_block(2, 1);
        assert_eq!(s.record().searchlist_calls, 2);
        assert!(!s.comparison_tree(1).unwrap().is_locked(3));
    }

    #[test]
    fn draining_a_list_unlocks_its_blocks() {
        let mut s = quiet_session(ctx(16, &[2, 4, 8], true), 2);
        // A correction found elsewhere lands in block 5 of pass 1 (unshuffled).
        s.frame.bits.flip(10);
        s.trees[0].flip_leaf_path(5, 0).unwrap();
        s.trees[0].toggle_root_comparison(5);
        s.comparisons[0].flip_leaf_path(5, 0).unwrap();
        s.backtrack_block(1, 5);
        assert!(s.comparison_tree(1).unwrap().is_locked(5));
        s.advance();
        assert!(s.backtrack_list(1).is_empty());
        assert!(!s.comparison_tree(1).unwrap().is_locked(5));
        assert_eq!(s.active_blocks(), vec![(1, 5)]);
    }

    #[test]
    fn work_selection_prefers_the_smallest_blocks() {
        let mut s = quiet_session(ctx(16, &[2, 4, 4, 8, 8, 8], true), 4);
        s.backtrack[3].push(1);
        s.backtrack[0].push(2);
        assert_eq!(
            s.select_next_work(),
            WorkDecision::StartSearches { pass: 1, blocks: vec![2] }
        );
        s.backtrack[0].clear();
        assert_eq!(
            s.select_next_work(),
            WorkDecision::StartSearches { pass: 4, blocks: vec![1] }
        );
        s.backtrack[3].clear();
        assert_eq!(s.select_next_work(), WorkDecision::AdvancePass);
        let s2 = quiet_session(ctx(16, &[2, 4], true), 2);
        assert_eq!(s2.select_next_work(), WorkDecision::BeginVerify);
        let s3 = quiet_session(ctx(16, &[2, 4, 8], true), 2);
        assert_eq!(s3.select_next_work(), WorkDecision::AdvancePass);
    }

    #[test]
    fn verification_compares_digests() {
        let c = ctx(16, &[2], true);
        let bits = BitVector::from_bit_str("0110100110010110").unwrap();
        let mut s = CorrectingSession::new(c.clone(), Frame::new(3, bits.clone())).unwrap();
        let digest = frame_digest(&bits, s.salt());
        assert_eq!(s.verify_frame(digest), SessionStatus::Verified);
        let mut other = bits.clone();
        other.flip(7);
        let mut s = CorrectingSession::new(c, Frame::new(3, bits)).unwrap();
        assert_eq!(
            s.verify_frame(frame_digest(&other, s.salt())),
            SessionStatus::Failed
        );
        assert!(s.record().failure.is_some());
    }

    #[test]
    fn searches_out_of_order_are_rejected() {
        let mut s = quiet_session(ctx(16, &[2, 4], true), 1);
        assert!(s.start_pass().is_ok());
        let bogus = ProtocolMessage::new(0, MessageKind::BinaryReplies, 2, Payload::from_bits([true]));
        assert!(s.absorb_binary_replies(&[bogus]).is_err());
        assert!(s.binary_search_round().is_err());
    }
}
