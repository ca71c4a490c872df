use std::sync::Arc;

use super::digest::frame_digest;
use super::{MessageKind, Payload, ProtocolContext, ProtocolMessage, SessionStatus};
use crate::bitframe::Frame;
use crate::error::{Error, Result};
use crate::paritytree::ParityTree;

/// The side holding the reference frame. Answers parity questions and
/// never modifies its bits.
#[derive(Debug)]
pub struct ReferenceSession {
    ctx: Arc<ProtocolContext>,
    frame: Frame,
    trees: Vec<ParityTree>,
    m_star: u64,
    status: SessionStatus,
    failure: Option<String>,
}

impl ReferenceSession {
    pub fn new(ctx: Arc<ProtocolContext>, frame: Frame) -> Result<Self> {
        ctx.check_frame(&frame)?;
        Ok(ReferenceSession {
            ctx,
            frame,
            trees: Vec::new(),
            m_star: 0,
            status: SessionStatus::Running,
            failure: None,
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

    /// Parity bits this side has disclosed so far.
    pub fn m_star(&self) -> u64 {
        self.m_star
    }

    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    pub fn step(&mut self, incoming: Vec<ProtocolMessage>) -> (Vec<ProtocolMessage>, SessionStatus) {
        let mut out = Vec::new();
        for msg in incoming {
            if self.status.is_final() {
                break;
            }
            match self.answer(&msg) {
                Ok(Some(reply)) => {
                    self.status = SessionStatus::AwaitingReplies;
                    out.push(reply);
                }
                Ok(None) => {}
                Err(e) => {
                    self.status = SessionStatus::Failed;
                    self.failure = Some(e.to_string());
                    out.push(ProtocolMessage::new(
                        self.frame.id,
                        MessageKind::FrameDone,
                        0,
                        Payload::from_bits([false]),
                    ));
                }
            }
        }
        (out, self.status)
    }

    fn answer(&mut self, msg: &ProtocolMessage) -> Result<Option<ProtocolMessage>> {
        if msg.frame_id != self.frame.id {
            return Err(Error::Protocol(format!(
                "message for frame {} delivered to frame {}",
                msg.frame_id, self.frame.id
            )));
        }
        let pass = msg.pass_index as usize;
        let reply = |kind, payload| Some(ProtocolMessage::new(self.frame.id, kind, msg.pass_index, payload));
        match msg.kind {
            MessageKind::BlockParities => {
                if pass != self.trees.len() + 1 || pass > self.ctx.schedule().passes() {
                    return Err(Error::Protocol(format!(
                        "block parities for pass {pass} after {} passes",
                        self.trees.len()
                    )));
                }
                let k = self.ctx.schedule().block_len(pass);
                let blocks = self.ctx.frame_bits() / k;
                if msg.payload.bit_len() as usize != blocks {
                    return Err(Error::Protocol(format!(
                        "{} block parities for {blocks} blocks",
                        msg.payload.bit_len()
                    )));
                }
                let shuffled = self.ctx.shuffled(&self.frame.bits, pass);
                let tree = ParityTree::build(&shuffled, 0, k, blocks)?;
                let payload = Payload::from_bits(
                    msg.payload
                        .bits()
                        .enumerate()
                        .map(|(b, theirs)| tree.block_parity(b) ^ theirs),
                );
                self.trees.push(tree);
                self.m_star += blocks as u64;
                Ok(reply(MessageKind::ParityReplies, payload))
            }
            MessageKind::BinaryQueries => {
                let tree = pass
                    .checked_sub(1)
                    .and_then(|i| self.trees.get(i))
                    .ok_or_else(|| Error::Protocol(format!("query for unstarted pass {pass}")))?;
                let pairs = msg.payload.as_index_pairs()?;
                if pairs.is_empty() {
                    return Err(Error::Protocol("empty query batch".into()));
                }
                let (blocks, nodes) = (tree.blocks(), 2 * tree.block_len());
                let mut bits = Vec::with_capacity(pairs.len());
                for (b, node) in pairs {
                    let (b, node) = (b as usize, node as usize);
                    if b >= blocks || !(2..nodes).contains(&node) {
                        return Err(Error::Protocol(format!(
                            "query ({b}, {node}) outside {blocks} blocks of {nodes} nodes"
                        )));
                    }
                    bits.push(tree.node(b, node));
                }
                self.m_star += bits.len() as u64;
                Ok(reply(MessageKind::BinaryReplies, Payload::from_bits(bits)))
            }
            MessageKind::VerifyChallenge => {
                let salt = msg.payload.as_u64()?;
                if salt == 0 {
                    return Err(Error::Protocol("zero verification salt".into()));
                }
                let digest = frame_digest(&self.frame.bits, salt);
                Ok(reply(MessageKind::VerifyReply, Payload::from_u64(digest)))
            }
            MessageKind::FrameDone => {
                let ok = msg.payload.bit_len() == 1 && msg.payload.bit(0);
                self.status = if ok {
                    SessionStatus::Verified
                } else {
                    SessionStatus::Failed
                };
                Ok(None)
            }
            other => Err(Error::Protocol(format!(
                "{other:?} is not a request"
            ))),
        }
    }
}
