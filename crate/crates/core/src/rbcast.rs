//! Byzantine reliable broadcast, Bracha's echo/ready construction.
//!
//! One [`RbcastInstance`] exists per [`BroadcastTag`] at every process. A
//! correct process delivers at most one payload per tag, and no two correct
//! processes deliver different payloads for the same tag even if the tag's
//! sender equivocates.
//!
//! Thresholds for `n` processes with at most `f` faulty:
//!
//! | step                 | condition                                   |
//! |----------------------|---------------------------------------------|
//! | send `ECHO(p)`       | first `INIT(p)` from the tag's sender       |
//! | send `READY(p)`      | `⌊(n+f)/2⌋+1` echoes or `f+1` readies for p |
//! | deliver `p`          | `2f+1` readies for `p`                      |
//!
//! Every frame is addressed to all `n` processes, the sender included, so an
//! instance costs `n` INIT frames plus at most `n²` ECHO and `n²` READY frames.

use std::collections::{BTreeMap, BTreeSet};

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::DecodeError;
use crate::node::{Node, Outbox, Params};
use crate::trace::Event;
use crate::wire::{Digest, ProtocolMessage};
use crate::NodeId;

/// Which logical broadcast an instance belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Instance {
    Disclosure {
        round: u64,
    },
    Ack {
        round: u64,
        ts: u64,
        destination: NodeId,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BroadcastTag {
    pub sender: NodeId,
    pub instance: Instance,
}

impl BroadcastTag {
    pub fn disclosure(sender: NodeId, round: u64) -> Self {
        BroadcastTag {
            sender,
            instance: Instance::Disclosure { round },
        }
    }

    pub fn ack(sender: NodeId, round: u64, ts: u64, destination: NodeId) -> Self {
        BroadcastTag {
            sender,
            instance: Instance::Ack {
                round,
                ts,
                destination,
            },
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.sender.0.to_be_bytes());
        match self.instance {
            Instance::Disclosure { round } => {
                out.push(0);
                out.extend_from_slice(&round.to_be_bytes());
            }
            Instance::Ack {
                round,
                ts,
                destination,
            } => {
                out.push(1);
                out.extend_from_slice(&round.to_be_bytes());
                out.extend_from_slice(&ts.to_be_bytes());
                out.extend_from_slice(&destination.0.to_be_bytes());
            }
        }
    }

    fn decode_from(buf: &mut &[u8]) -> Result<Self, FrameError> {
        let sender = NodeId(read_u64(buf)?);
        let (&which, rest) = buf.split_first().ok_or(DecodeError::Truncated)?;
        *buf = rest;
        let instance = match which {
            0 => Instance::Disclosure {
                round: read_u64(buf)?,
            },
            1 => Instance::Ack {
                round: read_u64(buf)?,
                ts: read_u64(buf)?,
                destination: NodeId(read_u64(buf)?),
            },
            other => return Err(FrameError::BadInstance(other)),
        };
        Ok(BroadcastTag { sender, instance })
    }
}

fn read_u64(buf: &mut &[u8]) -> Result<u64, DecodeError> {
    if buf.len() < 8 {
        return Err(DecodeError::Truncated);
    }
    let (head, rest) = buf.split_at(8);
    *buf = rest;
    Ok(u64::from_be_bytes(head.try_into().expect("length checked")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RbKind {
    Init,
    Echo,
    Ready,
}

impl RbKind {
    fn to_byte(self) -> u8 {
        match self {
            RbKind::Init => 0,
            RbKind::Echo => 1,
            RbKind::Ready => 2,
        }
    }
}

/// A single INIT, ECHO or READY message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RbFrame {
    pub kind: RbKind,
    pub tag: BroadcastTag,
    #[serde(with = "crate::hexser")]
    pub payload: Bytes,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("unknown frame kind byte {0}")]
    BadKind(u8),
    #[error("unknown broadcast instance byte {0}")]
    BadInstance(u8),
}

impl RbFrame {
    /// `kind ‖ tag ‖ payload`; the payload runs to the end of the frame.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.kind.to_byte());
        self.tag.encode_into(out);
        out.extend_from_slice(&self.payload);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(34 + self.payload.len());
        self.encode_into(&mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        let (&kind, mut rest) = bytes.split_first().ok_or(DecodeError::Truncated)?;
        let kind = match kind {
            0 => RbKind::Init,
            1 => RbKind::Echo,
            2 => RbKind::Ready,
            other => return Err(FrameError::BadKind(other)),
        };
        let tag = BroadcastTag::decode_from(&mut rest)?;
        Ok(RbFrame {
            kind,
            tag,
            payload: Bytes::copy_from_slice(rest),
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RbcastError {
    #[error("process {me:?} cannot broadcast under a tag owned by {owner:?}")]
    NotOwner { me: NodeId, owner: NodeId },
    #[error("tag {0:?} was already used by this sender")]
    TagReused(BroadcastTag),
}

/// Per-tag protocol state at one process.
#[derive(Clone, Debug)]
pub struct RbcastInstance {
    tag: BroadcastTag,
    echo_threshold: usize,
    amplify_threshold: usize,
    deliver_threshold: usize,
    init: Option<Bytes>,
    echoed: bool,
    readied: bool,
    delivered: bool,
    echoes: BTreeMap<NodeId, Bytes>,
    readies: BTreeMap<NodeId, Bytes>,
    echo_counts: BTreeMap<Bytes, usize>,
    ready_counts: BTreeMap<Bytes, usize>,
}

/// Result of feeding one frame to an instance.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct RbStep {
    /// Frames to send to every process.
    pub broadcast: Vec<RbFrame>,
    pub delivered: Option<Bytes>,
}

impl RbcastInstance {
    pub fn new(tag: BroadcastTag, params: Params) -> Self {
        RbcastInstance {
            tag,
            echo_threshold: params.quorum(),
            amplify_threshold: params.f + 1,
            deliver_threshold: 2 * params.f + 1,
            init: None,
            echoed: false,
            readied: false,
            delivered: false,
            echoes: BTreeMap::new(),
            readies: BTreeMap::new(),
            echo_counts: BTreeMap::new(),
            ready_counts: BTreeMap::new(),
        }
    }

    pub fn tag(&self) -> BroadcastTag {
        self.tag
    }

    pub fn is_delivered(&self) -> bool {
        self.delivered
    }

    pub fn echo_senders(&self) -> BTreeSet<NodeId> {
        self.echoes.keys().copied().collect()
    }

    pub fn ready_senders(&self) -> BTreeSet<NodeId> {
        self.readies.keys().copied().collect()
    }

    /// Applies one frame received from `from`. Frames whose tag does not match
    /// this instance, INITs not coming from the tag's sender, and repeated
    /// frames of the same kind from one peer leave the state untouched.
    pub fn handle(&mut self, from: NodeId, frame: &RbFrame) -> RbStep {
        let mut step = RbStep::default();
        if frame.tag != self.tag {
            return step;
        }
        let payload = &frame.payload;
        match frame.kind {
            RbKind::Init => {
                if from != self.tag.sender || self.init.is_some() {
                    return step;
                }
                self.init = Some(payload.clone());
                if !self.echoed {
                    self.echoed = true;
                    step.broadcast.push(self.frame(RbKind::Echo, payload.clone()));
                }
            }
            RbKind::Echo => {
                if self.echoes.contains_key(&from) {
                    return step;
                }
                self.echoes.insert(from, payload.clone());
                let count = self.echo_counts.entry(payload.clone()).or_default();
                *count += 1;
                if *count >= self.echo_threshold && !self.readied {
                    self.readied = true;
                    step.broadcast.push(self.frame(RbKind::Ready, payload.clone()));
                }
            }
            RbKind::Ready => {
                if self.readies.contains_key(&from) {
                    return step;
                }
                self.readies.insert(from, payload.clone());
                let count = self.ready_counts.entry(payload.clone()).or_default();
                *count += 1;
                let count = *count;
                if count >= self.amplify_threshold && !self.readied {
                    self.readied = true;
                    step.broadcast.push(self.frame(RbKind::Ready, payload.clone()));
                }
                if count >= self.deliver_threshold && !self.delivered {
                    self.delivered = true;
                    step.delivered = Some(payload.clone());
                }
            }
        }
        step
    }

    fn frame(&self, kind: RbKind, payload: Bytes) -> RbFrame {
        RbFrame {
            kind,
            tag: self.tag,
            payload,
        }
    }
}

/// All reliable-broadcast instances at one process.
#[derive(Clone, Debug)]
pub struct Rbcast {
    me: NodeId,
    params: Params,
    instances: BTreeMap<BroadcastTag, RbcastInstance>,
    opened: BTreeSet<BroadcastTag>,
}

/// Output of [`Rbcast::handle`].
#[derive(Debug, Default)]
pub struct RbOutput {
    pub broadcast: Vec<RbFrame>,
    pub delivered: Option<(BroadcastTag, Bytes)>,
}

impl Rbcast {
    pub fn new(me: NodeId, params: Params) -> Self {
        Rbcast {
            me,
            params,
            instances: BTreeMap::new(),
            opened: BTreeSet::new(),
        }
    }

    /// Opens the instance `tag` and returns the INIT frame to send to every
    /// process.
    pub fn broadcast(&mut self, tag: BroadcastTag, payload: Bytes) -> Result<RbFrame, RbcastError> {
        if tag.sender != self.me {
            return Err(RbcastError::NotOwner {
                me: self.me,
                owner: tag.sender,
            });
        }
        if !self.opened.insert(tag) {
            return Err(RbcastError::TagReused(tag));
        }
        Ok(RbFrame {
            kind: RbKind::Init,
            tag,
            payload,
        })
    }

    pub fn has_opened(&self, tag: &BroadcastTag) -> bool {
        self.opened.contains(tag)
    }

    pub fn handle(&mut self, from: NodeId, frame: &RbFrame) -> RbOutput {
        let params = self.params;
        let instance = self
            .instances
            .entry(frame.tag)
            .or_insert_with(|| RbcastInstance::new(frame.tag, params));
        let step = instance.handle(from, frame);
        RbOutput {
            broadcast: step.broadcast,
            delivered: step.delivered.map(|p| (frame.tag, p)),
        }
    }

    pub fn instance(&self, tag: &BroadcastTag) -> Option<&RbcastInstance> {
        self.instances.get(tag)
    }
}

/// A process whose only job is to reliably broadcast one payload and deliver
/// everyone else's. Used to exercise the primitive on its own.
pub struct RbNode {
    id: NodeId,
    params: Params,
    payload: Bytes,
    rb: Rbcast,
}

impl RbNode {
    pub fn new(id: NodeId, params: Params, payload: Bytes) -> Self {
        RbNode {
            id,
            params,
            payload,
            rb: Rbcast::new(id, params),
        }
    }
}

impl Node for RbNode {
    fn id(&self) -> NodeId {
        self.id
    }

    fn start(&mut self, out: &mut Outbox) {
        let init = self
            .rb
            .broadcast(BroadcastTag::disclosure(self.id, 0), self.payload.clone())
            .expect("a fresh node has opened no tag");
        out.broadcast(self.params.processes(), init);
    }

    fn handle(&mut self, from: NodeId, msg: &ProtocolMessage, out: &mut Outbox) {
        let ProtocolMessage::Rb(frame) = msg else {
            return;
        };
        let step = self.rb.handle(from, frame);
        for f in step.broadcast {
            out.broadcast(self.params.processes(), f);
        }
        if let Some((tag, payload)) = step.delivered {
            out.emit(Event::RbDeliver {
                tag,
                payload: Digest::of(&payload),
            });
        }
    }
}
