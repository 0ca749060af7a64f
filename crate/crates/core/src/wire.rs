//! Wire messages of every protocol, their canonical byte encoding, and the
//! compact descriptors the trace records for each envelope.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::lattice::{Item, LatticeValue};
use crate::rbcast::{BroadcastTag, RbFrame, RbKind};
use crate::sbs::SbsMessage;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum WtsMessage {
    AckReq { set: LatticeValue, ts: u64 },
    Ack { set: LatticeValue, ts: u64 },
    Nack { set: LatticeValue, ts: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum GwtsMessage {
    AckReq { set: LatticeValue, ts: u64, round: u64 },
    Nack { set: LatticeValue, ts: u64, round: u64 },
    /// A point-to-point ack. Correct acceptors never send one (acks travel by
    /// reliable broadcast) and correct proposers drop it.
    Ack { set: LatticeValue, ts: u64, round: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum RsmMessage {
    /// Client asks a replica to submit `cmd` and report decisions containing it.
    NewValue { cmd: Item },
    /// Client asks a replica only to report decisions containing `cmd`.
    Watch { cmd: Item },
    /// Replica reports a decision containing `cmd`.
    Decide { cmd: Item, accepted: LatticeValue },
    CnfReq { set: LatticeValue },
    CnfRep { set: LatticeValue },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "proto", content = "msg", rename_all = "kebab-case")]
pub enum ProtocolMessage {
    Rb(RbFrame),
    Wts(WtsMessage),
    Gwts(GwtsMessage),
    Sbs(SbsMessage),
    Rsm(RsmMessage),
}

impl From<RbFrame> for ProtocolMessage {
    fn from(m: RbFrame) -> Self {
        ProtocolMessage::Rb(m)
    }
}
impl From<WtsMessage> for ProtocolMessage {
    fn from(m: WtsMessage) -> Self {
        ProtocolMessage::Wts(m)
    }
}
impl From<GwtsMessage> for ProtocolMessage {
    fn from(m: GwtsMessage) -> Self {
        ProtocolMessage::Gwts(m)
    }
}
impl From<SbsMessage> for ProtocolMessage {
    fn from(m: SbsMessage) -> Self {
        ProtocolMessage::Sbs(m)
    }
}
impl From<RsmMessage> for ProtocolMessage {
    fn from(m: RsmMessage) -> Self {
        ProtocolMessage::Rsm(m)
    }
}

/// Every message kind, as named in traces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MsgKind {
    RbInit,
    RbEcho,
    RbReady,
    WtsAckReq,
    WtsAck,
    WtsNack,
    GwtsAckReq,
    GwtsAck,
    GwtsNack,
    SbsInit,
    SbsSafeReq,
    SbsSafeAck,
    SbsAckReq,
    SbsAck,
    SbsNack,
    RsmNewValue,
    RsmWatch,
    RsmDecide,
    RsmCnfReq,
    RsmCnfRep,
}

impl MsgKind {
    pub fn name(self) -> &'static str {
        match self {
            MsgKind::RbInit => "rb-init",
            MsgKind::RbEcho => "rb-echo",
            MsgKind::RbReady => "rb-ready",
            MsgKind::WtsAckReq => "wts-ack-req",
            MsgKind::WtsAck => "wts-ack",
            MsgKind::WtsNack => "wts-nack",
            MsgKind::GwtsAckReq => "gwts-ack-req",
            MsgKind::GwtsAck => "gwts-ack",
            MsgKind::GwtsNack => "gwts-nack",
            MsgKind::SbsInit => "sbs-init",
            MsgKind::SbsSafeReq => "sbs-safe-req",
            MsgKind::SbsSafeAck => "sbs-safe-ack",
            MsgKind::SbsAckReq => "sbs-ack-req",
            MsgKind::SbsAck => "sbs-ack",
            MsgKind::SbsNack => "sbs-nack",
            MsgKind::RsmNewValue => "rsm-new-value",
            MsgKind::RsmWatch => "rsm-watch",
            MsgKind::RsmDecide => "rsm-decide",
            MsgKind::RsmCnfReq => "rsm-cnf-req",
            MsgKind::RsmCnfRep => "rsm-cnf-rep",
        }
    }

    /// Kinds a proposer sends in its own name (as opposed to replies).
    pub fn is_proposer_request(self) -> bool {
        matches!(
            self,
            MsgKind::WtsAckReq
                | MsgKind::GwtsAckReq
                | MsgKind::SbsInit
                | MsgKind::SbsSafeReq
                | MsgKind::SbsAckReq
        )
    }
}

impl fmt::Display for MsgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What the trace keeps about an envelope besides its digest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsgInfo {
    pub kind: MsgKind,
    pub size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<BroadcastTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<u64>,
}

/// Truncated SHA-256, printed as 32 hex digits.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 16]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        let full = Sha256::digest(bytes);
        let mut out = [0u8; 16];
        out.copy_from_slice(&full[..16]);
        Digest(out)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("digest must be 16 bytes"))?;
        Ok(Digest(arr))
    }
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

impl ProtocolMessage {
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            ProtocolMessage::Rb(frame) => {
                out.push(0);
                frame.encode_into(out);
            }
            ProtocolMessage::Wts(m) => {
                out.push(1);
                let (k, set, ts) = match m {
                    WtsMessage::AckReq { set, ts } => (0, set, ts),
                    WtsMessage::Ack { set, ts } => (1, set, ts),
                    WtsMessage::Nack { set, ts } => (2, set, ts),
                };
                out.push(k);
                put_u64(out, *ts);
                set.encode_into(out);
            }
            ProtocolMessage::Gwts(m) => {
                out.push(2);
                let (k, set, ts, round) = match m {
                    GwtsMessage::AckReq { set, ts, round } => (0, set, ts, round),
                    GwtsMessage::Nack { set, ts, round } => (1, set, ts, round),
                    GwtsMessage::Ack { set, ts, round } => (2, set, ts, round),
                };
                out.push(k);
                put_u64(out, *round);
                put_u64(out, *ts);
                set.encode_into(out);
            }
            ProtocolMessage::Sbs(m) => {
                out.push(3);
                m.encode_into(out);
            }
            ProtocolMessage::Rsm(m) => {
                out.push(4);
                match m {
                    RsmMessage::NewValue { cmd } => {
                        out.push(0);
                        cmd.encode_into(out);
                    }
                    RsmMessage::Watch { cmd } => {
                        out.push(1);
                        cmd.encode_into(out);
                    }
                    RsmMessage::Decide { cmd, accepted } => {
                        out.push(2);
                        cmd.encode_into(out);
                        accepted.encode_into(out);
                    }
                    RsmMessage::CnfReq { set } => {
                        out.push(3);
                        set.encode_into(out);
                    }
                    RsmMessage::CnfRep { set } => {
                        out.push(4);
                        set.encode_into(out);
                    }
                }
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn kind(&self) -> MsgKind {
        match self {
            ProtocolMessage::Rb(f) => match f.kind {
                RbKind::Init => MsgKind::RbInit,
                RbKind::Echo => MsgKind::RbEcho,
                RbKind::Ready => MsgKind::RbReady,
            },
            ProtocolMessage::Wts(m) => match m {
                WtsMessage::AckReq { .. } => MsgKind::WtsAckReq,
                WtsMessage::Ack { .. } => MsgKind::WtsAck,
                WtsMessage::Nack { .. } => MsgKind::WtsNack,
            },
            ProtocolMessage::Gwts(m) => match m {
                GwtsMessage::AckReq { .. } => MsgKind::GwtsAckReq,
                GwtsMessage::Ack { .. } => MsgKind::GwtsAck,
                GwtsMessage::Nack { .. } => MsgKind::GwtsNack,
            },
            ProtocolMessage::Sbs(m) => m.kind(),
            ProtocolMessage::Rsm(m) => match m {
                RsmMessage::NewValue { .. } => MsgKind::RsmNewValue,
                RsmMessage::Watch { .. } => MsgKind::RsmWatch,
                RsmMessage::Decide { .. } => MsgKind::RsmDecide,
                RsmMessage::CnfReq { .. } => MsgKind::RsmCnfReq,
                RsmMessage::CnfRep { .. } => MsgKind::RsmCnfRep,
            },
        }
    }

    /// Descriptor for the trace; `size` is the encoded length.
    pub fn info(&self, size: usize) -> MsgInfo {
        let mut info = MsgInfo {
            kind: self.kind(),
            size: size as u64,
            tag: None,
            round: None,
            ts: None,
        };
        match self {
            ProtocolMessage::Rb(f) => info.tag = Some(f.tag),
            ProtocolMessage::Wts(
                WtsMessage::AckReq { ts, .. } | WtsMessage::Ack { ts, .. } | WtsMessage::Nack { ts, .. },
            ) => info.ts = Some(*ts),
            ProtocolMessage::Gwts(
                GwtsMessage::AckReq { ts, round, .. }
                | GwtsMessage::Ack { ts, round, .. }
                | GwtsMessage::Nack { ts, round, .. },
            ) => {
                info.ts = Some(*ts);
                info.round = Some(*round);
            }
            ProtocolMessage::Sbs(m) => info.ts = m.ts(),
            ProtocolMessage::Rsm(_) => {}
        }
        info
    }
}
