//! Byzantine strategies.
//!
//! Each strategy wraps an honest node of the protocol under test and acts at
//! the node interface: it may swallow incoming messages, inject its own, and
//! rewrite or drop what the honest code would send. It cannot touch traffic
//! between other nodes and only signs with its own key. Events the wrapped
//! node emits are discarded, so the trace holds only correct nodes' events.

use std::collections::{BTreeMap, BTreeSet};

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::gwts::GwtsNode;
use crate::lattice::{Item, ItemKind, LatticeValue};
use crate::node::{Node, NodeStatus, Outbox, Output, Params};
use crate::rbcast::{Instance, RbKind, RbNode};
use crate::rsm::{command, Replica};
use crate::sbs::{ProvenSet, SbsMessage, SbsNode, SignedValue};
use crate::wire::{GwtsMessage, ProtocolMessage, RsmMessage, WtsMessage};
use crate::wts::WtsNode;
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Sends a different disclosure to odd-numbered processes.
    Equivocator,
    /// Sends nothing at all.
    Silent,
    /// Answers every ack request with a nack carrying everything it knows.
    NackFlooder,
    /// Never discloses; sends ack requests for future rounds instead.
    RoundJumper,
    /// Signs a second value and sends it to odd-numbered processes.
    DoubleSigner,
    /// Resends every earlier reply along with each honest one.
    StaleAcker,
    /// Reports fabricated decisions to clients and confirms anything.
    FabricatorReplica,
    /// A client that submits inadmissible commands, submits to fewer than
    /// `f + 1` replicas, and never waits.
    BadClient,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Equivocator => "equivocator",
            Strategy::Silent => "silent",
            Strategy::NackFlooder => "nack-flooder",
            Strategy::RoundJumper => "round-jumper",
            Strategy::DoubleSigner => "double-signer",
            Strategy::StaleAcker => "stale-acker",
            Strategy::FabricatorReplica => "fabricator-replica",
            Strategy::BadClient => "bad-client",
        }
    }
}

/// The honest code a strategy wraps.
pub enum Honest {
    Rb(RbNode),
    Wts(WtsNode),
    Gwts(GwtsNode),
    Sbs(SbsNode),
    Replica(Replica),
}

impl Honest {
    fn node(&mut self) -> &mut dyn Node {
        match self {
            Honest::Rb(n) => n,
            Honest::Wts(n) => n,
            Honest::Gwts(n) => n,
            Honest::Sbs(n) => n,
            Honest::Replica(n) => n,
        }
    }

    fn node_ref(&self) -> &dyn Node {
        match self {
            Honest::Rb(n) => n,
            Honest::Wts(n) => n,
            Honest::Gwts(n) => n,
            Honest::Sbs(n) => n,
            Honest::Replica(n) => n,
        }
    }

    fn gwts(&self) -> Option<&GwtsNode> {
        match self {
            Honest::Gwts(n) => Some(n),
            Honest::Replica(r) => Some(r.gwts()),
            _ => None,
        }
    }
}

/// A Byzantine process.
pub struct Adversary {
    id: NodeId,
    params: Params,
    strategy: Strategy,
    inner: Honest,
    /// Proven values seen on the wire (SbS flooding).
    seen_proven: ProvenSet,
    /// Replies already sent, per requester (stale acking).
    replies: BTreeMap<NodeId, Vec<ProtocolMessage>>,
    /// Rounds already jumped from.
    jumped: BTreeSet<u64>,
    fabricated: u64,
}

impl Adversary {
    pub fn new(id: NodeId, params: Params, strategy: Strategy, inner: Honest) -> Self {
        Adversary {
            id,
            params,
            strategy,
            inner,
            seen_proven: ProvenSet::new(),
            replies: BTreeMap::new(),
            jumped: BTreeSet::new(),
            fabricated: 0,
        }
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    fn all(&self) -> impl Iterator<Item = NodeId> + Clone {
        self.params.processes()
    }

    /// Called before the honest code sees `msg`; returns whether it should.
    fn intercept(&mut self, from: NodeId, msg: &ProtocolMessage, out: &mut Outbox) -> bool {
        match (self.strategy, msg) {
            (Strategy::NackFlooder, ProtocolMessage::Wts(WtsMessage::AckReq { set, ts })) => {
                if let Honest::Wts(w) = &self.inner {
                    out.send(
                        from,
                        WtsMessage::Nack {
                            set: w.proposer.svs.join(set),
                            ts: *ts,
                        },
                    );
                }
                false
            }
            (Strategy::NackFlooder, ProtocolMessage::Gwts(GwtsMessage::AckReq { set, ts, round })) => {
                if let Some(g) = self.inner.gwts() {
                    out.send(
                        from,
                        GwtsMessage::Nack {
                            set: g.disclosed().join(set),
                            ts: *ts,
                            round: *round,
                        },
                    );
                }
                false
            }
            (Strategy::NackFlooder, ProtocolMessage::Sbs(m)) => {
                if let Some(set) = m.proven_set() {
                    self.seen_proven.join_with(set);
                }
                if let SbsMessage::AckReq { ts, .. } = m {
                    out.send(
                        from,
                        SbsMessage::Nack {
                            set: self.seen_proven.clone(),
                            ts: *ts,
                        },
                    );
                    return false;
                }
                true
            }
            (Strategy::RoundJumper, ProtocolMessage::Rb(frame)) => {
                if let (RbKind::Init, Instance::Disclosure { round }) = (frame.kind, frame.tag.instance) {
                    if self.jumped.insert(round) {
                        self.jump(round, out);
                    }
                }
                true
            }
            (Strategy::FabricatorReplica, ProtocolMessage::Rsm(m)) => {
                match m {
                    RsmMessage::NewValue { cmd } | RsmMessage::Watch { cmd } => {
                        let accepted = self.fabricate(LatticeValue::singleton(cmd.clone()));
                        out.send(from, RsmMessage::Decide { cmd: cmd.clone(), accepted });
                    }
                    RsmMessage::CnfReq { set } => {
                        out.send(from, RsmMessage::CnfRep { set: set.clone() });
                    }
                    _ => {}
                }
                true
            }
            _ => true,
        }
    }

    fn jump(&mut self, round: u64, out: &mut Outbox) {
        let Some(g) = self.inner.gwts() else {
            return;
        };
        let set = g.disclosed().clone();
        for ahead in 1..=3 {
            let msg = GwtsMessage::AckReq {
                set: set.clone(),
                ts: 1_000_000 + round * 10 + ahead,
                round: round + ahead,
            };
            out.broadcast(self.all(), msg);
        }
        // point-to-point acks pretending the next round is decided
        out.broadcast(
            self.all(),
            GwtsMessage::Ack {
                set,
                ts: 1_000_000,
                round: round + 1,
            },
        );
    }

    fn fabricate(&mut self, base: LatticeValue) -> LatticeValue {
        self.fabricated += 1;
        let mut set = base;
        set.insert(command(self.id, 1_000_000 + self.fabricated, b"fabricated"));
        set
    }

    /// Rewrites what the honest code produced.
    fn rewrite(&mut self, honest: Outbox, out: &mut Outbox) {
        for item in honest.into_items() {
            let Output::Send(o) = item else {
                // the wrapped node's events are not part of the trace
                continue;
            };
            match (self.strategy, &*o.msg) {
                (Strategy::Equivocator, ProtocolMessage::Rb(frame))
                    if frame.kind == RbKind::Init
                        && frame.tag.sender == self.id
                        && matches!(frame.tag.instance, Instance::Disclosure { .. }) =>
                {
                    let mut other = frame.clone();
                    other.payload = self.equivocate(&frame.payload);
                    for dst in &o.dsts {
                        if dst.0 % 2 == 1 {
                            out.send(*dst, other.clone());
                        } else {
                            out.send(*dst, frame.clone());
                        }
                    }
                }
                (Strategy::RoundJumper, ProtocolMessage::Rb(frame))
                    if frame.kind == RbKind::Init
                        && frame.tag.sender == self.id
                        && matches!(frame.tag.instance, Instance::Disclosure { .. }) => {}
                (Strategy::DoubleSigner, ProtocolMessage::Sbs(SbsMessage::Init { value })) => {
                    let Honest::Sbs(s) = &self.inner else {
                        continue;
                    };
                    let mut payload = b"double:".to_vec();
                    payload.extend_from_slice(&value.value.payload);
                    let second = SignedValue::sign(s.signer(), Item::new(self.id, ItemKind::Value, payload));
                    for dst in &o.dsts {
                        let v = if dst.0 % 2 == 1 { second.clone() } else { value.clone() };
                        out.send(*dst, SbsMessage::Init { value: v });
                    }
                }
                (Strategy::StaleAcker, ProtocolMessage::Wts(WtsMessage::Ack { .. } | WtsMessage::Nack { .. })) => {
                    for dst in &o.dsts {
                        let sent = self.replies.entry(*dst).or_default();
                        for old in sent.iter() {
                            out.send(*dst, old.clone());
                        }
                        sent.push((*o.msg).clone());
                        out.send(*dst, (*o.msg).clone());
                    }
                }
                (Strategy::FabricatorReplica, ProtocolMessage::Rsm(RsmMessage::Decide { cmd, accepted })) => {
                    let accepted = self.fabricate(accepted.clone());
                    for dst in &o.dsts {
                        out.send(
                            *dst,
                            RsmMessage::Decide {
                                cmd: cmd.clone(),
                                accepted: accepted.clone(),
                            },
                        );
                    }
                }
                _ => out.push(Output::Send(o)),
            }
        }
    }

    fn equivocate(&self, payload: &Bytes) -> Bytes {
        let alt = match LatticeValue::decode(payload) {
            Ok(v) if !v.is_empty() => v
                .iter()
                .map(|i| {
                    let mut p = b"equivocated:".to_vec();
                    p.extend_from_slice(&i.payload);
                    Item::new(i.origin, i.kind, p)
                })
                .collect(),
            _ => LatticeValue::singleton(Item::value(self.id, b"equivocated")),
        };
        alt.encode().into()
    }
}

impl Node for Adversary {
    fn id(&self) -> NodeId {
        self.id
    }

    fn start(&mut self, out: &mut Outbox) {
        if self.strategy == Strategy::Silent {
            return;
        }
        let mut honest = Outbox::new();
        self.inner.node().start(&mut honest);
        self.rewrite(honest, out);
    }

    fn handle(&mut self, from: NodeId, msg: &ProtocolMessage, out: &mut Outbox) {
        if self.strategy == Strategy::Silent {
            return;
        }
        if !self.intercept(from, msg, out) {
            return;
        }
        let mut honest = Outbox::new();
        self.inner.node().handle(from, msg, &mut honest);
        self.rewrite(honest, out);
    }

    fn status(&self) -> NodeStatus {
        NodeStatus {
            satisfied: true,
            round: self.inner.node_ref().status().round,
        }
    }

    fn set_round_cap(&mut self, cap: u64, out: &mut Outbox) {
        if self.strategy == Strategy::Silent {
            return;
        }
        let mut honest = Outbox::new();
        self.inner.node().set_round_cap(cap, &mut honest);
        self.rewrite(honest, out);
    }
}

/// A Byzantine RSM client.
pub struct BadClient {
    id: NodeId,
    params: Params,
}

impl BadClient {
    pub fn new(id: NodeId, params: Params) -> Self {
        BadClient { id, params }
    }
}

impl Node for BadClient {
    fn id(&self) -> NodeId {
        self.id
    }

    fn start(&mut self, out: &mut Outbox) {
        let replicas = self.params.processes();
        // not a well-formed command
        let junk = Item::new(self.id, ItemKind::Command, &b"garbage"[..]);
        out.broadcast(replicas.clone(), RsmMessage::NewValue { cmd: junk });
        // submitted to a single replica
        let lone = command(self.id, 0, b"lone");
        out.send(NodeId(self.params.n as u64 - 1), RsmMessage::NewValue { cmd: lone });
        // several updates without waiting for any
        for seq in 1..4 {
            let cmd = command(self.id, seq, b"eager");
            out.broadcast(replicas.clone().take(self.params.f + 1), RsmMessage::NewValue { cmd });
        }
    }

    fn handle(&mut self, _from: NodeId, _msg: &ProtocolMessage, _out: &mut Outbox) {}
}
