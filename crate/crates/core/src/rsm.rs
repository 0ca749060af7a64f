//! Replicated state machine for commutative updates on top of GWTS.
//!
//! Clients submit each command to `f + 1` replicas, so at least one correct
//! replica proposes it, and wait until `f + 1` replicas report a decision
//! containing it. A read is an update with a unique no-op followed by a
//! confirmation step: the client asks every replica to confirm the reported
//! decision values and returns the first one `f + 1` replicas vouch for,
//! which rules out values fabricated by Byzantine replicas.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::gwts::GwtsNode;
use crate::lattice::{Item, ItemKind, LatticeValue};
use crate::node::{Node, NodeStatus, Outbox, Output, Params};
use crate::trace::Event;
use crate::wire::{ProtocolMessage, RsmMessage};
use crate::NodeId;

/// Command item: payload is `client ‖ seq ‖ op`.
pub fn command(client: NodeId, seq: u64, op: &[u8]) -> Item {
    let mut payload = Vec::with_capacity(16 + op.len());
    payload.extend_from_slice(&client.0.to_be_bytes());
    payload.extend_from_slice(&seq.to_be_bytes());
    payload.extend_from_slice(op);
    Item::new(client, ItemKind::Command, payload)
}

/// The no-op of `client`'s `read`-th read: payload is `client ‖ read`.
pub fn nop(client: NodeId, read: u64) -> Item {
    let mut payload = Vec::with_capacity(16);
    payload.extend_from_slice(&client.0.to_be_bytes());
    payload.extend_from_slice(&read.to_be_bytes());
    Item::new(client, ItemKind::Nop, payload)
}

/// The state reached by applying the commands of `s`: since updates commute
/// it is just the set of commands, no-ops dropped.
pub fn execute(s: &LatticeValue) -> LatticeValue {
    s.iter().filter(|i| i.kind != ItemKind::Nop).cloned().collect()
}

/// A correct replica: a GWTS process plus client notifications and the
/// confirmation plug-in.
pub struct Replica {
    gwts: GwtsNode,
    interest: BTreeMap<Item, BTreeSet<NodeId>>,
    notified: BTreeSet<(NodeId, Item)>,
    pending_conf: Vec<(NodeId, LatticeValue)>,
}

impl Replica {
    pub fn new(gwts: GwtsNode) -> Self {
        Replica {
            gwts,
            interest: BTreeMap::new(),
            notified: BTreeSet::new(),
            pending_conf: Vec::new(),
        }
    }

    pub fn gwts(&self) -> &GwtsNode {
        &self.gwts
    }

    fn register(&mut self, client: NodeId, cmd: &Item, out: &mut Outbox) {
        self.interest.entry(cmd.clone()).or_default().insert(client);
        if self.gwts.decided.contains(cmd) {
            let decided = self.gwts.decided.clone();
            self.notify(&decided, out);
        }
    }

    fn notify(&mut self, decision: &LatticeValue, out: &mut Outbox) {
        for (cmd, clients) in &self.interest {
            if !decision.contains(cmd) {
                continue;
            }
            for client in clients {
                if self.notified.insert((*client, cmd.clone())) {
                    out.send(
                        *client,
                        RsmMessage::Decide {
                            cmd: cmd.clone(),
                            accepted: decision.clone(),
                        },
                    );
                }
            }
        }
    }

    fn answer_confirmations(&mut self, out: &mut Outbox) {
        let history = &self.gwts.proposer_history;
        let mut i = 0;
        while i < self.pending_conf.len() {
            if history.has_quorum_for(&self.pending_conf[i].1) {
                let (client, set) = self.pending_conf.remove(i);
                out.send(client, RsmMessage::CnfRep { set });
            } else {
                i += 1;
            }
        }
    }

    fn after(&mut self, start: usize, out: &mut Outbox) {
        let decisions: Vec<LatticeValue> = out.items()[start..]
            .iter()
            .filter_map(|o| match o {
                Output::Event(Event::Decide { value, .. }) => Some(value.clone()),
                _ => None,
            })
            .collect();
        for d in &decisions {
            self.notify(d, out);
        }
        self.answer_confirmations(out);
    }
}

impl Node for Replica {
    fn id(&self) -> NodeId {
        self.gwts.id()
    }

    fn start(&mut self, out: &mut Outbox) {
        self.gwts.start(out);
    }

    fn handle(&mut self, from: NodeId, msg: &ProtocolMessage, out: &mut Outbox) {
        let start = out.items().len();
        match msg {
            ProtocolMessage::Rsm(RsmMessage::NewValue { cmd }) => {
                if cmd.origin == from {
                    self.register(from, cmd, out);
                    self.gwts.submit_and_progress(cmd.clone(), out);
                }
            }
            ProtocolMessage::Rsm(RsmMessage::Watch { cmd }) => {
                if cmd.origin == from {
                    self.register(from, cmd, out);
                }
            }
            ProtocolMessage::Rsm(RsmMessage::CnfReq { set }) => {
                if !self.pending_conf.iter().any(|(c, s)| *c == from && s == set) {
                    self.pending_conf.push((from, set.clone()));
                }
            }
            ProtocolMessage::Rsm(_) => {}
            other => self.gwts.handle(from, other, out),
        }
        self.after(start, out);
    }

    fn status(&self) -> NodeStatus {
        self.gwts.status()
    }

    fn set_round_cap(&mut self, cap: u64, out: &mut Outbox) {
        let start = out.items().len();
        self.gwts.set_round_cap(cap, out);
        self.after(start, out);
    }
}

/// One client operation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "op")]
pub enum ClientOp {
    Update {
        #[serde(with = "crate::hexser")]
        payload: bytes::Bytes,
    },
    Read,
}

#[derive(Debug)]
enum Phase {
    Idle,
    Updating {
        cmd: Item,
        dec: BTreeMap<NodeId, BTreeSet<LatticeValue>>,
    },
    Reading {
        nop: Item,
        dec: BTreeMap<NodeId, BTreeSet<LatticeValue>>,
        requested: BTreeSet<LatticeValue>,
        conf: BTreeMap<LatticeValue, BTreeSet<NodeId>>,
    },
    Done,
}

/// A correct client running its operations one after another.
pub struct Client {
    id: NodeId,
    params: Params,
    ops: Vec<ClientOp>,
    next: usize,
    seq: u64,
    reads: u64,
    phase: Phase,
    pub results: Vec<LatticeValue>,
}

impl Client {
    pub fn new(id: NodeId, params: Params, ops: Vec<ClientOp>) -> Self {
        Client {
            id,
            params,
            ops,
            next: 0,
            seq: 0,
            reads: 0,
            phase: Phase::Idle,
            results: Vec::new(),
        }
    }

    /// The `f + 1` replicas a command is submitted to.
    fn targets(&self) -> impl Iterator<Item = NodeId> {
        (0..=self.params.f as u64).map(NodeId)
    }

    fn submit(&self, item: &Item, out: &mut Outbox) {
        let f = self.params.f as u64;
        out.broadcast(self.targets(), RsmMessage::NewValue { cmd: item.clone() });
        out.broadcast(
            (f + 1..self.params.n as u64).map(NodeId),
            RsmMessage::Watch { cmd: item.clone() },
        );
    }

    fn begin_next(&mut self, out: &mut Outbox) {
        let Some(op) = self.ops.get(self.next).cloned() else {
            self.phase = Phase::Done;
            return;
        };
        self.next += 1;
        match op {
            ClientOp::Update { payload } => {
                let cmd = command(self.id, self.seq, &payload);
                self.seq += 1;
                out.emit(Event::UpdateStart { cmd: cmd.clone() });
                self.submit(&cmd, out);
                self.phase = Phase::Updating {
                    cmd,
                    dec: BTreeMap::new(),
                };
            }
            ClientOp::Read => {
                let nop = nop(self.id, self.reads);
                self.reads += 1;
                out.emit(Event::ReadStart { nop: nop.clone() });
                self.submit(&nop, out);
                self.phase = Phase::Reading {
                    nop,
                    dec: BTreeMap::new(),
                    requested: BTreeSet::new(),
                    conf: BTreeMap::new(),
                };
            }
        }
    }

    fn on_decide(&mut self, from: NodeId, cmd: &Item, accepted: &LatticeValue, out: &mut Outbox) {
        let need = self.params.f + 1;
        let n = self.params.n as u64;
        match &mut self.phase {
            Phase::Updating { cmd: mine, dec } => {
                if cmd != mine || !accepted.contains(mine) {
                    return;
                }
                dec.entry(from).or_default().insert(accepted.clone());
                if dec.len() >= need {
                    out.emit(Event::UpdateComplete { cmd: mine.clone() });
                    self.begin_next(out);
                }
            }
            Phase::Reading {
                nop,
                dec,
                requested,
                ..
            } => {
                if cmd != nop || !accepted.contains(nop) || !requested.is_empty() {
                    return;
                }
                dec.entry(from).or_default().insert(accepted.clone());
                if dec.len() >= need {
                    let sets: BTreeSet<LatticeValue> = dec.values().flatten().cloned().collect();
                    for set in sets {
                        out.broadcast((0..n).map(NodeId), RsmMessage::CnfReq { set: set.clone() });
                        requested.insert(set);
                    }
                }
            }
            Phase::Idle | Phase::Done => {}
        }
    }

    fn on_cnf_rep(&mut self, from: NodeId, set: &LatticeValue, out: &mut Outbox) {
        let need = self.params.f + 1;
        let Phase::Reading {
            nop, requested, conf, ..
        } = &mut self.phase
        else {
            return;
        };
        if !requested.contains(set) {
            return;
        }
        let confirmations = conf.entry(set.clone()).or_default();
        confirmations.insert(from);
        if confirmations.len() >= need {
            let result = execute(set);
            out.emit(Event::ReadComplete {
                nop: nop.clone(),
                confirmed: set.clone(),
                result: result.clone(),
            });
            self.results.push(result);
            self.begin_next(out);
        }
    }
}

impl Node for Client {
    fn id(&self) -> NodeId {
        self.id
    }

    fn start(&mut self, out: &mut Outbox) {
        self.begin_next(out);
    }

    fn handle(&mut self, from: NodeId, msg: &ProtocolMessage, out: &mut Outbox) {
        if from.0 >= self.params.n as u64 {
            return;
        }
        match msg {
            ProtocolMessage::Rsm(RsmMessage::Decide { cmd, accepted }) => self.on_decide(from, cmd, accepted, out),
            ProtocolMessage::Rsm(RsmMessage::CnfRep { set }) => self.on_cnf_rep(from, set, out),
            _ => {}
        }
    }

    fn status(&self) -> NodeStatus {
        NodeStatus {
            satisfied: matches!(self.phase, Phase::Done),
            round: None,
        }
    }
}
