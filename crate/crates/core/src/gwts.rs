//! Generalized Byzantine lattice agreement, GWTS.
//!
//! Proposers run an unbounded sequence of rounds. Each round discloses the
//! values submitted since the previous one by reliable broadcast, then runs a
//! WTS-style proposing phase. Acceptors acknowledge by reliable broadcast, so
//! every process sees every ack and any proposer may decide a set another
//! proposer got acknowledged. An acceptor serves requests for round `r` only
//! once it has seen round `r − 1` end with a committed proposal (`Safe_r`),
//! which stops Byzantine proposers from racing ahead through rounds.
//!
//! Safety of a message is checked against the union of every round's
//! delivered disclosures: proposals and accepted sets are cumulative over
//! rounds, so a per-round test would reject every honest proposal after the
//! first round.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::lattice::{Admissibility, Item, LatticeValue};
use crate::node::{Node, NodeStatus, Outbox, Params};
use crate::rbcast::{BroadcastTag, Instance, RbFrame, Rbcast};
use crate::trace::Event;
use crate::wire::{Digest, GwtsMessage, ProtocolMessage};
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundState {
    NewRound,
    Disclosing,
    Proposing,
}

/// `<ack, Accepted_set, destination, sender, ts, round>`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct AckRecord {
    pub accepted: LatticeValue,
    pub destination: NodeId,
    pub sender: NodeId,
    pub ts: u64,
    pub round: u64,
}

/// Tally of distinct ack senders per `(round, ts, destination, set)`.
#[derive(Clone, Debug, Default)]
pub struct AckHistory {
    senders: BTreeMap<(u64, u64, NodeId, LatticeValue), BTreeSet<NodeId>>,
    quorums: BTreeSet<(u64, u64, NodeId, LatticeValue)>,
    quorum_sets: BTreeSet<LatticeValue>,
}

impl AckHistory {
    /// Records an ack; returns the tallied key if this record completed a
    /// quorum of size `quorum`.
    pub fn insert(&mut self, rec: AckRecord, quorum: usize) -> Option<(u64, u64, NodeId, LatticeValue)> {
        let key = (rec.round, rec.ts, rec.destination, rec.accepted);
        let senders = self.senders.entry(key.clone()).or_default();
        if !senders.insert(rec.sender) || senders.len() != quorum {
            return None;
        }
        self.quorum_sets.insert(key.3.clone());
        self.quorums.insert(key.clone());
        Some(key)
    }

    pub fn count(&self, round: u64, ts: u64, destination: NodeId, set: &LatticeValue) -> usize {
        self.senders
            .get(&(round, ts, destination, set.clone()))
            .map_or(0, BTreeSet::len)
    }

    /// Quorums for `round` in tie-break order `(round, ts, destination, set)`.
    pub fn quorums_in_round(&self, round: u64) -> impl Iterator<Item = &(u64, u64, NodeId, LatticeValue)> {
        self.quorums
            .range((round, 0, NodeId(0), LatticeValue::new())..)
            .take_while(move |k| k.0 == round)
    }

    pub fn has_quorum_round(&self, round: u64) -> bool {
        self.quorums_in_round(round).next().is_some()
    }

    /// Whether some `(ts, round, destination)` combination has a quorum for
    /// exactly `set`.
    pub fn has_quorum_for(&self, set: &LatticeValue) -> bool {
        self.quorum_sets.contains(set)
    }
}

#[derive(Clone, Debug)]
enum ProposerMsg {
    Nack {
        set: LatticeValue,
        ts: u64,
        round: u64,
    },
    Ack(AckRecord),
}

#[derive(Clone, Debug)]
enum AcceptorMsg {
    Req {
        from: NodeId,
        set: LatticeValue,
        ts: u64,
        round: u64,
    },
    Ack(AckRecord),
}

/// Configuration of one GWTS process.
#[derive(Clone)]
pub struct GwtsOptions {
    /// Values submitted at the start of rounds `0, 1, ...`, one per round.
    pub inputs: Vec<Item>,
    /// Number of decisions after which the node no longer needs more rounds.
    pub target_decisions: u64,
    /// Highest round the node may start.
    pub round_cap: u64,
    pub admissible: Arc<dyn Admissibility>,
}

/// A correct GWTS process: proposer and acceptor.
pub struct GwtsNode {
    id: NodeId,
    params: Params,
    opts: GwtsOptions,
    rb: Rbcast,

    // proposer
    pub state: RoundState,
    /// Current round; `None` before round 0.
    pub round: Option<u64>,
    pub ts: u64,
    batch: BTreeMap<u64, LatticeValue>,
    svs: BTreeMap<u64, LatticeValue>,
    svs_all: LatticeValue,
    counter: BTreeMap<u64, usize>,
    pub proposed: LatticeValue,
    pub decided: LatticeValue,
    pub decisions: Vec<(u64, LatticeValue)>,
    pub refinements: u64,
    pub proposer_history: AckHistory,
    proposer_waiting: Vec<ProposerMsg>,
    undecided: BTreeSet<Item>,

    // acceptor
    pub accepted: LatticeValue,
    pub safe_r: u64,
    pub acceptor_history: AckHistory,
    acceptor_waiting: Vec<AcceptorMsg>,
    served: BTreeSet<(NodeId, u64, u64)>,
}

impl GwtsNode {
    pub fn new(id: NodeId, params: Params, opts: GwtsOptions) -> Self {
        GwtsNode {
            id,
            params,
            rb: Rbcast::new(id, params),
            opts,
            state: RoundState::NewRound,
            round: None,
            ts: 0,
            batch: BTreeMap::new(),
            svs: BTreeMap::new(),
            svs_all: LatticeValue::new(),
            counter: BTreeMap::new(),
            proposed: LatticeValue::new(),
            decided: LatticeValue::new(),
            decisions: Vec::new(),
            refinements: 0,
            proposer_history: AckHistory::default(),
            proposer_waiting: Vec::new(),
            undecided: BTreeSet::new(),
            accepted: LatticeValue::new(),
            safe_r: 0,
            acceptor_history: AckHistory::default(),
            acceptor_waiting: Vec::new(),
            served: BTreeSet::new(),
        }
    }

    pub fn params(&self) -> Params {
        self.params
    }

    pub fn svs(&self, round: u64) -> Option<&LatticeValue> {
        self.svs.get(&round)
    }

    /// Union of every round's delivered disclosures.
    pub fn disclosed(&self) -> &LatticeValue {
        &self.svs_all
    }

    pub fn counter(&self, round: u64) -> usize {
        self.counter.get(&round).copied().unwrap_or(0)
    }

    pub fn batch(&self, round: u64) -> Option<&LatticeValue> {
        self.batch.get(&round)
    }

    pub fn safe(&self, set: &LatticeValue) -> bool {
        set.leq(&self.svs_all)
    }

    fn next_round(&self) -> u64 {
        self.round.map_or(0, |r| r + 1)
    }

    /// Adds `item` to the batch of the next round. Inadmissible items are
    /// refused: disclosing one would get the whole batch rejected.
    pub fn submit(&mut self, item: Item, out: &mut Outbox) -> bool {
        if !self.opts.admissible.admits(&item) {
            return false;
        }
        let next = self.next_round();
        out.emit(Event::Submit { item: item.clone() });
        if !self.decided.contains(&item) {
            self.undecided.insert(item.clone());
        }
        self.batch.entry(next).or_default().insert(item);
        true
    }

    /// Submits a value and runs any guard it enabled.
    pub fn submit_and_progress(&mut self, item: Item, out: &mut Outbox) -> bool {
        let ok = self.submit(item, out);
        self.progress(out);
        ok
    }

    fn begin_round(&mut self, out: &mut Outbox) {
        let r = self.next_round();
        if let Some(input) = self.opts.inputs.get(r as usize).cloned() {
            self.submit(input, out);
        }
        self.state = RoundState::Disclosing;
        self.round = Some(r);
        let batch = self.batch.remove(&r).unwrap_or_default();
        self.proposed.join_with(&batch);
        out.emit(Event::RoundStart { round: r });
        let init = self
            .rb
            .broadcast(BroadcastTag::disclosure(self.id, r), batch.encode().into())
            .expect("each round's disclosure tag is opened once");
        out.broadcast(self.params.processes(), init);
    }

    fn on_rb(&mut self, from: NodeId, frame: &RbFrame, out: &mut Outbox) {
        let step = self.rb.handle(from, frame);
        for f in step.broadcast {
            out.broadcast(self.params.processes(), f);
        }
        let Some((tag, payload)) = step.delivered else {
            return;
        };
        out.emit(Event::RbDeliver {
            tag,
            payload: Digest::of(&payload),
        });
        let Ok(set) = LatticeValue::decode(&payload) else {
            return;
        };
        match tag.instance {
            Instance::Disclosure { round } => self.on_disclosure(tag.sender, round, set, out),
            Instance::Ack {
                round,
                ts,
                destination,
            } => {
                let rec = AckRecord {
                    accepted: set,
                    destination,
                    sender: tag.sender,
                    ts,
                    round,
                };
                self.proposer_waiting.push(ProposerMsg::Ack(rec.clone()));
                self.acceptor_waiting.push(AcceptorMsg::Ack(rec));
            }
        }
    }

    fn on_disclosure(&mut self, sender: NodeId, round: u64, set: LatticeValue, out: &mut Outbox) {
        let admitted = self.opts.admissible.admits_all(&set);
        out.emit(Event::DisclosureDelivered {
            from: sender,
            round: Some(round),
            value: set.clone(),
            admitted,
        });
        if !admitted {
            return;
        }
        if self.state == RoundState::Disclosing {
            self.proposed.join_with(&set);
        }
        self.svs_all.join_with(&set);
        self.svs.entry(round).or_default().join_with(&set);
        *self.counter.entry(round).or_default() += 1;
    }

    fn broadcast_request(&mut self, out: &mut Outbox) {
        let round = self.round.expect("proposing implies a round");
        out.emit(Event::AckReqSent {
            round: Some(round),
            ts: self.ts,
            items: self.proposed.len() as u64,
        });
        out.broadcast(
            self.params.processes(),
            GwtsMessage::AckReq {
                set: self.proposed.clone(),
                ts: self.ts,
                round,
            },
        );
    }

    /// Runs every enabled guard until none is.
    pub fn progress(&mut self, out: &mut Outbox) {
        loop {
            let mut changed = false;

            if self.state == RoundState::NewRound && self.next_round() <= self.opts.round_cap {
                self.begin_round(out);
                changed = true;
            }

            if self.state == RoundState::Disclosing {
                let r = self.round.expect("disclosing implies a round");
                if self.counter(r) >= self.params.n - self.params.f {
                    self.state = RoundState::Proposing;
                    self.ts += 1;
                    self.broadcast_request(out);
                    changed = true;
                }
            }

            changed |= self.process_proposer_buffer(out);
            changed |= self.try_decide(out);
            changed |= self.process_acceptor_buffer(out);

            if !changed {
                break;
            }
        }
    }

    fn process_proposer_buffer(&mut self, out: &mut Outbox) -> bool {
        let mut changed = false;
        let mut i = 0;
        while i < self.proposer_waiting.len() {
            match &self.proposer_waiting[i] {
                ProposerMsg::Nack { set, ts, round } => {
                    if *ts < self.ts || Some(*round) < self.round {
                        // ts only grows, so this can never match again
                        self.proposer_waiting.remove(i);
                        continue;
                    }
                    if self.state != RoundState::Proposing
                        || *ts != self.ts
                        || Some(*round) != self.round
                        || !self.safe(set)
                    {
                        i += 1;
                        continue;
                    }
                    let ProposerMsg::Nack { set, .. } = self.proposer_waiting.remove(i) else {
                        unreachable!()
                    };
                    changed = true;
                    if !set.leq(&self.proposed) {
                        self.proposed.join_with(&set);
                        self.ts += 1;
                        self.refinements += 1;
                        out.emit(Event::Refinement {
                            round: self.round,
                            ts: self.ts,
                        });
                        self.broadcast_request(out);
                    }
                }
                ProposerMsg::Ack(rec) => {
                    if self.state != RoundState::Proposing || !self.safe(&rec.accepted) {
                        i += 1;
                        continue;
                    }
                    let ProposerMsg::Ack(rec) = self.proposer_waiting.remove(i) else {
                        unreachable!()
                    };
                    self.proposer_history.insert(rec, self.params.quorum());
                    changed = true;
                }
            }
        }
        changed
    }

    fn try_decide(&mut self, out: &mut Outbox) -> bool {
        if self.state != RoundState::Proposing {
            return false;
        }
        let r = self.round.expect("proposing implies a round");
        let Some(set) = self
            .proposer_history
            .quorums_in_round(r)
            .find(|k| self.decided.leq(&k.3))
            .map(|k| k.3.clone())
        else {
            return false;
        };
        self.undecided.retain(|item| !set.contains(item));
        out.emit(Event::Decide {
            round: Some(r),
            value: set.clone(),
        });
        self.decisions.push((r, set.clone()));
        self.decided = set;
        self.state = RoundState::NewRound;
        true
    }

    fn process_acceptor_buffer(&mut self, out: &mut Outbox) -> bool {
        let mut changed = false;
        let mut i = 0;
        while i < self.acceptor_waiting.len() {
            let (round, set) = match &self.acceptor_waiting[i] {
                AcceptorMsg::Req { round, set, .. } => (*round, set),
                AcceptorMsg::Ack(rec) => (rec.round, &rec.accepted),
            };
            if round > self.safe_r || !self.safe(set) {
                i += 1;
                continue;
            }
            changed = true;
            match self.acceptor_waiting.remove(i) {
                AcceptorMsg::Req { from, set, ts, round } => self.on_ack_req(from, set, ts, round, out),
                AcceptorMsg::Ack(rec) => {
                    let quorum = self.params.quorum();
                    if self.acceptor_history.insert(rec, quorum).is_some() {
                        while self.acceptor_history.has_quorum_round(self.safe_r) {
                            self.safe_r += 1;
                            out.emit(Event::SafeRAdvance { safe_r: self.safe_r });
                        }
                    }
                }
            }
        }
        changed
    }

    fn on_ack_req(&mut self, from: NodeId, rcvd: LatticeValue, ts: u64, round: u64, out: &mut Outbox) {
        if !self.served.insert((from, ts, round)) {
            // a repeated request; only a Byzantine proposer sends one
            return;
        }
        out.emit(Event::AckReqProcessed {
            from,
            round,
            ts,
            safe_r: self.safe_r,
        });
        if self.accepted.leq(&rcvd) {
            self.accepted = rcvd;
            let payload = self.accepted.encode();
            out.emit(Event::AckRbcast {
                round,
                ts,
                destination: from,
                accepted: Digest::of(&payload),
            });
            let init = self
                .rb
                .broadcast(BroadcastTag::ack(self.id, round, ts, from), payload.into())
                .expect("requests are served once per (requester, ts, round)");
            out.broadcast(self.params.processes(), init);
        } else {
            out.send(
                from,
                GwtsMessage::Nack {
                    set: self.accepted.clone(),
                    ts,
                    round,
                },
            );
            self.accepted.join_with(&rcvd);
        }
    }

    pub fn round_cap(&self) -> u64 {
        self.opts.round_cap
    }
}

impl Node for GwtsNode {
    fn id(&self) -> NodeId {
        self.id
    }

    fn start(&mut self, out: &mut Outbox) {
        self.progress(out);
    }

    fn handle(&mut self, from: NodeId, msg: &ProtocolMessage, out: &mut Outbox) {
        match msg {
            ProtocolMessage::Rb(frame) => self.on_rb(from, frame, out),
            ProtocolMessage::Gwts(GwtsMessage::AckReq { set, ts, round }) => {
                self.acceptor_waiting.push(AcceptorMsg::Req {
                    from,
                    set: set.clone(),
                    ts: *ts,
                    round: *round,
                });
            }
            ProtocolMessage::Gwts(GwtsMessage::Nack { set, ts, round }) => {
                self.proposer_waiting.push(ProposerMsg::Nack {
                    set: set.clone(),
                    ts: *ts,
                    round: *round,
                });
            }
            // acks only count when reliably broadcast
            _ => return,
        }
        self.progress(out);
    }

    fn status(&self) -> NodeStatus {
        NodeStatus {
            satisfied: self.decisions.len() as u64 >= self.opts.target_decisions && self.undecided.is_empty(),
            round: self.round,
        }
    }

    fn set_round_cap(&mut self, cap: u64, out: &mut Outbox) {
        self.opts.round_cap = cap;
        self.progress(out);
    }
}
