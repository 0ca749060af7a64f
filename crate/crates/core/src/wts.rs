//! Single-shot Byzantine lattice agreement, Wait-Till-Safe.
//!
//! Every process runs a proposer and an acceptor. The proposer reliably
//! broadcasts its input, collects disclosures into `SvS`, and starts proposing
//! once `n − f` admissible disclosures arrived. A message is *safe* when the
//! set it carries is covered by `SvS`; unsafe messages wait in a buffer until
//! later disclosures make them safe. The proposer decides on its proposal once
//! a Byzantine quorum acked it at the current timestamp, and refines it on a
//! nack that reveals unknown values.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::lattice::{Admissibility, Item, LatticeValue};
use crate::node::{Node, Outbox, Params};
use crate::rbcast::{BroadcastTag, Instance, RbFrame, Rbcast};
use crate::trace::Event;
use crate::wire::{Digest, ProtocolMessage, WtsMessage};
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposerState {
    Disclosing,
    Proposing,
    Decided,
}

/// Proposer half of a WTS process.
#[derive(Clone, Debug)]
pub struct Proposer {
    pub state: ProposerState,
    pub proposed: LatticeValue,
    pub ack_set: BTreeSet<NodeId>,
    pub svs: LatticeValue,
    pub init_counter: usize,
    pub ts: u64,
    pub decision: Option<LatticeValue>,
    pub refinements: u64,
    waiting: Vec<(NodeId, WtsMessage)>,
}

impl Default for Proposer {
    fn default() -> Self {
        Proposer {
            state: ProposerState::Disclosing,
            proposed: LatticeValue::new(),
            ack_set: BTreeSet::new(),
            svs: LatticeValue::new(),
            init_counter: 0,
            ts: 0,
            decision: None,
            refinements: 0,
            waiting: Vec::new(),
        }
    }
}

/// Acceptor half of a WTS process.
#[derive(Clone, Debug, Default)]
pub struct Acceptor {
    pub accepted: LatticeValue,
    waiting: Vec<(NodeId, LatticeValue, u64)>,
}

impl Acceptor {
    /// Handles a safe ack request and returns the reply.
    pub fn on_ack_req(&mut self, rcvd: &LatticeValue, ts: u64) -> WtsMessage {
        if self.accepted.leq(rcvd) {
            self.accepted = rcvd.clone();
            WtsMessage::Ack {
                set: self.accepted.clone(),
                ts,
            }
        } else {
            let reply = WtsMessage::Nack {
                set: self.accepted.clone(),
                ts,
            };
            self.accepted.join_with(rcvd);
            reply
        }
    }
}

/// A correct WTS process.
pub struct WtsNode {
    id: NodeId,
    params: Params,
    admissible: Arc<dyn Admissibility>,
    input: Item,
    rb: Rbcast,
    pub proposer: Proposer,
    pub acceptor: Acceptor,
}

impl WtsNode {
    /// `input` must be admissible; a correct process never proposes outside
    /// the admissible set, so this is checked by configuration validation.
    pub fn new(id: NodeId, params: Params, input: Item, admissible: Arc<dyn Admissibility>) -> Self {
        assert!(admissible.admits(&input), "input of {id:?} is not admissible");
        WtsNode {
            id,
            params,
            admissible,
            input,
            rb: Rbcast::new(id, params),
            proposer: Proposer::default(),
            acceptor: Acceptor::default(),
        }
    }

    pub fn decision(&self) -> Option<&LatticeValue> {
        self.proposer.decision.as_ref()
    }

    /// SAFE: the message's set is covered by the reliably delivered values.
    pub fn safe(&self, set: &LatticeValue) -> bool {
        set.leq(&self.proposer.svs)
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
        if tag.instance != (Instance::Disclosure { round: 0 }) {
            return;
        }
        let Ok(value) = LatticeValue::decode(&payload) else {
            return;
        };
        self.on_disclosure(tag.sender, value, out);
    }

    fn on_disclosure(&mut self, sender: NodeId, value: LatticeValue, out: &mut Outbox) {
        let admitted = disclosure_admissible(&*self.admissible, sender, &value);
        out.emit(Event::DisclosureDelivered {
            from: sender,
            round: None,
            value: value.clone(),
            admitted,
        });
        if !admitted {
            return;
        }
        let p = &mut self.proposer;
        p.svs.join_with(&value);
        p.init_counter += 1;
        if p.state == ProposerState::Disclosing {
            p.proposed.join_with(&value);
        }
    }

    fn broadcast_request(&mut self, out: &mut Outbox) {
        let p = &self.proposer;
        out.emit(Event::AckReqSent {
            round: None,
            ts: p.ts,
            items: p.proposed.len() as u64,
        });
        out.broadcast(
            self.params.processes(),
            WtsMessage::AckReq {
                set: p.proposed.clone(),
                ts: p.ts,
            },
        );
    }

    /// Runs every enabled guard until none is.
    fn progress(&mut self, out: &mut Outbox) {
        loop {
            let mut changed = false;

            if self.proposer.state == ProposerState::Disclosing
                && self.proposer.init_counter >= self.params.n - self.params.f
            {
                self.proposer.state = ProposerState::Proposing;
                self.broadcast_request(out);
                changed = true;
            }

            let mut i = 0;
            while i < self.acceptor.waiting.len() {
                if self.safe(&self.acceptor.waiting[i].1) {
                    let (from, set, ts) = self.acceptor.waiting.remove(i);
                    let reply = self.acceptor.on_ack_req(&set, ts);
                    out.send(from, reply);
                    changed = true;
                } else {
                    i += 1;
                }
            }

            changed |= self.process_replies(out);

            if !changed {
                break;
            }
        }
    }

    fn process_replies(&mut self, out: &mut Outbox) -> bool {
        let mut changed = false;
        let mut i = 0;
        while i < self.proposer.waiting.len() {
            if self.proposer.state == ProposerState::Decided {
                self.proposer.waiting.clear();
                break;
            }
            let (from, msg) = &self.proposer.waiting[i];
            let (set, ts) = match msg {
                WtsMessage::Ack { set, ts } | WtsMessage::Nack { set, ts } => (set, *ts),
                WtsMessage::AckReq { .. } => unreachable!("requests go to the acceptor"),
            };
            if ts < self.proposer.ts {
                // can never match again
                self.proposer.waiting.remove(i);
                continue;
            }
            if self.proposer.state != ProposerState::Proposing || ts != self.proposer.ts || !self.safe(set) {
                i += 1;
                continue;
            }
            let from = *from;
            let (_, msg) = self.proposer.waiting.remove(i);
            changed = true;
            match msg {
                WtsMessage::Ack { .. } => {
                    self.proposer.ack_set.insert(from);
                    if self.proposer.ack_set.len() >= self.params.quorum() {
                        let p = &mut self.proposer;
                        p.state = ProposerState::Decided;
                        p.decision = Some(p.proposed.clone());
                        out.emit(Event::Decide {
                            round: None,
                            value: p.proposed.clone(),
                        });
                    }
                }
                WtsMessage::Nack { set, .. } => {
                    if !set.leq(&self.proposer.proposed) {
                        let p = &mut self.proposer;
                        p.proposed.join_with(&set);
                        p.ack_set.clear();
                        p.ts += 1;
                        p.refinements += 1;
                        out.emit(Event::Refinement { round: None, ts: p.ts });
                        self.broadcast_request(out);
                    }
                }
                WtsMessage::AckReq { .. } => unreachable!(),
            }
        }
        changed
    }
}

/// A WTS disclosure is admissible when it is a single admissible item whose
/// origin is the broadcasting process.
pub fn disclosure_admissible(adm: &dyn Admissibility, sender: NodeId, value: &LatticeValue) -> bool {
    value.len() == 1
        && value
            .iter()
            .all(|item| item.origin == sender && adm.admits(item))
}

impl Node for WtsNode {
    fn id(&self) -> NodeId {
        self.id
    }

    fn start(&mut self, out: &mut Outbox) {
        out.emit(Event::Propose {
            value: self.input.clone(),
        });
        self.proposer.proposed.insert(self.input.clone());
        let payload = LatticeValue::singleton(self.input.clone()).encode();
        let init = self
            .rb
            .broadcast(BroadcastTag::disclosure(self.id, 0), payload.into())
            .expect("the disclosure tag is opened once");
        out.broadcast(self.params.processes(), init);
    }

    fn handle(&mut self, from: NodeId, msg: &ProtocolMessage, out: &mut Outbox) {
        match msg {
            ProtocolMessage::Rb(frame) => self.on_rb(from, frame, out),
            ProtocolMessage::Wts(WtsMessage::AckReq { set, ts }) => {
                self.acceptor.waiting.push((from, set.clone(), *ts));
            }
            ProtocolMessage::Wts(m) => {
                if self.proposer.state != ProposerState::Decided {
                    self.proposer.waiting.push((from, m.clone()));
                }
            }
            _ => return,
        }
        self.progress(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::AcceptAll;
    use crate::wire::MsgKind;

    fn v(origin: u64, tag: &str) -> Item {
        Item::value(origin, tag.as_bytes())
    }

    fn set(items: &[Item]) -> LatticeValue {
        items.iter().cloned().collect()
    }

    fn node(id: u64) -> WtsNode {
        WtsNode::new(NodeId(id), Params::new(4, 1), v(id, "x"), Arc::new(AcceptAll))
    }

    fn deliver_disclosure(n: &mut WtsNode, sender: u64, item: Item, out: &mut Outbox) {
        n.on_disclosure(NodeId(sender), LatticeValue::singleton(item), out);
        n.progress(out);
    }

    #[test]
    fn acceptor_examples() {
        let (a, b, c) = (v(0, "a"), v(1, "b"), v(2, "c"));
        let mut acc = Acceptor::default();
        assert_eq!(
            acc.on_ack_req(&set(std::slice::from_ref(&a)), 0),
            WtsMessage::Ack { set: set(std::slice::from_ref(&a)), ts: 0 }
        );
        assert_eq!(acc.on_ack_req(&set(std::slice::from_ref(&a)), 1), WtsMessage::Ack { set: set(std::slice::from_ref(&a)), ts: 1 });

        let mut acc = Acceptor {
            accepted: set(&[a.clone(), b.clone()]),
            ..Default::default()
        };
        assert_eq!(
            acc.on_ack_req(&set(&[a.clone(), c.clone()]), 4),
            WtsMessage::Nack { set: set(&[a.clone(), b.clone()]), ts: 4 }
        );
        assert_eq!(acc.accepted, set(&[a, b, c]));
    }

    #[test]
    fn propose_discloses_once() {
        let mut n = node(0);
        let mut out = Outbox::new();
        n.start(&mut out);
        assert_eq!(n.proposer.proposed, set(&[v(0, "x")]));
        assert_eq!(out.sends().count(), 4);
        assert!(out.sends().all(|(_, m)| m.kind() == MsgKind::RbInit));
        assert!(n
            .rb
            .broadcast(BroadcastTag::disclosure(NodeId(0), 0), Default::default())
            .is_err());
    }

    #[test]
    fn disclosure_grows_proposal_only_while_disclosing() {
        let mut n = node(0);
        let mut out = Outbox::new();
        n.start(&mut out);
        deliver_disclosure(&mut n, 1, v(1, "b"), &mut out);
        assert_eq!(n.proposer.init_counter, 1);
        assert!(n.proposer.proposed.contains(&v(1, "b")));
        deliver_disclosure(&mut n, 2, v(2, "c"), &mut out);
        assert_eq!(n.proposer.state, ProposerState::Disclosing);
        deliver_disclosure(&mut n, 0, v(0, "x"), &mut out);
        // n − f = 3 disclosures
        assert_eq!(n.proposer.state, ProposerState::Proposing);
        deliver_disclosure(&mut n, 3, v(3, "d"), &mut out);
        assert!(n.proposer.svs.contains(&v(3, "d")));
        assert!(!n.proposer.proposed.contains(&v(3, "d")));
    }

    #[test]
    fn inadmissible_disclosures_are_ignored() {
        let mut n = node(0);
        let mut out = Outbox::new();
        // two items
        n.on_disclosure(NodeId(1), set(&[v(1, "a"), v(1, "b")]), &mut out);
        // origin differs from the broadcaster
        n.on_disclosure(NodeId(1), set(&[v(2, "a")]), &mut out);
        // empty
        n.on_disclosure(NodeId(1), LatticeValue::new(), &mut out);
        assert_eq!(n.proposer.init_counter, 0);
        assert!(n.proposer.svs.is_empty());
    }

    #[test]
    fn safe_predicate() {
        let mut n = node(0);
        n.proposer.svs = set(&[v(0, "a"), v(1, "b")]);
        assert!(n.safe(&set(&[v(0, "a")])));
        assert!(!n.safe(&set(&[v(0, "a"), v(2, "c")])));
        assert!(n.safe(&LatticeValue::new()));
    }

    fn proposing_node() -> (WtsNode, Outbox) {
        let mut n = node(0);
        let mut out = Outbox::new();
        n.start(&mut out);
        for s in 0..3 {
            deliver_disclosure(&mut n, s, v(s, "x"), &mut out);
        }
        assert_eq!(n.proposer.state, ProposerState::Proposing);
        (n, Outbox::new())
    }

    #[test]
    fn acks_count_once_per_acceptor_and_decide_at_quorum() {
        let (mut n, mut out) = proposing_node();
        let proposal = n.proposer.proposed.clone();
        let ack = |ts| ProtocolMessage::Wts(WtsMessage::Ack { set: proposal.clone(), ts });
        n.handle(NodeId(1), &ack(0), &mut out);
        n.handle(NodeId(1), &ack(0), &mut out);
        assert_eq!(n.proposer.ack_set.len(), 1);
        n.handle(NodeId(2), &ack(0), &mut out);
        assert_eq!(n.proposer.state, ProposerState::Proposing);
        n.handle(NodeId(3), &ack(0), &mut out);
        assert_eq!(n.proposer.state, ProposerState::Decided);
        assert_eq!(n.decision(), Some(&proposal));
        let decides = out.events().filter(|e| matches!(e, Event::Decide { .. })).count();
        assert_eq!(decides, 1);
        n.handle(NodeId(0), &ack(0), &mut out);
        assert_eq!(n.proposer.ack_set.len(), 3);
    }

    #[test]
    fn nack_refines_only_on_growth() {
        let (mut n, mut out) = proposing_node();
        let current = n.proposer.proposed.clone();
        n.handle(
            NodeId(1),
            &ProtocolMessage::Wts(WtsMessage::Nack { set: current.clone(), ts: 0 }),
            &mut out,
        );
        assert_eq!(n.proposer.ts, 0);
        assert!(out.is_empty());

        // an unsafe nack waits for the disclosure of its value
        let grown = current.join(&set(&[v(3, "x")]));
        n.handle(NodeId(1), &ProtocolMessage::Wts(WtsMessage::Nack { set: grown.clone(), ts: 0 }), &mut out);
        assert_eq!(n.proposer.ts, 0);
        deliver_disclosure(&mut n, 3, v(3, "x"), &mut out);
        assert_eq!(n.proposer.ts, 1);
        assert_eq!(n.proposer.proposed, grown);
        assert!(n.proposer.ack_set.is_empty());
        assert_eq!(out.sends().filter(|(_, m)| m.kind() == MsgKind::WtsAckReq).count(), 4);
    }

    #[test]
    fn stale_acks_are_ignored() {
        let (mut n, mut out) = proposing_node();
        n.proposer.ts = 2;
        let ack = ProtocolMessage::Wts(WtsMessage::Ack { set: LatticeValue::new(), ts: 1 });
        n.handle(NodeId(1), &ack, &mut out);
        assert!(n.proposer.ack_set.is_empty());
        assert!(n.proposer.waiting.is_empty());
    }

    #[test]
    fn unsafe_requests_wait_for_disclosures() {
        let mut n = node(0);
        let mut out = Outbox::new();
        let req = ProtocolMessage::Wts(WtsMessage::AckReq { set: set(&[v(2, "c")]), ts: 0 });
        n.handle(NodeId(2), &req, &mut out);
        assert_eq!(out.sends().count(), 0);
        deliver_disclosure(&mut n, 2, v(2, "c"), &mut out);
        let replies: Vec<_> = out.sends().filter(|(_, m)| m.kind() == MsgKind::WtsAck).collect();
        assert_eq!(replies.len(), 1);
        assert_eq!(replies[0].0, NodeId(2));
    }
}
