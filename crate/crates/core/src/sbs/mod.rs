//! Signature-based single-shot lattice agreement, Safety by Signature.
//!
//! Instead of reliably broadcasting inputs, every process signs its value and
//! sends it to all proposers. A proposer gathers `n − f` signed values and asks
//! the acceptors to vouch for them. An acceptor answers with a signed *safe
//! ack* that echoes the request and lists every pair of distinct values it has
//! seen signed by the same process. A Byzantine quorum of safe acks in which a
//! value never appears in a conflict is that value's safety proof, and at most
//! one value per signer can ever get one. From there on the protocol is WTS's
//! proposing phase where every value must travel with a valid proof.

pub mod signature;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::lattice::{Admissibility, Item, LatticeValue};
use crate::node::{Node, Outbox, Params};
use crate::trace::Event;
use crate::wire::{put_u64, Digest, MsgKind, ProtocolMessage};
use crate::NodeId;

pub use signature::{SchemeKind, Signature, SignatureScheme, Signer, Verifier};

/// A value signed by `sender`. Equality and order ignore the signature bytes.
#[derive(Clone, Serialize, Deserialize)]
pub struct SignedValue {
    pub value: Item,
    pub sender: NodeId,
    pub sig: Signature,
}

impl SignedValue {
    pub fn sign(signer: &Signer, value: Item) -> Self {
        let sig = signer.sign(&Self::signing_bytes(signer.id(), &value));
        SignedValue {
            value,
            sender: signer.id(),
            sig,
        }
    }

    fn signing_bytes(sender: NodeId, value: &Item) -> Vec<u8> {
        let mut out = b"sbs-value\0".to_vec();
        put_u64(&mut out, sender.0);
        value.encode_into(&mut out);
        out
    }

    /// Valid signature by `sender`, and `sender` is the value's origin.
    pub fn verify(&self, v: &Verifier) -> bool {
        self.value.origin == self.sender && v.verify(self.sender, &Self::signing_bytes(self.sender, &self.value), &self.sig)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        self.value.encode_into(out);
        put_u64(out, self.sender.0);
        out.extend_from_slice(&(self.sig.0.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.sig.0);
    }
}

impl PartialEq for SignedValue {
    fn eq(&self, other: &Self) -> bool {
        self.sender == other.sender && self.value == other.value
    }
}

impl Eq for SignedValue {}

impl PartialOrd for SignedValue {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SignedValue {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.sender, &self.value).cmp(&(other.sender, &other.value))
    }
}

impl fmt::Debug for SignedValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{:?} by {:?}>", self.value, self.sender)
    }
}

pub type ConflictPair = (SignedValue, SignedValue);

/// Same signer, different values.
pub fn conflicting(x: &SignedValue, y: &SignedValue) -> bool {
    x.sender == y.sender && x.value != y.value
}

pub fn verify_conf_pair(v: &Verifier, (x, y): &ConflictPair) -> bool {
    conflicting(x, y) && x.verify(v) && y.verify(v)
}

/// Every ordered pair of `set` that passes [`verify_conf_pair`].
pub fn return_conflicts<'a>(set: impl IntoIterator<Item = &'a SignedValue>, v: &Verifier) -> BTreeSet<ConflictPair> {
    let mut by_sender: BTreeMap<NodeId, Vec<&SignedValue>> = BTreeMap::new();
    for sv in set {
        by_sender.entry(sv.sender).or_default().push(sv);
    }
    let mut out = BTreeSet::new();
    for group in by_sender.values().filter(|g| g.len() > 1) {
        for x in group {
            for y in group {
                let pair = ((*x).clone(), (*y).clone());
                if verify_conf_pair(v, &pair) {
                    out.insert(pair);
                }
            }
        }
    }
    out
}

/// `set` without every value involved in a conflict.
pub fn remove_conflicts(set: &BTreeSet<SignedValue>, v: &Verifier) -> BTreeSet<SignedValue> {
    let conflicts = return_conflicts(set, v);
    let mut out = set.clone();
    for (x, y) in &conflicts {
        out.remove(x);
        out.remove(y);
    }
    out
}

fn encode_signed_set<'a>(out: &mut Vec<u8>, set: impl ExactSizeIterator<Item = &'a SignedValue>) {
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    for sv in set {
        sv.encode_into(out);
    }
}

/// An acceptor's signed answer to a safe request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafeAck {
    pub rcvd: BTreeSet<SignedValue>,
    pub conflicts: BTreeSet<ConflictPair>,
    pub acceptor: NodeId,
    pub sig: Signature,
}

impl SafeAck {
    pub fn new(signer: &Signer, rcvd: BTreeSet<SignedValue>, conflicts: BTreeSet<ConflictPair>) -> Self {
        let sig = signer.sign(&Self::signing_bytes(signer.id(), &rcvd, &conflicts));
        SafeAck {
            rcvd,
            conflicts,
            acceptor: signer.id(),
            sig,
        }
    }

    fn signing_bytes(acceptor: NodeId, rcvd: &BTreeSet<SignedValue>, conflicts: &BTreeSet<ConflictPair>) -> Vec<u8> {
        let mut out = b"sbs-safe-ack\0".to_vec();
        Self::encode_body(&mut out, acceptor, rcvd, conflicts);
        out
    }

    fn encode_body(out: &mut Vec<u8>, acceptor: NodeId, rcvd: &BTreeSet<SignedValue>, conflicts: &BTreeSet<ConflictPair>) {
        put_u64(out, acceptor.0);
        encode_signed_set(out, rcvd.iter());
        out.extend_from_slice(&(conflicts.len() as u32).to_be_bytes());
        for (x, y) in conflicts {
            x.encode_into(out);
            y.encode_into(out);
        }
    }

    pub fn verify(&self, v: &Verifier) -> bool {
        v.verify(
            self.acceptor,
            &Self::signing_bytes(self.acceptor, &self.rcvd, &self.conflicts),
            &self.sig,
        )
    }

    pub fn mentions_in_conflict(&self, sv: &SignedValue) -> bool {
        self.conflicts.iter().any(|(x, y)| x == sv || y == sv)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        Self::encode_body(out, self.acceptor, &self.rcvd, &self.conflicts);
        out.extend_from_slice(&(self.sig.0.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.sig.0);
    }
}

/// The safe acks a value's safety rests on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyProof {
    pub acks: Vec<SafeAck>,
}

impl SafetyProof {
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.acks.len() as u32).to_be_bytes());
        for a in &self.acks {
            a.encode_into(out);
        }
    }

    pub fn digest(&self) -> Digest {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        Digest::of(&out)
    }
}

/// A set of values each carrying a safety proof. Lattice order and equality
/// are on the values alone.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProvenSet {
    entries: BTreeMap<SignedValue, Arc<SafetyProof>>,
}

impl ProvenSet {
    pub fn new() -> Self {
        ProvenSet::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, sv: SignedValue, proof: Arc<SafetyProof>) {
        self.entries.entry(sv).or_insert(proof);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SignedValue, &Arc<SafetyProof>)> {
        self.entries.iter()
    }

    pub fn contains(&self, sv: &SignedValue) -> bool {
        self.entries.contains_key(sv)
    }

    /// Value-level inclusion.
    pub fn leq(&self, other: &ProvenSet) -> bool {
        self.entries.keys().all(|k| other.entries.contains_key(k))
    }

    pub fn same_values(&self, other: &ProvenSet) -> bool {
        self.entries.len() == other.entries.len() && self.leq(other)
    }

    /// Adds the entries of `other` whose values are new; returns whether any
    /// were.
    pub fn join_with(&mut self, other: &ProvenSet) -> bool {
        let mut grew = false;
        for (k, p) in &other.entries {
            if !self.entries.contains_key(k) {
                self.entries.insert(k.clone(), p.clone());
                grew = true;
            }
        }
        grew
    }

    pub fn values(&self) -> LatticeValue {
        self.entries.keys().map(|k| k.value.clone()).collect()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for (sv, proof) in &self.entries {
            sv.encode_into(out);
            proof.encode_into(out);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ProvenEntry {
    value: SignedValue,
    proof: Arc<SafetyProof>,
}

impl Serialize for ProvenSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.entries.iter().map(|(k, p)| ProvenEntry {
            value: k.clone(),
            proof: p.clone(),
        }))
    }
}

impl<'de> Deserialize<'de> for ProvenSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let entries = Vec::<ProvenEntry>::deserialize(d)?;
        Ok(ProvenSet {
            entries: entries.into_iter().map(|e| (e.value, e.proof)).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum SbsMessage {
    Init { value: SignedValue },
    SafeReq { set: BTreeSet<SignedValue> },
    SafeAck { ack: SafeAck },
    AckReq { set: ProvenSet, ts: u64 },
    Ack { set: ProvenSet, ts: u64 },
    Nack { set: ProvenSet, ts: u64 },
}

impl SbsMessage {
    pub fn kind(&self) -> MsgKind {
        match self {
            SbsMessage::Init { .. } => MsgKind::SbsInit,
            SbsMessage::SafeReq { .. } => MsgKind::SbsSafeReq,
            SbsMessage::SafeAck { .. } => MsgKind::SbsSafeAck,
            SbsMessage::AckReq { .. } => MsgKind::SbsAckReq,
            SbsMessage::Ack { .. } => MsgKind::SbsAck,
            SbsMessage::Nack { .. } => MsgKind::SbsNack,
        }
    }

    pub fn ts(&self) -> Option<u64> {
        match self {
            SbsMessage::AckReq { ts, .. } | SbsMessage::Ack { ts, .. } | SbsMessage::Nack { ts, .. } => Some(*ts),
            _ => None,
        }
    }

    pub fn proven_set(&self) -> Option<&ProvenSet> {
        match self {
            SbsMessage::AckReq { set, .. } | SbsMessage::Ack { set, .. } | SbsMessage::Nack { set, .. } => Some(set),
            _ => None,
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            SbsMessage::Init { value } => {
                out.push(0);
                value.encode_into(out);
            }
            SbsMessage::SafeReq { set } => {
                out.push(1);
                encode_signed_set(out, set.iter());
            }
            SbsMessage::SafeAck { ack } => {
                out.push(2);
                ack.encode_into(out);
            }
            SbsMessage::AckReq { set, ts } | SbsMessage::Ack { set, ts } | SbsMessage::Nack { set, ts } => {
                out.push(match self {
                    SbsMessage::AckReq { .. } => 3,
                    SbsMessage::Ack { .. } => 4,
                    _ => 5,
                });
                put_u64(out, *ts);
                set.encode_into(out);
            }
        }
    }
}

/// What every SbS process needs to judge proofs.
#[derive(Clone)]
pub struct SbsContext {
    pub params: Params,
    pub verifier: Verifier,
    pub admissible: Arc<dyn Admissibility>,
}

impl SbsContext {
    /// The safety-proof conditions for one value.
    pub fn proof_valid(&self, sv: &SignedValue, proof: &SafetyProof) -> bool {
        if proof.acks.len() < self.params.quorum() || !self.admissible.admits(&sv.value) || !sv.verify(&self.verifier) {
            return false;
        }
        let mut senders = BTreeSet::new();
        proof.acks.iter().all(|ack| {
            (ack.acceptor.0 as usize) < self.params.n
                && senders.insert(ack.acceptor)
                && ack.rcvd.contains(sv)
                && !ack.mentions_in_conflict(sv)
                && ack.verify(&self.verifier)
        })
    }

    /// AllSafe: every entry carries a valid proof. Vacuously true when empty.
    pub fn all_safe(&self, set: &ProvenSet) -> bool {
        set.iter().all(|(sv, proof)| self.proof_valid(sv, proof))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SbsState {
    Init,
    Safetying,
    Proposing,
    Decided,
}

/// A correct SbS process: proposer and acceptor.
pub struct SbsNode {
    id: NodeId,
    ctx: SbsContext,
    signer: Signer,
    input: Item,

    pub state: SbsState,
    pub safety_set: BTreeSet<SignedValue>,
    pub safe_acks: BTreeMap<NodeId, SafeAck>,
    pub proposed: ProvenSet,
    pub ack_set: BTreeSet<NodeId>,
    pub byz: BTreeSet<NodeId>,
    pub ts: u64,
    pub decision: Option<LatticeValue>,
    pub refinements: u64,

    pub safe_candidates: BTreeSet<SignedValue>,
    pub accepted: ProvenSet,
}

impl SbsNode {
    pub fn new(signer: Signer, ctx: SbsContext, input: Item) -> Self {
        assert!(ctx.admissible.admits(&input), "input of {:?} is not admissible", signer.id());
        SbsNode {
            id: signer.id(),
            ctx,
            signer,
            input,
            state: SbsState::Init,
            safety_set: BTreeSet::new(),
            safe_acks: BTreeMap::new(),
            proposed: ProvenSet::new(),
            ack_set: BTreeSet::new(),
            byz: BTreeSet::new(),
            ts: 0,
            decision: None,
            refinements: 0,
            safe_candidates: BTreeSet::new(),
            accepted: ProvenSet::new(),
        }
    }

    pub fn context(&self) -> &SbsContext {
        &self.ctx
    }

    pub fn signer(&self) -> &Signer {
        &self.signer
    }

    fn all(&self) -> impl Iterator<Item = NodeId> + Clone {
        self.ctx.params.processes()
    }

    fn flag(&mut self, who: NodeId, reason: &str, out: &mut Outbox) {
        if self.byz.insert(who) {
            out.emit(Event::ByzFlag {
                flagged: who,
                reason: reason.to_string(),
            });
        }
    }

    fn on_init(&mut self, sv: &SignedValue) {
        if self.state != SbsState::Init || !sv.verify(&self.ctx.verifier) || !self.ctx.admissible.admits(&sv.value) {
            return;
        }
        let mut set = self.safety_set.clone();
        set.insert(sv.clone());
        self.safety_set = remove_conflicts(&set, &self.ctx.verifier);
    }

    fn on_safe_ack(&mut self, from: NodeId, ack: &SafeAck, out: &mut Outbox) {
        if self.state != SbsState::Safetying {
            return;
        }
        let v = &self.ctx.verifier;
        let valid = ack.acceptor == from
            && ack.verify(v)
            && ack.rcvd == self.safety_set
            && ack.conflicts.iter().all(|pair| verify_conf_pair(v, pair));
        if valid {
            self.safe_acks.entry(from).or_insert_with(|| ack.clone());
        } else {
            self.flag(from, "invalid safe ack", out);
        }
    }

    fn broadcast_request(&mut self, out: &mut Outbox) {
        out.emit(Event::AckReqSent {
            round: None,
            ts: self.ts,
            items: self.proposed.len() as u64,
        });
        out.broadcast(
            self.all(),
            SbsMessage::AckReq {
                set: self.proposed.clone(),
                ts: self.ts,
            },
        );
    }

    fn on_ack(&mut self, from: NodeId, set: &ProvenSet, rts: u64, out: &mut Outbox) {
        if self.state != SbsState::Proposing || rts != self.ts {
            return;
        }
        if set.same_values(&self.proposed) && !self.byz.contains(&from) {
            self.ack_set.insert(from);
        } else {
            self.flag(from, "ack does not echo the proposal", out);
        }
    }

    fn on_nack(&mut self, from: NodeId, set: &ProvenSet, rts: u64, out: &mut Outbox) {
        if self.state != SbsState::Proposing || rts != self.ts {
            return;
        }
        if !set.leq(&self.proposed) && !self.byz.contains(&from) && self.ctx.all_safe(set) {
            self.proposed.join_with(set);
            self.ack_set.clear();
            self.ts += 1;
            self.refinements += 1;
            out.emit(Event::Refinement { round: None, ts: self.ts });
            self.broadcast_request(out);
        } else {
            self.flag(from, "nack adds nothing or carries an unproven value", out);
        }
    }

    fn on_safe_req(&mut self, from: NodeId, set: &BTreeSet<SignedValue>, out: &mut Outbox) {
        let v = self.ctx.verifier.clone();
        if !set.iter().all(|sv| sv.verify(&v)) {
            return;
        }
        let mut union = self.safe_candidates.clone();
        union.extend(set.iter().cloned());
        let conflicts = return_conflicts(&union, &v);
        let ack = SafeAck::new(&self.signer, set.clone(), conflicts);
        out.send(from, SbsMessage::SafeAck { ack });
        let clean = remove_conflicts(&union, &v);
        self.safe_candidates.extend(clean);
    }

    fn on_ack_req(&mut self, from: NodeId, rcvd: &ProvenSet, ts: u64, out: &mut Outbox) {
        if !self.ctx.all_safe(rcvd) {
            return;
        }
        if self.accepted.leq(rcvd) {
            self.accepted = rcvd.clone();
            out.send(
                from,
                SbsMessage::Ack {
                    set: self.accepted.clone(),
                    ts,
                },
            );
        } else {
            out.send(
                from,
                SbsMessage::Nack {
                    set: self.accepted.clone(),
                    ts,
                },
            );
            self.accepted.join_with(rcvd);
        }
    }

    fn progress(&mut self, out: &mut Outbox) {
        let (n, f, q) = (self.ctx.params.n, self.ctx.params.f, self.ctx.params.quorum());
        if self.state == SbsState::Init && self.safety_set.len() >= n - f {
            self.state = SbsState::Safetying;
            out.broadcast(
                self.all(),
                SbsMessage::SafeReq {
                    set: self.safety_set.clone(),
                },
            );
        }
        if self.state == SbsState::Safetying && self.safe_acks.len() >= q {
            let proof = Arc::new(SafetyProof {
                acks: self.safe_acks.values().cloned().collect(),
            });
            for sv in &self.safety_set {
                if !self.safe_acks.values().any(|a| a.mentions_in_conflict(sv)) {
                    self.proposed.insert(sv.clone(), proof.clone());
                }
            }
            self.state = SbsState::Proposing;
            self.ack_set.clear();
            self.ts += 1;
            self.broadcast_request(out);
        }
        if self.state == SbsState::Proposing && self.ack_set.len() >= q {
            self.state = SbsState::Decided;
            let value = self.proposed.values();
            self.decision = Some(value.clone());
            out.emit(Event::Decide { round: None, value });
        }
    }
}

impl Node for SbsNode {
    fn id(&self) -> NodeId {
        self.id
    }

    fn start(&mut self, out: &mut Outbox) {
        out.emit(Event::Propose {
            value: self.input.clone(),
        });
        let sv = SignedValue::sign(&self.signer, self.input.clone());
        self.safety_set.insert(sv.clone());
        out.broadcast(self.all(), SbsMessage::Init { value: sv });
        self.progress(out);
    }

    fn handle(&mut self, from: NodeId, msg: &ProtocolMessage, out: &mut Outbox) {
        let ProtocolMessage::Sbs(msg) = msg else {
            return;
        };
        match msg {
            SbsMessage::Init { value } => self.on_init(value),
            SbsMessage::SafeReq { set } => self.on_safe_req(from, set, out),
            SbsMessage::SafeAck { ack } => self.on_safe_ack(from, ack, out),
            SbsMessage::AckReq { set, ts } => self.on_ack_req(from, set, *ts, out),
            SbsMessage::Ack { set, ts } => self.on_ack(from, set, *ts, out),
            SbsMessage::Nack { set, ts } => self.on_nack(from, set, *ts, out),
        }
        self.progress(out);
    }
}
