//! Offline trace checking.
//!
//! The checker reads a finished trace together with the run's [`Roles`] and
//! evaluates every property of the protocol that produced it. It is a pure
//! function of its inputs. A failed property always names the trace events
//! (by sequence number) that witness the violation.
//!
//! Liveness-style properties are only judged on quiescent runs; a run that hit
//! its delivery budget yields `inconclusive` for them instead.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ProtocolKind, Roles};
use crate::lattice::{Item, LatticeValue};
use crate::rbcast::{BroadcastTag, Instance};
use crate::rsm::execute;
use crate::sbs::{SbsContext, Verifier};
use crate::trace::{Event, Trace, TraceEvent};
use crate::wire::{Digest, MsgKind};
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
    /// The property does not apply to this run (e.g. a depth bound on a
    /// randomly scheduled run).
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub property: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub witness: Vec<u64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl PropertyResult {
    fn pass(property: &str) -> Self {
        PropertyResult {
            property: property.to_string(),
            status: Status::Pass,
            witness: Vec::new(),
            detail: String::new(),
        }
    }

    fn with(property: &str, status: Status, witness: Vec<u64>, detail: impl Into<String>) -> Self {
        PropertyResult {
            property: property.to_string(),
            status,
            witness,
            detail: detail.into(),
        }
    }

    fn fail(property: &str, mut witness: Vec<u64>, detail: impl Into<String>) -> Self {
        witness.sort_unstable();
        witness.dedup();
        Self::with(property, Status::Fail, witness, detail)
    }

    fn note(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub protocol: ProtocolKind,
    pub properties: Vec<PropertyResult>,
}

impl Verdict {
    /// No property failed.
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.status != Status::Fail)
    }

    pub fn get(&self, property: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.property == property)
    }

    pub fn status(&self, property: &str) -> Option<Status> {
        self.get(property).map(|p| p.status)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.properties.iter().filter(|p| p.status == Status::Fail)
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&serde_json::to_vec(self).expect("verdicts serialize"))
    }
}

/// The trace cannot be judged at all.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckError {
    #[error("event {seq}: {reason}")]
    Malformed { seq: u64, reason: String },
    #[error("roles: {0}")]
    BadRoles(String),
}

/// Dispatches on the protocol named in `roles`.
pub fn check(trace: &Trace, roles: &Roles) -> Result<Verdict, CheckError> {
    match roles.protocol {
        ProtocolKind::Rbcast => check_rbcast(trace, roles),
        ProtocolKind::Wts | ProtocolKind::Sbs => check_la(trace, roles),
        ProtocolKind::Gwts => check_gla(trace, roles),
        ProtocolKind::Rsm => check_rsm(trace, roles),
    }
}

fn validate(trace: &Trace, roles: &Roles) -> Result<(), CheckError> {
    if roles.n < 3 * roles.f + 1 {
        return Err(CheckError::BadRoles(format!("n = {} < 3f + 1", roles.n)));
    }
    if let Some(b) = roles.byzantine.iter().find(|b| b.0 as usize >= roles.n) {
        return Err(CheckError::BadRoles(format!("Byzantine node {b} is not a process")));
    }
    let participants = roles.n as u64 + roles.clients.len() as u64;
    let mut last: Option<u64> = None;
    for (i, e) in trace.iter().enumerate() {
        if last.is_some_and(|l| e.seq <= l) {
            return Err(CheckError::Malformed {
                seq: e.seq,
                reason: "sequence numbers must increase".into(),
            });
        }
        last = Some(e.seq);
        if e.node.0 >= participants {
            return Err(CheckError::Malformed {
                seq: e.seq,
                reason: format!("unknown node {}", e.node),
            });
        }
        if matches!(e.event, Event::RunEnd { .. }) && i + 1 != trace.len() {
            return Err(CheckError::Malformed {
                seq: e.seq,
                reason: "run-end must be the last event".into(),
            });
        }
    }
    Ok(())
}

/// Whether the run ended on its own. `None` when the trace has no end marker.
fn run_end(trace: &Trace) -> Option<(u64, bool)> {
    match trace.events.last() {
        Some(TraceEvent {
            seq,
            event: Event::RunEnd { quiescent, .. },
            ..
        }) => Some((*seq, *quiescent)),
        _ => None,
    }
}

/// Status for an unmet eventual obligation.
fn unmet(trace: &Trace) -> (Status, Vec<u64>) {
    match run_end(trace) {
        Some((seq, true)) => (Status::Fail, vec![seq]),
        Some((seq, false)) => (Status::Inconclusive, vec![seq]),
        None => (Status::Inconclusive, Vec::new()),
    }
}

fn decides<'a>(trace: &'a Trace, roles: &'a Roles) -> BTreeMap<NodeId, Vec<(&'a TraceEvent, &'a LatticeValue)>> {
    let mut out: BTreeMap<NodeId, Vec<_>> = BTreeMap::new();
    for e in trace {
        if let Event::Decide { value, .. } = &e.event {
            if roles.is_correct(e.node) {
                out.entry(e.node).or_default().push((e, value));
            }
        }
    }
    out
}

/// Pairwise comparability over `(seq, value)` pairs, checked by sorting on size.
fn chain(values: &[(u64, &LatticeValue)]) -> Result<(), (u64, u64)> {
    let mut sorted: Vec<_> = values.to_vec();
    sorted.sort_by_key(|(seq, v)| (v.len(), *seq));
    for w in sorted.windows(2) {
        if !w[0].1.leq(w[1].1) {
            return Err((w[0].0, w[1].0));
        }
    }
    Ok(())
}

fn comparability(trace: &Trace, roles: &Roles) -> PropertyResult {
    let all: Vec<(u64, &LatticeValue)> = decides(trace, roles)
        .values()
        .flatten()
        .map(|(e, v)| (e.seq, *v))
        .collect();
    match chain(&all) {
        Ok(()) => PropertyResult::pass("comparability"),
        Err((a, b)) => PropertyResult::fail("comparability", vec![a, b], "incomparable decisions"),
    }
}

/// Single-shot lattice agreement (WTS and SbS).
pub fn check_la(trace: &Trace, roles: &Roles) -> Result<Verdict, CheckError> {
    validate(trace, roles)?;
    let f = roles.f as u64;
    let sbs = roles.protocol == ProtocolKind::Sbs;
    let dec = decides(trace, roles);
    let mut props = Vec::new();

    // liveness
    let missing: Vec<NodeId> = roles.correct().filter(|p| !dec.contains_key(p)).collect();
    props.push(if missing.is_empty() {
        PropertyResult::pass("liveness")
    } else {
        let (status, w) = unmet(trace);
        PropertyResult::with("liveness", status, w, format!("no decision at {missing:?}"))
    });

    // stability: at most one decision each
    let repeated: Vec<u64> = dec
        .values()
        .filter(|d| d.len() > 1)
        .flat_map(|d| d.iter().map(|(e, _)| e.seq))
        .collect();
    props.push(if repeated.is_empty() {
        PropertyResult::pass("stability")
    } else {
        PropertyResult::fail("stability", repeated, "a process decided more than once")
    });

    props.push(comparability(trace, roles));

    // inclusivity: own proposal in own decision
    let mut proposals: BTreeMap<NodeId, (u64, &Item)> = BTreeMap::new();
    for e in trace {
        if let Event::Propose { value } = &e.event {
            if roles.is_correct(e.node) {
                proposals.entry(e.node).or_insert((e.seq, value));
            }
        }
    }
    let mut bad = Vec::new();
    for (node, ds) in &dec {
        for (e, v) in ds {
            match proposals.get(node) {
                Some((p, item)) if !v.contains(item) => bad.extend([*p, e.seq]),
                None => bad.push(e.seq),
                _ => {}
            }
        }
    }
    props.push(if bad.is_empty() {
        PropertyResult::pass("inclusivity")
    } else {
        PropertyResult::fail("inclusivity", bad, "a decision misses its own proposal")
    });

    // non-triviality: decision ⊆ X ∪ B
    let correct_inputs: BTreeSet<&Item> = proposals.values().map(|(_, i)| *i).collect();
    let adm = roles.admissibility.build();
    let mut byz_items: BTreeMap<&Item, u64> = BTreeMap::new();
    let mut bad = Vec::new();
    for ds in dec.values() {
        for (e, v) in ds {
            for item in v.iter() {
                if correct_inputs.contains(item) {
                    continue;
                }
                if roles.byzantine.contains(&item.origin) && adm.admits(item) {
                    byz_items.entry(item).or_insert(e.seq);
                } else {
                    bad.push(e.seq);
                }
            }
        }
    }
    props.push(if !bad.is_empty() {
        PropertyResult::fail("non-triviality", bad, "decided an item that is neither a correct input nor an admissible Byzantine value")
    } else if byz_items.len() as u64 > f {
        PropertyResult::fail(
            "non-triviality",
            byz_items.values().copied().collect(),
            format!("{} Byzantine items decided, f = {f}", byz_items.len()),
        )
    } else {
        PropertyResult::pass("non-triviality")
    });

    // decision depth under lockstep
    let bound = if sbs { 5 + 4 * f } else { 2 * f + 5 };
    let max_depth = dec.values().flatten().map(|(e, _)| e.depth).max().unwrap_or(0);
    props.push(if !roles.lockstep {
        PropertyResult::with("delay-bound", Status::Skipped, Vec::new(), "not a lockstep run")
    } else {
        let late: Vec<u64> = dec
            .values()
            .flatten()
            .filter(|(e, _)| e.depth > bound)
            .map(|(e, _)| e.seq)
            .collect();
        if late.is_empty() {
            PropertyResult::pass("delay-bound").note(format!("max depth {max_depth} <= {bound}"))
        } else {
            PropertyResult::fail("delay-bound", late, format!("decided deeper than {bound}"))
        }
    });

    // refinement count
    let limit = if sbs { 2 * f } else { f };
    let mut refinements: BTreeMap<NodeId, Vec<u64>> = BTreeMap::new();
    for e in trace {
        if matches!(e.event, Event::Refinement { .. }) && roles.is_correct(e.node) {
            refinements.entry(e.node).or_default().push(e.seq);
        }
    }
    let over: Vec<u64> = refinements
        .values()
        .filter(|r| r.len() as u64 > limit)
        .flat_map(|r| r.iter().copied())
        .collect();
    let most = refinements.values().map(Vec::len).max().unwrap_or(0);
    props.push(if over.is_empty() {
        PropertyResult::pass("refinement-bound").note(format!("max {most} <= {limit}"))
    } else {
        PropertyResult::fail("refinement-bound", over, format!("more than {limit} refinements"))
    });

    if sbs {
        props.push(signer_uniqueness(trace, roles));
        props.push(sbs_send_budget(trace, roles));
    }

    Ok(Verdict {
        protocol: roles.protocol,
        properties: props,
    })
}

/// Values that went on the wire with a valid safety proof, at most one per
/// signer.
fn signer_uniqueness(trace: &Trace, roles: &Roles) -> PropertyResult {
    let scheme = roles.signature.build(roles.n);
    let ctx = SbsContext {
        params: roles.params(),
        verifier: Verifier::new(scheme),
        admissible: roles.admissibility.build(),
    };
    let mut proven: BTreeMap<NodeId, BTreeMap<&Item, u64>> = BTreeMap::new();
    let mut checked = 0;
    for e in trace {
        if let Event::SbsProof { value, proof } = &e.event {
            checked += 1;
            if ctx.proof_valid(value, proof) {
                proven.entry(value.sender).or_default().entry(&value.value).or_insert(e.seq);
            }
        }
    }
    let dup: Vec<u64> = proven
        .values()
        .filter(|vals| vals.len() > 1)
        .flat_map(|vals| vals.values().copied())
        .collect();
    if dup.is_empty() {
        PropertyResult::pass("signer-uniqueness").note(format!("{checked} proofs scanned"))
    } else {
        PropertyResult::fail("signer-uniqueness", dup, "two values of one signer carry valid proofs")
    }
}

/// Every correct proposer sends at most `(3 + 2f) n` requests.
fn sbs_send_budget(trace: &Trace, roles: &Roles) -> PropertyResult {
    let limit = ((3 + 2 * roles.f) * roles.n) as u64;
    let mut sent: BTreeMap<NodeId, Vec<u64>> = BTreeMap::new();
    for e in trace {
        if let Event::Send { msg, .. } = &e.event {
            if msg.kind.is_proposer_request() && roles.is_correct(e.node) {
                sent.entry(e.node).or_default().push(e.seq);
            }
        }
    }
    let most = sent.values().map(Vec::len).max().unwrap_or(0);
    match sent.values().find(|s| s.len() as u64 > limit) {
        None => PropertyResult::pass("send-budget").note(format!("max {most} <= {limit}")),
        Some(s) => PropertyResult::fail("send-budget", s.clone(), format!("{} sends > {limit}", s.len())),
    }
}

/// Reliable broadcast on its own.
pub fn check_rbcast(trace: &Trace, roles: &Roles) -> Result<Verdict, CheckError> {
    validate(trace, roles)?;
    let mut props = Vec::new();
    let mut delivered: BTreeMap<BroadcastTag, BTreeMap<NodeId, Vec<(u64, Digest)>>> = BTreeMap::new();
    let mut sends: BTreeMap<BroadcastTag, u64> = BTreeMap::new();
    for e in trace {
        match &e.event {
            Event::RbDeliver { tag, payload } if roles.is_correct(e.node) => {
                delivered.entry(*tag).or_default().entry(e.node).or_default().push((e.seq, *payload));
            }
            Event::Send { msg, .. } => {
                if let Some(tag) = msg.tag {
                    *sends.entry(tag).or_default() += 1;
                }
            }
            _ => {}
        }
    }

    let mut bad = Vec::new();
    for per_node in delivered.values() {
        let digests: BTreeSet<Digest> = per_node.values().flatten().map(|(_, d)| *d).collect();
        if digests.len() > 1 {
            bad.extend(per_node.values().flatten().map(|(s, _)| *s));
        }
    }
    props.push(if bad.is_empty() {
        PropertyResult::pass("agreement")
    } else {
        PropertyResult::fail("agreement", bad, "correct processes delivered different payloads for one tag")
    });

    let bad: Vec<u64> = delivered
        .values()
        .flat_map(|m| m.values())
        .filter(|d| d.len() > 1)
        .flat_map(|d| d.iter().map(|(s, _)| *s))
        .collect();
    props.push(if bad.is_empty() {
        PropertyResult::pass("integrity")
    } else {
        PropertyResult::fail("integrity", bad, "delivered twice for one tag")
    });

    // totality, and validity for correct senders
    let correct: Vec<NodeId> = roles.correct().collect();
    let mut lacking = Vec::new();
    for sender in &correct {
        let tag = BroadcastTag::disclosure(*sender, 0);
        let got = delivered.get(&tag).map_or(0, |m| m.len());
        if got < correct.len() {
            lacking.push(tag);
        }
    }
    for (tag, m) in &delivered {
        if m.len() < correct.len() && !lacking.contains(tag) {
            lacking.push(*tag);
        }
    }
    props.push(if lacking.is_empty() {
        PropertyResult::pass("totality")
    } else {
        let (status, w) = unmet(trace);
        PropertyResult::with("totality", status, w, format!("{} tags not delivered everywhere", lacking.len()))
    });

    let n = roles.n as u64;
    let limit = n + 2 * n * n;
    let most = sends.values().copied().max().unwrap_or(0);
    let over: Vec<BroadcastTag> = sends.iter().filter(|(_, c)| **c > limit).map(|(t, _)| *t).collect();
    props.push(if over.is_empty() {
        PropertyResult::pass("message-count").note(format!("max {most} <= {limit}"))
    } else {
        let w = trace
            .iter()
            .filter(|e| matches!(&e.event, Event::Send { msg, .. } if msg.tag.is_some_and(|t| over.contains(&t))))
            .map(|e| e.seq)
            .collect();
        PropertyResult::fail("message-count", w, format!("an instance used more than {limit} messages"))
    });

    Ok(Verdict {
        protocol: roles.protocol,
        properties: props,
    })
}

/// Envelopes sent by correct processes on behalf of each correct proposer's
/// round: its ack requests, the nacks it receives, every frame of its
/// disclosure broadcast, and every frame of acknowledgement broadcasts
/// addressed to it. Broadcast instances opened by Byzantine processes are
/// not charged to anyone.
pub fn gwts_costs(trace: &Trace, roles: &Roles) -> BTreeMap<(NodeId, u64), u64> {
    let mut cost: BTreeMap<(NodeId, u64), u64> = BTreeMap::new();
    for e in trace {
        let Event::Send { dst, msg } = &e.event else {
            continue;
        };
        if !roles.is_correct(e.node) {
            continue;
        }
        let key = match msg.kind {
            MsgKind::GwtsAckReq => msg.round.map(|r| (e.node, r)),
            MsgKind::GwtsNack => msg.round.map(|r| (*dst, r)),
            MsgKind::RbInit | MsgKind::RbEcho | MsgKind::RbReady => msg.tag.and_then(|t| {
                if !roles.is_correct(t.sender) {
                    return None;
                }
                match t.instance {
                    Instance::Disclosure { round } => Some((t.sender, round)),
                    Instance::Ack { round, destination, .. } => Some((destination, round)),
                }
            }),
            _ => None,
        };
        if let Some(key) = key.filter(|(p, _)| roles.is_correct(*p)) {
            *cost.entry(key).or_default() += 1;
        }
    }
    cost
}

/// The per-decision message allowance `c · max(f, 1) · n²`.
pub fn gwts_budget(roles: &Roles) -> f64 {
    roles.budget_c * roles.f.max(1) as f64 * (roles.n * roles.n) as f64
}

fn gla_safety(trace: &Trace, roles: &Roles, props: &mut Vec<PropertyResult>) {
    let dec = decides(trace, roles);

    // local stability: each process's decisions only grow
    let mut bad = Vec::new();
    for ds in dec.values() {
        for w in ds.windows(2) {
            if !w[0].1.leq(w[1].1) {
                bad.extend([w[0].0.seq, w[1].0.seq]);
            }
        }
    }
    props.push(if bad.is_empty() {
        PropertyResult::pass("local-stability")
    } else {
        PropertyResult::fail("local-stability", bad, "a later decision lost items")
    });

    props.push(comparability(trace, roles));

    // acceptors only process requests of trusted rounds
    let bad: Vec<u64> = trace
        .iter()
        .filter(|e| roles.is_correct(e.node))
        .filter(|e| matches!(e.event, Event::AckReqProcessed { round, safe_r, .. } if round > safe_r))
        .map(|e| e.seq)
        .collect();
    // and only trust a round once the previous one ended with a quorum
    let q = roles.params().quorum();
    let mut acks: BTreeMap<(u64, u64, NodeId, Digest), BTreeSet<NodeId>> = BTreeMap::new();
    let mut legit = BTreeSet::new();
    let mut early = Vec::new();
    for e in trace {
        match &e.event {
            Event::RbDeliver { tag, payload } if roles.is_correct(e.node) => {
                if let Instance::Ack { round, ts, destination } = tag.instance {
                    let s = acks.entry((round, ts, destination, *payload)).or_default();
                    s.insert(tag.sender);
                    if s.len() >= q {
                        legit.insert(round);
                    }
                }
            }
            Event::SafeRAdvance { safe_r } if roles.is_correct(e.node)
                && *safe_r > 0 && !legit.contains(&(safe_r - 1)) => {
                    early.push(e.seq);
                }
            _ => {}
        }
    }
    props.push(if !bad.is_empty() {
        PropertyResult::fail("safe-r-gating", bad, "an acceptor processed a request beyond Safe_r")
    } else if !early.is_empty() {
        PropertyResult::fail("safe-r-gating", early, "Safe_r advanced past a round without a committed proposal")
    } else {
        PropertyResult::pass("safe-r-gating")
    });

    // provenance of decided items
    let mut disclosed: BTreeSet<&Item> = BTreeSet::new();
    let mut per_sender_round: BTreeMap<(NodeId, u64), BTreeMap<&LatticeValue, u64>> = BTreeMap::new();
    for e in trace {
        if let Event::DisclosureDelivered {
            from,
            round,
            value,
            admitted,
        } = &e.event
        {
            if !roles.is_correct(e.node) {
                continue;
            }
            per_sender_round
                .entry((*from, round.unwrap_or(0)))
                .or_default()
                .entry(value)
                .or_insert(e.seq);
            if *admitted {
                disclosed.extend(value.iter());
            }
        }
    }
    let mut bad = Vec::new();
    for ds in dec.values() {
        for (e, v) in ds {
            if v.iter().any(|i| !disclosed.contains(i)) {
                bad.push(e.seq);
            }
        }
    }
    let split: Vec<u64> = per_sender_round
        .values()
        .filter(|vals| vals.len() > 1)
        .flat_map(|vals| vals.values().copied())
        .collect();
    let mut byz_rounds: BTreeMap<u64, BTreeSet<NodeId>> = BTreeMap::new();
    for (sender, round) in per_sender_round.keys() {
        if roles.byzantine.contains(sender) {
            byz_rounds.entry(*round).or_default().insert(*sender);
        }
    }
    props.push(if !bad.is_empty() {
        PropertyResult::fail("non-triviality", bad, "decided an item no correct process delivered in a disclosure")
    } else if !split.is_empty() {
        PropertyResult::fail("non-triviality", split, "one disclosure delivered with different contents")
    } else if byz_rounds.values().any(|s| s.len() > roles.f) {
        PropertyResult::fail("non-triviality", Vec::new(), "more than f Byzantine disclosures in a round")
    } else {
        PropertyResult::pass("non-triviality")
    });
}

/// Generalized lattice agreement (GWTS).
pub fn check_gla(trace: &Trace, roles: &Roles) -> Result<Verdict, CheckError> {
    validate(trace, roles)?;
    let mut props = Vec::new();
    let dec = decides(trace, roles);

    let short: Vec<NodeId> = roles
        .correct()
        .filter(|p| (dec.get(p).map_or(0, Vec::len) as u64) < roles.rounds)
        .collect();
    props.push(if short.is_empty() {
        PropertyResult::pass("liveness")
    } else {
        let (status, w) = unmet(trace);
        PropertyResult::with(
            "liveness",
            status,
            w,
            format!("fewer than {} decisions at {short:?}", roles.rounds),
        )
    });

    gla_safety(trace, roles, &mut props);

    // inclusivity: every submitted value ends up decided by its submitter
    let mut missing = Vec::new();
    for e in trace {
        if let Event::Submit { item } = &e.event {
            if !roles.is_correct(e.node) {
                continue;
            }
            let last = dec.get(&e.node).and_then(|d| d.last()).map(|(_, v)| *v);
            if !last.is_some_and(|v| v.contains(item)) {
                missing.push(e.seq);
            }
        }
    }
    props.push(if missing.is_empty() {
        PropertyResult::pass("inclusivity")
    } else {
        let (status, mut w) = unmet(trace);
        w.extend(missing);
        PropertyResult::with("inclusivity", status, w, "submitted values never decided by their submitter")
    });

    let budget = gwts_budget(roles);
    let costs = gwts_costs(trace, roles);
    let worst = costs.iter().max_by_key(|(_, c)| **c);
    props.push(match worst {
        Some(((p, r), c)) if *c as f64 > budget => {
            let w = trace
                .iter()
                .filter(|e| matches!(&e.event, Event::Decide { round: Some(dr), .. } if e.node == *p && dr == r))
                .map(|e| e.seq)
                .collect();
            PropertyResult::fail(
                "message-budget",
                w,
                format!("{p:?} round {r}: {c} messages > {budget}"),
            )
        }
        Some((_, c)) => PropertyResult::pass("message-budget").note(format!("max {c} <= {budget}")),
        None => PropertyResult::pass("message-budget"),
    });

    Ok(Verdict {
        protocol: roles.protocol,
        properties: props,
    })
}

struct Op<'a> {
    client: NodeId,
    start: u64,
    complete: Option<u64>,
    /// The command for updates, the no-op for reads.
    item: &'a Item,
    result: Option<(&'a LatticeValue, &'a LatticeValue)>,
}

/// The replicated state machine, judged from correct clients' operations.
pub fn check_rsm(trace: &Trace, roles: &Roles) -> Result<Verdict, CheckError> {
    validate(trace, roles)?;
    let correct_clients: BTreeSet<NodeId> = roles.correct_clients().collect();
    let mut updates: Vec<Op> = Vec::new();
    let mut reads: Vec<Op> = Vec::new();
    for e in trace {
        if !correct_clients.contains(&e.node) {
            continue;
        }
        let find = |ops: &mut Vec<Op>, item: &Item| {
            ops.iter_mut()
                .rposition(|o| o.client == e.node && o.item == item && o.complete.is_none())
        };
        match &e.event {
            Event::UpdateStart { cmd } => updates.push(Op {
                client: e.node,
                start: e.seq,
                complete: None,
                item: cmd,
                result: None,
            }),
            Event::ReadStart { nop } => reads.push(Op {
                client: e.node,
                start: e.seq,
                complete: None,
                item: nop,
                result: None,
            }),
            Event::UpdateComplete { cmd } => match find(&mut updates, cmd) {
                Some(i) => updates[i].complete = Some(e.seq),
                None => {
                    return Err(CheckError::Malformed {
                        seq: e.seq,
                        reason: "update completes without starting".into(),
                    })
                }
            },
            Event::ReadComplete { nop, confirmed, result } => match find(&mut reads, nop) {
                Some(i) => {
                    reads[i].complete = Some(e.seq);
                    reads[i].result = Some((confirmed, result));
                }
                None => {
                    return Err(CheckError::Malformed {
                        seq: e.seq,
                        reason: "read completes without starting".into(),
                    })
                }
            },
            _ => {}
        }
    }
    let done_reads: Vec<(&Op, &LatticeValue, &LatticeValue, u64)> = reads
        .iter()
        .filter_map(|r| r.result.map(|(c, v)| (r, c, v, r.complete.expect("result implies completion"))))
        .collect();

    let mut props = Vec::new();

    let open: Vec<u64> = updates
        .iter()
        .chain(&reads)
        .filter(|o| o.complete.is_none())
        .map(|o| o.start)
        .collect();
    props.push(if open.is_empty() {
        PropertyResult::pass("liveness")
    } else {
        let (status, mut w) = unmet(trace);
        w.extend(open);
        PropertyResult::with("liveness", status, w, "operations never completed")
    });

    // read validity: the confirmed set was committed and the result is its state
    let q = roles.params().quorum();
    let mut committed: BTreeSet<Digest> = BTreeSet::new();
    for (_, v) in decides(trace, roles).values().flatten() {
        committed.insert(Digest::of(&v.encode()));
    }
    let mut acks: BTreeMap<(u64, u64, NodeId, Digest), BTreeSet<NodeId>> = BTreeMap::new();
    for e in trace {
        if let Event::AckRbcast {
            round,
            ts,
            destination,
            accepted,
        } = &e.event
        {
            if roles.is_correct(e.node) {
                let s = acks.entry((*round, *ts, *destination, *accepted)).or_default();
                s.insert(e.node);
                // a quorum with at most f Byzantine members among it
                if s.len() + roles.f >= q {
                    committed.insert(*accepted);
                }
            }
        }
    }
    let bad: Vec<u64> = done_reads
        .iter()
        .filter(|(_, c, v, _)| !committed.contains(&Digest::of(&c.encode())) || execute(c) != **v)
        .map(|(_, _, _, s)| *s)
        .collect();
    props.push(if bad.is_empty() {
        PropertyResult::pass("read-validity")
    } else {
        PropertyResult::fail("read-validity", bad, "a read returned a state no quorum committed")
    });

    // read consistency
    let pairs: Vec<(u64, &LatticeValue)> = done_reads.iter().map(|(_, _, v, s)| (*s, *v)).collect();
    props.push(match chain(&pairs) {
        Ok(()) => PropertyResult::pass("read-consistency"),
        Err((a, b)) => PropertyResult::fail("read-consistency", vec![a, b], "incomparable read results"),
    });

    // read monotonicity
    let mut bad = Vec::new();
    for (r1, _, v1, c1) in &done_reads {
        for (r2, _, v2, c2) in &done_reads {
            if *c1 < r2.start && !v1.leq(v2) {
                bad.extend([r1.start, *c1, r2.start, *c2]);
            }
        }
    }
    props.push(if bad.is_empty() {
        PropertyResult::pass("read-monotonicity")
    } else {
        PropertyResult::fail("read-monotonicity", bad, "a later read lost items")
    });

    // update stability
    let mut bad = Vec::new();
    for u1 in &updates {
        let Some(c1) = u1.complete else { continue };
        for u2 in updates.iter().filter(|u2| c1 < u2.start) {
            for (_, _, v, s) in &done_reads {
                if v.contains(u2.item) && !v.contains(u1.item) {
                    bad.extend([c1, u2.start, *s]);
                }
            }
        }
    }
    props.push(if bad.is_empty() {
        PropertyResult::pass("update-stability")
    } else {
        PropertyResult::fail("update-stability", bad, "a read saw a later update but not an earlier one")
    });

    // update visibility
    let mut bad = Vec::new();
    for u in &updates {
        let Some(c) = u.complete else { continue };
        for (r, _, v, s) in &done_reads {
            if c < r.start && !v.contains(u.item) {
                bad.extend([c, r.start, *s]);
            }
        }
    }
    props.push(if bad.is_empty() {
        PropertyResult::pass("update-visibility")
    } else {
        PropertyResult::fail("update-visibility", bad, "a read missed a completed update")
    });

    gla_safety(trace, roles, &mut props);
    // the replica-level properties get their own names
    let n = props.len();
    for p in &mut props[n - 4..] {
        p.property = format!("replica-{}", p.property);
    }

    Ok(Verdict {
        protocol: roles.protocol,
        properties: props,
    })
}
