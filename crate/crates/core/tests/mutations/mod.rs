//! Hand-made property violations. Each case takes a trace from a healthy run,
//! breaks exactly one property, and records whether the checker notices.

use std::collections::BTreeSet;
use std::sync::Arc;

use latag_core::adversary::Strategy;
use latag_core::checker::{check, Status};
use latag_core::config::{ClientSpec, Policy, ProtocolKind, Roles, ScenarioConfig};
use latag_core::rbcast::BroadcastTag;
use latag_core::rsm::{command, ClientOp};
use latag_core::sbs::{SafeAck, SafetyProof, SignedValue, Signer};
use latag_core::trace::{Event, Trace, TraceEvent};
use latag_core::wire::{Digest, MsgInfo, MsgKind};
use latag_core::{run, Item, LatticeValue, NodeId};

pub struct Case {
    pub protocol: &'static str,
    pub property: &'static str,
    pub detected: bool,
}

fn base(cfg: &ScenarioConfig) -> (Trace, Roles) {
    let out = run(cfg).expect("valid config");
    let v = check(&out.trace, &out.roles).expect("well-formed trace");
    assert!(v.passed(), "base run must be healthy: {:?}", v.failures().collect::<Vec<_>>());
    (out.trace, out.roles)
}

/// Puts `events` just before the run-end record and renumbers.
fn insert(t: &mut Trace, events: Vec<(NodeId, u64, Event)>) {
    let end = t.events.pop();
    for (node, depth, event) in events {
        t.push(node, depth, None, event);
    }
    if let Some(e) = end {
        t.events.push(e);
    }
    renumber(t);
}

fn renumber(t: &mut Trace) {
    for (i, e) in t.events.iter_mut().enumerate() {
        e.seq = i as u64;
    }
}

fn remove_first(t: &mut Trace, pred: impl Fn(&TraceEvent) -> bool) {
    let i = t.events.iter().position(pred).expect("event to remove");
    t.events.remove(i);
    renumber(t);
}

fn decide_positions(t: &Trace, node: NodeId) -> Vec<usize> {
    t.events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.node == node && matches!(e.event, Event::Decide { .. }))
        .map(|(i, _)| i)
        .collect()
}

fn set_decision(t: &mut Trace, at: usize, value: LatticeValue) {
    if let Event::Decide { value: v, .. } = &mut t.events[at].event {
        *v = value;
    }
}

fn decision(t: &Trace, at: usize) -> LatticeValue {
    match &t.events[at].event {
        Event::Decide { value, .. } => value.clone(),
        _ => unreachable!(),
    }
}

fn send(kind: MsgKind, dst: NodeId, tag: Option<BroadcastTag>, round: Option<u64>) -> Event {
    Event::Send {
        dst,
        msg: MsgInfo {
            kind,
            size: 0,
            tag,
            round,
            ts: Some(0),
        },
    }
}

struct Suite {
    cases: Vec<Case>,
}

impl Suite {
    fn case(&mut self, protocol: &'static str, property: &'static str, trace: &Trace, roles: &Roles, mutate: impl FnOnce(&mut Trace)) {
        let mut t = trace.clone();
        mutate(&mut t);
        let detected = match check(&t, roles) {
            Ok(v) => v.get(property).is_some_and(|p| p.status == Status::Fail && !p.witness.is_empty()),
            Err(_) => false,
        };
        self.cases.push(Case {
            protocol,
            property,
            detected,
        });
    }
}

fn la_cases(s: &mut Suite, name: &'static str, trace: &Trace, roles: &Roles) {
    let f = roles.f as u64;
    let sbs = roles.protocol == ProtocolKind::Sbs;
    let p0 = NodeId(0);
    let input = |node: NodeId| {
        trace
            .iter()
            .find_map(|e| match &e.event {
                Event::Propose { value } if e.node == node => Some(value.clone()),
                _ => None,
            })
            .expect("correct nodes propose")
    };

    s.case(name, "liveness", trace, roles, |t| {
        remove_first(t, |e| matches!(e.event, Event::Decide { .. }))
    });
    s.case(name, "stability", trace, roles, |t| {
        let d = decision(t, decide_positions(t, p0)[0]);
        insert(t, vec![(p0, 9, Event::Decide { round: None, value: d })]);
    });
    s.case(name, "comparability", trace, roles, |t| {
        let a = decide_positions(t, NodeId(0))[0];
        let b = decide_positions(t, NodeId(1))[0];
        set_decision(t, a, LatticeValue::singleton(input(NodeId(0))));
        set_decision(t, b, LatticeValue::singleton(input(NodeId(1))));
    });
    s.case(name, "inclusivity", trace, roles, |t| {
        let at = decide_positions(t, p0)[0];
        let mut d = decision(t, at);
        d = d.difference(&LatticeValue::singleton(input(p0)));
        set_decision(t, at, d);
    });
    s.case(name, "non-triviality", trace, roles, |t| {
        let forged = Item::value(0u64, b"never proposed");
        for i in 0..t.events.len() {
            if let Event::Decide { value, .. } = &mut t.events[i].event {
                value.insert(forged.clone());
            }
        }
    });
    s.case(name, "delay-bound", trace, roles, |t| {
        let at = decide_positions(t, p0)[0];
        t.events[at].depth = if sbs { 6 + 4 * f } else { 2 * f + 6 };
    });
    s.case(name, "refinement-bound", trace, roles, |t| {
        let extra = if sbs { 2 * f + 1 } else { f + 1 };
        insert(
            t,
            (0..extra).map(|ts| (p0, 1, Event::Refinement { round: None, ts: 100 + ts })).collect(),
        );
    });
    if sbs {
        s.case(name, "signer-uniqueness", trace, roles, |t| {
            let scheme = roles.signature.build(roles.n);
            let byz = Signer::new(NodeId(roles.n as u64 - 1), scheme.clone());
            let mut events = Vec::new();
            for payload in ["first", "second"] {
                let sv = SignedValue::sign(&byz, Item::value(byz.id(), payload.as_bytes()));
                let acks = (0..roles.params().quorum() as u64)
                    .map(|a| {
                        let signer = Signer::new(NodeId(a), scheme.clone());
                        SafeAck::new(&signer, BTreeSet::from([sv.clone()]), BTreeSet::new())
                    })
                    .collect();
                let proof = Arc::new(SafetyProof { acks });
                events.push((byz.id(), 2, Event::SbsProof { value: sv, proof }));
            }
            insert(t, events);
        });
        s.case(name, "send-budget", trace, roles, |t| {
            let extra = (3 + 2 * roles.f) * roles.n + 1;
            insert(t, (0..extra).map(|_| (p0, 1, send(MsgKind::SbsAckReq, NodeId(1), None, None))).collect());
        });
    }
}

fn rbcast_cases(s: &mut Suite, trace: &Trace, roles: &Roles) {
    let first_delivery = |t: &Trace| {
        t.events
            .iter()
            .position(|e| matches!(e.event, Event::RbDeliver { .. }) && roles.is_correct(e.node))
            .unwrap()
    };
    s.case("rbcast", "agreement", trace, roles, |t| {
        let at = first_delivery(t);
        if let Event::RbDeliver { payload, .. } = &mut t.events[at].event {
            *payload = Digest::of(b"something else");
        }
    });
    s.case("rbcast", "integrity", trace, roles, |t| {
        let e = t.events[first_delivery(t)].clone();
        insert(t, vec![(e.node, e.depth, e.event)]);
    });
    s.case("rbcast", "totality", trace, roles, |t| {
        let at = first_delivery(t);
        t.events.remove(at);
        renumber(t);
    });
    s.case("rbcast", "message-count", trace, roles, |t| {
        let n = roles.n as u64;
        let tag = BroadcastTag::disclosure(NodeId(0), 0);
        insert(
            t,
            (0..n + 2 * n * n + 1).map(|_| (NodeId(0), 1, send(MsgKind::RbEcho, NodeId(1), Some(tag), None))).collect(),
        );
    });
}

/// Cases shared by GWTS and the replicas of an RSM run.
fn gla_cases(s: &mut Suite, name: &'static str, prefix: &'static str, trace: &Trace, roles: &Roles) {
    let p0 = NodeId(0);
    let prop = |p: &'static str| -> &'static str {
        if prefix.is_empty() {
            p
        } else {
            Box::leak(format!("{prefix}{p}").into_boxed_str())
        }
    };
    s.case(name, prop("local-stability"), trace, roles, |t| {
        let ds = decide_positions(t, p0);
        let i = (0..ds.len() - 1).find(|i| !decision(t, ds[*i]).is_empty()).unwrap();
        set_decision(t, ds[i + 1], LatticeValue::new());
    });
    s.case(name, prop("comparability"), trace, roles, |t| {
        let at = *decide_positions(t, p0).last().unwrap();
        set_decision(t, at, LatticeValue::singleton(Item::value(0u64, b"alone")));
    });
    s.case(name, prop("safe-r-gating"), trace, roles, |t| {
        let at = t
            .events
            .iter()
            .position(|e| matches!(e.event, Event::AckReqProcessed { .. }) && roles.is_correct(e.node))
            .unwrap();
        if let Event::AckReqProcessed { round, safe_r, .. } = &mut t.events[at].event {
            *round = *safe_r + 1;
        }
    });
    s.case(name, prop("non-triviality"), trace, roles, |t| {
        let forged = Item::value(0u64, b"never disclosed");
        for node in roles.correct() {
            if let Some(at) = decide_positions(t, node).last() {
                let mut d = decision(t, *at);
                d.insert(forged.clone());
                set_decision(t, *at, d);
            }
        }
    });
}

fn gwts_cases(s: &mut Suite, trace: &Trace, roles: &Roles) {
    let p0 = NodeId(0);
    s.case("gwts", "liveness", trace, roles, |t| {
        // keep only the first decision
        for at in decide_positions(t, p0).into_iter().skip(1).rev() {
            t.events.remove(at);
        }
        renumber(t);
    });
    s.case("gwts", "inclusivity", trace, roles, |t| {
        insert(t, vec![(p0, 1, Event::Submit { item: Item::value(0u64, b"lost") })]);
    });
    s.case("gwts", "message-budget", trace, roles, |t| {
        let budget = latag_core::checker::gwts_budget(roles) as u64;
        insert(
            t,
            (0..budget + 1).map(|_| (p0, 1, send(MsgKind::GwtsAckReq, NodeId(1), None, Some(0)))).collect(),
        );
    });
    gla_cases(s, "gwts", "", trace, roles);
}

fn rsm_cases(s: &mut Suite, trace: &Trace, roles: &Roles) {
    let client = NodeId(roles.n as u64);
    let reads: Vec<usize> = trace
        .events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.node == client && matches!(e.event, Event::ReadComplete { .. }))
        .map(|(i, _)| i)
        .collect();
    // the client runs: update x, update y, read, read
    let x = command(client, 0, b"x");
    let y = command(client, 1, b"y");
    let set_result = |t: &mut Trace, at: usize, f: &dyn Fn(&mut LatticeValue)| {
        if let Event::ReadComplete { result, .. } = &mut t.events[at].event {
            f(result);
        }
    };

    s.case("rsm", "liveness", trace, roles, |t| {
        remove_first(t, |e| matches!(e.event, Event::UpdateComplete { .. }))
    });
    s.case("rsm", "read-validity", trace, roles, |t| {
        set_result(t, reads[0], &|r| {
            r.insert(command(client, 99, b"junk"));
        });
    });
    s.case("rsm", "read-consistency", trace, roles, |t| {
        set_result(t, reads[0], &|r| *r = LatticeValue::singleton(command(client, 90, b"p")));
        set_result(t, reads[1], &|r| *r = LatticeValue::singleton(command(client, 91, b"q")));
    });
    s.case("rsm", "read-monotonicity", trace, roles, |t| {
        set_result(t, reads[1], &|r| *r = LatticeValue::new());
    });
    s.case("rsm", "update-stability", trace, roles, |t| {
        let x = x.clone();
        set_result(t, reads[0], &move |r| *r = r.difference(&LatticeValue::singleton(x.clone())));
    });
    s.case("rsm", "update-visibility", trace, roles, |t| {
        let y = y.clone();
        set_result(t, reads[0], &move |r| *r = r.difference(&LatticeValue::singleton(y.clone())));
    });
    gla_cases(s, "rsm", "replica-", trace, roles);
}

pub fn all() -> Vec<Case> {
    let mut s = Suite { cases: Vec::new() };

    let wts = ScenarioConfig::new(ProtocolKind::Wts, 4, 1)
        .with_byzantine(3, Strategy::Silent)
        .with_policy(Policy::Lockstep);
    let (t, r) = base(&wts);
    la_cases(&mut s, "wts", &t, &r);

    let sbs = ScenarioConfig::new(ProtocolKind::Sbs, 4, 1)
        .with_byzantine(3, Strategy::Silent)
        .with_policy(Policy::Lockstep);
    let (t, r) = base(&sbs);
    la_cases(&mut s, "sbs", &t, &r);

    let rb = ScenarioConfig::new(ProtocolKind::Rbcast, 4, 1).with_seed(3);
    let (t, r) = base(&rb);
    rbcast_cases(&mut s, &t, &r);

    let mut gwts = ScenarioConfig::new(ProtocolKind::Gwts, 4, 1).with_seed(5);
    gwts.rounds = 3;
    let (t, r) = base(&gwts);
    gwts_cases(&mut s, &t, &r);

    let mut rsm = ScenarioConfig::new(ProtocolKind::Rsm, 4, 1).with_seed(2);
    rsm.clients.push(ClientSpec {
        ops: vec![
            ClientOp::Update { payload: b"x".to_vec().into() },
            ClientOp::Update { payload: b"y".to_vec().into() },
            ClientOp::Read,
            ClientOp::Read,
        ],
        byzantine: false,
    });
    let (t, r) = base(&rsm);
    rsm_cases(&mut s, &t, &r);

    s.cases
}
