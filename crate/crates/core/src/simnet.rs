//! Deterministic discrete-event simulator.
//!
//! Every process is a [`Node`]; the simulator owns all of them, keeps the set
//! of in-flight envelopes, and repeatedly hands one to its destination. Which
//! one is up to the scheduler policy. Everything observable is appended to a
//! [`Trace`].
//!
//! Time is causal depth: a node's clock is the depth of the last event it
//! executed, a delivery happens at `max(clock, send depth + 1)`, and the
//! outputs of a handler carry the delivery's depth.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{Adversary, BadClient, Honest};
use crate::config::{ConfigError, Policy, ProtocolKind, Roles, ScenarioConfig};
use crate::gwts::{GwtsNode, GwtsOptions};
use crate::lattice::LatticeValue;
use crate::node::{Node, Outbox, Output};
use crate::rbcast::RbNode;
use crate::rsm::{Client, Replica};
use crate::sbs::signature::{Signer, Verifier};
use crate::sbs::{SafetyProof, SbsContext, SbsMessage, SbsNode, SignedValue};
use crate::trace::{Event, Trace};
use crate::wire::{Digest, MsgInfo, ProtocolMessage};
use crate::wts::WtsNode;
use crate::NodeId;

/// Rounds a GWTS process may run past the requested number before the
/// simulator gives up on reaching its target.
pub const EXTRA_ROUNDS: u64 = 20;

/// Highest round an RSM replica may start.
pub const RSM_ROUND_CAP: u64 = 400;

/// A message in flight.
#[derive(Clone, Debug)]
pub struct Envelope {
    pub seq: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub msg: Arc<ProtocolMessage>,
    pub digest: Digest,
    pub info: MsgInfo,
    pub send_depth: u64,
    /// Scheduler step at which it was sent.
    pub born: u64,
}

pub struct RunOutput {
    pub trace: Trace,
    pub roles: Roles,
    pub quiescent: bool,
    pub steps: u64,
}

/// Validates `config` and runs it to quiescence or until the delivery budget
/// runs out.
pub fn run(config: &ScenarioConfig) -> Result<RunOutput, ConfigError> {
    config.validate()?;
    let nodes = build_nodes(config);
    let mut sim = Simulator::new(config, nodes);
    sim.run();
    let quiescent = sim.pending.is_empty();
    let steps = sim.steps;
    let pending = sim.pending.len() as u64;
    let mut trace = sim.trace;
    trace.push(
        NodeId(0),
        sim.clock.iter().copied().max().unwrap_or(0),
        None,
        Event::RunEnd {
            quiescent,
            steps,
            pending,
        },
    );
    Ok(RunOutput {
        trace,
        roles: config.roles(),
        quiescent,
        steps,
    })
}

/// Instantiates every process and client of `config`, Byzantine ones
/// wrapped in their strategy.
pub fn build_nodes(config: &ScenarioConfig) -> Vec<Box<dyn Node>> {
    let params = config.params();
    let adm = config.admissibility.build();
    let scheme = config.signature.build(config.n);
    let mut nodes: Vec<Box<dyn Node>> = Vec::new();
    for id in params.processes() {
        let honest = match config.protocol {
            ProtocolKind::Rbcast => Honest::Rb(RbNode::new(id, params, config.input(id, 0).payload)),
            ProtocolKind::Wts => Honest::Wts(WtsNode::new(id, params, config.input(id, 0), adm.clone())),
            ProtocolKind::Gwts => Honest::Gwts(GwtsNode::new(
                id,
                params,
                GwtsOptions {
                    inputs: (0..config.rounds).map(|r| config.input(id, r)).collect(),
                    target_decisions: config.rounds,
                    round_cap: config.rounds - 1 + EXTRA_ROUNDS,
                    admissible: adm.clone(),
                },
            )),
            ProtocolKind::Sbs => {
                let ctx = SbsContext {
                    params,
                    verifier: Verifier::new(scheme.clone()),
                    admissible: adm.clone(),
                };
                Honest::Sbs(SbsNode::new(Signer::new(id, scheme.clone()), ctx, config.input(id, 0)))
            }
            ProtocolKind::Rsm => Honest::Replica(Replica::new(GwtsNode::new(
                id,
                params,
                GwtsOptions {
                    inputs: Vec::new(),
                    target_decisions: 0,
                    round_cap: RSM_ROUND_CAP,
                    admissible: adm.clone(),
                },
            ))),
        };
        nodes.push(match config.strategy_of(id) {
            Some(spec) => Box::new(Adversary::new(id, params, spec.strategy, honest)),
            None => match honest {
                Honest::Rb(n) => Box::new(n),
                Honest::Wts(n) => Box::new(n),
                Honest::Gwts(n) => Box::new(n),
                Honest::Sbs(n) => Box::new(n),
                Honest::Replica(n) => Box::new(n),
            },
        });
    }
    for (i, spec) in config.clients.iter().enumerate() {
        let id = NodeId((config.n + i) as u64);
        if spec.byzantine {
            nodes.push(Box::new(BadClient::new(id, params)));
        } else {
            nodes.push(Box::new(Client::new(id, params, spec.ops.clone())));
        }
    }
    nodes
}

/// Chooses the next envelope to deliver.
#[allow(clippy::large_enum_variant)] // one per simulator
enum Queue {
    /// Lowest send depth first, ties by sequence number.
    Lockstep(BinaryHeap<Reverse<(u64, u64)>>),
    Random {
        rng: ChaCha8Rng,
        live: Vec<u64>,
        pos: HashMap<u64, usize>,
        /// Pending sequence numbers in age order, for the fairness cap.
        by_age: BTreeSet<u64>,
    },
}

struct Simulator {
    nodes: Vec<Box<dyn Node>>,
    correct: Vec<bool>,
    round_based: bool,
    capped: bool,
    age_cap: u64,
    delayed_links: HashSet<(NodeId, NodeId)>,
    delay_until: u64,
    budget: u64,

    pending: HashMap<u64, Envelope>,
    queue: Queue,
    clock: Vec<u64>,
    steps: u64,
    trace: Trace,

    proof_digests: HashMap<usize, (Arc<SafetyProof>, Digest)>,
    proofs_seen: BTreeSet<(SignedValue, Digest)>,
}

impl Simulator {
    fn new(config: &ScenarioConfig, nodes: Vec<Box<dyn Node>>) -> Self {
        let roles = config.roles();
        let correct = nodes
            .iter()
            .map(|n| {
                let id = n.id();
                if (id.0 as usize) < config.n {
                    roles.is_correct(id)
                } else {
                    !roles.byzantine_clients.contains(&id)
                }
            })
            .collect();
        let queue = match config.scheduler.policy {
            Policy::Lockstep => Queue::Lockstep(BinaryHeap::new()),
            Policy::Random | Policy::AdversarialDelay => Queue::Random {
                rng: ChaCha8Rng::seed_from_u64(config.scheduler.seed),
                live: Vec::new(),
                pos: HashMap::new(),
                by_age: BTreeSet::new(),
            },
        };
        let (delayed_links, delay_until) = match (&config.scheduler.policy, &config.scheduler.script) {
            (Policy::AdversarialDelay, Some(s)) => (s.links.iter().copied().collect(), s.until_step),
            _ => (HashSet::new(), 0),
        };
        let len = nodes.len();
        Simulator {
            nodes,
            correct,
            round_based: config.protocol.is_round_based(),
            capped: false,
            age_cap: config.scheduler.age_cap.max(1),
            delayed_links,
            delay_until,
            budget: config.budget,
            pending: HashMap::new(),
            queue,
            clock: vec![0; len],
            steps: 0,
            trace: Trace::new(),
            proof_digests: HashMap::new(),
            proofs_seen: BTreeSet::new(),
        }
    }

    fn run(&mut self) {
        for i in 0..self.nodes.len() {
            let mut out = Outbox::new();
            self.nodes[i].start(&mut out);
            self.emit(i, out);
        }
        self.maybe_cap();
        while self.steps < self.budget {
            let Some(seq) = self.next() else {
                break;
            };
            let env = self.pending.remove(&seq).expect("queued envelopes are pending");
            self.steps += 1;
            self.deliver(env);
            self.maybe_cap();
        }
    }

    fn index(&self, id: NodeId) -> Option<usize> {
        let i = id.0 as usize;
        (i < self.nodes.len()).then_some(i)
    }

    fn deliver(&mut self, env: Envelope) {
        let Some(i) = self.index(env.dst) else {
            return;
        };
        let depth = self.clock[i].max(env.send_depth + 1);
        self.clock[i] = depth;
        self.trace.push(
            env.dst,
            depth,
            Some(env.digest),
            Event::Deliver {
                src: env.src,
                msg: env.info,
            },
        );
        let mut out = Outbox::new();
        self.nodes[i].handle(env.src, &env.msg, &mut out);
        self.emit(i, out);
    }

    /// Records a handler's outputs and enqueues its messages.
    fn emit(&mut self, i: usize, out: Outbox) {
        let node = self.nodes[i].id();
        let depth = self.clock[i];
        for item in out.into_items() {
            match item {
                Output::Event(e) => {
                    self.trace.push(node, depth, None, e);
                }
                Output::Send(o) => {
                    let bytes = o.msg.encode();
                    let digest = Digest::of(&bytes);
                    let info = o.msg.info(bytes.len());
                    self.record_proofs(node, depth, &o.msg);
                    for dst in o.dsts {
                        let seq = self.trace.push(node, depth, Some(digest), Event::Send { dst, msg: info });
                        self.enqueue(Envelope {
                            seq,
                            src: node,
                            dst,
                            msg: o.msg.clone(),
                            digest,
                            info,
                            send_depth: depth,
                            born: self.steps,
                        });
                    }
                }
            }
        }
    }

    /// Notes the first time each (value, proof) pair goes on the wire.
    fn record_proofs(&mut self, node: NodeId, depth: u64, msg: &ProtocolMessage) {
        let ProtocolMessage::Sbs(m) = msg else {
            return;
        };
        if matches!(m, SbsMessage::Init { .. } | SbsMessage::SafeReq { .. } | SbsMessage::SafeAck { .. }) {
            return;
        }
        let Some(set) = m.proven_set() else {
            return;
        };
        for (sv, proof) in set.iter() {
            let key = Arc::as_ptr(proof) as usize;
            let digest = self
                .proof_digests
                .entry(key)
                .or_insert_with(|| (proof.clone(), proof.digest()))
                .1;
            if self.proofs_seen.insert((sv.clone(), digest)) {
                self.trace.push(
                    node,
                    depth,
                    Some(digest),
                    Event::SbsProof {
                        value: sv.clone(),
                        proof: proof.clone(),
                    },
                );
            }
        }
    }

    fn enqueue(&mut self, env: Envelope) {
        let seq = env.seq;
        match &mut self.queue {
            Queue::Lockstep(heap) => heap.push(Reverse((env.send_depth, seq))),
            Queue::Random { live, pos, by_age, .. } => {
                pos.insert(seq, live.len());
                live.push(seq);
                by_age.insert(seq);
            }
        }
        self.pending.insert(seq, env);
    }

    fn delayed(&self, seq: u64) -> bool {
        self.steps < self.delay_until && {
            let e = &self.pending[&seq];
            self.delayed_links.contains(&(e.src, e.dst))
        }
    }

    fn next(&mut self) -> Option<u64> {
        if let Queue::Lockstep(heap) = &mut self.queue {
            return heap.pop().map(|Reverse((_, seq))| seq);
        }
        let chosen = {
            let Queue::Random { by_age, .. } = &self.queue else {
                unreachable!()
            };
            if by_age.is_empty() {
                return None;
            }
            // fairness: anything too old goes first
            let overdue = by_age
                .iter()
                .take_while(|s| self.steps.saturating_sub(self.pending[s].born) > self.age_cap)
                .find(|s| !self.delayed(**s))
                .copied();
            match overdue {
                Some(s) => s,
                None => self.pick_random(),
            }
        };
        let Queue::Random { live, pos, by_age, .. } = &mut self.queue else {
            unreachable!()
        };
        let at = pos.remove(&chosen).expect("live envelope has a position");
        live.swap_remove(at);
        if at < live.len() {
            pos.insert(live[at], at);
        }
        by_age.remove(&chosen);
        Some(chosen)
    }

    fn pick_random(&mut self) -> u64 {
        let holding = self.steps < self.delay_until && !self.delayed_links.is_empty();
        let eligible: Option<Vec<u64>> = if holding {
            let Queue::Random { live, .. } = &self.queue else {
                unreachable!()
            };
            let e: Vec<u64> = live.iter().copied().filter(|s| !self.delayed(*s)).collect();
            // if only held-back links have traffic, the prefix ends early
            (!e.is_empty()).then_some(e)
        } else {
            None
        };
        let Queue::Random { rng, live, .. } = &mut self.queue else {
            unreachable!()
        };
        match eligible {
            Some(e) => e[rng.gen_range(0..e.len())],
            None => live[rng.gen_range(0..live.len())],
        }
    }

    /// Once every correct participant is satisfied, lets round-based nodes
    /// run at most one more round so that the run can go quiet.
    fn maybe_cap(&mut self) {
        if !self.round_based || self.capped {
            return;
        }
        let mut max_round = 0;
        for (node, correct) in self.nodes.iter().zip(&self.correct) {
            if !correct {
                continue;
            }
            let s = node.status();
            if !s.satisfied {
                return;
            }
            max_round = max_round.max(s.round.unwrap_or(0));
        }
        self.capped = true;
        let cap = max_round + 1;
        for i in 0..self.nodes.len() {
            let mut out = Outbox::new();
            self.nodes[i].set_round_cap(cap, &mut out);
            self.emit(i, out);
        }
    }
}

/// Values decided by the correct processes of a single-shot run, by node.
pub fn decisions(trace: &Trace, roles: &Roles) -> Vec<(NodeId, LatticeValue)> {
    trace
        .iter()
        .filter(|e| roles.is_correct(e.node))
        .filter_map(|e| match &e.event {
            Event::Decide { value, .. } => Some((e.node, value.clone())),
            _ => None,
        })
        .collect()
}
