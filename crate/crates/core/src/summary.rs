//! Per-run metrics, computed from the trace alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checker::{gwts_costs, Verdict};
use crate::config::{ProtocolKind, Roles};
use crate::trace::{Event, Trace};
use crate::wire::{Digest, MsgKind};
use crate::NodeId;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: NodeId,
    pub correct: bool,
    /// Causal depth of each decision, in order.
    pub decision_depths: Vec<u64>,
    pub refinements: u64,
    pub sent: BTreeMap<MsgKind, u64>,
    pub received: BTreeMap<MsgKind, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub protocol: ProtocolKind,
    pub n: usize,
    pub f: usize,
    pub steps: u64,
    pub quiescent: bool,
    pub total_msgs: u64,
    /// Deepest decision of a correct process.
    pub max_depth: u64,
    /// Most refinements by one correct process.
    pub max_refinements: u64,
    /// Most envelopes charged to one GWTS proposer round.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_round_cost: Option<u64>,
    pub nodes: Vec<NodeSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict_digest: Option<Digest>,
}

impl RunSummary {
    pub fn from_trace(trace: &Trace, roles: &Roles, verdict: Option<&Verdict>) -> Self {
        let participants = roles.n + roles.clients.len();
        let mut nodes: Vec<NodeSummary> = (0..participants as u64)
            .map(NodeId)
            .map(|node| NodeSummary {
                node,
                correct: if (node.0 as usize) < roles.n {
                    roles.is_correct(node)
                } else {
                    !roles.byzantine_clients.contains(&node)
                },
                ..NodeSummary::default()
            })
            .collect();
        let mut total = 0;
        let (mut steps, mut quiescent) = (0, false);
        for e in trace {
            let Some(s) = nodes.get_mut(e.node.0 as usize) else {
                continue;
            };
            match &e.event {
                Event::Send { msg, .. } => {
                    total += 1;
                    *s.sent.entry(msg.kind).or_default() += 1;
                }
                Event::Deliver { msg, .. } => *s.received.entry(msg.kind).or_default() += 1,
                Event::Decide { .. } => s.decision_depths.push(e.depth),
                Event::Refinement { .. } => s.refinements += 1,
                Event::RunEnd {
                    quiescent: q,
                    steps: st,
                    ..
                } => {
                    steps = *st;
                    quiescent = *q;
                }
                _ => {}
            }
        }
        let correct = || nodes.iter().filter(|s| s.correct && (s.node.0 as usize) < roles.n);
        let max_depth = correct().flat_map(|s| s.decision_depths.iter().copied()).max().unwrap_or(0);
        let max_refinements = correct().map(|s| s.refinements).max().unwrap_or(0);
        let max_round_cost = roles
            .protocol
            .is_round_based()
            .then(|| gwts_costs(trace, roles).values().copied().max().unwrap_or(0));
        RunSummary {
            protocol: roles.protocol,
            n: roles.n,
            f: roles.f,
            steps,
            quiescent,
            total_msgs: total,
            max_depth,
            max_refinements,
            max_round_cost,
            nodes,
            verdict: verdict.map(|v| if v.passed() { "pass" } else { "fail" }.to_string()),
            verdict_digest: verdict.map(Verdict::digest),
        }
    }
}
