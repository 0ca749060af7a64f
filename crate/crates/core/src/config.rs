//! Scenario files and the ground-truth roles the checker needs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::Strategy;
use crate::lattice::{AdmissibilityKind, Item};
use crate::node::Params;
use crate::rsm::ClientOp;
use crate::sbs::signature::SchemeKind;
use crate::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    /// Reliable broadcast alone: every process broadcasts one payload.
    Rbcast,
    Wts,
    Gwts,
    Sbs,
    Rsm,
}

impl ProtocolKind {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Rbcast => "rbcast",
            ProtocolKind::Wts => "wts",
            ProtocolKind::Gwts => "gwts",
            ProtocolKind::Sbs => "sbs",
            ProtocolKind::Rsm => "rsm",
        }
    }

    pub fn is_round_based(self) -> bool {
        matches!(self, ProtocolKind::Gwts | ProtocolKind::Rsm)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Deliver in order of causal depth.
    Lockstep,
    /// Deliver a uniformly chosen pending message, seeded.
    #[default]
    Random,
    /// Random, except that scripted links are held back for a while.
    AdversarialDelay,
}

/// Links to hold back during the first `until_step` deliveries.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayScript {
    pub until_step: u64,
    /// Directed `(src, dst)` pairs.
    pub links: Vec<(NodeId, NodeId)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub policy: Policy,
    pub seed: u64,
    /// A message pending for more than this many deliveries goes next.
    pub age_cap: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<DelayScript>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            policy: Policy::Random,
            seed: 0,
            age_cap: 256,
            script: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ByzantineSpec {
    pub node: NodeId,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub params: serde_json::Value,
}

/// An RSM client. Clients get identifiers `n, n + 1, ...` in file order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSpec {
    #[serde(default)]
    pub ops: Vec<ClientOp>,
    /// Runs the bad-client strategy instead of `ops`.
    #[serde(default)]
    pub byzantine: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub protocol: ProtocolKind,
    pub n: usize,
    pub f: usize,
    #[serde(default)]
    pub byzantine: Vec<ByzantineSpec>,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    /// Rounds each correct GWTS process must decide.
    #[serde(default = "one")]
    pub rounds: u64,
    /// Per-node input payloads (UTF-8), one per round. Missing nodes get
    /// `v<node>.<round>`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<NodeId, Vec<String>>,
    /// Maximum number of deliveries.
    #[serde(default = "default_budget")]
    pub budget: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clients: Vec<ClientSpec>,
    #[serde(default)]
    pub admissibility: AdmissibilityKind,
    #[serde(default)]
    pub signature: SchemeKind,
}

fn one() -> u64 {
    1
}

fn default_budget() -> u64 {
    5_000_000
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("n = {n} < 3f + 1 = {} for f = {f}: Byzantine agreement needs at least 3f + 1 processes", 3 * f + 1)]
    TooFewProcesses { n: usize, f: usize },
    #[error("{count} Byzantine processes configured but f = {f}")]
    TooManyByzantine { count: usize, f: usize },
    #[error("Byzantine node {0} is not a process (ids are 0..n)")]
    UnknownNode(NodeId),
    #[error("node {0} is listed as Byzantine twice")]
    DuplicateNode(NodeId),
    #[error("strategy {strategy} does not apply to protocol {protocol}")]
    Inapplicable { strategy: &'static str, protocol: &'static str },
    #[error("clients are only meaningful for rsm")]
    UnexpectedClients,
    #[error("rounds must be at least 1")]
    NoRounds,
    #[error("n must be at least 1")]
    Empty,
}

impl ScenarioConfig {
    /// A scenario with defaults for everything but the essentials.
    pub fn new(protocol: ProtocolKind, n: usize, f: usize) -> Self {
        ScenarioConfig {
            protocol,
            n,
            f,
            byzantine: Vec::new(),
            scheduler: SchedulerConfig::default(),
            rounds: 1,
            inputs: BTreeMap::new(),
            budget: default_budget(),
            clients: Vec::new(),
            admissibility: AdmissibilityKind::default(),
            signature: SchemeKind::default(),
        }
    }

    pub fn with_byzantine(mut self, node: u64, strategy: Strategy) -> Self {
        self.byzantine.push(ByzantineSpec {
            node: NodeId(node),
            strategy,
            params: serde_json::Value::Null,
        });
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scheduler.seed = seed;
        self
    }

    pub fn with_policy(mut self, policy: Policy) -> Self {
        self.scheduler.policy = policy;
        self
    }

    pub fn params(&self) -> Params {
        Params::new(self.n, self.f)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n == 0 {
            return Err(ConfigError::Empty);
        }
        if self.n < 3 * self.f + 1 {
            return Err(ConfigError::TooFewProcesses { n: self.n, f: self.f });
        }
        if self.byzantine.len() > self.f {
            return Err(ConfigError::TooManyByzantine {
                count: self.byzantine.len(),
                f: self.f,
            });
        }
        let mut seen = BTreeSet::new();
        for b in &self.byzantine {
            if b.node.0 as usize >= self.n {
                return Err(ConfigError::UnknownNode(b.node));
            }
            if !seen.insert(b.node) {
                return Err(ConfigError::DuplicateNode(b.node));
            }
            if !applies(b.strategy, self.protocol) {
                return Err(ConfigError::Inapplicable {
                    strategy: b.strategy.name(),
                    protocol: self.protocol.name(),
                });
            }
        }
        if !self.clients.is_empty() && self.protocol != ProtocolKind::Rsm {
            return Err(ConfigError::UnexpectedClients);
        }
        if self.rounds == 0 {
            return Err(ConfigError::NoRounds);
        }
        Ok(())
    }

    /// The strategy of `node`, if it is Byzantine.
    pub fn strategy_of(&self, node: NodeId) -> Option<&ByzantineSpec> {
        self.byzantine.iter().find(|b| b.node == node)
    }

    /// Node `node`'s input for `round`.
    pub fn input(&self, node: NodeId, round: u64) -> Item {
        let payload = self
            .inputs
            .get(&node)
            .and_then(|v| v.get(round as usize))
            .cloned()
            .unwrap_or_else(|| format!("v{}.{}", node.0, round));
        Item::value(node, payload.into_bytes())
    }

    pub fn roles(&self) -> Roles {
        let n = self.n as u64;
        Roles {
            protocol: self.protocol,
            n: self.n,
            f: self.f,
            byzantine: self.byzantine.iter().map(|b| b.node).collect(),
            clients: (0..self.clients.len() as u64).map(|i| NodeId(n + i)).collect(),
            byzantine_clients: self
                .clients
                .iter()
                .enumerate()
                .filter(|(_, c)| c.byzantine)
                .map(|(i, _)| NodeId(n + i as u64))
                .collect(),
            lockstep: self.scheduler.policy == Policy::Lockstep,
            rounds: self.rounds,
            budget_c: GWTS_BUDGET_C,
            admissibility: self.admissibility,
            signature: self.signature,
        }
    }
}

fn applies(strategy: Strategy, protocol: ProtocolKind) -> bool {
    use ProtocolKind::*;
    match strategy {
        Strategy::Silent => true,
        Strategy::Equivocator => matches!(protocol, Rbcast | Wts | Gwts | Rsm),
        Strategy::NackFlooder => matches!(protocol, Wts | Gwts | Sbs | Rsm),
        Strategy::StaleAcker => matches!(protocol, Wts),
        Strategy::RoundJumper => matches!(protocol, Gwts | Rsm),
        Strategy::DoubleSigner => matches!(protocol, Sbs),
        Strategy::FabricatorReplica => matches!(protocol, Rsm),
        Strategy::BadClient => false,
    }
}

/// The constant `c` in the per-decision budget `c · max(f, 1) · n²`.
///
/// One reliable broadcast costs `n + 2n²` envelopes. A decision costs the
/// proposer's disclosure, at most `f + 1` ack requests, and for each request
/// up to `n` nacks or `n` acknowledgement broadcasts:
/// `B = (n + 2n²) + (f + 1)(n + n(n + 2n²))`.
/// `B / (f n²)` is about 20.8 for `n = 4` and 23.8 for `n = 7`, so 24 covers the
/// configurations we sweep. The bound grows with `n`, so no constant covers
/// every size; see the README.
pub const GWTS_BUDGET_C: f64 = 24.0;

/// Ground truth about a run that the trace alone does not reveal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roles {
    pub protocol: ProtocolKind,
    pub n: usize,
    pub f: usize,
    pub byzantine: BTreeSet<NodeId>,
    #[serde(default)]
    pub clients: BTreeSet<NodeId>,
    #[serde(default)]
    pub byzantine_clients: BTreeSet<NodeId>,
    /// Depth bounds are only checked for lockstep runs.
    #[serde(default)]
    pub lockstep: bool,
    #[serde(default = "one")]
    pub rounds: u64,
    #[serde(default = "default_c")]
    pub budget_c: f64,
    #[serde(default)]
    pub admissibility: AdmissibilityKind,
    #[serde(default)]
    pub signature: SchemeKind,
}

fn default_c() -> f64 {
    GWTS_BUDGET_C
}

impl Roles {
    pub fn params(&self) -> Params {
        Params::new(self.n, self.f)
    }

    pub fn processes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.n as u64).map(NodeId)
    }

    pub fn is_correct(&self, node: NodeId) -> bool {
        (node.0 as usize) < self.n && !self.byzantine.contains(&node)
    }

    pub fn correct(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.processes().filter(|p| !self.byzantine.contains(p))
    }

    pub fn correct_clients(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.clients.iter().copied().filter(|c| !self.byzantine_clients.contains(c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn process_count_lower_bound() {
        assert_eq!(
            ScenarioConfig::new(ProtocolKind::Wts, 3, 1).validate(),
            Err(ConfigError::TooFewProcesses { n: 3, f: 1 })
        );
        assert!(ScenarioConfig::new(ProtocolKind::Wts, 4, 1).validate().is_ok());
        assert!(ScenarioConfig::new(ProtocolKind::Wts, 7, 2).validate().is_ok());
        assert!(ScenarioConfig::new(ProtocolKind::Wts, 9, 3).validate().is_err());
    }

    #[test]
    fn too_many_byzantine() {
        let c = ScenarioConfig::new(ProtocolKind::Wts, 4, 1)
            .with_byzantine(0, Strategy::Silent)
            .with_byzantine(1, Strategy::Silent);
        assert_eq!(c.validate(), Err(ConfigError::TooManyByzantine { count: 2, f: 1 }));
    }

    #[test]
    fn strategy_must_fit_protocol() {
        let c = ScenarioConfig::new(ProtocolKind::Wts, 4, 1).with_byzantine(3, Strategy::DoubleSigner);
        assert!(matches!(c.validate(), Err(ConfigError::Inapplicable { .. })));
    }

    #[test]
    fn parses_minimal_json() {
        let c: ScenarioConfig = serde_json::from_str(
            r#"{"protocol":"gwts","n":4,"f":1,"rounds":3,
                "byzantine":[{"node":3,"strategy":"round-jumper"}],
                "scheduler":{"policy":"lockstep","seed":9}}"#,
        )
        .unwrap();
        assert_eq!(c.scheduler.policy, Policy::Lockstep);
        assert_eq!(c.scheduler.age_cap, 256);
        assert_eq!(c.byzantine[0].strategy, Strategy::RoundJumper);
        assert!(c.validate().is_ok());
        let back: ScenarioConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn default_inputs() {
        let c = ScenarioConfig::new(ProtocolKind::Gwts, 4, 1);
        assert_eq!(c.input(NodeId(2), 5), Item::value(2u64, b"v2.5"));
    }
}
