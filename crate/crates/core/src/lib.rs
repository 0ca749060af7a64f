//! Byzantine lattice agreement.
//!
//! This crate implements four asynchronous protocols tolerating `f` Byzantine
//! processes out of `n ≥ 3f + 1`:
//!
//! * [`wts`]: single-shot lattice agreement built on reliable broadcast;
//! * [`gwts`]: its generalized, round-based variant deciding an unbounded
//!   sequence of growing values;
//! * [`sbs`]: a signature-based single-shot variant with linear message
//!   complexity;
//! * [`rsm`]: a replicated state machine for commutative updates running on
//!   top of [`gwts`].
//!
//! All protocol code is written as sequential event handlers ([`node::Node`])
//! driven by the deterministic discrete-event simulator in [`simnet`]. Every run
//! produces a [`trace::Trace`] that [`checker`] verifies offline.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod adversary;
pub mod checker;
pub mod config;
pub mod gwts;
pub mod lattice;
pub mod node;
pub mod rbcast;
pub mod rsm;
pub mod sbs;
pub mod simnet;
pub mod summary;
pub mod trace;
pub mod wire;
pub mod wts;

pub use config::{ProtocolKind, ScenarioConfig, ConfigError};
pub use lattice::{Admissibility, Item, ItemKind, LatticeValue};
pub use node::{Node, Outbox, Params};
pub use simnet::{run, RunOutput};
pub use trace::{Trace, TraceEvent};

/// Identifier of a process or client.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for NodeId {
    fn from(v: u64) -> Self {
        NodeId(v)
    }
}

/// Size of a Byzantine quorum, `⌊(n + f) / 2⌋ + 1`. Any two such quorums share
/// a correct process when `n ≥ 3f + 1`.
pub fn byzantine_quorum(n: usize, f: usize) -> usize {
    (n + f) / 2 + 1
}

pub(crate) mod hexser {
    use bytes::Bytes;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Bytes, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s)
            .map(Bytes::from)
            .map_err(serde::de::Error::custom)
    }
}
