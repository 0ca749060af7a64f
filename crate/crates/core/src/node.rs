//! The event-handler interface every simulated process implements.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::trace::Event;
use crate::wire::ProtocolMessage;
use crate::{byzantine_quorum, NodeId};

/// System size: `n` processes with identifiers `0..n`, at most `f` faulty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Params {
    pub n: usize,
    pub f: usize,
}

impl Params {
    pub fn new(n: usize, f: usize) -> Self {
        Params { n, f }
    }

    pub fn quorum(&self) -> usize {
        byzantine_quorum(self.n, self.f)
    }

    pub fn processes(&self) -> impl Iterator<Item = NodeId> + Clone {
        (0..self.n as u64).map(NodeId)
    }
}

/// One message addressed to a list of destinations. The message is shared so
/// a fan-out is encoded and hashed once.
#[derive(Clone, Debug)]
pub struct Outgoing {
    pub dsts: Vec<NodeId>,
    pub msg: Arc<ProtocolMessage>,
}

#[derive(Clone, Debug)]
pub enum Output {
    Send(Outgoing),
    Event(Event),
}

/// Everything a handler produced, in emission order.
#[derive(Debug, Default)]
pub struct Outbox {
    items: Vec<Output>,
}

impl Outbox {
    pub fn new() -> Self {
        Outbox::default()
    }

    pub fn send(&mut self, dst: NodeId, msg: impl Into<ProtocolMessage>) {
        self.items.push(Output::Send(Outgoing {
            dsts: vec![dst],
            msg: Arc::new(msg.into()),
        }));
    }

    pub fn broadcast(&mut self, dsts: impl IntoIterator<Item = NodeId>, msg: impl Into<ProtocolMessage>) {
        self.items.push(Output::Send(Outgoing {
            dsts: dsts.into_iter().collect(),
            msg: Arc::new(msg.into()),
        }));
    }

    pub fn push(&mut self, item: Output) {
        self.items.push(item);
    }

    pub fn emit(&mut self, event: Event) {
        self.items.push(Output::Event(event));
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Output] {
        &self.items
    }

    pub fn into_items(self) -> Vec<Output> {
        self.items
    }

    /// Messages only, flattened to one entry per destination.
    pub fn sends(&self) -> impl Iterator<Item = (NodeId, &ProtocolMessage)> {
        self.items.iter().flat_map(|item| match item {
            Output::Send(o) => o.dsts.iter().map(|d| (*d, &*o.msg)).collect::<Vec<_>>(),
            Output::Event(_) => Vec::new(),
        })
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.items.iter().filter_map(|item| match item {
            Output::Event(e) => Some(e),
            Output::Send(_) => None,
        })
    }
}

/// What the harness needs to know to stop an open-ended run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeStatus {
    /// The node has nothing left it is obliged to finish.
    pub satisfied: bool,
    /// Current round for round-based protocols.
    pub round: Option<u64>,
}

impl Default for NodeStatus {
    fn default() -> Self {
        NodeStatus {
            satisfied: true,
            round: None,
        }
    }
}

pub trait Node: Send {
    fn id(&self) -> NodeId;

    /// Called once before any message is delivered.
    fn start(&mut self, out: &mut Outbox);

    fn handle(&mut self, from: NodeId, msg: &ProtocolMessage, out: &mut Outbox);

    fn status(&self) -> NodeStatus {
        NodeStatus::default()
    }

    /// Forbids starting any round above `cap`. Only round-based nodes care.
    fn set_round_cap(&mut self, _cap: u64, _out: &mut Outbox) {}
}

impl<N: Node + ?Sized> Node for Box<N> {
    fn id(&self) -> NodeId {
        (**self).id()
    }
    fn start(&mut self, out: &mut Outbox) {
        (**self).start(out)
    }
    fn handle(&mut self, from: NodeId, msg: &ProtocolMessage, out: &mut Outbox) {
        (**self).handle(from, msg, out)
    }
    fn status(&self) -> NodeStatus {
        (**self).status()
    }
    fn set_round_cap(&mut self, cap: u64, out: &mut Outbox) {
        (**self).set_round_cap(cap, out)
    }
}
