//! Trace records and their JSON-lines form.

use std::io::{self, BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{Item, LatticeValue};
use crate::rbcast::BroadcastTag;
use crate::sbs::{SafetyProof, SignedValue};
use crate::wire::{Digest, MsgInfo};
use crate::NodeId;

/// Everything that can happen at a node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "kebab-case")]
pub enum Event {
    Send {
        dst: NodeId,
        msg: MsgInfo,
    },
    Deliver {
        src: NodeId,
        msg: MsgInfo,
    },
    RbDeliver {
        tag: BroadcastTag,
        payload: Digest,
    },
    /// A single-shot protocol's initial value.
    Propose {
        value: Item,
    },
    /// A value accepted into a batch for a future round.
    Submit {
        item: Item,
    },
    DisclosureDelivered {
        from: NodeId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        round: Option<u64>,
        value: LatticeValue,
        admitted: bool,
    },
    RoundStart {
        round: u64,
    },
    AckReqSent {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        round: Option<u64>,
        ts: u64,
        items: u64,
    },
    Refinement {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        round: Option<u64>,
        ts: u64,
    },
    Decide {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        round: Option<u64>,
        value: LatticeValue,
    },
    /// An acceptor acknowledged by reliable broadcast.
    AckRbcast {
        round: u64,
        ts: u64,
        destination: NodeId,
        accepted: Digest,
    },
    AckReqProcessed {
        from: NodeId,
        round: u64,
        ts: u64,
        safe_r: u64,
    },
    SafeRAdvance {
        safe_r: u64,
    },
    ByzFlag {
        flagged: NodeId,
        reason: String,
    },
    /// First appearance on the wire of a value together with a safety proof.
    SbsProof {
        value: SignedValue,
        proof: Arc<SafetyProof>,
    },
    UpdateStart {
        cmd: Item,
    },
    UpdateComplete {
        cmd: Item,
    },
    ReadStart {
        nop: Item,
    },
    ReadComplete {
        nop: Item,
        confirmed: LatticeValue,
        result: LatticeValue,
    },
    RunEnd {
        quiescent: bool,
        steps: u64,
        pending: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub depth: u64,
    pub node: NodeId,
    #[serde(rename = "payload-digest", default, skip_serializing_if = "Option::is_none")]
    pub payload_digest: Option<Digest>,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

/// An ordered event log. `events[i].seq == i` for traces the simulator writes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn push(&mut self, node: NodeId, depth: u64, payload_digest: Option<Digest>, event: Event) -> u64 {
        let seq = self.events.len() as u64;
        self.events.push(TraceEvent {
            seq,
            depth,
            node,
            payload_digest,
            event,
        });
        seq
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TraceEvent> {
        self.events.iter()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for ev in &self.events {
            serde_json::to_writer(&mut w, ev)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Trace, TraceError> {
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ev = serde_json::from_str(&line).map_err(|source| TraceError::Parse { line: i + 1, source })?;
            events.push(ev);
        }
        Ok(Trace { events })
    }

    /// The final `run-end` record, if the trace has one.
    pub fn run_end(&self) -> Option<(bool, u64)> {
        self.events.iter().rev().find_map(|e| match e.event {
            Event::RunEnd { quiescent, steps, .. } => Some((quiescent, steps)),
            _ => None,
        })
    }
}

impl<'a> IntoIterator for &'a Trace {
    type Item = &'a TraceEvent;
    type IntoIter = std::slice::Iter<'a, TraceEvent>;

    fn into_iter(self) -> Self::IntoIter {
        self.events.iter()
    }
}
