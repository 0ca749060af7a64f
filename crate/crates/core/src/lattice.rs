//! The value domain shared by every protocol: finite sets of provenance-tagged
//! items, ordered by inclusion and joined by union.

use std::collections::btree_set;
use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::NodeId;

/// What an item stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItemKind {
    Value,
    Command,
    Nop,
}

impl ItemKind {
    pub fn to_byte(self) -> u8 {
        match self {
            ItemKind::Value => 0,
            ItemKind::Command => 1,
            ItemKind::Nop => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ItemKind::Value),
            1 => Some(ItemKind::Command),
            2 => Some(ItemKind::Nop),
            _ => None,
        }
    }
}

/// A single element that can be proposed.
///
/// Field order matters: the derived `Ord` sorts by origin, then kind, then
/// payload bytes, which is the canonical order used by [`LatticeValue::encode`].
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Item {
    pub origin: NodeId,
    pub kind: ItemKind,
    #[serde(with = "crate::hexser")]
    pub payload: Bytes,
}

impl Item {
    pub fn new(origin: NodeId, kind: ItemKind, payload: impl Into<Bytes>) -> Self {
        Item {
            origin,
            kind,
            payload: payload.into(),
        }
    }

    pub fn value(origin: impl Into<NodeId>, payload: impl AsRef<[u8]>) -> Self {
        Item::new(
            origin.into(),
            ItemKind::Value,
            Bytes::copy_from_slice(payload.as_ref()),
        )
    }

    /// Appends `origin ‖ kind ‖ len ‖ payload` to `out`.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.origin.0.to_be_bytes());
        out.push(self.kind.to_byte());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.payload.len());
        self.encode_into(&mut out);
        out
    }

    fn decode_from(buf: &mut &[u8]) -> Result<Self, DecodeError> {
        let origin = u64::from_be_bytes(take::<8>(buf)?);
        let [kind] = take::<1>(buf)?;
        let kind = ItemKind::from_byte(kind).ok_or(DecodeError::BadKind(kind))?;
        let len = u32::from_be_bytes(take::<4>(buf)?) as usize;
        if buf.len() < len {
            return Err(DecodeError::Truncated);
        }
        let (payload, rest) = buf.split_at(len);
        *buf = rest;
        Ok(Item::new(
            NodeId(origin),
            kind,
            Bytes::copy_from_slice(payload),
        ))
    }
}

impl fmt::Debug for Item {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ItemKind::Value => "v",
            ItemKind::Command => "cmd",
            ItemKind::Nop => "nop",
        };
        match std::str::from_utf8(&self.payload) {
            Ok(s) if s.chars().all(|c| c.is_ascii_graphic()) => {
                write!(f, "{}:{}:{}", self.origin.0, kind, s)
            }
            _ => write!(f, "{}:{}:0x{}", self.origin.0, kind, hex::encode(&self.payload)),
        }
    }
}

fn take<const N: usize>(buf: &mut &[u8]) -> Result<[u8; N], DecodeError> {
    if buf.len() < N {
        return Err(DecodeError::Truncated);
    }
    let (head, rest) = buf.split_at(N);
    *buf = rest;
    Ok(head.try_into().expect("length checked"))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("input ended before the encoded value was complete")]
    Truncated,
    #[error("unknown item kind byte {0}")]
    BadKind(u8),
    #[error("items are not in strictly ascending canonical order")]
    NotCanonical,
    #[error("{0} trailing bytes after the encoded value")]
    TrailingBytes(usize),
}

/// An element of the join semilattice: a finite set of items.
#[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatticeValue {
    items: BTreeSet<Item>,
}

impl LatticeValue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn singleton(item: Item) -> Self {
        let mut v = Self::new();
        v.items.insert(item);
        v
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, item: &Item) -> bool {
        self.items.contains(item)
    }

    pub fn iter(&self) -> btree_set::Iter<'_, Item> {
        self.items.iter()
    }

    /// Inserts one item; returns whether the value grew.
    pub fn insert(&mut self, item: Item) -> bool {
        self.items.insert(item)
    }

    /// In-place join. Returns whether `self` grew.
    pub fn join_with(&mut self, other: &LatticeValue) -> bool {
        let before = self.items.len();
        self.items.extend(other.items.iter().cloned());
        self.items.len() != before
    }

    pub fn join(&self, other: &LatticeValue) -> LatticeValue {
        let mut out = self.clone();
        out.join_with(other);
        out
    }

    /// `self ≤ other`, i.e. `self ⊆ other`.
    pub fn leq(&self, other: &LatticeValue) -> bool {
        self.items.is_subset(&other.items)
    }

    pub fn comparable(&self, other: &LatticeValue) -> bool {
        self.leq(other) || other.leq(self)
    }

    pub fn big_join<'a>(values: impl IntoIterator<Item = &'a LatticeValue>) -> LatticeValue {
        let mut out = LatticeValue::new();
        for v in values {
            out.join_with(v);
        }
        out
    }

    pub fn difference(&self, other: &LatticeValue) -> LatticeValue {
        self.items.difference(&other.items).cloned().collect()
    }

    /// Canonical encoding: a 4-byte big-endian item count followed by every
    /// item encoding in ascending order.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.items.len() as u32).to_be_bytes());
        for item in &self.items {
            item.encode_into(out);
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Decodes a canonical encoding. Non-canonical input (unsorted or
    /// duplicated items, trailing bytes) is rejected so that two equal sets
    /// never have two accepted encodings.
    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut buf = bytes;
        let value = Self::decode_from(&mut buf)?;
        if !buf.is_empty() {
            return Err(DecodeError::TrailingBytes(buf.len()));
        }
        Ok(value)
    }

    pub(crate) fn decode_from(buf: &mut &[u8]) -> Result<Self, DecodeError> {
        let count = u32::from_be_bytes(take::<4>(buf)?) as usize;
        let mut items = BTreeSet::new();
        let mut last: Option<Item> = None;
        for _ in 0..count {
            let item = Item::decode_from(buf)?;
            if let Some(prev) = &last {
                if prev >= &item {
                    return Err(DecodeError::NotCanonical);
                }
            }
            last = Some(item.clone());
            items.insert(item);
        }
        Ok(LatticeValue { items })
    }
}

impl fmt::Debug for LatticeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.items.iter()).finish()
    }
}

impl FromIterator<Item> for LatticeValue {
    fn from_iter<T: IntoIterator<Item = Item>>(iter: T) -> Self {
        LatticeValue {
            items: iter.into_iter().collect(),
        }
    }
}

impl Extend<Item> for LatticeValue {
    fn extend<T: IntoIterator<Item = Item>>(&mut self, iter: T) {
        self.items.extend(iter)
    }
}

impl<'a> IntoIterator for &'a LatticeValue {
    type Item = &'a Item;
    type IntoIter = btree_set::Iter<'a, Item>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

impl IntoIterator for LatticeValue {
    type Item = Item;
    type IntoIter = btree_set::IntoIter<Item>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.into_iter()
    }
}

/// Membership test for the set of proposable items.
pub trait Admissibility: Send + Sync {
    fn admits(&self, item: &Item) -> bool;

    fn admits_all(&self, value: &LatticeValue) -> bool {
        value.iter().all(|i| self.admits(i))
    }
}

/// Accepts every item.
#[derive(Clone, Copy, Debug, Default)]
pub struct AcceptAll;

impl Admissibility for AcceptAll {
    fn admits(&self, _: &Item) -> bool {
        true
    }
}

/// Structural well-formedness.
///
/// Values must carry a non-empty payload of at most `max_payload` bytes.
/// Commands and nops start with an 8-byte client id followed by an 8-byte
/// sequence number, and the embedded client id must equal the item origin;
/// nops carry nothing after the header.
#[derive(Clone, Copy, Debug)]
pub struct WellFormed {
    pub max_payload: usize,
}

impl Default for WellFormed {
    fn default() -> Self {
        WellFormed { max_payload: 4096 }
    }
}

impl Admissibility for WellFormed {
    fn admits(&self, item: &Item) -> bool {
        let p = &item.payload;
        if p.len() > self.max_payload {
            return false;
        }
        match item.kind {
            ItemKind::Value => !p.is_empty(),
            ItemKind::Command | ItemKind::Nop => {
                if p.len() < 16 || (item.kind == ItemKind::Nop && p.len() != 16) {
                    return false;
                }
                let client = u64::from_be_bytes(p[..8].try_into().expect("length checked"));
                client == item.origin.0
            }
        }
    }
}

/// Serializable choice of admissibility predicate for scenario files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdmissibilityKind {
    AcceptAll,
    #[default]
    WellFormed,
}

impl AdmissibilityKind {
    pub fn build(self) -> Arc<dyn Admissibility> {
        match self {
            AdmissibilityKind::AcceptAll => Arc::new(AcceptAll),
            AdmissibilityKind::WellFormed => Arc::new(WellFormed::default()),
        }
    }
}

impl<F> Admissibility for F
where
    F: Fn(&Item) -> bool + Send + Sync,
{
    fn admits(&self, item: &Item) -> bool {
        self(item)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::collection::btree_set as pset;
    use proptest::prelude::*;

    fn set(xs: &[u8]) -> LatticeValue {
        xs.iter().map(|x| Item::value(0u64, [*x])).collect()
    }

    #[test]
    fn join_matches_figure_examples() {
        assert_eq!(set(&[1]).join(&set(&[2, 3])), set(&[1, 2, 3]));
        let x = set(&[4, 7]);
        assert_eq!(LatticeValue::new().join(&x), x);
        assert_eq!(x.join(&x), x);
    }

    #[test]
    fn leq_and_comparable() {
        assert!(set(&[1]).leq(&set(&[1, 3, 4])));
        assert!(!set(&[2]).leq(&set(&[3])));
        assert!(LatticeValue::new().leq(&LatticeValue::new()));

        assert!(set(&[1]).comparable(&set(&[1, 4])));
        assert!(!set(&[1]).comparable(&set(&[2])));
        assert!(set(&[5, 6]).comparable(&set(&[5, 6])));
    }

    #[test]
    fn big_join_examples() {
        let parts = [set(&[1]), set(&[2]), set(&[3])];
        assert_eq!(LatticeValue::big_join(&parts), set(&[1, 2, 3]));
        assert_eq!(LatticeValue::big_join(&[]), LatticeValue::new());

        // Naive oracle: flatten into a std set.
        let parts = [set(&[1, 2]), set(&[2, 3])];
        let oracle: BTreeSet<Item> = parts.iter().flat_map(|p| p.iter().cloned()).collect();
        let joined = LatticeValue::big_join(&parts);
        assert_eq!(joined.iter().cloned().collect::<BTreeSet<_>>(), oracle);
        assert_eq!(joined, set(&[1, 2, 3]));
    }

    #[test]
    fn item_encoding_layout() {
        let item = Item::new(NodeId(0x0102), ItemKind::Command, &b"ab"[..]);
        assert_eq!(
            item.encode(),
            vec![0, 0, 0, 0, 0, 0, 1, 2, 1, 0, 0, 0, 2, b'a', b'b']
        );
        let v = LatticeValue::singleton(item.clone());
        let mut expected = vec![0, 0, 0, 1];
        expected.extend(item.encode());
        assert_eq!(v.encode(), expected);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert_eq!(LatticeValue::decode(&[0, 0]), Err(DecodeError::Truncated));
        let mut bytes = set(&[1]).encode();
        bytes.push(9);
        assert_eq!(LatticeValue::decode(&bytes), Err(DecodeError::TrailingBytes(1)));

        let a = Item::value(0u64, b"a");
        let b = Item::value(0u64, b"b");
        let mut unsorted = vec![0, 0, 0, 2];
        b.encode_into(&mut unsorted);
        a.encode_into(&mut unsorted);
        assert_eq!(LatticeValue::decode(&unsorted), Err(DecodeError::NotCanonical));

        let mut bad_kind = vec![0, 0, 0, 1];
        a.encode_into(&mut bad_kind);
        bad_kind[4 + 8] = 7;
        assert_eq!(LatticeValue::decode(&bad_kind), Err(DecodeError::BadKind(7)));
    }

    #[test]
    fn well_formed_predicate() {
        let p = WellFormed::default();
        assert!(p.admits(&Item::value(3u64, b"x")));
        assert!(!p.admits(&Item::value(3u64, b"")));
        let mut header = 5u64.to_be_bytes().to_vec();
        header.extend(1u64.to_be_bytes());
        assert!(p.admits(&Item::new(NodeId(5), ItemKind::Nop, header.clone())));
        assert!(!p.admits(&Item::new(NodeId(6), ItemKind::Nop, header.clone())));
        header.extend(b"op");
        assert!(p.admits(&Item::new(NodeId(5), ItemKind::Command, header.clone())));
        assert!(!p.admits(&Item::new(NodeId(5), ItemKind::Nop, header)));
        assert!(!p.admits(&Item::new(NodeId(5), ItemKind::Command, &b"short"[..])));
    }

    fn arb_item() -> impl Strategy<Value = Item> {
        (0u64..4, 0u8..3, proptest::collection::vec(any::<u8>(), 0..4)).prop_map(
            |(origin, kind, payload)| {
                Item::new(NodeId(origin), ItemKind::from_byte(kind).unwrap(), payload)
            },
        )
    }

    fn arb_value() -> impl Strategy<Value = LatticeValue> {
        pset(arb_item(), 0..8).prop_map(|s| s.into_iter().collect())
    }

    proptest! {
        #[test]
        fn join_is_idempotent_commutative_monoid(a in arb_value(), b in arb_value(), c in arb_value()) {
            prop_assert_eq!(a.join(&b), b.join(&a));
            prop_assert_eq!(a.join(&b).join(&c), a.join(&b.join(&c)));
            prop_assert_eq!(a.join(&a), a.clone());
            prop_assert_eq!(a.join(&LatticeValue::new()), a.clone());
            prop_assert!(a.leq(&a.join(&b)) && b.leq(&a.join(&b)));
        }

        #[test]
        fn leq_is_partial_order_matching_join(a in arb_value(), b in arb_value(), c in arb_value()) {
            prop_assert!(a.leq(&a));
            prop_assert_eq!(a.leq(&b), a.join(&b) == b);
            if a.leq(&b) && b.leq(&a) { prop_assert_eq!(&a, &b); }
            if a.leq(&b) && b.leq(&c) { prop_assert!(a.leq(&c)); }
        }

        #[test]
        fn encoding_round_trips_and_ignores_insertion_order(items in proptest::collection::vec(arb_item(), 0..8)) {
            let forward: LatticeValue = items.iter().cloned().collect();
            let backward: LatticeValue = items.iter().rev().cloned().collect();
            prop_assert_eq!(forward.encode(), backward.encode());
            prop_assert_eq!(LatticeValue::decode(&forward.encode()).unwrap(), forward);
        }
    }
}
