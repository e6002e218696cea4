//! VF registry: a bucketed hash table of reference-counted entries.
//!
//! Entries live in an append-only arena and are never reused, so a handle
//! to a freed entry still resolves to its poisoned slot. That is what lets
//! a late reader's touch be recorded as a [`UafEvent`] instead of reading
//! reclaimed memory.
//!
//! Deletion is logical first: a deleted node stays linked in its chain
//! until it is reclaimed, visible only to read-side sessions that began
//! before the removal was published.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocmodel::{AllocError, AllocProfile, BuddyAllocator, Payload};
use crate::grace::{Epoch, GraceClock, ReaderHandle, ReaderId, UafEvent};
use crate::probe::{ClockSource, TimingSample};

pub const MAX_VF_ID: u32 = u16::MAX as u32;
pub const MAX_BUCKET_ORDER: u32 = 16;
pub const DEFAULT_BUCKET_ORDER: u32 = 3;
pub const DEFAULT_CAPACITY: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("invalid table config: {0}")]
    InvalidConfig(String),
    #[error("Out of range VF ID: {0}")]
    OutOfRange(u32),
    #[error("VF {0} is already live")]
    DuplicateId(VfId),
    #[error("cannot start VF {id}: {capacity} VFs already live")]
    CapacityExceeded { id: VfId, capacity: usize },
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error("reader {0} is not inside a read-side session")]
    NotInSession(ReaderId),
    #[error("entry {0:?} is in the wrong state for this operation")]
    BadState(EntryHandle),
    #[error("unknown entry handle {0:?}")]
    UnknownEntry(EntryHandle),
}

/// 16-bit VF identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct VfId(u16);

impl VfId {
    pub fn new(value: u32) -> Result<Self, RegistryError> {
        u16::try_from(value)
            .map(VfId)
            .map_err(|_| RegistryError::OutOfRange(value))
    }

    pub fn get(self) -> u16 {
        self.0
    }
}

impl From<u16> for VfId {
    fn from(v: u16) -> Self {
        VfId(v)
    }
}

impl TryFrom<u32> for VfId {
    type Error = RegistryError;

    fn try_from(v: u32) -> Result<Self, Self::Error> {
        VfId::new(v)
    }
}

impl From<VfId> for u32 {
    fn from(id: VfId) -> u32 {
        u32::from(id.0)
    }
}

impl fmt::Display for VfId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntryHandle(usize);

impl EntryHandle {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryState {
    Live,
    LogicallyDeleted,
    Freed,
}

#[derive(Debug, Clone)]
pub struct VfEntry {
    pub id: VfId,
    pub refcount: u32,
    pub state: EntryState,
    pub removal_epoch: Option<Epoch>,
    removed_seq: Option<u64>,
    payload: Option<Payload>,
    payload_bytes: u64,
    bucket: usize,
}

impl VfEntry {
    pub fn payload(&self) -> Option<&Payload> {
        self.payload.as_ref()
    }

    pub fn payload_bytes(&self) -> u64 {
        self.payload_bytes
    }

    pub fn bucket(&self) -> usize {
        self.bucket
    }

    fn visible_to(&self, reader: &ReaderHandle) -> bool {
        self.removed_seq.is_none_or(|s| s > reader.entry_seq())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupKind {
    Hit(EntryHandle),
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LookupOutcome {
    pub kind: LookupKind,
    pub nodes_traversed: u32,
    /// The traversal reached a matching node whose memory was still
    /// resident and read its refcount, whether or not the get succeeded.
    pub refcount_probed: bool,
    /// The traversal touched a freed node and was aborted.
    pub uaf: bool,
}

impl LookupOutcome {
    pub fn is_hit(&self) -> bool {
        matches!(self.kind, LookupKind::Hit(_))
    }

    pub fn hit_handle(&self) -> Option<EntryHandle> {
        match self.kind {
            LookupKind::Hit(h) => Some(h),
            LookupKind::Miss => None,
        }
    }
}

/// An in-flight bucket walk. The node list is captured when the walk
/// starts; nodes freed afterwards are still on it.
#[derive(Debug, Clone)]
pub struct Traversal {
    id: VfId,
    reader_id: ReaderId,
    path: Vec<EntryHandle>,
    pos: usize,
    nodes_traversed: u32,
}

impl Traversal {
    pub fn id(&self) -> VfId {
        self.id
    }

    pub fn reader_id(&self) -> ReaderId {
        self.reader_id
    }

    pub fn remaining(&self) -> usize {
        self.path.len() - self.pos
    }
}

#[derive(Debug, Clone)]
pub struct VfTable {
    bucket_order: u32,
    buckets: Vec<Vec<EntryHandle>>,
    entries: Vec<VfEntry>,
    capacity: usize,
    live_count: usize,
    orphans: Vec<EntryHandle>,
    uaf_events: Vec<UafEvent>,
}

impl VfTable {
    pub fn new(bucket_order: u32, capacity: usize) -> Result<Self, RegistryError> {
        if bucket_order > MAX_BUCKET_ORDER {
            return Err(RegistryError::InvalidConfig(format!(
                "bucket order {bucket_order} exceeds {MAX_BUCKET_ORDER}"
            )));
        }
        Ok(Self {
            bucket_order,
            buckets: vec![Vec::new(); 1 << bucket_order],
            entries: Vec::new(),
            capacity,
            live_count: 0,
            orphans: Vec::new(),
            uaf_events: Vec::new(),
        })
    }

    pub fn bucket_order(&self) -> u32 {
        self.bucket_order
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn live_count(&self) -> usize {
        self.live_count
    }

    pub fn hash(&self, id: VfId) -> usize {
        usize::from(id.get()) & (self.buckets.len() - 1)
    }

    pub fn chain(&self, bucket: usize) -> &[EntryHandle] {
        &self.buckets[bucket]
    }

    pub fn entry(&self, h: EntryHandle) -> Option<&VfEntry> {
        self.entries.get(h.0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (EntryHandle, &VfEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (EntryHandle(i), e))
    }

    pub fn find_live(&self, id: VfId) -> Option<EntryHandle> {
        self.buckets[self.hash(id)].iter().copied().find(|h| {
            let e = &self.entries[h.0];
            e.id == id && e.state == EntryState::Live
        })
    }

    /// Live ids in ascending order.
    pub fn live_ids(&self) -> Vec<VfId> {
        let mut ids: Vec<_> = self
            .entries
            .iter()
            .filter(|e| e.state == EntryState::Live)
            .map(|e| e.id)
            .collect();
        ids.sort();
        ids
    }

    /// 1-based position of the live entry for `id` within its chain,
    /// counting only nodes a fresh reader would walk.
    pub fn chain_depth(&self, id: VfId) -> Option<usize> {
        self.buckets[self.hash(id)]
            .iter()
            .filter(|h| self.entries[h.0].removed_seq.is_none())
            .position(|h| self.entries[h.0].id == id)
            .map(|p| p + 1)
    }

    pub fn insert(
        &mut self,
        id: VfId,
        alloc: &mut BuddyAllocator,
        profile: &AllocProfile,
    ) -> Result<EntryHandle, RegistryError> {
        if self.find_live(id).is_some() {
            return Err(RegistryError::DuplicateId(id));
        }
        if self.live_count >= self.capacity {
            return Err(RegistryError::CapacityExceeded {
                id,
                capacity: self.capacity,
            });
        }
        let payload = alloc.alloc_payload(profile)?;
        let payload_bytes = payload.pages() * alloc.page_size();
        let bucket = self.hash(id);
        let h = EntryHandle(self.entries.len());
        self.entries.push(VfEntry {
            id,
            refcount: 1,
            state: EntryState::Live,
            removal_epoch: None,
            removed_seq: None,
            payload: Some(payload),
            payload_bytes,
            bucket,
        });
        self.buckets[bucket].push(h);
        self.live_count += 1;
        Ok(h)
    }

    /// Starts a walk of `id`'s bucket on behalf of `reader`. Nodes removed
    /// before the reader's session began are skipped.
    pub fn begin_lookup(&self, id: VfId, reader: &ReaderHandle) -> Traversal {
        let path = self.buckets[self.hash(id)]
            .iter()
            .copied()
            .filter(|h| self.entries[h.0].visible_to(reader))
            .collect();
        Traversal {
            id,
            reader_id: reader.reader_id(),
            path,
            pos: 0,
            nodes_traversed: 0,
        }
    }

    /// Touches the next node of `t`. Returns the outcome once the walk
    /// ends (match found, chain exhausted, or a freed node touched).
    pub fn advance(&mut self, t: &mut Traversal, epoch: Epoch, step: u64) -> Option<LookupOutcome> {
        let Some(&h) = t.path.get(t.pos) else {
            return Some(LookupOutcome {
                kind: LookupKind::Miss,
                nodes_traversed: t.nodes_traversed,
                refcount_probed: false,
                uaf: false,
            });
        };
        t.pos += 1;
        t.nodes_traversed += 1;
        let entry = &mut self.entries[h.0];
        if entry.state == EntryState::Freed {
            self.uaf_events.push(UafEvent {
                reader_id: t.reader_id,
                vf_id: entry.id,
                epoch_at_access: epoch,
                step,
            });
            return Some(LookupOutcome {
                kind: LookupKind::Miss,
                nodes_traversed: t.nodes_traversed,
                refcount_probed: false,
                uaf: true,
            });
        }
        if entry.id != t.id {
            return if t.pos == t.path.len() {
                Some(LookupOutcome {
                    kind: LookupKind::Miss,
                    nodes_traversed: t.nodes_traversed,
                    refcount_probed: false,
                    uaf: false,
                })
            } else {
                None
            };
        }
        // get_unless_zero
        let kind = if entry.refcount > 0 {
            entry.refcount += 1;
            LookupKind::Hit(h)
        } else {
            LookupKind::Miss
        };
        Some(LookupOutcome {
            kind,
            nodes_traversed: t.nodes_traversed,
            refcount_probed: true,
            uaf: false,
        })
    }

    /// Walks `id`'s bucket to completion inside `reader`'s session.
    pub fn lookup_untimed(
        &mut self,
        grace: &GraceClock,
        reader: &ReaderHandle,
        id: VfId,
        step: u64,
    ) -> Result<LookupOutcome, RegistryError> {
        if !grace.holds(reader) {
            return Err(RegistryError::NotInSession(reader.reader_id()));
        }
        let mut t = self.begin_lookup(id, reader);
        loop {
            if let Some(out) = self.advance(&mut t, grace.current_epoch(), step) {
                return Ok(out);
            }
        }
    }

    /// Drops one reference. A non-live entry reaching zero is parked on
    /// the orphan list for its owner to release.
    pub fn put(&mut self, h: EntryHandle) -> Result<u32, RegistryError> {
        let e = self
            .entries
            .get_mut(h.0)
            .ok_or(RegistryError::UnknownEntry(h))?;
        match (e.state, e.refcount) {
            (EntryState::Freed, _) | (_, 0) | (EntryState::Live, 1) => {
                return Err(RegistryError::BadState(h))
            }
            _ => {}
        }
        e.refcount -= 1;
        if e.refcount == 0 {
            self.orphans.push(h);
        }
        Ok(e.refcount)
    }

    pub fn take_orphans(&mut self) -> Vec<EntryHandle> {
        std::mem::take(&mut self.orphans)
    }

    /// Logically deletes every live entry and drops the table's reference
    /// to each. Returns the handles, in insertion order, whose refcount
    /// reached zero; those must be released by the caller.
    pub fn retire_all(&mut self, grace: &mut GraceClock) -> (usize, Vec<EntryHandle>) {
        let epoch = grace.current_epoch();
        let seq = grace.publish_removal();
        let mut deleted = 0;
        let mut zeroed = Vec::new();
        for (i, e) in self.entries.iter_mut().enumerate() {
            if e.state != EntryState::Live {
                continue;
            }
            e.state = EntryState::LogicallyDeleted;
            e.removal_epoch = Some(epoch);
            e.removed_seq = Some(seq);
            e.refcount -= 1;
            deleted += 1;
            if e.refcount == 0 {
                zeroed.push(EntryHandle(i));
            }
        }
        self.live_count = 0;
        (deleted, zeroed)
    }

    /// Poisons a zero-ref deleted entry, unlinks it and returns its blocks.
    pub fn free_entry(
        &mut self,
        h: EntryHandle,
        alloc: &mut BuddyAllocator,
    ) -> Result<u64, RegistryError> {
        let e = self
            .entries
            .get_mut(h.0)
            .ok_or(RegistryError::UnknownEntry(h))?;
        if e.state != EntryState::LogicallyDeleted || e.refcount != 0 {
            return Err(RegistryError::BadState(h));
        }
        let payload = e.payload.take().expect("resident entry has a payload");
        e.state = EntryState::Freed;
        let bytes = e.payload_bytes;
        let bucket = e.bucket;
        alloc.free_payload(&payload)?;
        self.buckets[bucket].retain(|&x| x != h);
        Ok(bytes)
    }

    pub fn uaf_events(&self) -> &[UafEvent] {
        &self.uaf_events
    }
}

/// Timed lookup: one complete walk of `id`'s bucket, measured by `clock`.
pub fn lookup(
    table: &mut VfTable,
    id: VfId,
    reader: &ReaderHandle,
    clock: &mut ClockSource,
    grace: &GraceClock,
) -> Result<(LookupOutcome, TimingSample), RegistryError> {
    let start = clock.start();
    let out = table.lookup_untimed(grace, reader, id, 0)?;
    let duration = clock.finish(start, &out);
    Ok((
        out,
        TimingSample {
            id,
            hit: out.is_hit(),
            duration,
            cycle: 0,
            rep: 0,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocmodel::ArenaConfig;
    use crate::probe::CostModel;

    fn setup(order: u32) -> (VfTable, BuddyAllocator, GraceClock) {
        (
            VfTable::new(order, 64).unwrap(),
            BuddyAllocator::new(ArenaConfig::default()).unwrap(),
            GraceClock::new(),
        )
    }

    fn id(v: u16) -> VfId {
        VfId::from(v)
    }

    #[test]
    fn construction() {
        let t = VfTable::new(3, 64).unwrap();
        assert_eq!(t.bucket_count(), 8);
        assert!((0..8).all(|b| t.chain(b).is_empty()));
        assert_eq!(VfTable::new(0, 16).unwrap().bucket_count(), 1);
        assert_eq!(VfTable::new(6, 64).unwrap().bucket_count(), 64);
        assert!(matches!(
            VfTable::new(17, 1),
            Err(RegistryError::InvalidConfig(_))
        ));
    }

    #[test]
    fn vf_id_range() {
        assert_eq!(VfId::new(65535).unwrap().get(), 65535);
        assert_eq!(VfId::new(65536), Err(RegistryError::OutOfRange(65536)));
    }

    #[test]
    fn colliding_inserts_chain_in_order() {
        let (mut t, mut a, _) = setup(3);
        let p = AllocProfile::default();
        t.insert(id(1), &mut a, &p).unwrap();
        t.insert(id(9), &mut a, &p).unwrap();
        assert_eq!(t.hash(id(9)), 1);
        assert_eq!(t.chain(1).len(), 2);
        assert_eq!(t.chain_depth(id(1)), Some(1));
        assert_eq!(t.chain_depth(id(9)), Some(2));
    }

    #[test]
    fn duplicate_and_capacity() {
        let (_, mut a, _) = setup(3);
        let p = AllocProfile::default();
        let mut t = VfTable::new(3, 1).unwrap();
        t.insert(id(5), &mut a, &p).unwrap();
        assert_eq!(
            t.insert(id(5), &mut a, &p),
            Err(RegistryError::DuplicateId(id(5)))
        );
        assert!(matches!(
            t.insert(id(6), &mut a, &p),
            Err(RegistryError::CapacityExceeded { capacity: 1, .. })
        ));
    }

    #[test]
    fn timed_lookups_default_costs() {
        let (mut t, mut a, mut g) = setup(3);
        t.insert(id(1), &mut a, &AllocProfile::default()).unwrap();
        let mut clock = ClockSource::deterministic(CostModel::default());
        let r = g.reader_enter(0);
        let (out, s) = lookup(&mut t, id(1), &r, &mut clock, &g).unwrap();
        assert!(out.is_hit());
        assert_eq!((out.nodes_traversed, s.duration), (1, 90));
        let (out, s) = lookup(&mut t, id(2), &r, &mut clock, &g).unwrap();
        assert!(!out.is_hit());
        assert_eq!(s.duration, 4);
    }

    #[test]
    fn zero_refcount_match_misses() {
        let (mut t, mut a, mut g) = setup(3);
        let h = t.insert(id(1), &mut a, &AllocProfile::default()).unwrap();
        let r = g.reader_enter(0);
        t.retire_all(&mut g);
        assert_eq!(t.entry(h).unwrap().refcount, 0);
        let out = t.lookup_untimed(&g, &r, id(1), 0).unwrap();
        assert_eq!(out.kind, LookupKind::Miss);
        assert!(out.refcount_probed);
    }

    #[test]
    fn new_readers_do_not_see_deleted_nodes() {
        let (mut t, mut a, mut g) = setup(3);
        t.insert(id(1), &mut a, &AllocProfile::default()).unwrap();
        let old = g.reader_enter(0);
        t.retire_all(&mut g);
        let new = g.reader_enter(1);
        assert_eq!(t.begin_lookup(id(1), &old).remaining(), 1);
        assert_eq!(t.begin_lookup(id(1), &new).remaining(), 0);
    }

    #[test]
    fn freed_node_touch_is_recorded() {
        let (mut t, mut a, mut g) = setup(3);
        t.insert(id(1), &mut a, &AllocProfile::default()).unwrap();
        let r = g.reader_enter(7);
        let mut walk = t.begin_lookup(id(1), &r);
        let (_, zeroed) = t.retire_all(&mut g);
        t.free_entry(zeroed[0], &mut a).unwrap();
        let out = t.advance(&mut walk, g.current_epoch(), 42).unwrap();
        assert!(out.uaf);
        assert_eq!(out.kind, LookupKind::Miss);
        assert_eq!(t.uaf_events().len(), 1);
        assert_eq!(t.uaf_events()[0].reader_id, 7);
        assert_eq!(t.uaf_events()[0].step, 42);
    }

    #[test]
    fn hit_takes_one_reference() {
        let (mut t, mut a, mut g) = setup(3);
        let h = t.insert(id(3), &mut a, &AllocProfile::default()).unwrap();
        let r = g.reader_enter(0);
        t.lookup_untimed(&g, &r, id(3), 0).unwrap();
        assert_eq!(t.entry(h).unwrap().refcount, 2);
        assert_eq!(t.put(h), Ok(1));
        assert_eq!(t.put(h), Err(RegistryError::BadState(h)));
    }

    #[test]
    fn lookup_requires_session() {
        let (mut t, _, mut g) = setup(3);
        let r = g.reader_enter(0);
        g.reader_exit(&r).unwrap();
        assert_eq!(
            t.lookup_untimed(&g, &r, id(1), 0),
            Err(RegistryError::NotInSession(0))
        );
    }
}
