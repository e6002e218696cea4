//! Grace-period engine.
//!
//! [`GraceClock`] tracks read-side sessions against a global epoch. The
//! epoch only moves forward in [`GraceClock::start_synchronize`]; a removal
//! stamped with epoch `e` is reclaimable once no active reader has an entry
//! epoch `<= e`.
//!
//! A separate publication sequence orders session entries against
//! removals, so a session that starts after a removal never walks the
//! removed node even when both carry the same epoch.
//!
//! Three release policies are modelled:
//!
//! * [`ReclamationPolicy::UnsafeImmediate`] frees as soon as the refcount
//!   hits zero, regardless of readers.
//! * [`ReclamationPolicy::DeferredCallback`] parks the entry on a
//!   [`ReclaimQueue`] that [`reclaim_step`] drains once grace has elapsed.
//! * [`ReclamationPolicy::Synchronous`] waits for a full grace period,
//!   then frees.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocmodel::BuddyAllocator;
use crate::registry::{EntryHandle, EntryState, RegistryError, VfId, VfTable};

pub type Epoch = u64;
pub type ReaderId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraceError {
    #[error("reader {0} has no active session for this handle")]
    NotActive(ReaderId),
    #[error("reader {0} called synchronize from inside its own read-side session")]
    DeadlockDetected(ReaderId),
    #[error("release precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("grace period has not elapsed yet")]
    GraceNotElapsed,
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReclamationPolicy {
    #[serde(rename = "unsafe")]
    UnsafeImmediate,
    #[serde(rename = "deferred")]
    DeferredCallback,
    #[serde(rename = "sync")]
    Synchronous,
}

impl fmt::Display for ReclamationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::UnsafeImmediate => "unsafe",
            Self::DeferredCallback => "deferred",
            Self::Synchronous => "sync",
        })
    }
}

impl FromStr for ReclamationPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unsafe" => Ok(Self::UnsafeImmediate),
            "deferred" => Ok(Self::DeferredCallback),
            "sync" => Ok(Self::Synchronous),
            _ => Err(format!(
                "unknown policy `{s}` (expected unsafe|deferred|sync)"
            )),
        }
    }
}

/// A reader's ticket for one read-side session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReaderHandle {
    reader_id: ReaderId,
    entry_epoch: Epoch,
    entry_seq: u64,
}

impl ReaderHandle {
    pub fn reader_id(&self) -> ReaderId {
        self.reader_id
    }

    pub fn entry_epoch(&self) -> Epoch {
        self.entry_epoch
    }

    pub fn entry_seq(&self) -> u64 {
        self.entry_seq
    }
}

#[derive(Debug, Clone, Copy)]
struct Session {
    entry_epoch: Epoch,
    entry_seq: u64,
    nesting: u32,
}

/// Returned by [`GraceClock::start_synchronize`]; ready once every reader
/// with an entry epoch below `target` has left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyncTicket {
    target: Epoch,
}

impl SyncTicket {
    pub fn target(&self) -> Epoch {
        self.target
    }
}

#[derive(Debug, Clone, Default)]
pub struct GraceClock {
    current_epoch: Epoch,
    seq: u64,
    sessions: BTreeMap<ReaderId, Session>,
}

impl GraceClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(epoch: Epoch) -> Self {
        Self {
            current_epoch: epoch,
            ..Self::default()
        }
    }

    pub fn current_epoch(&self) -> Epoch {
        self.current_epoch
    }

    pub fn active_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_active(&self, reader: ReaderId) -> bool {
        self.sessions.contains_key(&reader)
    }

    pub fn nesting(&self, reader: ReaderId) -> u32 {
        self.sessions.get(&reader).map_or(0, |s| s.nesting)
    }

    /// True if `handle` names the reader's current session.
    pub fn holds(&self, handle: &ReaderHandle) -> bool {
        self.sessions
            .get(&handle.reader_id)
            .is_some_and(|s| s.entry_seq == handle.entry_seq)
    }

    pub fn oldest_active_epoch(&self) -> Option<Epoch> {
        self.sessions.values().map(|s| s.entry_epoch).min()
    }

    /// Enters (or re-enters) a read-side session. Nested entries keep the
    /// outer session's epoch.
    pub fn reader_enter(&mut self, reader: ReaderId) -> ReaderHandle {
        let s = match self.sessions.get_mut(&reader) {
            Some(s) => {
                s.nesting += 1;
                *s
            }
            None => {
                self.seq += 1;
                let s = Session {
                    entry_epoch: self.current_epoch,
                    entry_seq: self.seq,
                    nesting: 1,
                };
                self.sessions.insert(reader, s);
                s
            }
        };
        ReaderHandle {
            reader_id: reader,
            entry_epoch: s.entry_epoch,
            entry_seq: s.entry_seq,
        }
    }

    pub fn reader_exit(&mut self, handle: &ReaderHandle) -> Result<(), GraceError> {
        let s = self
            .sessions
            .get_mut(&handle.reader_id)
            .filter(|s| s.entry_seq == handle.entry_seq)
            .ok_or(GraceError::NotActive(handle.reader_id))?;
        s.nesting -= 1;
        if s.nesting == 0 {
            self.sessions.remove(&handle.reader_id);
        }
        Ok(())
    }

    /// Orders a removal after every session entered so far.
    pub fn publish_removal(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    /// No active reader could still hold a node removed at `removal_epoch`.
    pub fn grace_elapsed(&self, removal_epoch: Epoch) -> bool {
        self.oldest_active_epoch().is_none_or(|e| e > removal_epoch)
    }

    /// Advances the epoch and returns a ticket for the new grace period.
    /// `caller` is the reader context issuing the call, if any.
    pub fn start_synchronize(
        &mut self,
        caller: Option<ReaderId>,
    ) -> Result<SyncTicket, GraceError> {
        if let Some(r) = caller.filter(|r| self.is_active(*r)) {
            return Err(GraceError::DeadlockDetected(r));
        }
        self.current_epoch += 1;
        Ok(SyncTicket {
            target: self.current_epoch,
        })
    }

    pub fn sync_ready(&self, ticket: &SyncTicket) -> bool {
        self.oldest_active_epoch()
            .is_none_or(|e| e >= ticket.target)
    }
}

/// A reader touched a node after it was freed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UafEvent {
    pub reader_id: ReaderId,
    pub vf_id: VfId,
    pub epoch_at_access: Epoch,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingFree {
    pub entry: EntryHandle,
    pub removal_epoch: Epoch,
    pub bytes: u64,
}

/// Backlog of deferred frees.
#[derive(Debug, Clone, Default)]
pub struct ReclaimQueue {
    pending: VecDeque<PendingFree>,
    pending_bytes: u64,
}

impl ReclaimQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn pending_bytes(&self) -> u64 {
        self.pending_bytes
    }

    pub fn pending(&self) -> impl Iterator<Item = &PendingFree> {
        self.pending.iter()
    }

    fn push(&mut self, p: PendingFree) {
        self.pending_bytes += p.bytes;
        self.pending.push_back(p);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseOutcome {
    Freed,
    Queued,
    /// Synchronous release is waiting on this grace period; finish it with
    /// [`finish_release`].
    AwaitingGrace(SyncTicket),
}

/// Hands a zero-ref, logically deleted entry to the reclamation policy.
pub fn release(
    table: &mut VfTable,
    entry: EntryHandle,
    policy: ReclamationPolicy,
    clock: &mut GraceClock,
    queue: &mut ReclaimQueue,
    alloc: &mut BuddyAllocator,
) -> Result<ReleaseOutcome, GraceError> {
    let e = table
        .entry(entry)
        .ok_or(RegistryError::UnknownEntry(entry))?;
    if e.refcount != 0 || e.state != EntryState::LogicallyDeleted {
        return Err(GraceError::PreconditionViolated(format!(
            "VF {} has refcount {} in state {:?}",
            e.id, e.refcount, e.state
        )));
    }
    let removal_epoch = e
        .removal_epoch
        .expect("deleted entry carries its removal epoch");
    let bytes = e.payload_bytes();
    match policy {
        ReclamationPolicy::UnsafeImmediate => {
            table.free_entry(entry, alloc)?;
            Ok(ReleaseOutcome::Freed)
        }
        ReclamationPolicy::DeferredCallback => {
            queue.push(PendingFree {
                entry,
                removal_epoch,
                bytes,
            });
            Ok(ReleaseOutcome::Queued)
        }
        ReclamationPolicy::Synchronous => {
            let ticket = clock.start_synchronize(None)?;
            if clock.sync_ready(&ticket) {
                table.free_entry(entry, alloc)?;
                Ok(ReleaseOutcome::Freed)
            } else {
                Ok(ReleaseOutcome::AwaitingGrace(ticket))
            }
        }
    }
}

pub fn finish_release(
    table: &mut VfTable,
    entry: EntryHandle,
    ticket: &SyncTicket,
    clock: &GraceClock,
    alloc: &mut BuddyAllocator,
) -> Result<(), GraceError> {
    if !clock.sync_ready(ticket) {
        return Err(GraceError::GraceNotElapsed);
    }
    table.free_entry(entry, alloc)?;
    Ok(())
}

/// Frees every queued entry whose grace period has elapsed.
pub fn reclaim_step(
    queue: &mut ReclaimQueue,
    clock: &GraceClock,
    table: &mut VfTable,
    alloc: &mut BuddyAllocator,
) -> Result<usize, GraceError> {
    let mut freed = 0;
    let mut kept = VecDeque::with_capacity(queue.pending.len());
    for p in queue.pending.drain(..) {
        if clock.grace_elapsed(p.removal_epoch) {
            table.free_entry(p.entry, alloc)?;
            queue.pending_bytes -= p.bytes;
            freed += 1;
        } else {
            kept.push_back(p);
        }
    }
    queue.pending = kept;
    Ok(freed)
}
