//! The simulated system: table, grace clock, reclaim backlog and page
//! arena, plus the reader actors that walk the table.
//!
//! Everything here is single-threaded and step-driven. The harness decides
//! who acts in which step; realtime mode wraps the same types in a mutex.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocmodel::{AllocProfile, ArenaConfig, BuddyAllocator};
use crate::grace::{
    self, GraceClock, GraceError, ReaderHandle, ReaderId, ReclaimQueue, ReclamationPolicy,
    ReleaseOutcome, SyncTicket,
};
use crate::registry::{
    EntryHandle, RegistryError, Traversal, VfId, VfTable, DEFAULT_BUCKET_ORDER, DEFAULT_CAPACITY,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub bucket_order: u32,
    pub capacity: usize,
    pub arena: ArenaConfig,
    pub profile: AllocProfile,
    pub policy: ReclamationPolicy,
}

impl WorldConfig {
    pub fn new(policy: ReclamationPolicy) -> Self {
        Self {
            bucket_order: DEFAULT_BUCKET_ORDER,
            capacity: DEFAULT_CAPACITY,
            arena: ArenaConfig::default(),
            profile: AllocProfile::default(),
            policy,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Waiting {
    entry: EntryHandle,
    ticket: SyncTicket,
    since: u64,
}

/// One row of counters, sampled after a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub step: u64,
    pub live_count: usize,
    pub pending_reclaim_bytes: u64,
    pub free_bytes: u64,
    pub allocated_bytes: u64,
    pub largest_free_order: Option<u8>,
    pub fragmentation_index: f64,
}

#[derive(Debug, Clone)]
pub struct World {
    pub table: VfTable,
    pub grace: GraceClock,
    pub queue: ReclaimQueue,
    pub alloc: BuddyAllocator,
    policy: ReclamationPolicy,
    profile: AllocProfile,
    releasing: VecDeque<EntryHandle>,
    waiting: Option<Waiting>,
    sync_wait_steps: u64,
}

impl World {
    pub fn new(cfg: &WorldConfig) -> Result<Self, GraceError> {
        if cfg.profile.big_order > cfg.arena.max_order {
            return Err(GraceError::PreconditionViolated(format!(
                "big order {} exceeds max order {}",
                cfg.profile.big_order, cfg.arena.max_order
            )));
        }
        Ok(Self {
            table: VfTable::new(cfg.bucket_order, cfg.capacity)?,
            grace: GraceClock::new(),
            queue: ReclaimQueue::new(),
            alloc: BuddyAllocator::new(cfg.arena).map_err(RegistryError::from)?,
            policy: cfg.policy,
            profile: cfg.profile,
            releasing: VecDeque::new(),
            waiting: None,
            sync_wait_steps: 0,
        })
    }

    pub fn policy(&self) -> ReclamationPolicy {
        self.policy
    }

    pub fn insert(&mut self, id: VfId) -> Result<EntryHandle, RegistryError> {
        self.table.insert(id, &mut self.alloc, &self.profile)
    }

    /// Logically deletes every live VF and queues the zero-ref ones for
    /// release. Call [`World::drive_releases`] to make progress on them.
    pub fn delete_all(&mut self) -> usize {
        let (deleted, zeroed) = self.table.retire_all(&mut self.grace);
        self.releasing.extend(zeroed);
        deleted
    }

    /// True while releases are queued or a synchronous release is waiting.
    pub fn releasing(&self) -> bool {
        self.waiting.is_some() || !self.releasing.is_empty()
    }

    pub fn blocked_since(&self) -> Option<u64> {
        self.waiting.map(|w| w.since)
    }

    /// Total steps synchronous releases spent waiting for grace periods.
    pub fn sync_wait_steps(&self) -> u64 {
        self.sync_wait_steps
    }

    /// Releases queued entries in order until done or a synchronous release
    /// has to wait. Returns `true` once nothing is left in flight.
    pub fn drive_releases(&mut self, step: u64) -> Result<bool, GraceError> {
        self.releasing.extend(self.table.take_orphans());
        loop {
            if let Some(w) = self.waiting {
                if !self.grace.sync_ready(&w.ticket) {
                    return Ok(false);
                }
                grace::finish_release(
                    &mut self.table,
                    w.entry,
                    &w.ticket,
                    &self.grace,
                    &mut self.alloc,
                )?;
                self.sync_wait_steps += step - w.since;
                self.waiting = None;
            }
            let Some(entry) = self.releasing.pop_front() else {
                return Ok(true);
            };
            let out = grace::release(
                &mut self.table,
                entry,
                self.policy,
                &mut self.grace,
                &mut self.queue,
                &mut self.alloc,
            )?;
            if let ReleaseOutcome::AwaitingGrace(ticket) = out {
                self.waiting = Some(Waiting {
                    entry,
                    ticket,
                    since: step,
                });
            }
        }
    }

    pub fn reclaim_step(&mut self) -> Result<usize, GraceError> {
        grace::reclaim_step(
            &mut self.queue,
            &self.grace,
            &mut self.table,
            &mut self.alloc,
        )
    }

    pub fn timeline_row(&self, step: u64) -> TimelineRow {
        let s = self.alloc.snapshot_stats();
        TimelineRow {
            step,
            live_count: self.table.live_count(),
            pending_reclaim_bytes: self.queue.pending_bytes(),
            free_bytes: s.free_bytes,
            allocated_bytes: s.allocated_bytes,
            largest_free_order: s.largest_free_order,
            fragmentation_index: s.fragmentation_index,
        }
    }
}

/// How long a reader stays inside one read-side session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderSchedule {
    /// Actions per session; `None` never leaves.
    pub dwell: Option<u64>,
    /// Idle actions between sessions; 0 re-enters in the same action, so
    /// the read side is never quiescent.
    pub gap: u64,
}

/// A reader that keeps looking up random ids, touching one chain node per
/// action.
#[derive(Debug, Clone)]
pub struct ReaderActor {
    id: ReaderId,
    schedule: ReaderSchedule,
    id_space: u32,
    rng: ChaCha8Rng,
    session: Option<ReaderHandle>,
    actions_in_session: u64,
    idle_left: u64,
    walk: Option<Traversal>,
    pub lookups: u64,
    pub hits: u64,
}

impl ReaderActor {
    pub fn new(id: ReaderId, schedule: ReaderSchedule, id_space: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(id) + 1);
        Self {
            id,
            schedule,
            id_space: id_space.max(1),
            rng,
            session: None,
            actions_in_session: 0,
            idle_left: 0,
            walk: None,
            lookups: 0,
            hits: 0,
        }
    }

    pub fn id(&self) -> ReaderId {
        self.id
    }

    pub fn in_session(&self) -> bool {
        self.session.is_some()
    }

    /// Performs one action. Returns `true` if a session ended.
    pub fn act(&mut self, world: &mut World, step: u64) -> Result<bool, GraceError> {
        let Some(session) = self.session else {
            if self.idle_left > 0 {
                self.idle_left -= 1;
                return Ok(false);
            }
            self.enter(world, step)?;
            return Ok(false);
        };
        self.actions_in_session += 1;
        if self.walk.is_some() {
            self.touch(world, step)?;
            return Ok(false);
        }
        if self
            .schedule
            .dwell
            .is_some_and(|d| self.actions_in_session >= d)
        {
            world.grace.reader_exit(&session)?;
            self.session = None;
            if self.schedule.gap == 0 {
                self.enter(world, step)?;
            } else {
                self.idle_left = self.schedule.gap;
            }
            return Ok(true);
        }
        self.start_walk(world, step)?;
        Ok(false)
    }

    fn enter(&mut self, world: &mut World, step: u64) -> Result<(), GraceError> {
        self.session = Some(world.grace.reader_enter(self.id));
        self.actions_in_session = 0;
        self.start_walk(world, step)
    }

    fn start_walk(&mut self, world: &mut World, step: u64) -> Result<(), GraceError> {
        let session = self.session.expect("walks happen inside a session");
        let target = self.rng.random_range(0..self.id_space);
        let target = VfId::new(target & 0xffff)?;
        self.walk = Some(world.table.begin_lookup(target, &session));
        self.touch(world, step)
    }

    fn touch(&mut self, world: &mut World, step: u64) -> Result<(), GraceError> {
        let walk = self.walk.as_mut().expect("touch needs a walk");
        if let Some(out) = world.table.advance(walk, world.grace.current_epoch(), step) {
            self.walk = None;
            self.lookups += 1;
            if let Some(h) = out.hit_handle() {
                self.hits += 1;
                world.table.put(h)?;
            }
        }
        Ok(())
    }
}
