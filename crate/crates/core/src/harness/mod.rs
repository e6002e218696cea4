//! Stress experiments: the create/delete flood and creation spam.
//!
//! Deterministic mode runs every actor on one thread. Each step the
//! mutator, the readers and (on cadence) the reclaimer act once, in an
//! order shuffled by the seeded scheduler.

mod realtime;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocmodel::{AllocError, AllocProfile, ArenaConfig, OomReport};
use crate::exec::{self, Execution};
use crate::grace::{GraceError, ReclamationPolicy, UafEvent};
use crate::registry::{RegistryError, VfId, DEFAULT_BUCKET_ORDER, DEFAULT_CAPACITY};
use crate::world::{ReaderActor, ReaderSchedule, TimelineRow, World, WorldConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid churn config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Grace(#[from] GraceError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("realtime worker panicked")]
    WorkerPanicked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Mode {
    Deterministic { seed: u64 },
    Realtime,
}

impl Default for Mode {
    fn default() -> Self {
        Mode::Deterministic { seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChurnConfig {
    pub num_vfs: usize,
    pub iterations: u64,
    pub policy: ReclamationPolicy,
    pub reader_count: u32,
    /// Reader actions per session; `None` pins the reader forever.
    pub reader_dwell: Option<u64>,
    /// Idle reader actions between sessions.
    pub reader_gap: u64,
    pub reclaim_cadence: u64,
    pub profile: AllocProfile,
    pub arena: ArenaConfig,
    pub bucket_order: u32,
    pub capacity: usize,
    pub mode: Mode,
    /// Delete everything at the end of each iteration. Off means creation
    /// spam: `iterations * num_vfs` insert attempts with nothing deleted.
    pub interleave_create_delete: bool,
    pub timeline_stride: u64,
    pub max_steps: u64,
    /// Steps a synchronous release may wait before the run is declared
    /// stalled.
    pub stall_limit: u64,
}

impl Default for ChurnConfig {
    fn default() -> Self {
        Self {
            num_vfs: 64,
            iterations: 20,
            policy: ReclamationPolicy::Synchronous,
            reader_count: 1,
            reader_dwell: Some(16),
            reader_gap: 0,
            reclaim_cadence: 8,
            profile: AllocProfile::default(),
            arena: ArenaConfig::default(),
            bucket_order: DEFAULT_BUCKET_ORDER,
            capacity: DEFAULT_CAPACITY,
            mode: Mode::default(),
            interleave_create_delete: true,
            timeline_stride: 1,
            max_steps: 1_000_000,
            stall_limit: 10_000,
        }
    }
}

impl ChurnConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.interleave_create_delete && self.num_vfs > self.capacity {
            return Err(HarnessError::InvalidConfig(format!(
                "num_vfs {} exceeds table capacity {}",
                self.num_vfs, self.capacity
            )));
        }
        if self.num_vfs > usize::from(u16::MAX) + 1 {
            return Err(HarnessError::InvalidConfig(format!(
                "num_vfs {} exceeds the VF id space",
                self.num_vfs
            )));
        }
        if self.reclaim_cadence == 0 || self.timeline_stride == 0 {
            return Err(HarnessError::InvalidConfig(
                "reclaim_cadence and timeline_stride must be at least 1".into(),
            ));
        }
        if self.reader_dwell == Some(0) {
            return Err(HarnessError::InvalidConfig(
                "reader_dwell must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn world_config(&self) -> WorldConfig {
        WorldConfig {
            bucket_order: self.bucket_order,
            capacity: self.capacity,
            arena: self.arena,
            profile: self.profile,
            policy: self.policy,
        }
    }

    fn schedule(&self) -> ReaderSchedule {
        ReaderSchedule {
            dwell: self.reader_dwell,
            gap: self.reader_gap,
        }
    }

    /// Readers look up ids from a space twice the working set, so about
    /// half their walks miss.
    fn id_space(&self) -> u32 {
        (self.num_vfs as u32)
            .saturating_mul(2)
            .clamp(1, u32::from(u16::MAX) + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnReport {
    pub timeline: Vec<TimelineRow>,
    pub uaf_events: Vec<UafEvent>,
    pub oom: Option<OomReport>,
    pub completed_iterations: u64,
    pub capacity_errors: u64,
    pub steps: u64,
    /// A synchronous release waited longer than the stall limit.
    pub stalled: bool,
    pub sync_wait_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Creating(usize),
    Deleting,
    Draining,
    Done,
}

/// The single creator/deleter.
#[derive(Debug, Clone)]
struct Mutator {
    cfg: ChurnConfig,
    phase: Phase,
    attempts: u64,
    completed_iterations: u64,
    capacity_errors: u64,
    oom: Option<OomReport>,
    stalled: bool,
}

impl Mutator {
    fn new(cfg: &ChurnConfig) -> Self {
        let phase = if cfg.iterations == 0 {
            Phase::Done
        } else {
            Phase::Creating(0)
        };
        Self {
            cfg: *cfg,
            phase,
            attempts: 0,
            completed_iterations: 0,
            capacity_errors: 0,
            oom: None,
            stalled: false,
        }
    }

    fn finished(&self) -> bool {
        self.phase == Phase::Done || self.oom.is_some() || self.stalled
    }

    fn act(&mut self, world: &mut World, step: u64) -> Result<(), HarnessError> {
        match self.phase {
            Phase::Done => {}
            Phase::Creating(_) if self.cfg.num_vfs == 0 => {
                self.phase = if self.cfg.interleave_create_delete {
                    Phase::Deleting
                } else {
                    self.end_iteration()
                };
            }
            Phase::Creating(i) => {
                let id = if self.cfg.interleave_create_delete {
                    i as u32
                } else {
                    (self.attempts % (u64::from(u16::MAX) + 1)) as u32
                };
                self.attempts += 1;
                match world.insert(VfId::new(id)?) {
                    Ok(_) => {}
                    Err(RegistryError::CapacityExceeded { .. }) => self.capacity_errors += 1,
                    Err(RegistryError::Alloc(AllocError::AllocationFailure(r))) => {
                        self.oom = Some(r.with_step(step));
                        return Ok(());
                    }
                    Err(e) => return Err(e.into()),
                }
                self.phase = if i + 1 < self.cfg.num_vfs {
                    Phase::Creating(i + 1)
                } else if self.cfg.interleave_create_delete {
                    Phase::Deleting
                } else {
                    self.end_iteration()
                };
            }
            Phase::Deleting => {
                world.delete_all();
                self.drain(world, step)?;
            }
            Phase::Draining => self.drain(world, step)?,
        }
        Ok(())
    }

    fn drain(&mut self, world: &mut World, step: u64) -> Result<(), HarnessError> {
        if world.drive_releases(step)? {
            self.phase = self.end_iteration();
        } else {
            self.phase = Phase::Draining;
            if world
                .blocked_since()
                .is_some_and(|since| step - since >= self.cfg.stall_limit)
            {
                self.stalled = true;
            }
        }
        Ok(())
    }

    fn end_iteration(&mut self) -> Phase {
        self.completed_iterations += 1;
        if self.completed_iterations >= self.cfg.iterations {
            Phase::Done
        } else {
            Phase::Creating(0)
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Actor {
    Mutator,
    Reader(usize),
    Reclaimer,
}

pub fn run_churn(cfg: &ChurnConfig) -> Result<ChurnReport, HarnessError> {
    cfg.validate()?;
    match cfg.mode {
        Mode::Deterministic { seed } => run_deterministic(cfg, seed),
        Mode::Realtime => realtime::run(cfg),
    }
}

/// Insert attempts only, never deleting.
pub fn run_creation_spam(cfg: &ChurnConfig) -> Result<ChurnReport, HarnessError> {
    run_churn(&ChurnConfig {
        interleave_create_delete: false,
        ..*cfg
    })
}

fn run_deterministic(cfg: &ChurnConfig, seed: u64) -> Result<ChurnReport, HarnessError> {
    let mut world = World::new(&cfg.world_config())?;
    let mut mutator = Mutator::new(cfg);
    let mut readers: Vec<_> = (0..cfg.reader_count)
        .map(|r| ReaderActor::new(r, cfg.schedule(), cfg.id_space(), seed))
        .collect();
    let mut sched = ChaCha8Rng::seed_from_u64(seed);
    let mut timeline = Vec::new();
    let mut order = Vec::with_capacity(readers.len() + 2);
    let mut step = 0;

    while !mutator.finished() && step < cfg.max_steps {
        order.clear();
        order.push(Actor::Mutator);
        order.extend((0..readers.len()).map(Actor::Reader));
        if step > 0 && step % cfg.reclaim_cadence == 0 {
            order.push(Actor::Reclaimer);
        }
        order.shuffle(&mut sched);
        for &actor in &order {
            match actor {
                Actor::Mutator => mutator.act(&mut world, step)?,
                Actor::Reader(r) => {
                    readers[r].act(&mut world, step)?;
                }
                Actor::Reclaimer => {
                    world.reclaim_step()?;
                }
            }
            // a mutator that stops mid-step ends the run at this step
            if mutator.oom.is_some() || mutator.stalled {
                break;
            }
        }
        if step % cfg.timeline_stride == 0 {
            timeline.push(world.timeline_row(step));
        }
        step += 1;
    }

    Ok(ChurnReport {
        timeline,
        uaf_events: world.table.uaf_events().to_vec(),
        oom: mutator.oom,
        completed_iterations: mutator.completed_iterations,
        capacity_errors: mutator.capacity_errors,
        steps: step,
        stalled: mutator.stalled,
        sync_wait_steps: world.sync_wait_steps(),
    })
}

/// Runs one churn per seed. Deterministic mode only.
pub fn sweep_churn(
    cfg: &ChurnConfig,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<ChurnReport>, HarnessError> {
    exec::map_slice(seeds, exec, |&seed| {
        run_churn(&ChurnConfig {
            mode: Mode::Deterministic { seed },
            ..*cfg
        })
    })
    .into_iter()
    .collect()
}

pub fn write_timeline_csv<W: Write>(w: W, rows: &[TimelineRow]) -> Result<(), HarnessError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "step",
        "live_count",
        "pending_reclaim_bytes",
        "free_bytes",
        "allocated_bytes",
        "largest_free_order",
        "fragmentation_index",
    ])?;
    for r in rows {
        wr.write_record([
            r.step.to_string(),
            r.live_count.to_string(),
            r.pending_reclaim_bytes.to_string(),
            r.free_bytes.to_string(),
            r.allocated_bytes.to_string(),
            r.largest_free_order
                .map(|o| o.to_string())
                .unwrap_or_default(),
            format!("{:.6}", r.fragmentation_index),
        ])?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    schema_version: u32,
    policy: ReclamationPolicy,
    mode: Mode,
    steps: u64,
    completed_iterations: u64,
    capacity_errors: u64,
    stalled: bool,
    sync_wait_steps: u64,
    uaf_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    oom: Option<&'a OomReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    last_row: Option<&'a TimelineRow>,
    uaf_events: &'a [UafEvent],
}

/// JSON summary of a run, without the timeline.
pub fn summary_json(cfg: &ChurnConfig, report: &ChurnReport) -> Result<String, HarnessError> {
    let s = Summary {
        schema_version: SCHEMA_VERSION,
        policy: cfg.policy,
        mode: cfg.mode,
        steps: report.steps,
        completed_iterations: report.completed_iterations,
        capacity_errors: report.capacity_errors,
        stalled: report.stalled,
        sync_wait_steps: report.sync_wait_steps,
        uaf_count: report.uaf_events.len(),
        oom: report.oom.as_ref(),
        last_row: report.timeline.last(),
        uaf_events: &report.uaf_events,
    };
    let mut out = serde_json::to_string_pretty(&s)?;
    out.push('\n');
    Ok(out)
}
