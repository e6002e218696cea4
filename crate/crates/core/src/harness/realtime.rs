//! Thread-per-actor variant. All actors share one world behind a mutex, so
//! only the interleaving is left to the OS scheduler. Steps are counted in
//! mutator actions.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;
use std::thread;

use super::{ChurnConfig, ChurnReport, HarnessError, Mutator};
use crate::world::{ReaderActor, World};

struct Shared {
    world: World,
    timeline: Vec<crate::world::TimelineRow>,
}

pub(super) fn run(cfg: &ChurnConfig) -> Result<ChurnReport, HarnessError> {
    let shared = Mutex::new(Shared {
        world: World::new(&cfg.world_config())?,
        timeline: Vec::new(),
    });
    let stop = AtomicBool::new(false);
    let step = AtomicU64::new(0);
    let seed = thread_seed();

    let result = thread::scope(|s| {
        let readers: Vec<_> = (0..cfg.reader_count)
            .map(|r| {
                let (shared, stop, step) = (&shared, &stop, &step);
                s.spawn(move || -> Result<(), HarnessError> {
                    let mut actor = ReaderActor::new(r, cfg.schedule(), cfg.id_space(), seed);
                    while !stop.load(Ordering::Acquire) {
                        let mut g = shared.lock().expect("world lock");
                        actor.act(&mut g.world, step.load(Ordering::Acquire))?;
                        drop(g);
                        thread::yield_now();
                    }
                    Ok(())
                })
            })
            .collect();

        let reclaimer = {
            let (shared, stop, step) = (&shared, &stop, &step);
            s.spawn(move || -> Result<(), HarnessError> {
                let mut last = 0;
                while !stop.load(Ordering::Acquire) {
                    let now = step.load(Ordering::Acquire);
                    if now >= last + cfg.reclaim_cadence {
                        last = now;
                        shared.lock().expect("world lock").world.reclaim_step()?;
                    }
                    thread::yield_now();
                }
                Ok(())
            })
        };

        let mutator = {
            let (shared, stop, step) = (&shared, &stop, &step);
            s.spawn(move || -> Result<Mutator, HarnessError> {
                let mut m = Mutator::new(cfg);
                let out = (|| {
                    while !m.finished() {
                        let now = step.load(Ordering::Acquire);
                        if now >= cfg.max_steps {
                            break;
                        }
                        let mut g = shared.lock().expect("world lock");
                        m.act(&mut g.world, now)?;
                        if now % cfg.timeline_stride == 0 {
                            let row = g.world.timeline_row(now);
                            g.timeline.push(row);
                        }
                        drop(g);
                        step.store(now + 1, Ordering::Release);
                        thread::yield_now();
                    }
                    Ok(())
                })();
                stop.store(true, Ordering::Release);
                out.map(|()| m)
            })
        };

        let m = mutator.join().map_err(|_| HarnessError::WorkerPanicked)?;
        stop.store(true, Ordering::Release);
        for r in readers {
            r.join().map_err(|_| HarnessError::WorkerPanicked)??;
        }
        reclaimer
            .join()
            .map_err(|_| HarnessError::WorkerPanicked)??;
        m
    })?;

    let Shared { world, timeline } = shared.into_inner().expect("world lock");
    Ok(ChurnReport {
        timeline,
        uaf_events: world.table.uaf_events().to_vec(),
        oom: result.oom,
        completed_iterations: result.completed_iterations,
        capacity_errors: result.capacity_errors,
        steps: step.into_inner(),
        stalled: result.stalled,
        sync_wait_steps: world.sync_wait_steps(),
    })
}

fn thread_seed() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::super::{run_churn, Mode};
    use super::*;
    use crate::grace::ReclamationPolicy;

    #[test]
    fn sync_realtime_is_safe() {
        let cfg = ChurnConfig {
            iterations: 3,
            reader_count: 3,
            policy: ReclamationPolicy::Synchronous,
            mode: Mode::Realtime,
            ..ChurnConfig::default()
        };
        let r = run_churn(&cfg).unwrap();
        assert!(r.uaf_events.is_empty());
        assert!(r.oom.is_none());
        assert_eq!(r.completed_iterations, 3);
    }
}
