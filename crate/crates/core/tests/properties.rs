use proptest::prelude::*;

use vflab::analyze::{self, ClassifierConfig};
use vflab::harness::{self, ChurnConfig, Mode};
use vflab::probe::{self, ClockSource, CostModel, ProbeConfig, TimingSample};
use vflab::registry::{self, EntryState};
use vflab::{ReclamationPolicy, VfId, World, WorldConfig};

#[derive(Debug, Clone)]
enum Op {
    Insert(u16),
    DeleteAll,
    Lookup(u16),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0u16..40).prop_map(Op::Insert),
        1 => Just(Op::DeleteAll),
        4 => (0u16..40).prop_map(Op::Lookup),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    /// The table agrees with a plain list of live ids in insertion order.
    #[test]
    fn table_matches_list_model(order in 0u32..4, ops in prop::collection::vec(op(), 1..120)) {
        let mut cfg = WorldConfig::new(ReclamationPolicy::Synchronous);
        cfg.bucket_order = order;
        cfg.capacity = 24;
        let mut w = World::new(&cfg).unwrap();
        let mut model: Vec<u16> = Vec::new();
        let mut clock = ClockSource::deterministic(CostModel::default());
        let cost = CostModel::default();
        let mask = (1u16 << order) - 1;

        for op in ops {
            match op {
                Op::Insert(v) => {
                    let r = w.insert(VfId::from(v));
                    if model.contains(&v) {
                        prop_assert!(r.is_err());
                    } else if model.len() >= 24 {
                        let capacity_hit = matches!(r, Err(registry::RegistryError::CapacityExceeded { .. }));
                        prop_assert!(capacity_hit);
                    } else {
                        prop_assert!(r.is_ok());
                        model.push(v);
                    }
                }
                Op::DeleteAll => {
                    prop_assert_eq!(w.delete_all(), model.len());
                    prop_assert!(w.drive_releases(0).unwrap());
                    model.clear();
                }
                Op::Lookup(v) => {
                    let session = w.grace.reader_enter(0);
                    let (out, sample) = registry::lookup(&mut w.table, VfId::from(v), &session, &mut clock, &w.grace).unwrap();
                    w.grace.reader_exit(&session).unwrap();
                    let same_bucket: Vec<u16> = model.iter().copied().filter(|&x| x & mask == v & mask).collect();
                    match same_bucket.iter().position(|&x| x == v) {
                        Some(pos) => {
                            prop_assert!(out.is_hit());
                            prop_assert_eq!(out.nodes_traversed as usize, pos + 1);
                            prop_assert_eq!(sample.duration, cost.base_cost(pos as u32 + 1, true));
                            w.table.put(out.hit_handle().unwrap()).unwrap();
                        }
                        None => {
                            prop_assert!(!out.is_hit());
                            prop_assert_eq!(out.nodes_traversed as usize, same_bucket.len());
                            prop_assert_eq!(sample.duration, cost.base_cost(same_bucket.len() as u32, false));
                        }
                    }
                }
            }
            let mut live: Vec<u16> = w.table.live_ids().iter().map(|i| i.get()).collect();
            let mut want = model.clone();
            live.sort_unstable();
            want.sort_unstable();
            prop_assert_eq!(live, want);
            // a live entry holds exactly its base reference between operations
            for (_, e) in w.table.entries() {
                if e.state == EntryState::Live {
                    prop_assert_eq!(e.refcount, 1);
                }
            }
        }
        prop_assert!(w.table.uaf_events().is_empty());
    }

    /// Multiplying every average by the same positive factor leaves the
    /// verdicts unchanged.
    #[test]
    fn classification_is_scale_invariant(
        avgs in prop::collection::vec(1.0f64..10_000.0, 10),
        k in 0.01f64..100.0,
    ) {
        let cfg = ClassifierConfig::with_calibration((6..=10).map(VfId::from).collect());
        let base: Vec<_> = avgs.iter().enumerate().map(|(i, &a)| (VfId::from(i as u16 + 1), a, 1)).collect();
        let scaled: Vec<_> = base.iter().map(|&(id, a, n)| (id, a * k, n)).collect();
        let a = analyze::classify_averages(&base, &cfg).unwrap();
        let b = analyze::classify_averages(&scaled, &cfg).unwrap();
        // skip draws sitting on a threshold, where rounding decides
        let near_edge = base.iter().any(|&(_, x, _)| {
            [cfg.occupied_ratio, cfg.uncertain_ratio]
                .iter()
                .any(|r| ((x / a.baseline) / r - 1.0).abs() < 1e-9)
        });
        prop_assume!(!near_edge);
        let sa: Vec<_> = a.rows.iter().map(|r| r.status).collect();
        let sb: Vec<_> = b.rows.iter().map(|r| r.status).collect();
        prop_assert_eq!(sa, sb);
    }

    /// Logs written in probe order parse back to the same samples. With a
    /// single id, cycles and reps cannot be told apart, so at least two.
    #[test]
    fn probe_order_logs_round_trip(
        ids in prop::collection::btree_set(any::<u16>(), 2..8),
        cycles in 1u32..4,
        reps in 1u32..6,
        seed in any::<u64>(),
    ) {
        let mut n = seed;
        let mut samples = Vec::new();
        for cycle in 0..cycles {
            for &id in &ids {
                for rep in 0..reps {
                    n = n.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    samples.push(TimingSample { id: VfId::from(id), hit: n & 1 == 1, duration: n >> 8, cycle, rep });
                }
            }
        }
        let back = probe::parse_timing_log(&probe::emit_timing_log(&samples), true).unwrap();
        prop_assert_eq!(back.samples, samples);
    }

    /// Probe output has one row per (cycle, id, rep) and never leaks a
    /// reference.
    #[test]
    fn probe_counts_and_refs(occupied in prop::collection::btree_set(0u16..32, 0..10), cycles in 1u32..3, reps in 1u32..4) {
        let mut cfg = WorldConfig::new(ReclamationPolicy::Synchronous);
        cfg.bucket_order = 3;
        let mut w = World::new(&cfg).unwrap();
        for &v in &occupied {
            w.insert(VfId::from(v)).unwrap();
        }
        let pc = ProbeConfig { ids: (0..32).map(VfId::from).collect(), cycles, reps };
        let mut clock = ClockSource::deterministic(CostModel::default());
        let s = probe::probe_range(&mut w.table, &mut w.grace, &pc, &mut clock, 0).unwrap();
        prop_assert_eq!(s.len(), (32 * cycles * reps) as usize);
        for x in &s {
            prop_assert_eq!(x.hit, occupied.contains(&x.id.get()));
        }
        prop_assert!(w.table.entries().all(|(_, e)| e.refcount == 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    /// Synchronous release never lets a reader touch freed memory, and
    /// never leaves a reclaim backlog.
    #[test]
    fn synchronous_is_safe(seed in any::<u64>(), readers in 1u32..5, dwell in 1u64..24, gap in 0u64..3, order in 0u32..4) {
        let cfg = ChurnConfig {
            policy: ReclamationPolicy::Synchronous,
            num_vfs: 16,
            iterations: 4,
            reader_count: readers,
            reader_dwell: Some(dwell),
            reader_gap: gap,
            bucket_order: order,
            mode: Mode::Deterministic { seed },
            ..ChurnConfig::default()
        };
        let r = harness::run_churn(&cfg).unwrap();
        prop_assert!(r.uaf_events.is_empty());
        prop_assert!(r.oom.is_none());
        prop_assert_eq!(r.completed_iterations, 4);
        prop_assert!(r.timeline.iter().all(|row| row.pending_reclaim_bytes == 0));
    }

    /// Deferred reclamation is also safe; it only holds memory longer.
    #[test]
    fn deferred_is_safe(seed in any::<u64>(), readers in 1u32..5, dwell in 1u64..24, gap in 0u64..3) {
        let cfg = ChurnConfig {
            policy: ReclamationPolicy::DeferredCallback,
            num_vfs: 16,
            iterations: 4,
            reader_count: readers,
            reader_dwell: Some(dwell),
            reader_gap: gap,
            mode: Mode::Deterministic { seed },
            ..ChurnConfig::default()
        };
        let r = harness::run_churn(&cfg).unwrap();
        prop_assert!(r.uaf_events.is_empty());
        for row in &r.timeline {
            prop_assert_eq!(row.free_bytes + row.allocated_bytes, 16 << 20);
        }
    }

    /// Any run that stops at an allocation failure shows free memory
    /// without a large enough block.
    #[test]
    fn oom_has_fragmentation_signature(seed in any::<u64>(), readers in 1u32..4) {
        let cfg = ChurnConfig {
            policy: ReclamationPolicy::DeferredCallback,
            reader_count: readers,
            iterations: 40,
            mode: Mode::Deterministic { seed },
            ..ChurnConfig::default()
        };
        let r = harness::run_churn(&cfg).unwrap();
        let oom = r.oom.expect("back-to-back readers pin every deferred free");
        prop_assert!(oom.largest_free_order_at_failure.is_none_or(|k| k < cfg.profile.big_order));
        prop_assert_eq!(r.timeline.last().unwrap().step, oom.step);
        prop_assert!(r.timeline.windows(2).all(|w| w[0].pending_reclaim_bytes <= w[1].pending_reclaim_bytes));
    }

    /// Creation spam never exhausts memory: the capacity gate fires first.
    #[test]
    fn spam_never_ooms(capacity in 0usize..80, iterations in 0u64..12, seed in any::<u64>()) {
        let cfg = ChurnConfig {
            capacity,
            iterations,
            mode: Mode::Deterministic { seed },
            ..ChurnConfig::default()
        };
        let r = harness::run_creation_spam(&cfg).unwrap();
        let attempts = iterations * 64;
        prop_assert!(r.oom.is_none());
        prop_assert_eq!(r.capacity_errors, attempts.saturating_sub(capacity as u64));
    }
}
