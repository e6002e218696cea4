//! Lookup timing: the instrumented probe loop, its clocks, and the kernel
//! log format the instrumentation prints.
//!
//! The deterministic clock prices a lookup from its traversal events:
//!
//! ```text
//! duration = enter + nodes_traversed * node + (refcount read ? kref : 0) + exit
//! ```
//!
//! plus optional Gaussian jitter clamped at zero. The refcount is read
//! whenever the walk reaches a matching node that is still resident, which
//! is always the case for a hit.

use std::io::{Read, Write};
use std::sync::LazyLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grace::{GraceClock, GraceError, ReaderId};
use crate::registry::{self, LookupOutcome, RegistryError, VfId, VfTable};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: not a timing record: {text:?}")]
    Parse { line: usize, text: String },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Grace(#[from] GraceError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub enter: u64,
    pub node: u64,
    pub kref: u64,
    pub exit: u64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            enter: 2,
            node: 30,
            kref: 56,
            exit: 2,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl CostModel {
    /// Noise-free cost of a walk.
    pub fn base_cost(&self, nodes_traversed: u32, refcount_probed: bool) -> u64 {
        self.enter
            + u64::from(nodes_traversed) * self.node
            + if refcount_probed { self.kref } else { 0 }
            + self.exit
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub enum ClockSource {
    Deterministic {
        model: CostModel,
        rng: Box<ChaCha8Rng>,
    },
    /// Host monotonic clock, nanoseconds.
    Wallclock,
}

#[derive(Debug, Clone, Copy)]
pub struct ClockStart(Option<Instant>);

impl ClockSource {
    pub fn deterministic(model: CostModel) -> Self {
        ClockSource::Deterministic {
            rng: Box::new(ChaCha8Rng::seed_from_u64(model.seed)),
            model,
        }
    }

    pub fn wallclock() -> Self {
        ClockSource::Wallclock
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, ClockSource::Deterministic { .. })
    }

    pub fn start(&self) -> ClockStart {
        match self {
            ClockSource::Deterministic { .. } => ClockStart(None),
            ClockSource::Wallclock => ClockStart(Some(Instant::now())),
        }
    }

    pub fn finish(&mut self, start: ClockStart, out: &LookupOutcome) -> u64 {
        match self {
            ClockSource::Deterministic { model, rng } => {
                let base = model.base_cost(out.nodes_traversed, out.refcount_probed);
                if model.noise_sigma > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    (base as f64 + model.noise_sigma * z).round().max(0.0) as u64
                } else {
                    base
                }
            }
            ClockSource::Wallclock => start.0.map_or(0, |t| {
                t.elapsed().as_nanos().min(u128::from(u64::MAX)) as u64
            }),
        }
    }
}

/// One lookup measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingSample {
    pub id: VfId,
    pub hit: bool,
    pub duration: u64,
    pub cycle: u32,
    pub rep: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub ids: Vec<VfId>,
    pub cycles: u32,
    pub reps: u32,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            ids: (1..=16).map(VfId::from).collect(),
            cycles: 2,
            reps: 5,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.cycles == 0 || self.reps == 0 {
            return Err(ProbeError::InvalidConfig(
                "cycles and reps must both be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// The instrumented loop: for every cycle, id and rep, enter a read-side
/// session, look the id up, record the sample and leave. A hit's reference
/// is dropped after the session ends.
pub fn probe_range(
    table: &mut VfTable,
    grace: &mut GraceClock,
    cfg: &ProbeConfig,
    clock: &mut ClockSource,
    reader: ReaderId,
) -> Result<Vec<TimingSample>, ProbeError> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.ids.len() * (cfg.cycles * cfg.reps) as usize);
    for cycle in 0..cfg.cycles {
        for &id in &cfg.ids {
            for rep in 0..cfg.reps {
                let session = grace.reader_enter(reader);
                let (out, mut sample) = registry::lookup(table, id, &session, clock, grace)?;
                grace.reader_exit(&session)?;
                if let Some(h) = out.hit_handle() {
                    table.put(h)?;
                }
                sample.cycle = cycle;
                sample.rep = rep;
                samples.push(sample);
            }
        }
    }
    Ok(samples)
}

static LINE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"ice_get_vf_by_id: VF ID (\d+) (present|absent), lookup took (\d+) clock cycles")
        .expect("static regex")
});

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedLog {
    pub samples: Vec<TimingSample>,
    /// Non-blank lines that carried no timing record.
    pub skipped: usize,
}

/// Parses `present`/`absent` timing lines. Lines may carry a dmesg prefix.
///
/// `cycle` and `rep` are not in the log; they are rebuilt from line order
/// the way the probe loop emits them: `rep` counts within a run of equal
/// consecutive ids and `cycle` counts earlier runs of the same id. A probe
/// over a single id reads back as one cycle.
pub fn parse_timing_log(text: &str, strict: bool) -> Result<ParsedLog, ProbeError> {
    let mut out = ParsedLog::default();
    let mut runs: std::collections::HashMap<VfId, u32> = Default::default();
    let mut prev: Option<(VfId, u32)> = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = LINE_RE.captures(line).and_then(|c| {
            let id = c[1].parse::<u32>().ok().and_then(|v| VfId::new(v).ok())?;
            let duration = c[3].parse::<u64>().ok()?;
            Some((id, &c[2] == "present", duration))
        });
        let Some((id, hit, duration)) = parsed else {
            if strict {
                return Err(ProbeError::Parse {
                    line: n + 1,
                    text: line.to_string(),
                });
            }
            out.skipped += 1;
            continue;
        };
        let rep = match prev {
            Some((p, r)) if p == id => r + 1,
            _ => {
                *runs.entry(id).or_insert(0) += 1;
                0
            }
        };
        prev = Some((id, rep));
        out.samples.push(TimingSample {
            id,
            hit,
            duration,
            cycle: runs[&id] - 1,
            rep,
        });
    }
    Ok(out)
}

pub fn format_timing_line(s: &TimingSample) -> String {
    format!(
        "ice_get_vf_by_id: VF ID {} {}, lookup took {} clock cycles",
        s.id,
        if s.hit { "present" } else { "absent" },
        s.duration
    )
}

pub fn emit_timing_log(samples: &[TimingSample]) -> String {
    let mut text = String::new();
    for s in samples {
        text.push_str(&format_timing_line(s));
        text.push('\n');
    }
    text
}

/// CSV columns: `id,hit,duration,cycle,rep`.
pub fn write_samples_csv<W: Write>(w: W, samples: &[TimingSample]) -> Result<(), ProbeError> {
    let mut wr = csv::Writer::from_writer(w);
    for s in samples {
        wr.serialize(s)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(r: R) -> Result<Vec<TimingSample>, ProbeError> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(ProbeError::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocmodel::{AllocProfile, ArenaConfig, BuddyAllocator};

    fn id(v: u16) -> VfId {
        VfId::from(v)
    }

    fn table_with(order: u32, ids: &[u16]) -> VfTable {
        let mut t = VfTable::new(order, 64).unwrap();
        let mut a = BuddyAllocator::new(ArenaConfig::default()).unwrap();
        for &i in ids {
            t.insert(id(i), &mut a, &AllocProfile::default()).unwrap();
        }
        t
    }

    #[test]
    fn probe_count_and_order() {
        let mut t = table_with(3, &[]);
        let mut g = GraceClock::new();
        let mut clock = ClockSource::deterministic(CostModel::default());
        let s = probe_range(&mut t, &mut g, &ProbeConfig::default(), &mut clock, 0).unwrap();
        assert_eq!(s.len(), 2 * 16 * 5);
        assert_eq!((s[0].id, s[0].cycle, s[0].rep), (id(1), 0, 0));
        assert_eq!((s[159].id, s[159].cycle, s[159].rep), (id(16), 1, 4));
        assert_eq!(g.active_count(), 0);
    }

    #[test]
    fn occupied_depth_one_is_90() {
        let mut t = table_with(3, &[3]);
        let mut g = GraceClock::new();
        let mut clock = ClockSource::deterministic(CostModel::default());
        let cfg = ProbeConfig {
            ids: vec![id(3)],
            ..Default::default()
        };
        let s = probe_range(&mut t, &mut g, &cfg, &mut clock, 0).unwrap();
        assert!(s.iter().all(|s| s.hit && s.duration == 90));
        // every hit reference was dropped again
        let h = t.find_live(id(3)).unwrap();
        assert_eq!(t.entry(h).unwrap().refcount, 1);
    }

    #[test]
    fn empty_range_and_bad_config() {
        let mut t = table_with(3, &[]);
        let mut g = GraceClock::new();
        let mut clock = ClockSource::deterministic(CostModel::default());
        let cfg = ProbeConfig {
            ids: vec![],
            ..Default::default()
        };
        assert!(probe_range(&mut t, &mut g, &cfg, &mut clock, 0)
            .unwrap()
            .is_empty());
        let bad = ProbeConfig {
            reps: 0,
            ..Default::default()
        };
        assert!(matches!(
            probe_range(&mut t, &mut g, &bad, &mut clock, 0),
            Err(ProbeError::InvalidConfig(_))
        ));
    }

    #[test]
    fn noise_is_seeded() {
        let run = |seed| {
            let mut t = table_with(3, &[1]);
            let mut g = GraceClock::new();
            let mut clock =
                ClockSource::deterministic(CostModel::default().with_noise(25.0).with_seed(seed));
            probe_range(&mut t, &mut g, &ProbeConfig::default(), &mut clock, 0).unwrap()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn parses_present_and_absent_lines() {
        let log = parse_timing_log(
            "ice_get_vf_by_id: VF ID 3 present, lookup took 6147 clock cycles\n\
             ice_get_vf_by_id: VF ID 7 absent, lookup took 87 clock cycles\n",
            true,
        )
        .unwrap();
        assert_eq!(
            log.samples,
            vec![
                TimingSample {
                    id: id(3),
                    hit: true,
                    duration: 6147,
                    cycle: 0,
                    rep: 0
                },
                TimingSample {
                    id: id(7),
                    hit: false,
                    duration: 87,
                    cycle: 0,
                    rep: 0
                },
            ]
        );
    }

    #[test]
    fn dmesg_prefix_is_accepted() {
        let log = parse_timing_log(
            "[ 1234.567890] ice_get_vf_by_id: VF ID 2 present, lookup took 5910 clock cycles",
            true,
        )
        .unwrap();
        assert_eq!(log.samples.len(), 1);
    }

    #[test]
    fn strict_mode_reports_line() {
        match parse_timing_log("garbage", true) {
            Err(ProbeError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        let lenient = parse_timing_log(
            "garbage\n\nice_get_vf_by_id: VF ID 1 absent, lookup took 5 clock cycles",
            false,
        )
        .unwrap();
        assert_eq!((lenient.samples.len(), lenient.skipped), (1, 1));
    }

    #[test]
    fn out_of_range_id_is_not_a_record() {
        assert!(parse_timing_log(
            "ice_get_vf_by_id: VF ID 70000 present, lookup took 1 clock cycles",
            true
        )
        .is_err());
    }

    #[test]
    fn emit_exact_line() {
        let s = TimingSample {
            id: id(3),
            hit: true,
            duration: 6147,
            cycle: 0,
            rep: 0,
        };
        assert_eq!(
            emit_timing_log(&[s]),
            "ice_get_vf_by_id: VF ID 3 present, lookup took 6147 clock cycles\n"
        );
        assert_eq!(emit_timing_log(&[]), "");
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        let s = TimingSample {
            id: id(3),
            hit: false,
            duration: 4,
            cycle: 1,
            rep: 2,
        };
        write_samples_csv(&mut buf, &[s]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "id,hit,duration,cycle,rep\n3,false,4,1,2\n");
        assert_eq!(read_samples_csv(buf.as_slice()).unwrap(), vec![s]);
    }
}
