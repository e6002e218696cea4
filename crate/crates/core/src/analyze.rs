//! From timing samples to verdicts: occupancy classification, win-rate
//! regression, stale-window measurement and collision profiles.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::grace::{GraceClock, GraceError, ReaderId, ReclamationPolicy};
use crate::probe::{self, ClockSource, CostModel, ProbeConfig, ProbeError, TimingSample};
use crate::registry::{RegistryError, VfId, VfTable};
use crate::world::World;

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("no samples to analyze")]
    NoSamples,
    #[error("baseline cannot be derived: {0}")]
    NoBaseline(String),
    #[error("invalid classifier config: {0}")]
    InvalidConfig(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("ids do not share one bucket: {0:?}")]
    NotColliding(Vec<VfId>),
    #[error("VF {0} is not live")]
    NotLive(VfId),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Grace(#[from] GraceError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Mean of the per-id averages of ids known to be unoccupied.
    CalibrationIds(Vec<VfId>),
    /// Quantile `q` in `[0, 1]` of all per-id averages.
    GlobalMinimumQuantile(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub baseline: BaselineMode,
    pub occupied_ratio: f64,
    pub uncertain_ratio: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            baseline: BaselineMode::CalibrationIds((6..=10).map(VfId::from).collect()),
            occupied_ratio: 20.0,
            uncertain_ratio: 1.5,
        }
    }
}

impl ClassifierConfig {
    pub fn with_calibration(ids: Vec<VfId>) -> Self {
        Self {
            baseline: BaselineMode::CalibrationIds(ids),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AnalyzeError> {
        let ok = self.uncertain_ratio >= 1.0 && self.occupied_ratio > self.uncertain_ratio;
        if !ok {
            return Err(AnalyzeError::InvalidConfig(format!(
                "need occupied_ratio > uncertain_ratio >= 1 (got {} and {})",
                self.occupied_ratio, self.uncertain_ratio
            )));
        }
        if let BaselineMode::GlobalMinimumQuantile(q) = self.baseline {
            if !(0.0..=1.0).contains(&q) {
                return Err(AnalyzeError::InvalidConfig(format!(
                    "quantile {q} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Occupancy {
    Occupied,
    Unoccupied,
    Uncertain,
}

impl fmt::Display for Occupancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Occupancy::Occupied => "occupied",
            Occupancy::Unoccupied => "unoccupied",
            Occupancy::Uncertain => "uncertain",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyRow {
    pub id: VfId,
    pub avg_duration: f64,
    pub samples: usize,
    pub status: Occupancy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyReport {
    pub rows: Vec<OccupancyRow>,
    pub baseline: f64,
}

impl OccupancyReport {
    pub fn status(&self, id: VfId) -> Option<Occupancy> {
        self.rows.iter().find(|r| r.id == id).map(|r| r.status)
    }

    /// The analyzer's results table.
    pub fn render_table(&self) -> String {
        let mut out = String::from("VF ID   Avg Cycles   Occupancy Status\n-----\n");
        for r in &self.rows {
            let avg = format!("{:.2}", r.avg_duration);
            let _ = writeln!(out, "{:<8}{:<13}{}", r.id, avg, r.status);
        }
        out
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["id", "avg_duration", "samples", "status"])?;
        for r in &self.rows {
            wr.write_record([
                r.id.to_string(),
                format!("{:.2}", r.avg_duration),
                r.samples.to_string(),
                r.status.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn status_for(avg: f64, baseline: f64, cfg: &ClassifierConfig) -> Occupancy {
    if avg >= cfg.occupied_ratio * baseline {
        Occupancy::Occupied
    } else if avg >= cfg.uncertain_ratio * baseline {
        Occupancy::Uncertain
    } else {
        Occupancy::Unoccupied
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Classifies already-averaged durations, one entry per id.
pub fn classify_averages(
    averages: &[(VfId, f64, usize)],
    cfg: &ClassifierConfig,
) -> Result<OccupancyReport, AnalyzeError> {
    cfg.validate()?;
    if averages.is_empty() {
        return Err(AnalyzeError::NoSamples);
    }
    let baseline = match &cfg.baseline {
        BaselineMode::CalibrationIds(ids) => {
            let cal: Vec<f64> = averages
                .iter()
                .filter(|(id, _, _)| ids.contains(id))
                .map(|&(_, avg, _)| avg)
                .collect();
            if cal.is_empty() {
                return Err(AnalyzeError::NoBaseline(
                    "none of the calibration ids were sampled".into(),
                ));
            }
            cal.iter().sum::<f64>() / cal.len() as f64
        }
        BaselineMode::GlobalMinimumQuantile(q) => {
            let mut all: Vec<f64> = averages.iter().map(|&(_, a, _)| a).collect();
            all.sort_by(f64::total_cmp);
            quantile(&all, *q)
        }
    };
    if !(baseline.is_finite() && baseline > 0.0) {
        return Err(AnalyzeError::NoBaseline(format!(
            "baseline {baseline} is not positive"
        )));
    }
    let mut rows: Vec<_> = averages
        .iter()
        .map(|&(id, avg, n)| OccupancyRow {
            id,
            avg_duration: avg,
            samples: n,
            status: status_for(avg, baseline, cfg),
        })
        .collect();
    rows.sort_by_key(|r| r.id);
    Ok(OccupancyReport { rows, baseline })
}

pub fn per_id_averages(samples: &[TimingSample]) -> Vec<(VfId, f64, usize)> {
    let mut acc: BTreeMap<VfId, (u128, usize)> = BTreeMap::new();
    for s in samples {
        let e = acc.entry(s.id).or_default();
        e.0 += u128::from(s.duration);
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(id, (sum, n))| (id, sum as f64 / n as f64, n))
        .collect()
}

pub fn classify(
    samples: &[TimingSample],
    cfg: &ClassifierConfig,
) -> Result<OccupancyReport, AnalyzeError> {
    if samples.is_empty() {
        return Err(AnalyzeError::NoSamples);
    }
    classify_averages(&per_id_averages(samples), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressParams {
    pub group_a: Vec<VfId>,
    pub candidate_pool: Vec<VfId>,
    pub group_size: usize,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub trials: usize,
    pub wins_a: usize,
    pub win_rate: f64,
}

/// Repeated group comparison. Each trial draws one fresh measurement per
/// id from that id's samples: a mean over `group_a` against a mean over
/// `group_size` distinct ids drawn from the pool. Ties count as losses.
pub fn regress_compare(
    samples: &[TimingSample],
    params: &RegressParams,
    exec: Execution,
) -> Result<RegressionReport, AnalyzeError> {
    let mut by_id: BTreeMap<VfId, Vec<u64>> = BTreeMap::new();
    for s in samples {
        by_id.entry(s.id).or_default().push(s.duration);
    }
    if params.trials == 0 || params.group_size == 0 || params.group_a.is_empty() {
        return Err(AnalyzeError::InsufficientData(
            "trials, group_size and group_a must be non-empty".into(),
        ));
    }
    let group_a: Vec<&[u64]> = params
        .group_a
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .map(Vec::as_slice)
                .ok_or_else(|| AnalyzeError::InsufficientData(format!("no samples for VF {id}")))
        })
        .collect::<Result<_, _>>()?;
    let pool: Vec<&[u64]> = params
        .candidate_pool
        .iter()
        .filter_map(|id| by_id.get(id).map(Vec::as_slice))
        .collect();
    if pool.len() < params.group_size {
        return Err(AnalyzeError::InsufficientData(format!(
            "pool has {} sampled ids, need {}",
            pool.len(),
            params.group_size
        )));
    }

    let draw = |rng: &mut ChaCha8Rng, xs: &[u64]| xs[rng.random_range(0..xs.len())] as f64;
    let wins = exec::map_indices(params.trials, exec, |trial| {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(trial as u64);
        let a = group_a.iter().map(|xs| draw(&mut rng, xs)).sum::<f64>() / group_a.len() as f64;
        let picks = index::sample(&mut rng, pool.len(), params.group_size);
        let b =
            picks.iter().map(|i| draw(&mut rng, pool[i])).sum::<f64>() / params.group_size as f64;
        a > b
    });
    let wins_a = wins.iter().filter(|&&w| w).count();
    Ok(RegressionReport {
        trials: params.trials,
        wins_a,
        win_rate: wins_a as f64 / params.trials as f64,
    })
}

/// Probes a freshly populated table once per noise level and regresses
/// each sample set. Every level reuses the same seeds.
pub fn noise_sweep(
    table_template: &VfTable,
    probe_cfg: &ProbeConfig,
    cost: CostModel,
    sigmas: &[f64],
    params: &RegressParams,
    exec: Execution,
) -> Result<Vec<(f64, RegressionReport)>, AnalyzeError> {
    exec::map_slice(sigmas, exec, |&sigma| {
        let mut table = table_template.clone();
        let mut grace = GraceClock::new();
        let mut clock = ClockSource::deterministic(cost.with_noise(sigma));
        let samples = probe::probe_range(&mut table, &mut grace, probe_cfg, &mut clock, 0)?;
        Ok((
            sigma,
            regress_compare(&samples, params, Execution::Sequential)?,
        ))
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaleWindowConfig {
    pub probe: ProbeConfig,
    pub classifier: ClassifierConfig,
    pub reclaim_cadence: u64,
    /// Step at which the pre-deletion reader leaves.
    pub reader_dwell: u64,
    pub cost: CostModel,
    pub max_steps: u64,
}

impl Default for StaleWindowConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig {
                ids: (1..=10).map(VfId::from).collect(),
                cycles: 1,
                reps: 1,
            },
            classifier: ClassifierConfig::default(),
            reclaim_cadence: 8,
            reader_dwell: 8,
            cost: CostModel::default(),
            max_steps: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaleWindowReport {
    pub policy: ReclamationPolicy,
    pub window_steps: u64,
    pub uaf_count: usize,
    pub deleted: usize,
    /// Step at which the last release finished.
    pub deletion_completed_at: u64,
    pub sync_wait_steps: u64,
}

const STALE_READER: ReaderId = 0;

/// Deletes every live VF in `world` under its policy while a reader that
/// entered beforehand keeps probing, and counts the steps during which a
/// deleted id still classifies as occupied.
///
/// Step 0 runs the deletion. In every step the pre-deletion reader first
/// finishes the walk it had in flight when the deletion happened, then
/// leaves if its dwell is up, else runs one probe pass from inside its
/// session. The reclaimer runs every `reclaim_cadence` steps. Probes taken
/// before all releases have finished do not count.
pub fn stale_window(
    world: &mut World,
    cfg: &StaleWindowConfig,
) -> Result<StaleWindowReport, AnalyzeError> {
    cfg.classifier.validate()?;
    cfg.probe.validate()?;
    let cadence = cfg.reclaim_cadence.max(1);
    let deleted_ids = world.table.live_ids();
    let session = world.grace.reader_enter(STALE_READER);
    let mut walk = deleted_ids
        .first()
        .map(|&id| world.table.begin_lookup(id, &session));
    let uaf_before = world.table.uaf_events().len();
    let mut clock = ClockSource::deterministic(cfg.cost);

    let deleted = world.delete_all();
    let mut completed_at = world.drive_releases(0)?.then_some(0);
    let mut reader_active = true;
    let mut window = 0;

    for step in 0..=cfg.max_steps {
        if reader_active {
            if let Some(w) = walk.as_mut() {
                while world
                    .table
                    .advance(w, world.grace.current_epoch(), step)
                    .is_none()
                {}
                walk = None;
            }
            if step >= cfg.reader_dwell {
                world.grace.reader_exit(&session)?;
                reader_active = false;
            } else {
                let samples = probe::probe_range(
                    &mut world.table,
                    &mut world.grace,
                    &cfg.probe,
                    &mut clock,
                    STALE_READER,
                )?;
                let report = classify(&samples, &cfg.classifier)?;
                let stale = deleted_ids
                    .iter()
                    .any(|&id| report.status(id) == Some(Occupancy::Occupied));
                if stale && completed_at.is_some() {
                    window += 1;
                }
            }
        }
        if step > 0 && step % cadence == 0 {
            world.reclaim_step()?;
        }
        if completed_at.is_none() && world.drive_releases(step)? {
            completed_at = Some(step);
        }
        if !reader_active && completed_at.is_some() {
            break;
        }
    }

    Ok(StaleWindowReport {
        policy: world.policy(),
        window_steps: window,
        uaf_count: world.table.uaf_events().len() - uaf_before,
        deleted,
        deletion_completed_at: completed_at.unwrap_or(cfg.max_steps),
        sync_wait_steps: world.sync_wait_steps(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionPoint {
    pub id: VfId,
    pub chain_depth: u32,
    pub avg_duration: f64,
}

/// Lookup cost against chain position for ids sharing one bucket.
pub fn collision_profile(
    table: &mut VfTable,
    grace: &mut GraceClock,
    ids: &[VfId],
    clock: &mut ClockSource,
    reps: u32,
) -> Result<Vec<CollisionPoint>, AnalyzeError> {
    let Some(&first) = ids.first() else {
        return Ok(Vec::new());
    };
    let bucket = table.hash(first);
    if ids.iter().any(|&id| table.hash(id) != bucket) {
        return Err(AnalyzeError::NotColliding(ids.to_vec()));
    }
    let mut points = Vec::with_capacity(ids.len());
    for &id in ids {
        let depth = table.chain_depth(id).ok_or(AnalyzeError::NotLive(id))?;
        let cfg = ProbeConfig {
            ids: vec![id],
            cycles: 1,
            reps: reps.max(1),
        };
        let samples = probe::probe_range(table, grace, &cfg, clock, 0)?;
        let avg = samples.iter().map(|s| s.duration as f64).sum::<f64>() / samples.len() as f64;
        points.push(CollisionPoint {
            id,
            chain_depth: depth as u32,
            avg_duration: avg,
        });
    }
    points.sort_by_key(|p| p.chain_depth);
    Ok(points)
}
