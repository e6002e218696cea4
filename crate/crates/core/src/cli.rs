//! Command-line frontend.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::allocmodel::{AllocProfile, ArenaConfig, BuddyAllocator};
use crate::analyze::{self, BaselineMode, ClassifierConfig, RegressParams, StaleWindowConfig};
use crate::exec::Execution;
use crate::grace::{GraceClock, ReclamationPolicy};
use crate::harness::{self, ChurnConfig, Mode, SCHEMA_VERSION};
use crate::probe::{self, ClockSource, CostModel, ProbeConfig, TimingSample};
use crate::registry::{VfId, VfTable};
use crate::world::{World, WorldConfig};

/// Bucket order used by probe-style commands unless overridden; wide
/// enough that ids 1 through 63 never share a bucket.
const PROBE_BUCKET_ORDER: u32 = 6;

#[derive(Debug, Parser)]
#[command(
    name = "vflab",
    version,
    about = "VF registry timing and reclamation lab"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Probe lookup timings for a range of ids.
    Probe(ProbeArgs),
    /// Classify ids as occupied from a sample CSV.
    Classify(ClassifyArgs),
    /// Win rate of one id group against random groups.
    Regress(RegressArgs),
    /// Lookup cost along one collision chain.
    Collide(CollideArgs),
    /// Measure how long deleted VFs still look occupied.
    StaleWindow(StaleArgs),
    /// Create/delete flood with concurrent readers.
    Churn(ChurnArgs),
    /// Repeated creation without deletion.
    Spam(SpamArgs),
    /// Parse timing log lines from stdin.
    ParseLog(ParseLogArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Deterministic,
    Realtime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Table,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for noise, scheduling and resampling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Bucket order: the table has 2^N buckets.
    #[arg(long, value_name = "N")]
    buckets: Option<u32>,
    /// Maximum number of live VFs.
    #[arg(long)]
    capacity: Option<usize>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// JSON config file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Config file schema. Every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub mode: Option<ModeArg>,
    pub buckets: Option<u32>,
    pub capacity: Option<usize>,
    pub policy: Option<ReclamationPolicy>,
    pub cost: Option<CostModel>,
    pub occupied_ratio: Option<f64>,
    pub uncertain_ratio: Option<f64>,
    pub churn: Option<ChurnConfig>,
}

struct Ctx {
    common: Common,
    file: FileConfig,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let file = match &common.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => FileConfig::default(),
        };
        Ok(Self {
            common: common.clone(),
            file,
        })
    }

    fn seed(&self) -> u64 {
        self.common.seed.or(self.file.seed).unwrap_or(0)
    }

    fn realtime(&self) -> bool {
        self.common.mode.or(self.file.mode) == Some(ModeArg::Realtime)
    }

    fn buckets(&self, default: u32) -> u32 {
        self.common.buckets.or(self.file.buckets).unwrap_or(default)
    }

    fn capacity(&self) -> usize {
        self.common
            .capacity
            .or(self.file.capacity)
            .unwrap_or(crate::registry::DEFAULT_CAPACITY)
    }

    fn policy(&self, flag: Option<ReclamationPolicy>) -> Option<ReclamationPolicy> {
        flag.or(self.file.policy)
    }

    fn cost(&self, noise: Option<f64>) -> CostModel {
        let mut c = self.file.cost.unwrap_or_default().with_seed(self.seed());
        if let Some(sigma) = noise {
            c = c.with_noise(sigma);
        }
        c
    }

    fn clock(&self, noise: Option<f64>) -> ClockSource {
        if self.realtime() {
            ClockSource::wallclock()
        } else {
            ClockSource::deterministic(self.cost(noise))
        }
    }

    fn classifier(&self, calib: Option<&Vec<VfId>>, quantile: Option<f64>) -> ClassifierConfig {
        let mut c = ClassifierConfig::default();
        if let Some(q) = quantile {
            c.baseline = BaselineMode::GlobalMinimumQuantile(q);
        } else if let Some(ids) = calib {
            c.baseline = BaselineMode::CalibrationIds(ids.clone());
        }
        if let Some(r) = self.file.occupied_ratio {
            c.occupied_ratio = r;
        }
        if let Some(r) = self.file.uncertain_ratio {
            c.uncertain_ratio = r;
        }
        c
    }

    fn format(&self, default: Format) -> Format {
        self.common.format.unwrap_or(default)
    }

    fn emit(&self, bytes: &[u8]) -> Result<()> {
        match &self.common.out {
            Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
            None => io::stdout().write_all(bytes).context("writing stdout"),
        }
    }
}

/// Parses id lists like `1-4,6,9-10`.
pub fn parse_ids(s: &str) -> Result<Vec<VfId>, String> {
    let mut ids = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (part, part),
        };
        let lo: u32 = lo.parse().map_err(|_| format!("bad id `{lo}`"))?;
        let hi: u32 = hi.parse().map_err(|_| format!("bad id `{hi}`"))?;
        if lo > hi {
            return Err(format!("empty range `{part}`"));
        }
        for v in lo..=hi {
            ids.push(VfId::new(v).map_err(|e| e.to_string())?);
        }
    }
    if ids.is_empty() {
        return Err("no ids given".into());
    }
    Ok(ids)
}

#[derive(Debug, Clone)]
pub struct IdList(pub Vec<VfId>);

fn id_list(s: &str) -> Result<IdList, String> {
    parse_ids(s).map(IdList)
}

#[derive(Debug, Clone)]
pub struct Sigmas(pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dwell(pub Option<u64>);

fn parse_dwell(s: &str) -> Result<Dwell, String> {
    match s {
        "inf" | "pinned" => Ok(Dwell(None)),
        n => n
            .parse::<u64>()
            .map(|d| Dwell(Some(d)))
            .map_err(|_| format!("dwell must be a step count or `inf`, got `{n}`")),
    }
}

fn parse_sigmas(s: &str) -> Result<Sigmas, String> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| format!("bad sigma `{p}`"))
        })
        .collect::<Result<_, _>>()
        .map(Sigmas)
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    /// Ids to look up.
    #[arg(long, value_parser = id_list, default_value = "1-16")]
    ids: IdList,
    /// Ids that are live in the table during the probe.
    #[arg(long, value_parser = id_list, default_value = "1-4")]
    occupied: IdList,
    #[arg(long, default_value_t = 2)]
    cycles: u32,
    #[arg(long, default_value_t = 5)]
    reps: u32,
    /// Standard deviation of Gaussian timing noise, in cost units.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    common: Common,
    /// Sample CSV as written by `probe`.
    #[arg(long = "in")]
    input: PathBuf,
    /// Ids known to be unoccupied.
    #[arg(long, value_parser = id_list, default_value = "6-10")]
    calib: IdList,
    /// Use this quantile of all averages as the baseline instead.
    #[arg(long, conflicts_with = "calib")]
    quantile: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct RegressArgs {
    #[command(flatten)]
    common: Common,
    /// Sample CSV; when absent a fresh probe is run per noise level.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long, value_parser = id_list, default_value = "1-4")]
    group_a: IdList,
    #[arg(long, value_parser = id_list, default_value = "5-10")]
    pool: IdList,
    #[arg(long, default_value_t = 4)]
    group_size: usize,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Noise levels to sweep when probing, e.g. `0,60,240`.
    #[arg(long, value_parser = parse_sigmas, default_value = "0")]
    sigmas: Sigmas,
    #[arg(long, value_parser = id_list, default_value = "1-10")]
    ids: IdList,
    #[arg(long, value_parser = id_list, default_value = "1-4")]
    occupied: IdList,
    #[arg(long, default_value_t = 10)]
    cycles: u32,
    #[arg(long, default_value_t = 10)]
    reps: u32,
    /// Run trials on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CollideArgs {
    #[command(flatten)]
    common: Common,
    /// Ids to insert, in order; they must share one bucket.
    #[arg(long, value_parser = id_list, default_value = "1,9,17")]
    ids: IdList,
    #[arg(long, default_value_t = 5)]
    reps: u32,
}

#[derive(Debug, Clone, Args)]
pub struct StaleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    policy: Option<ReclamationPolicy>,
    #[arg(long, value_parser = id_list, default_value = "1-4")]
    occupied: IdList,
    #[arg(long, value_parser = id_list, default_value = "1-10")]
    ids: IdList,
    #[arg(long, value_parser = id_list, default_value = "6-10")]
    calib: IdList,
    /// Steps between reclaimer runs.
    #[arg(long, default_value_t = 8)]
    cadence: u64,
    /// Steps the pre-deletion reader stays in its session.
    #[arg(long, default_value_t = 8)]
    dwell: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ChurnFlags {
    /// VFs created per iteration.
    #[arg(long)]
    vfs: Option<usize>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    readers: Option<u32>,
    /// Reader actions per session, or `inf` to never leave.
    #[arg(long, value_parser = parse_dwell)]
    dwell: Option<Dwell>,
    /// Idle reader actions between sessions.
    #[arg(long)]
    gap: Option<u64>,
    /// Steps between reclaimer runs.
    #[arg(long)]
    cadence: Option<u64>,
    /// Timeline sampling stride in steps.
    #[arg(long)]
    stride: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    stall_limit: Option<u64>,
    /// Arena size in pages.
    #[arg(long)]
    pages: Option<u32>,
    /// Also write the timeline CSV here.
    #[arg(long)]
    timeline: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ChurnArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    policy: Option<ReclamationPolicy>,
    #[command(flatten)]
    flags: ChurnFlags,
}

#[derive(Debug, Clone, Args)]
pub struct SpamArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    policy: Option<ReclamationPolicy>,
    #[command(flatten)]
    flags: ChurnFlags,
}

#[derive(Debug, Clone, Args)]
pub struct ParseLogArgs {
    #[command(flatten)]
    common: Common,
    /// Fail on the first line that is not a timing record.
    #[arg(long)]
    strict: bool,
}

/// Entry point shared by the binary and tests.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn require_policy(
    flag: Option<ReclamationPolicy>,
    ctx: &Ctx,
    cmd: &str,
) -> Result<ReclamationPolicy> {
    ctx.policy(flag)
        .ok_or_else(|| UsageError(format!("`{cmd}` needs --policy (unsafe|deferred|sync)")).into())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Probe(a) => cmd_probe(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Regress(a) => cmd_regress(a),
        Command::Collide(a) => cmd_collide(a),
        Command::StaleWindow(a) => cmd_stale(a),
        Command::Churn(a) => {
            let ctx = Ctx::new(&a.common)?;
            let policy = require_policy(a.policy, &ctx, "churn")?;
            cmd_churn(&ctx, policy, &a.flags, false)
        }
        Command::Spam(a) => {
            let ctx = Ctx::new(&a.common)?;
            let policy = ctx
                .policy(a.policy)
                .unwrap_or(ReclamationPolicy::DeferredCallback);
            cmd_churn(&ctx, policy, &a.flags, true)
        }
        Command::ParseLog(a) => cmd_parse_log(a),
    }
}

fn populated_table(ctx: &Ctx, order_default: u32, live: &[VfId]) -> Result<VfTable> {
    let mut table = VfTable::new(ctx.buckets(order_default), ctx.capacity())?;
    let mut alloc = BuddyAllocator::new(ArenaConfig::default())?;
    for &id in live {
        table.insert(id, &mut alloc, &AllocProfile::default())?;
    }
    Ok(table)
}

fn samples_out(ctx: &Ctx, samples: &[TimingSample], default: Format) -> Result<()> {
    let bytes = match ctx.format(default) {
        Format::Csv => {
            let mut buf = Vec::new();
            probe::write_samples_csv(&mut buf, samples)?;
            buf
        }
        Format::Json => json_doc("samples", samples)?,
        Format::Table => probe::emit_timing_log(samples).into_bytes(),
    };
    ctx.emit(&bytes)
}

#[derive(Serialize)]
struct Doc<'a, T: Serialize + ?Sized> {
    schema_version: u32,
    kind: &'a str,
    data: &'a T,
}

fn json_doc<T: Serialize + ?Sized>(kind: &str, data: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(&Doc {
        schema_version: SCHEMA_VERSION,
        kind,
        data,
    })?;
    v.push(b'\n');
    Ok(v)
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let ctx = Ctx::new(&a.common)?;
    let mut table = populated_table(&ctx, PROBE_BUCKET_ORDER, &a.occupied.0)?;
    let cfg = ProbeConfig {
        ids: a.ids.0,
        cycles: a.cycles,
        reps: a.reps,
    };
    let mut clock = ctx.clock(a.noise);
    let samples = probe::probe_range(&mut table, &mut GraceClock::new(), &cfg, &mut clock, 0)?;
    samples_out(&ctx, &samples, Format::Csv)
}

fn read_samples(path: &Path) -> Result<Vec<TimingSample>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    probe::read_samples_csv(f).with_context(|| format!("reading samples from {}", path.display()))
}

fn cmd_classify(a: ClassifyArgs) -> Result<()> {
    let ctx = Ctx::new(&a.common)?;
    let samples = read_samples(&a.input)?;
    let report = analyze::classify(&samples, &ctx.classifier(Some(&a.calib.0), a.quantile))?;
    let bytes = match ctx.format(Format::Table) {
        Format::Table => report.render_table().into_bytes(),
        Format::Csv => {
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            buf
        }
        Format::Json => json_doc("occupancy", &report)?,
    };
    ctx.emit(&bytes)
}

#[derive(Serialize)]
struct SweepRow {
    sigma: f64,
    #[serde(flatten)]
    report: analyze::RegressionReport,
}

fn cmd_regress(a: RegressArgs) -> Result<()> {
    let ctx = Ctx::new(&a.common)?;
    let exec = if a.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let params = RegressParams {
        group_a: a.group_a.0.clone(),
        candidate_pool: a.pool.0.clone(),
        group_size: a.group_size,
        trials: a.trials,
        seed: ctx.seed(),
    };
    let rows: Vec<SweepRow> = match &a.input {
        Some(p) => {
            let samples = read_samples(p)?;
            let report = analyze::regress_compare(&samples, &params, exec)?;
            vec![SweepRow {
                sigma: f64::NAN,
                report,
            }]
        }
        None => {
            if ctx.realtime() {
                bail!(UsageError(
                    "regress sweeps need the deterministic clock; pass --in for measured samples"
                        .into()
                ));
            }
            let table = populated_table(&ctx, PROBE_BUCKET_ORDER, &a.occupied.0)?;
            let cfg = ProbeConfig {
                ids: a.ids.0.clone(),
                cycles: a.cycles,
                reps: a.reps,
            };
            analyze::noise_sweep(&table, &cfg, ctx.cost(None), &a.sigmas.0, &params, exec)?
                .into_iter()
                .map(|(sigma, report)| SweepRow { sigma, report })
                .collect()
        }
    };
    let bytes = match ctx.format(Format::Json) {
        Format::Json => json_doc("regression", &rows)?,
        Format::Csv | Format::Table => {
            let mut out = String::from("sigma,trials,wins_a,win_rate\n");
            for r in &rows {
                let sigma = if r.sigma.is_nan() {
                    String::new()
                } else {
                    r.sigma.to_string()
                };
                out.push_str(&format!(
                    "{sigma},{},{},{:.4}\n",
                    r.report.trials, r.report.wins_a, r.report.win_rate
                ));
            }
            out.into_bytes()
        }
    };
    ctx.emit(&bytes)
}

fn cmd_collide(a: CollideArgs) -> Result<()> {
    let ctx = Ctx::new(&a.common)?;
    let mut table = populated_table(&ctx, crate::registry::DEFAULT_BUCKET_ORDER, &a.ids.0)?;
    let mut clock = ctx.clock(None);
    let points = analyze::collision_profile(
        &mut table,
        &mut GraceClock::new(),
        &a.ids.0,
        &mut clock,
        a.reps,
    )?;
    let bytes = match ctx.format(Format::Table) {
        Format::Json => json_doc("collision", &points)?,
        Format::Csv => {
            let mut out = String::from("id,chain_depth,avg_duration\n");
            for p in &points {
                out.push_str(&format!(
                    "{},{},{:.2}\n",
                    p.id, p.chain_depth, p.avg_duration
                ));
            }
            out.into_bytes()
        }
        Format::Table => {
            let mut out = String::from("VF ID   Depth   Avg Cycles\n");
            for p in &points {
                out.push_str(&format!(
                    "{:<8}{:<8}{:.2}\n",
                    p.id.to_string(),
                    p.chain_depth,
                    p.avg_duration
                ));
            }
            out.into_bytes()
        }
    };
    ctx.emit(&bytes)
}

fn cmd_stale(a: StaleArgs) -> Result<()> {
    let ctx = Ctx::new(&a.common)?;
    let policy = require_policy(a.policy, &ctx, "stale-window")?;
    if ctx.realtime() {
        bail!(UsageError(
            "stale-window runs in deterministic mode only".into()
        ));
    }
    let mut wc = WorldConfig::new(policy);
    wc.bucket_order = ctx.buckets(PROBE_BUCKET_ORDER);
    wc.capacity = ctx.capacity();
    let mut world = World::new(&wc)?;
    for &id in &a.occupied.0 {
        world.insert(id)?;
    }
    let cfg = StaleWindowConfig {
        probe: ProbeConfig {
            ids: a.ids.0.clone(),
            cycles: 1,
            reps: 1,
        },
        classifier: ctx.classifier(Some(&a.calib.0), None),
        reclaim_cadence: a.cadence,
        reader_dwell: a.dwell,
        cost: ctx.cost(None),
        ..StaleWindowConfig::default()
    };
    let report = analyze::stale_window(&mut world, &cfg)?;
    let bytes = match ctx.format(Format::Json) {
        Format::Json => json_doc("stale_window", &report)?,
        Format::Csv | Format::Table => format!(
            "policy,window_steps,uaf_count,deleted,deletion_completed_at,sync_wait_steps\n{},{},{},{},{},{}\n",
            report.policy,
            report.window_steps,
            report.uaf_count,
            report.deleted,
            report.deletion_completed_at,
            report.sync_wait_steps
        )
        .into_bytes(),
    };
    ctx.emit(&bytes)
}

fn churn_config(ctx: &Ctx, policy: ReclamationPolicy, f: &ChurnFlags) -> ChurnConfig {
    let mut c = ctx.file.churn.unwrap_or_default();
    c.policy = policy;
    c.mode = if ctx.realtime() {
        Mode::Realtime
    } else {
        Mode::Deterministic { seed: ctx.seed() }
    };
    if let Some(b) = ctx.common.buckets.or(ctx.file.buckets) {
        c.bucket_order = b;
    }
    if let Some(cap) = ctx.common.capacity.or(ctx.file.capacity) {
        c.capacity = cap;
    }
    let set = |dst: &mut u64, v: Option<u64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    if let Some(n) = f.vfs {
        c.num_vfs = n;
    }
    if let Some(r) = f.readers {
        c.reader_count = r;
    }
    if let Some(d) = f.dwell {
        c.reader_dwell = d.0;
    }
    if let Some(p) = f.pages {
        c.arena.total_pages = p;
    }
    set(&mut c.iterations, f.iters);
    set(&mut c.reader_gap, f.gap);
    set(&mut c.reclaim_cadence, f.cadence);
    set(&mut c.timeline_stride, f.stride);
    set(&mut c.max_steps, f.max_steps);
    set(&mut c.stall_limit, f.stall_limit);
    c
}

fn cmd_churn(ctx: &Ctx, policy: ReclamationPolicy, f: &ChurnFlags, spam: bool) -> Result<()> {
    let cfg = churn_config(ctx, policy, f);
    if let Err(e) = cfg.validate() {
        bail!(UsageError(e.to_string()));
    }
    let report = if spam {
        harness::run_creation_spam(&cfg)?
    } else {
        harness::run_churn(&cfg)?
    };
    if let Some(p) = &f.timeline {
        let file = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        harness::write_timeline_csv(io::BufWriter::new(file), &report.timeline)?;
    }
    let bytes = match ctx.format(Format::Json) {
        Format::Json | Format::Table => harness::summary_json(&cfg, &report)?.into_bytes(),
        Format::Csv => {
            let mut buf = Vec::new();
            harness::write_timeline_csv(&mut buf, &report.timeline)?;
            buf
        }
    };
    ctx.emit(&bytes)
}

fn cmd_parse_log(a: ParseLogArgs) -> Result<()> {
    let ctx = Ctx::new(&a.common)?;
    let mut text = String::new();
    io::stdin()
        .read_to_string(&mut text)
        .context("reading stdin")?;
    let parsed = probe::parse_timing_log(&text, a.strict)?;
    if parsed.skipped > 0 {
        eprintln!("warning: skipped {} non-timing lines", parsed.skipped);
    }
    samples_out(&ctx, &parsed.samples, Format::Csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn every_subcommand_parses_its_defaults() {
        for argv in [
            vec!["probe"],
            vec!["classify", "--in", "x.csv"],
            vec!["regress"],
            vec!["collide"],
            vec!["stale-window", "--policy", "sync"],
            vec!["churn", "--policy", "deferred", "--dwell", "inf"],
            vec!["spam"],
            vec!["parse-log", "--strict"],
        ] {
            let full: Vec<_> = std::iter::once("vflab")
                .chain(argv.iter().copied())
                .collect();
            Cli::try_parse_from(&full).unwrap_or_else(|e| panic!("{argv:?}: {e}"));
        }
    }

    #[test]
    fn id_lists() {
        let ids = parse_ids("1-4, 6,9-10").unwrap();
        let raw: Vec<u16> = ids.iter().map(|i| i.get()).collect();
        assert_eq!(raw, [1, 2, 3, 4, 6, 9, 10]);
        assert!(parse_ids("4-1").is_err());
        assert!(parse_ids("70000").is_err());
        assert!(parse_ids("").is_err());
    }

    #[test]
    fn dwell_values() {
        assert_eq!(parse_dwell("inf").unwrap(), Dwell(None));
        assert_eq!(parse_dwell("12").unwrap(), Dwell(Some(12)));
        assert!(parse_dwell("x").is_err());
    }

    #[test]
    fn flags_beat_file() {
        let cli = Cli::try_parse_from([
            "vflab", "churn", "--policy", "sync", "--seed", "5", "--vfs", "8",
        ])
        .unwrap();
        let Command::Churn(a) = cli.command else {
            panic!()
        };
        let mut ctx = Ctx::new(&a.common).unwrap();
        ctx.file.seed = Some(9);
        ctx.file.churn = Some(ChurnConfig {
            num_vfs: 32,
            iterations: 3,
            ..ChurnConfig::default()
        });
        let c = churn_config(&ctx, ReclamationPolicy::Synchronous, &a.flags);
        assert_eq!(c.num_vfs, 8);
        assert_eq!(c.iterations, 3);
        assert_eq!(c.mode, Mode::Deterministic { seed: 5 });
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"sede": 1}"#).is_err());
        let ok: FileConfig = serde_json::from_str(r#"{"seed": 1, "policy": "sync"}"#).unwrap();
        assert_eq!(ok.policy, Some(ReclamationPolicy::Synchronous));
    }
}
