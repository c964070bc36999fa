//! Experiment harness: scenario configs, the five commands, and artifact
//! writing.
//!
//! Each scenario writes into `<out>/<name>/`:
//! - data CSVs (`schedule.csv`, `scan.csv`, `seeds.csv`, trajectories),
//! - `report.json` with one [`RunReport`] per sweep point,
//! - `metadata.json` with timestamps and wall times.
//!
//! Only `metadata.json` varies between identical runs.

pub mod config;
pub mod io;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{logsnr_linearity_fit, singularity_scan};
use crate::error::{ensure, Error, Result};
use crate::metrics::{edit_drift, mse, psnr_from_mse, RunReport};
use crate::rng::{stream_id, stream_rng};
use crate::sampler::{
    first_local_error, local_inversion_errors, pinned_reconstruction, run_inversion, run_reverse,
    ModelPair, Trajectory,
};
use crate::schedule::{build_table, integer_grid, terminal_snr, uniform_grid, ScheduleTable};

pub use config::{
    load_scenarios, parse_scenarios, Models, ModelsConfig, ScanConfig, ScenarioConfig, Sweep,
    SweepPoint, CONFIG_VERSION,
};
pub use io::SeedRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    ScheduleDump,
    SingularityScan,
    Roundtrip,
    EditSim,
    Sweep,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::ScheduleDump,
        Command::SingularityScan,
        Command::Roundtrip,
        Command::EditSim,
        Command::Sweep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::ScheduleDump => "schedule-dump",
            Command::SingularityScan => "singularity-scan",
            Command::Roundtrip => "roundtrip",
            Command::EditSim => "edit-sim",
            Command::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown command {s:?}")))
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    /// Replaces the scenario's seed list with this single seed.
    pub seed: Option<u64>,
    /// Grid resolution for `schedule-dump`, sample count for
    /// `singularity-scan`.
    pub grid: Option<usize>,
}

pub const DEFAULT_OUT_DIR: &str = "out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub scenario: String,
    pub command: String,
    pub version: String,
    pub started_unix_seconds: f64,
    pub finished_unix_seconds: f64,
    pub wall_time_seconds: f64,
    /// Summed per-seed compute time of each sweep point.
    pub point_wall_time_seconds: Vec<f64>,
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutput {
    pub name: String,
    pub dir: PathBuf,
    pub reports: Vec<RunReport>,
    pub files: Vec<PathBuf>,
}

/// Trajectories kept from the first seed of a sweep point.
#[derive(Debug, Clone)]
pub struct SampleTrajectories {
    pub inversion: Trajectory,
    pub reconstruction: Trajectory,
    pub edit: Option<Trajectory>,
}

/// In-memory result of evaluating a scenario.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub reports: Vec<RunReport>,
    pub seeds: Vec<SeedRow>,
    pub trajectories: Vec<SampleTrajectories>,
}

struct SeedOutcome {
    row: SeedRow,
    local_errors: Vec<Option<f64>>,
    trajectories: Option<SampleTrajectories>,
    seconds: f64,
}

struct PointContext<'a> {
    index: usize,
    point: &'a SweepPoint,
    table: ScheduleTable,
}

fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn run_seed(
    scenario: &ScenarioConfig,
    models: &Models,
    ctx: &PointContext,
    seed: u64,
    with_edit: bool,
    keep: bool,
) -> Result<SeedOutcome> {
    let started = Instant::now();
    let cfg = &ctx.point.sampler;
    let table = &ctx.table;
    let mut rng = stream_rng(seed, stream_id(&scenario.name));
    let x0 = models.source.sample_with(&mut rng);
    let source = ModelPair::new(&models.uncond, &models.source);

    let inversion = run_inversion(source, &x0, table, cfg)?;
    let reconstruction = run_reverse(source, inversion.last_state(), table, cfg, &mut rng)?;
    let roundtrip_mse = mse(&reconstruction.output(), &x0)?;
    let pinned = pinned_reconstruction(&inversion, source, source, table, cfg)?;
    let pinned_roundtrip_mse = mse(&pinned.output(), &x0)?;
    let local_errors = local_inversion_errors(&inversion, source, table)?;

    let mut edit = None;
    let (mut drift, mut pinned_drift) = (None, None);
    if with_edit {
        let target = models
            .target
            .as_ref()
            .ok_or_else(|| Error::validation("editing needs a target model"))?;
        let direction = models
            .edit_direction
            .as_ref()
            .ok_or_else(|| Error::validation("editing needs a nonzero edit direction"))?;
        let branch = ModelPair::new(&models.uncond, target);
        let edited = run_reverse(branch, inversion.last_state(), table, cfg, &mut rng)?;
        drift = Some(edit_drift(&x0, &edited.output(), direction)?);
        let pinned_edit = pinned_reconstruction(&inversion, source, branch, table, cfg)?;
        pinned_drift = Some(edit_drift(&x0, &pinned_edit.output(), direction)?);
        edit = Some(edited);
    }

    let row = SeedRow {
        point: ctx.index,
        seed,
        family: ctx.point.schedule.family.to_string(),
        n_steps: cfg.n_steps,
        axis_value: ctx.point.axis_value,
        w_invert: cfg.w_invert,
        w_reverse: cfg.w_reverse,
        input_scale_b: cfg.input_scale_b,
        roundtrip_mse,
        pinned_roundtrip_mse,
        edit_drift: drift,
        pinned_edit_drift: pinned_drift,
        first_local_error: first_local_error(&local_errors),
    };
    Ok(SeedOutcome {
        row,
        local_errors,
        trajectories: keep.then_some(SampleTrajectories {
            inversion,
            reconstruction,
            edit,
        }),
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

fn mean_opt(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.into_iter().collect();
    v.filter(|v| !v.is_empty()).map(mean)
}

fn summarize(
    scenario: &ScenarioConfig,
    models: &Models,
    ctx: &PointContext,
    outcomes: &[SeedOutcome],
) -> Result<RunReport> {
    let spec = &ctx.point.schedule;
    let steps = outcomes[0].local_errors.len();
    let local_errors = (0..steps)
        .map(|i| mean_opt(outcomes.iter().map(|o| o.local_errors[i])))
        .collect();
    let roundtrip_mse = mean(outcomes.iter().map(|o| o.row.roundtrip_mse));
    let psnr_max_val = scenario
        .psnr_max_val
        .unwrap_or_else(|| models.source.data_range());
    let full = build_table(spec, &integer_grid(spec.t_max))?;
    Ok(RunReport {
        scenario: scenario.name.clone(),
        family: spec.family,
        n_steps: ctx.point.sampler.n_steps,
        axis: ctx.point.axis.clone(),
        axis_value: ctx.point.axis_value,
        w_invert: ctx.point.sampler.w_invert,
        w_reverse: ctx.point.sampler.w_reverse,
        input_scale_b: ctx.point.sampler.input_scale_b,
        seeds: outcomes.len(),
        local_errors,
        roundtrip_mse,
        roundtrip_psnr: psnr_from_mse(roundtrip_mse, psnr_max_val)?,
        psnr_max_val,
        pinned_roundtrip_mse: mean(outcomes.iter().map(|o| o.row.pinned_roundtrip_mse)),
        edit_drift: mean_opt(outcomes.iter().map(|o| o.row.edit_drift)),
        pinned_edit_drift: mean_opt(outcomes.iter().map(|o| o.row.pinned_edit_drift)),
        terminal_logsnr: terminal_snr(spec)?.ln(),
        linearity_r2: logsnr_linearity_fit(&full, scenario.window())?.r_squared,
        wall_time_seconds: outcomes.iter().map(|o| o.seconds).sum(),
    })
}

/// Runs every sweep point of `scenario` over all its seeds. Seeds and
/// points run in parallel; results are assembled in input order, so the
/// output does not depend on scheduling.
pub fn evaluate(scenario: &ScenarioConfig, with_edit: bool) -> Result<Evaluation> {
    scenario.validate()?;
    let models = scenario.models()?;
    let points = scenario.points()?;
    let contexts = points
        .iter()
        .enumerate()
        .map(|(index, point)| {
            let grid = point.sampler.grid(point.schedule.t_max)?;
            Ok(PointContext {
                index,
                point,
                table: build_table(&point.schedule, &grid)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let tasks: Vec<(usize, usize)> = (0..contexts.len())
        .flat_map(|p| (0..scenario.seeds.len()).map(move |s| (p, s)))
        .collect();
    let outcomes = tasks
        .par_iter()
        .map(|&(p, s)| {
            run_seed(scenario, &models, &contexts[p], scenario.seeds[s], with_edit, s == 0)
        })
        .collect::<Result<Vec<_>>>()?;

    let per_point = scenario.seeds.len();
    let mut reports = Vec::with_capacity(contexts.len());
    let mut seeds = Vec::with_capacity(outcomes.len());
    let mut trajectories = Vec::with_capacity(contexts.len());
    for (ctx, chunk) in contexts.iter().zip(outcomes.chunks(per_point)) {
        reports.push(summarize(scenario, &models, ctx, chunk)?);
    }
    for o in outcomes {
        seeds.push(o.row);
        if let Some(t) = o.trajectories {
            trajectories.push(t);
        }
    }
    Ok(Evaluation {
        reports,
        seeds,
        trajectories,
    })
}

fn output_dir(scenario: &ScenarioConfig, opts: &RunOptions) -> PathBuf {
    let base = opts
        .out
        .clone()
        .or_else(|| scenario.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    base.join(&scenario.name)
}

struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        io::write_atomic(&path, bytes)?;
        self.files.push(path);
        Ok(())
    }
}

fn write_trajectories(w: &mut Writer, all: &[SampleTrajectories], binary: bool) -> Result<()> {
    for (p, t) in all.iter().enumerate() {
        let parts = [
            ("inversion", Some(&t.inversion)),
            ("reconstruction", Some(&t.reconstruction)),
            ("edit", t.edit.as_ref()),
        ];
        for (label, traj) in parts {
            let Some(traj) = traj else { continue };
            let stem = format!("trajectories/point{p:03}_{label}");
            w.put(&format!("{stem}.csv"), &io::trajectory_csv(traj)?)?;
            if binary {
                w.put(&format!("{stem}.bin"), &io::trajectory_bin(traj))?;
            }
        }
    }
    Ok(())
}

/// Runs one command for one scenario and writes its artifacts.
pub fn run_scenario(
    command: Command,
    scenario: &ScenarioConfig,
    opts: &RunOptions,
) -> Result<ScenarioOutput> {
    let started_unix = now_unix();
    let started = Instant::now();
    let mut scenario = scenario.clone();
    if let Some(seed) = opts.seed {
        scenario.seeds = vec![seed];
    }
    scenario.validate()?;
    let mut w = Writer {
        dir: output_dir(&scenario, opts),
        files: Vec::new(),
    };
    let spec = &scenario.schedule;
    let mut reports = Vec::new();
    let mut point_times = Vec::new();

    match command {
        Command::ScheduleDump => {
            let grid = match opts.grid {
                Some(n) => {
                    ensure(n >= 1, || "--grid must be positive".into())?;
                    uniform_grid(spec.t_max, n)
                }
                None => integer_grid(spec.t_max),
            };
            let table = build_table(spec, &grid)?;
            w.put("schedule.csv", &io::schedule_csv(&table)?)?;
        }
        Command::SingularityScan => {
            let mut scan = scenario.scan();
            if let Some(n) = opts.grid {
                scan.n = n;
            }
            let rows = singularity_scan(spec, scan.t_min, scan.t_max, scan.n)?;
            w.put("scan.csv", &io::scan_csv(&rows)?)?;
        }
        Command::Roundtrip | Command::EditSim | Command::Sweep => {
            let with_edit = match command {
                Command::Roundtrip => false,
                Command::EditSim => true,
                _ => {
                    ensure(scenario.sweep.is_some(), || {
                        format!("scenario {:?} has no sweep axis", scenario.name)
                    })?;
                    let m = scenario.models()?;
                    m.target.is_some() && m.edit_direction.is_some()
                }
            };
            let eval = evaluate(&scenario, with_edit)?;
            w.put("seeds.csv", &io::seeds_csv(&eval.seeds)?)?;
            write_trajectories(&mut w, &eval.trajectories, scenario.dump_states)?;
            let mut json = serde_json::to_vec_pretty(&eval.reports)?;
            json.push(b'\n');
            w.put("report.json", &json)?;
            point_times = eval.reports.iter().map(|r| r.wall_time_seconds).collect();
            reports = eval.reports;
        }
    }

    let meta = Metadata {
        scenario: scenario.name.clone(),
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix_seconds: started_unix,
        finished_unix_seconds: now_unix(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        point_wall_time_seconds: point_times,
        threads: rayon::current_num_threads(),
    };
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.push(b'\n');
    w.put("metadata.json", &json)?;

    Ok(ScenarioOutput {
        name: scenario.name.clone(),
        dir: w.dir,
        reports,
        files: w.files,
    })
}

/// Runs `command` over a batch of scenarios in parallel. Scenario names
/// must be unique so each owns its output directory.
pub fn run_batch(
    command: Command,
    scenarios: &[ScenarioConfig],
    opts: &RunOptions,
) -> Result<Vec<ScenarioOutput>> {
    let mut names = std::collections::HashSet::new();
    for s in scenarios {
        ensure(names.insert(&s.name), || format!("duplicate scenario name {:?}", s.name))?;
    }
    scenarios
        .par_iter()
        .map(|s| run_scenario(command, s, opts))
        .collect()
}

pub fn read_report(path: &Path) -> Result<Vec<RunReport>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn read_metadata(path: &Path) -> Result<Metadata> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
