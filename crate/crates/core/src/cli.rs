//! Command-line front end: `run`, `mc`, `calibrate`, `analyze`, `replay`.
//!
//! Settings are layered as defaults, then the config file, then `--set`
//! assignments, then dedicated flags. The effective config is echoed into
//! every JSON output.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{apply_overrides, load_config, to_toml, CONFIG_ENV};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, compute_metrics, render_table, AggregateMetrics, RunMetrics};
use crate::scenario::{log_from_csv, log_to_csv, run_episode, run_monte_carlo, EpisodeLog, ScenarioConfig, SeededMetrics, Variant};
use crate::stability::{calibrate_sensitivity_for, compare_eigenvalues, EigenModel, InstabilityTargets, MPH};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STRICT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pcca", version, about = "Lane-swap safety filter simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one episode and export its log and metrics.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Exit with status 3 if any bodies overlap.
        #[arg(long)]
        strict: bool,
    },
    /// Monte Carlo comparison of variants on identical seeds.
    Mc {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(short, long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        /// Comma-separated variants; all three when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        /// Worker threads (rayon default when omitted).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        strict: bool,
    },
    /// Fit `s_a(v)` coefficients to instability targets.
    Calibrate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Target preset; the scenario's variant when neither this nor --targets is given.
        #[arg(long, conflicts_with = "targets")]
        preset: Option<Variant>,
        /// TOML file with `delta0` and `points = [[speed, eigenvalue], ...]`.
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Compare closed-form and numerically linearised eigenvalues.
    Analyze {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_delimiter = ',', default_value = "10,20,30")]
        speeds_mph: Vec<f64>,
        #[arg(long, default_value_t = 0.015)]
        delta0: f64,
    },
    /// Recompute metrics from an exported episode CSV.
    Replay {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        strict: bool,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct ScenarioArgs {
    /// Scenario TOML file.
    #[arg(long, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Config assignment such as `v2v.range=80`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// V2V range [m].
    #[arg(long)]
    pub v2v_range: Option<f64>,
    /// Controller period [s].
    #[arg(long)]
    pub ctrl_period: Option<f64>,
    /// Make one random agent ignore the others.
    #[arg(long)]
    pub nra: bool,
    /// Eigenvalue expression used for calibration: formula or loop.
    #[arg(long)]
    pub eigen_model: Option<EigenModel>,
}

impl ScenarioArgs {
    pub fn resolve(&self) -> Result<ScenarioConfig> {
        let base = match &self.config {
            Some(p) => load_config(p)?,
            None => ScenarioConfig::default(),
        };
        let mut cfg = apply_overrides(&base, &self.set)?;
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.v2v_range {
            cfg.v2v.range = Some(r);
        }
        if let Some(p) = self.ctrl_period {
            cfg.ctrl_period = p;
        }
        if self.nra {
            cfg.nra_enabled = true;
        }
        if let Some(m) = self.eigen_model {
            cfg.controller.eigen_model = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// JSON sidecar written next to an episode CSV.
#[derive(Debug, Serialize)]
pub struct RunReport<'a> {
    pub config: &'a ScenarioConfig,
    pub metrics: &'a RunMetrics,
    pub events: &'a [crate::scenario::Event],
    pub bsm_deliveries: &'a [usize],
}

#[derive(Debug, Serialize)]
pub struct VariantRuns {
    pub variant: Variant,
    pub runs: Vec<SeededMetrics>,
    pub aggregate: AggregateMetrics,
}

#[derive(Debug, Serialize)]
pub struct McReport<'a> {
    pub config: &'a ScenarioConfig,
    pub n: usize,
    pub base_seed: u64,
    pub variants: Vec<VariantRuns>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Calibration(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Run { scenario, out, strict } => cmd_run(&scenario.resolve()?, out, *strict),
        Command::Mc { scenario, n, base_seed, variants, jobs, out, strict } => {
            let cfg = scenario.resolve()?;
            let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants.clone() };
            cmd_mc(&cfg, *n, *base_seed, &variants, *jobs, out, *strict)
        }
        Command::Calibrate { scenario, preset, targets } => {
            let cfg = scenario.resolve()?;
            let targets = match (preset, targets) {
                (_, Some(path)) => read_targets(path)?,
                (Some(v), None) => v.targets(),
                (None, None) => cfg.variant.targets(),
            };
            cmd_calibrate(&cfg, &targets)
        }
        Command::Analyze { scenario, speeds_mph, delta0 } => cmd_analyze(&scenario.resolve()?, speeds_mph, *delta0),
        Command::Replay { scenario, log, strict } => cmd_replay(&scenario.resolve()?, log, *strict),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn summary_line(label: &str, m: &RunMetrics) -> String {
    format!(
        "{label}: speed {:.2}/{:.2} m/s, brake {:.1} Wh/km, min h0 {:.3} m, incomplete {}/{}, max da {:.2}, da>2 {}, collisions {}, fallbacks {}{}",
        m.avg_speed,
        m.desired_speed,
        m.brake_loss,
        m.min_h0,
        m.incomplete_ls_count,
        m.lane_changers,
        m.max_delta_ac,
        m.count_delta_ac_gt2,
        m.collision_count,
        m.fallback_count,
        if m.timed_out { ", timed out" } else { "" }
    )
}

pub fn cmd_run(cfg: &ScenarioConfig, out: &Path, strict: bool) -> Result<i32> {
    let ep = run_episode(cfg)?;
    write(&out.join("episode.csv"), &log_to_csv(&ep.log))?;
    let report = RunReport { config: cfg, metrics: &ep.metrics, events: &ep.log.events, bsm_deliveries: &ep.log.bsm_deliveries };
    write(&out.join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
    println!("{}", summary_line(&format!("{} seed {}", cfg.variant.label(), cfg.seed), &ep.metrics));
    Ok(strict_code(strict, ep.metrics.collision_count))
}

fn strict_code(strict: bool, collisions: usize) -> i32 {
    if strict && collisions > 0 {
        eprintln!("strict: {collisions} colliding pair(s)");
        EXIT_STRICT
    } else {
        EXIT_OK
    }
}

pub fn cmd_mc(
    cfg: &ScenarioConfig,
    n: usize,
    base_seed: u64,
    variants: &[Variant],
    jobs: Option<usize>,
    out: &Path,
    strict: bool,
) -> Result<i32> {
    let run_all = || -> Result<Vec<VariantRuns>> {
        variants
            .iter()
            .map(|&v| {
                let runs = run_monte_carlo(&cfg.with_variant(v), n, base_seed)?;
                let metrics: Vec<RunMetrics> = runs.iter().map(|r| r.metrics).collect();
                Ok(VariantRuns { variant: v, aggregate: aggregate(&metrics), runs })
            })
            .collect()
    };
    let results = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?
            .install(run_all)?,
        None => run_all()?,
    };
    let rows: Vec<(String, AggregateMetrics)> = results.iter().map(|r| (r.variant.label().to_string(), r.aggregate)).collect();
    let table = render_table(&rows);
    write(&out.join("table.txt"), &table.text)?;
    write(&out.join("table.csv"), &table.csv)?;
    let collisions: usize = results.iter().map(|r| r.aggregate.collision_total).sum();
    let report = McReport { config: cfg, n, base_seed, variants: results };
    write(&out.join("runs.json"), &serde_json::to_string_pretty(&report)?)?;
    print!("{}", table.text);
    Ok(strict_code(strict, collisions))
}

fn read_targets(path: &Path) -> Result<InstabilityTargets> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn cmd_calibrate(cfg: &ScenarioConfig, targets: &InstabilityTargets) -> Result<i32> {
    let spec = cfg.spec()?;
    let model = cfg.controller.eigen_model;
    let c = calibrate_sensitivity_for(model, targets, cfg.controller.kappa, &cfg.vehicle, &spec)?;
    println!("1/s_a(v) = c0 + c2 v^2 + c3 v^3, {model:?} model");
    println!("{:>10} {:>10} {:>12} {:>12}", "v [m/s]", "target", "round trip", "1/s_a");
    for &(v, target) in &targets.points {
        let s_a = crate::pcca::sensitivity(v, &c);
        let got = model.eigenvalue(v, s_a, targets.delta0, cfg.controller.kappa, &cfg.vehicle, &spec);
        println!("{v:>10.3} {target:>10.4} {got:>12.6} {:>12.3}", c.denominator(v));
    }
    println!("\n[controller.sensitivity]\nc0 = {:?}\nc2 = {:?}\nc3 = {:?}", c.c0, c.c2, c.c3);
    Ok(EXIT_OK)
}

pub fn cmd_analyze(cfg: &ScenarioConfig, speeds_mph: &[f64], delta0: f64) -> Result<i32> {
    let pcca = cfg.pcca()?;
    let speeds: Vec<f64> = speeds_mph.iter().map(|m| m * MPH).collect();
    let rows = compare_eigenvalues(&pcca, &cfg.vehicle, &speeds, delta0, cfg.controller.kappa, cfg.ctrl_period)?;
    println!("{} calibration, controller period {} s", cfg.variant.label(), cfg.ctrl_period);
    println!("{:>6} {:>8} {:>10} {:>10} {:>10} {:>10} {:>8}", "mph", "v0", "s_a", "formula", "loop", "numerical", "err");
    for (mph, r) in speeds_mph.iter().zip(&rows) {
        println!(
            "{mph:>6.1} {:>8.3} {:>10.3e} {:>10.4} {:>10.4} {:>10.4} {:>7.1}%",
            r.v0,
            r.s_a,
            r.formula,
            r.loop_model,
            r.numerical,
            100.0 * r.formula_error()
        );
    }
    Ok(EXIT_OK)
}

pub fn cmd_replay(cfg: &ScenarioConfig, log_path: &Path, strict: bool) -> Result<i32> {
    let text = fs::read_to_string(log_path)?;
    let log: EpisodeLog = log_from_csv(&text, cfg.ctrl_period, cfg.road.zone_start)?;
    let m = compute_metrics(&log, cfg)?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(strict_code(strict, m.collision_count))
}

/// Effective config as TOML, for echoing alongside outputs.
pub fn effective_config(args: &ScenarioArgs) -> Result<String> {
    to_toml(&args.resolve()?)
}
