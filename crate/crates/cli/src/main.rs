use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use cellbal::analysis::{self, Table};
use cellbal::scenario::ConfigError;
use cellbal::sim::SafetyEvent;
use cellbal::trace_io::{self, TraceError};
use cellbal::{run_scenario, Policy, ScenarioConfig, ScenarioRun, SimError, Summary};

#[derive(Parser)]
#[command(name = "cellbal", version, about = "Active cell balancing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trace.csv and summary.json.
    Simulate(Common),
    /// Run every policy in `run.policies` and write comparison.csv.
    Sweep(Common),
    /// Replay online identification over a recorded trace.
    Identify(TraceArgs),
    /// Write plot-ready CSVs from a recorded trace.
    ExportPlots(TraceArgs),
}

#[derive(Args)]
struct Common {
    /// Scenario file (JSON, `//` comments allowed).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to runs/run-<unix time>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config value, e.g. `run.max_time=600` or `cells.0.soc=0.7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Maximum concurrent scenarios in a sweep.
    #[arg(long)]
    jobs: Option<usize>,
    /// Also write the effective configuration to effective_config.json.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    common: Common,
    /// Trace to read; defaults to <out>/trace.csv.
    #[arg(long)]
    trace: Option<PathBuf>,
}

enum Failure {
    User(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::User(_) => 2,
            Failure::Internal(_) => 3,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::User(e.to_string())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => c.into(),
            other => Failure::Internal(format!("simulation failed: {other}")),
        }
    }
}

fn internal(context: &str) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Internal(format!("{context}: {e}"))
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    policy: Policy,
    seed: u64,
    #[serde(flatten)]
    summary: &'a Summary,
    saturation_events: u64,
    safety_events: &'a [SafetyEvent],
}

const COMPARISON_COLUMNS: [&str; 15] = [
    "policy",
    "seed",
    "completion_time_s",
    "end_time_s",
    "steps",
    "balancing_cycles",
    "initial_voltage_spread",
    "final_voltage_spread",
    "initial_soc_spread",
    "final_soc_spread",
    "final_std_v",
    "mean_std_v",
    "gap_uniformity",
    "converter_coulombs",
    "safety_events",
];

fn comparison_row(policy: Policy, seed: u64, run: &ScenarioRun) -> Vec<String> {
    let s = &run.summary;
    vec![
        policy.to_string(),
        seed.to_string(),
        s.completion_time_s.map_or(String::new(), |t| t.to_string()),
        s.end_time_s.to_string(),
        s.steps.to_string(),
        s.balancing_cycles.to_string(),
        s.initial_voltage_spread.to_string(),
        s.final_voltage_spread.to_string(),
        s.initial_soc_spread.to_string(),
        s.final_soc_spread.to_string(),
        s.final_std_v.to_string(),
        s.mean_std_v.to_string(),
        s.gap_uniformity.to_string(),
        s.converter_coulombs.to_string(),
        run.events.len().to_string(),
    ]
}

fn output_dir(common: &Common) -> Result<PathBuf, Failure> {
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs());
            PathBuf::from("runs").join(format!("run-{secs}"))
        }
    };
    fs::create_dir_all(&dir)
        .map_err(|e| Failure::User(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_config(common: &Common, out: &Path) -> Result<ScenarioConfig, Failure> {
    if !common.config.is_file() {
        return Err(Failure::User(format!("config file not found: {}", common.config.display())));
    }
    let cfg = ScenarioConfig::from_path(&common.config, &common.overrides)?;
    if common.dump_config {
        fs::write(out.join("effective_config.json"), cfg.to_json() + "\n")
            .map_err(internal("cannot write effective_config.json"))?;
    }
    Ok(cfg)
}

fn write_run(dir: &Path, cfg: &ScenarioConfig, run: &ScenarioRun) -> Result<(), Failure> {
    let file = File::create(dir.join("trace.csv")).map_err(internal("cannot create trace.csv"))?;
    trace_io::write_trace_for(BufWriter::new(file), &run.trace, cfg.cells.len())
        .map_err(|e| Failure::Internal(format!("cannot write trace.csv: {e}")))?;
    let summary = SummaryFile {
        policy: cfg.controller.policy,
        seed: cfg.run.seed,
        summary: &run.summary,
        saturation_events: run.saturation_events,
        safety_events: &run.events,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(dir.join("summary.json"), json + "\n").map_err(internal("cannot write summary.json"))
}

fn write_table(path: &Path, table: &Table) -> Result<(), Failure> {
    let file = File::create(path).map_err(internal("cannot create output file"))?;
    table
        .write_csv(BufWriter::new(file))
        .map_err(|e| Failure::Internal(format!("cannot write {}: {e}", path.display())))
}

fn simulate(common: &Common) -> Result<(), Failure> {
    let out = output_dir(common)?;
    let cfg = load_config(common, &out)?;
    let run = run_scenario(&cfg)?;
    write_run(&out, &cfg, &run)?;
    eprintln!(
        "{}: {} steps, final spread {:.4} V",
        cfg.controller.policy, run.summary.steps, run.summary.final_voltage_spread
    );
    Ok(())
}

fn sweep(common: &Common) -> Result<(), Failure> {
    let out = output_dir(common)?;
    let cfg = load_config(common, &out)?;
    let policies = &cfg.run.policies;
    if policies.is_empty() {
        return Err(Failure::User("run.policies is empty; nothing to sweep".into()));
    }
    let unique: BTreeSet<Policy> = policies.iter().copied().collect();
    if unique.len() != policies.len() {
        return Err(Failure::User("run.policies lists a policy more than once".into()));
    }
    let seeds = if cfg.run.seeds.is_empty() { vec![cfg.run.seed] } else { cfg.run.seeds.clone() };
    if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
        return Err(Failure::User("run.seeds lists a seed more than once".into()));
    }

    let jobs: Vec<(Policy, u64, PathBuf)> = policies
        .iter()
        .flat_map(|&p| {
            let multi = seeds.len() > 1;
            let out = &out;
            seeds.iter().map(move |&s| {
                let dir = if multi { out.join(format!("{p}-seed{s}")) } else { out.join(p.name()) };
                (p, s, dir)
            })
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Failure::Internal(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<Vec<String>, Failure>> = pool.install(|| {
        jobs.par_iter()
            .map(|(policy, seed, dir)| {
                let mut scenario = cfg.clone();
                scenario.controller.policy = *policy;
                scenario.run.seed = *seed;
                fs::create_dir_all(dir).map_err(internal("cannot create run directory"))?;
                let run = run_scenario(&scenario)?;
                write_run(dir, &scenario, &run)?;
                Ok(comparison_row(*policy, *seed, &run))
            })
            .collect()
    });

    let mut table = Table { columns: COMPARISON_COLUMNS.map(String::from).to_vec(), rows: Vec::new() };
    for r in results {
        table.rows.push(r?);
    }
    write_table(&out.join("comparison.csv"), &table)
}

fn load_trace(args: &TraceArgs, out: &Path) -> Result<cellbal::Trace, Failure> {
    let path = args.trace.clone().unwrap_or_else(|| out.join("trace.csv"));
    let file = File::open(&path)
        .map_err(|e| Failure::User(format!("cannot open trace {}: {e}", path.display())))?;
    let trace = trace_io::read_trace(std::io::BufReader::new(file)).map_err(|e| match e {
        TraceError::Malformed { line, message } => {
            Failure::User(format!("{}: line {line}: {message}", path.display()))
        }
        TraceError::Csv(e) => Failure::User(format!("{}: {e}", path.display())),
    })?;
    if trace.rows.is_empty() {
        return Err(Failure::User(format!("{}: trace has no data rows", path.display())));
    }
    Ok(trace)
}

fn identify(args: &TraceArgs) -> Result<(), Failure> {
    let out = output_dir(&args.common)?;
    let cfg = load_config(&args.common, &out)?;
    let trace = load_trace(args, &out)?;
    let params: Vec<_> = cfg.cells.iter().map(|c| c.params.clone()).collect();
    let replay = analysis::replay_identification(&trace, &params, &cfg.controller)
        .map_err(|e| Failure::User(format!("identification failed: {e}")))?;
    write_table(&out.join("theta_history.csv"), &analysis::theta_history(&replay))?;
    write_table(&out.join("prediction_error.csv"), &analysis::prediction_error(&replay))
}

fn export_plots(args: &TraceArgs) -> Result<(), Failure> {
    let out = output_dir(&args.common)?;
    load_config(&args.common, &out)?;
    let trace = load_trace(args, &out)?;
    write_table(&out.join("soc_vs_time.csv"), &analysis::soc_series(&trace))?;
    write_table(&out.join("balancing_current_vs_time.csv"), &analysis::balancing_current_series(&trace))?;
    write_table(&out.join("extreme_voltages_vs_time.csv"), &analysis::extreme_voltage_series(&trace))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Sweep(c) => sweep(c),
        Command::Identify(a) => identify(a),
        Command::ExportPlots(a) => export_plots(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::User(msg) | Failure::Internal(msg)) = &f;
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
