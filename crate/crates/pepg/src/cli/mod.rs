//! Command-line front end: `train`, `sweep`, `verify` and `plot`.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 invalid spec or
//! arguments (including an empty plot glob), 3 a run aborted at runtime.

pub mod io;
pub mod plot;
pub mod spec;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::PepgError;
use crate::trainers::{run_loan_protocol, sweep, LoanTrainConfig, SweepSummary};
use crate::verify::{run_suite, summary_table, Suite, SuiteOptions};
use plot::PlotKind;
use spec::ExperimentSpec;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Seed fallback when neither `--seed` nor the spec lists any.
pub const SEED_ENV: &str = "PEPG_SEED";

#[derive(Debug, Parser)]
#[command(name = "pepg", version, about = "Performative policy gradient experiments and verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every configured algorithm for every seed.
    Train(RunArgs),
    /// Like `train`, over the spec's `[sweep]` grid; also writes summary.json.
    Sweep(RunArgs),
    /// Check identities and inequalities on generated instances.
    Verify(VerifyArgs),
    /// Render run CSVs as an SVG figure.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Comma-separated seeds; replaces the spec's list.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key.path=value`, applied to the spec before validation.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "all")]
    pub suite: String,
    /// Generator seed; only the first value is used.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    /// Directory for the JSON report.
    #[arg(long, default_value = "runs/verify")]
    pub out: PathBuf,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, hide = true, default_value_t = 0.0, allow_negative_numbers = true)]
    pub advantage_bias: f64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Glob of run CSVs, e.g. `runs/grid/*/seed-*.csv`.
    pub inputs: String,
    #[arg(long, value_enum, default_value = "curves")]
    pub kind: PlotKind,
    /// Output SVG path; defaults to `<kind>.svg`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn schema(e: PepgError) -> Self {
        Failure { code: EXIT_SCHEMA, message: e.to_string() }
    }
    fn runtime(e: PepgError) -> Self {
        Failure { code: EXIT_RUNTIME, message: e.to_string() }
    }
}

/// Explicit seeds, else the spec's, else `PEPG_SEED`, else `[0]`.
pub fn resolve_seeds(flag: &[u64], spec: &[u64]) -> Result<Vec<u64>, Failure> {
    if !flag.is_empty() {
        return Ok(flag.to_vec());
    }
    if !spec.is_empty() {
        return Ok(spec.to_vec());
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .split(',')
            .map(|s| s.trim().parse::<u64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::schema(PepgError::config(SEED_ENV, e.to_string()))),
        Err(_) => Ok(vec![0]),
    }
}

fn output_dir(flag: &Option<PathBuf>, spec: &ExperimentSpec) -> PathBuf {
    flag.clone().or_else(|| spec.out.clone()).unwrap_or_else(|| Path::new("runs").join(io::label_dir(&spec.name)))
}

fn summary_line(s: &SweepSummary) -> String {
    format!("{:<28} seeds={:<3} final={:+.6} sd={:.3e}", s.label, s.seeds, s.final_mean, s.final_std)
}

fn cmd_run(args: &RunArgs, is_sweep: bool) -> Result<i32, Failure> {
    let spec = ExperimentSpec::load(&args.spec, &args.overrides).map_err(Failure::schema)?;
    if is_sweep && spec.sweep.is_none() {
        return Err(Failure::schema(PepgError::config("sweep", "the sweep command needs a [sweep] section")));
    }
    let seeds = resolve_seeds(&args.seed, &spec.seeds)?;
    let out = output_dir(&args.out, &spec);
    let hash = io::spec_hash(&spec).map_err(Failure::runtime)?;
    if let Some(loan) = &spec.loan {
        return run_loan(loan, &seeds, &out, &hash);
    }
    let env = spec.env.as_ref().expect("validated spec has an environment");
    let configs = spec.configs().map_err(Failure::schema)?;
    eprintln!("running {} config(s) x {} seed(s) into {}", configs.len(), seeds.len(), out.display());
    let result = sweep(env, &configs, &seeds, args.jobs).map_err(Failure::runtime)?;
    for ((label, cfg), records) in configs.iter().zip(&result.records) {
        for rec in records {
            let cfg = crate::trainers::TrainConfig { seed: rec.seed, ..cfg.clone() };
            let cfg = serde_json::to_value(&cfg).map_err(|e| Failure::runtime(e.into()))?;
            io::write_run(&out, label, rec, &hash, Some(env), cfg).map_err(Failure::runtime)?;
        }
    }
    for s in &result.summaries {
        println!("{}", summary_line(s));
    }
    if is_sweep {
        let json = serde_json::to_string_pretty(&result.summaries).map_err(|e| Failure::runtime(e.into()))?;
        std::fs::write(out.join("summary.json"), json + "\n").map_err(|e| Failure::runtime(e.into()))?;
    }
    if result.failures.is_empty() {
        Ok(EXIT_OK)
    } else {
        for (i, seed, msg) in &result.failures {
            eprintln!("run {} seed {seed} aborted: {msg}", configs[*i].0);
        }
        Ok(EXIT_RUNTIME)
    }
}

fn run_loan(base: &LoanTrainConfig, seeds: &[u64], out: &Path, hash: &str) -> Result<i32, Failure> {
    for &seed in seeds {
        let cfg = LoanTrainConfig { seed, ..base.clone() };
        let run = run_loan_protocol(&cfg).map_err(Failure::runtime)?;
        let label = if cfg.performative { "loan-performative" } else { "loan-static" };
        let value = serde_json::to_value(&cfg).map_err(|e| Failure::runtime(e.into()))?;
        io::write_run(out, label, &run.record, hash, None, value).map_err(Failure::runtime)?;
        println!(
            "{label} seed={seed} theta={:+.4} U={:+.6} theta_erm={:+.4} U_erm={:+.6} theta_perf={:+.4} U_perf={:+.6}",
            run.final_theta, run.final_utility, run.theta_erm, run.utility_erm, run.theta_perf, run.utility_perf
        );
        if let Some(msg) = &run.record.aborted {
            eprintln!("loan seed {seed} aborted: {msg}");
            return Ok(EXIT_RUNTIME);
        }
    }
    Ok(EXIT_OK)
}

fn cmd_verify(args: &VerifyArgs) -> Result<i32, Failure> {
    let suite: Suite = args.suite.parse().map_err(Failure::schema)?;
    let seed = resolve_seeds(&args.seed, &[])?[0];
    if args.instances == 0 {
        return Err(Failure::schema(PepgError::config("instances", "must be at least 1")));
    }
    let opts = SuiteOptions { seed, instances: args.instances, advantage_bias: args.advantage_bias, ..SuiteOptions::default() };
    let exec = || run_suite(suite, &opts);
    let reports = match args.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| Failure::schema(PepgError::config("jobs", e.to_string())))?
            .install(exec),
        None => exec(),
    }
    .map_err(Failure::runtime)?;
    print!("{}", summary_table(&reports));
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::runtime(e.into()))?;
    let path = args.out.join(format!("verify-{}-seed-{seed}.json", args.suite));
    let json = serde_json::to_string_pretty(&reports).map_err(|e| Failure::runtime(e.into()))?;
    std::fs::write(&path, json + "\n").map_err(|e| Failure::runtime(e.into()))?;
    eprintln!("report written to {}", path.display());
    Ok(if reports.iter().all(|r| r.pass) { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

fn cmd_plot(args: &PlotArgs) -> Result<i32, Failure> {
    let groups = plot::load_groups(&args.inputs).map_err(|e| match e {
        PepgError::Config { ref reason, .. } if reason == "no inputs" => {
            Failure { code: EXIT_SCHEMA, message: "no inputs".into() }
        }
        e => Failure::schema(e),
    })?;
    let svg = plot::render(args.kind, &groups);
    let default = match args.kind {
        PlotKind::Curves => "curves.svg",
        PlotKind::Stability => "stability.svg",
        PlotKind::SweepBars => "sweep-bars.svg",
    };
    let path = args.out.clone().unwrap_or_else(|| default.into());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::runtime(e.into()))?;
    }
    std::fs::write(&path, svg).map_err(|e| Failure::runtime(e.into()))?;
    println!("{} group(s) plotted to {}", groups.len(), path.display());
    Ok(EXIT_OK)
}

pub fn execute(cli: &Cli) -> Result<i32, Failure> {
    match &cli.command {
        Command::Train(a) => cmd_run(a, false),
        Command::Sweep(a) => cmd_run(a, true),
        Command::Verify(a) => cmd_verify(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_SCHEMA } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
