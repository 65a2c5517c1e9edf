//! Command-line front end. `main` returns the process exit code:
//! 0 clean, 1 usage or input error, 2 collision or invariant violation.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::network::{aggregate_bandwidth, max_supported_vehicles, NetParams};
use crate::report;
use crate::sim::{compare_algorithms, parse_seeds, parse_trace, run, Algorithm, Scenario};
use crate::store::AgentId;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_UNSAFE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "leasesim", version, about = "Lease-based intersection coordination simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write its trace and metrics.
    Run(RunArgs),
    /// Run the lease and lock arms over a seed list.
    Compare(CompareArgs),
    /// Tabulate channel load over a range of fleet sizes.
    Sweep(SweepArgs),
    /// Render plots and a summary from a trace.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, value_parser = parse_algo)]
    pub algo: Option<Algorithm>,
    /// Vehicles that drive without coordination, e.g. `1,3`.
    #[arg(long, value_delimiter = ',')]
    pub no_v2v: Vec<AgentId>,
    #[arg(long)]
    pub debug_invariants: bool,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: ScenarioArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trace file; defaults to `<out-dir>/trace.jsonl`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: ScenarioArgs,
    /// `1..20`, `7` or `1,4,9`.
    #[arg(long)]
    pub seeds: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Fleet sizes as `10..60`, a single count, or a list.
    #[arg(long, default_value = "10..60")]
    pub n_vehicles: String,
    #[arg(long, default_value_t = 10)]
    pub step: u64,
    /// Network parameters as JSON; defaults when omitted.
    #[arg(long)]
    pub net: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Geometry used to check drawn leases for conflicts.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

fn parse_algo(s: &str) -> Result<Algorithm, String> {
    s.parse()
}

/// Error that maps to an exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load(args: &ScenarioArgs) -> Result<Scenario, Failure> {
    let mut scn = Scenario::load(&args.scenario).map_err(|e| usage(e.to_string()))?;
    if let Some(a) = args.algo {
        scn.algorithm = a;
    }
    scn.no_v2v.extend(args.no_v2v.iter().copied());
    scn.debug_invariants |= args.debug_invariants;
    Ok(scn)
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn std::io::Write) -> Result<i32, Failure> {
    let mut scn = load(&args.common)?;
    if let Some(seed) = args.seed {
        scn.seed = seed;
    }
    let result = run(&scn).map_err(|e| usage(e.to_string()))?;
    let m = &result.metrics;
    let dir = &args.common.out_dir;
    let trace_path = args.trace.clone().unwrap_or_else(|| dir.join("trace.jsonl"));
    let mut body = result.trace.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    write_file(&trace_path, &body)?;
    write_file(&dir.join("metrics.json"), &(serde_json::to_string_pretty(m).expect("metrics serialize") + "\n"))?;
    let total = m.total_completion_time.map_or("incomplete".to_string(), |t| format!("{t:.2} s"));
    let _ = writeln!(
        out,
        "{} seed {} {:?}: completion {total}, collisions {}, violation {}",
        m.scenario,
        m.seed,
        m.algorithm,
        m.collisions.len(),
        m.invariant_violation.as_ref().map_or("none".to_string(), |v| v.invariant.clone())
    );
    Ok(if m.clean() { EXIT_OK } else { EXIT_UNSAFE })
}

pub fn cmd_compare(args: &CompareArgs, out: &mut dyn std::io::Write) -> Result<i32, Failure> {
    let seeds = parse_seeds(&args.seeds).map_err(usage)?;
    if seeds.is_empty() {
        return Err(usage("no seeds given"));
    }
    let scn = load(&args.common)?;
    let rep = compare_algorithms(&scn, &seeds).map_err(|e| usage(e.to_string()))?;
    write_file(&args.common.out_dir.join("comparison.json"), &(serde_json::to_string_pretty(&rep).expect("report serializes") + "\n"))?;
    let _ = writeln!(out, "{:>6} {:>10} {:>10}", "seed", "lease", "lock");
    for r in &rep.rows {
        let flag = if r.lease_clean && r.lock_clean { "" } else { "  !" };
        let _ = writeln!(out, "{:>6} {:>10.3} {:>10.3}{flag}", r.seed, r.lease_time, r.lock_time);
    }
    let _ = writeln!(out, "mean lease {:.3} s, mean lock {:.3} s, ratio {:.3}", rep.mean_lease_time, rep.mean_lock_time, rep.ratio);
    let lease_safe = rep.rows.iter().all(|r| r.lease_collisions == 0 && r.lease_clean);
    Ok(if lease_safe { EXIT_OK } else { EXIT_UNSAFE })
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn std::io::Write) -> Result<i32, Failure> {
    let net: NetParams = match &args.net {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => NetParams::default(),
    };
    if args.step == 0 {
        return Err(usage("step must be positive"));
    }
    let counts: Vec<u64> = match args.n_vehicles.split_once("..") {
        Some((a, b)) => {
            let a: u64 = a.trim().parse().map_err(|e| usage(format!("bad count: {e}")))?;
            let b: u64 = b.trim().parse().map_err(|e| usage(format!("bad count: {e}")))?;
            (a..=b).step_by(args.step as usize).collect()
        }
        None => parse_seeds(&args.n_vehicles).map_err(usage)?,
    };
    if counts.is_empty() {
        return Err(usage("empty sweep"));
    }
    let limit = max_supported_vehicles(&net);
    let mut csv = String::from("n_vehicles,aggregate_bandwidth,capacity,fits\n");
    for n in counts {
        let bw = aggregate_bandwidth(n as usize, &net);
        csv.push_str(&format!("{n},{bw},{},{}\n", net.capacity, (n as usize) <= limit));
    }
    write_file(&args.out_dir.join("sweep.csv"), &csv)?;
    let _ = write!(out, "{csv}");
    let _ = writeln!(out, "max supported vehicles: {limit}");
    Ok(EXIT_OK)
}

pub fn cmd_report(args: &ReportArgs, out: &mut dyn std::io::Write) -> Result<i32, Failure> {
    let text = fs::read_to_string(&args.trace).map_err(|e| usage(format!("{}: {e}", args.trace.display())))?;
    let records = parse_trace(&text).map_err(|e| usage(format!("malformed trace: {e}")))?;
    let data = report::collect(&records);
    let mut summary = report::summary_text(&data);
    if let Some(p) = &args.scenario {
        let scn = Scenario::load(p).map_err(|e| usage(e.to_string()))?;
        let model = crate::geometry::IntersectionModel::build(&scn.geometry).map_err(|e| usage(e.to_string()))?;
        let overlaps = report::overlapping_bars(&data.bars, &model);
        summary.push_str(&format!("conflicting lease overlaps: {}\n", overlaps.len()));
    }
    write_file(&args.out_dir.join("time_space.svg"), &report::time_space_svg(&data))?;
    write_file(&args.out_dir.join("lease_gantt.svg"), &report::lease_gantt_svg(&data))?;
    write_file(&args.out_dir.join("summary.txt"), &summary)?;
    let _ = write!(out, "{summary}");
    Ok(EXIT_OK)
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
            } else {
                let _ = write!(out, "{}", e.render());
            }
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a, out),
        Command::Compare(a) => cmd_compare(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Report(a) => cmd_report(a, out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}
