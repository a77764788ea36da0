use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};

use lanesim::engine::progressive::{demo_scenario, run_progressive};
use lanesim::engine::{self, EngineConfig, Interference, RunLog};
use lanesim::metrics;
use lanesim::policy;
use lanesim::units::{self, GIB};
use lanesim::workload::{self, JobSpec, SynthConfig};

#[derive(Parser)]
#[command(name = "lanesim", version, about = "Discrete-event simulator for GPU lane sharing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a trace under one policy and write the log and metric CSVs.
    Run(RunArgs),
    /// Generate a synthetic trace file without running it.
    Synth(SynthArgs),
    /// Reproduce the progressive-allocation deadlock demo.
    DeadlockDemo(DemoArgs),
    /// Print the built-in workload catalog as CSV.
    Catalog,
    /// Recompute the metric CSVs from an existing run log.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Trace file, one job per line as JSON.
    #[arg(long, value_name = "FILE", conflicts_with = "synth", required_unless_present = "synth")]
    trace: Option<PathBuf>,
    /// Synthesize the trace instead: comma-separated key=value pairs
    /// (count, seed, mean_interarrival_s, iters_mu, iters_sigma, u_min, u_max).
    #[arg(long, value_name = "PARAMS")]
    synth: Option<String>,
    #[arg(long, value_parser = PossibleValuesParser::new(policy::names().iter().copied()))]
    policy: String,
    /// GPU memory: raw bytes or a GiB/MiB/KiB suffix.
    #[arg(long, default_value = "16GiB")]
    capacity: String,
    /// Seconds charged when a lane switches jobs.
    #[arg(long, default_value_t = 0.005)]
    switch_overhead: f64,
    #[arg(long, default_value = "linear", value_parser = PossibleValuesParser::new(["linear", "none"]))]
    interference: String,
    /// Reload bandwidth in bytes per second.
    #[arg(long, default_value_t = 30e9)]
    bandwidth: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for run.log and the CSVs.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Comma-separated key=value pairs; defaults apply to omitted keys.
    #[arg(long, value_name = "PARAMS")]
    params: Option<String>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value = "12GiB")]
    capacity: String,
    /// Reserve each job's peak inside a lane instead of sharing a free pool.
    #[arg(long)]
    lanes: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, value_name = "FILE")]
    log: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::DeadlockDemo(a) => cmd_demo(a),
        Cmd::Catalog => cmd_catalog(),
        Cmd::Report(a) => cmd_report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_or_synth(args: &RunArgs) -> anyhow::Result<Vec<JobSpec>> {
    if let Some(path) = &args.trace {
        let f = fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
        Ok(workload::load_trace(BufReader::new(f))?)
    } else {
        let params = args.synth.as_deref().expect("clap requires one trace source");
        let cfg = SynthConfig::parse(params)?;
        Ok(workload::synth_trace(&cfg)?)
    }
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let trace = load_or_synth(&args)?;
    let policy = policy::by_name(&args.policy)?;
    let mut cfg = EngineConfig::new(units::parse_bytes(&args.capacity)?);
    cfg.switch_overhead_s = args.switch_overhead;
    cfg.interference = match args.interference.as_str() {
        "none" => Interference::None,
        _ => Interference::Linear,
    };
    cfg.bandwidth = args.bandwidth;
    cfg.seed = args.seed;
    let out = engine::run(&trace, policy.as_ref(), &cfg)?;
    fs::create_dir_all(&args.out)?;
    metrics::write_atomic(&args.out.join("run.log"), out.log.to_jsonl().as_bytes())?;
    metrics::write_csvs(&args.out, &out.report)?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let cfg = match &args.params {
        Some(p) => SynthConfig::parse(p)?,
        None => SynthConfig::default(),
    };
    let trace = workload::synth_trace(&cfg)?;
    metrics::write_atomic(&args.out, workload::serialize_trace(&trace).as_bytes())?;
    Ok(())
}

fn cmd_demo(args: DemoArgs) -> anyhow::Result<()> {
    let capacity = units::parse_bytes(&args.capacity)?;
    // the demo is quoted in whole units; one unit is 1 GiB
    let report = run_progressive(&demo_scenario(GIB), capacity, args.lanes)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_catalog() -> anyhow::Result<()> {
    println!("model,batch,persistent,peak,average,solo_iteration,approx");
    for e in workload::catalog::all() {
        println!(
            "{},{},persistent={}MB,peak={}MB,average={}MB,solo_iter={}s,approx={}",
            e.name,
            e.batch,
            mb(e.persistent_bytes),
            mb(e.peak_bytes),
            mb(e.average_bytes),
            e.solo_iteration_s,
            e.approx
        );
    }
    Ok(())
}

fn mb(bytes: u64) -> String {
    format!("{:.1}", bytes as f64 / 1e6)
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let text =
        fs::read_to_string(&args.log).with_context(|| format!("read {}", args.log.display()))?;
    let log = RunLog::from_jsonl(&text)?;
    let report = metrics::compute_report(&log)?;
    fs::create_dir_all(&args.out)?;
    metrics::write_csvs(&args.out, &report)?;
    Ok(())
}
