use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use infersim::config::ExperimentConfig;
use infersim::metrics::{compute_metrics, perturb_profiles, MetricsReport, Summary};
use infersim::profile::ProfileSet;
use infersim::scheduler::{Ablation, PolicyKind};
use infersim::sim::{self, SimOutput};
use infersim::trace::EventTrace;

#[derive(Parser)]
#[command(name = "infersim", version, about = "Deadline-aware GPU inference scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config (TOML). Defaults to the built-in overload workload.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// interference-aware, temporal, static-spatial or reactive-spatial
    #[arg(long)]
    policy: Option<String>,
    /// Arrival window in milliseconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(RunArgs),
    /// Run a grid of seeds and policies in parallel.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        /// Comma-separated policies, or "all".
        #[arg(long, default_value = "all")]
        policies: String,
    },
    /// Recompute metrics from a saved trace.
    Report {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 1000.0)]
        window_ms: f64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Write randomly perturbed copies of a profile set.
    Perturb {
        /// Profile directory; the built-in set when absent.
        #[arg(long)]
        profiles_dir: Option<PathBuf>,
        /// Perturbation magnitude in percent.
        #[arg(long, default_value_t = 15.0)]
        magnitude: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run every ablation variant of the interference-aware policy.
    Ablate(RunArgs),
    /// Write a starter config and the built-in profiles.
    Init {
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::overload(0),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &args.policy {
        cfg.policy = parse_policy(p)?;
    }
    if let Some(d) = args.duration {
        cfg.duration_ms = d;
    }
    let profiles = cfg.profiles()?;
    cfg.validate(&profiles)?;
    Ok(cfg)
}

fn parse_policy(s: &str) -> Result<PolicyKind> {
    match PolicyKind::parse(s) {
        Some(p) => Ok(p),
        None => bail!(
            "unknown policy {s}; expected one of {}",
            PolicyKind::ALL.map(PolicyKind::name).join(", ")
        ),
    }
}

fn write_series(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for r in rows {
        writeln!(f, "{r}")?;
    }
    Ok(())
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<Summary> {
    fs::create_dir_all(dir)?;
    let summary = report.summary();
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let indexed = |v: &[f64]| v.iter().enumerate().map(|(i, x)| format!("{i},{x}")).collect::<Vec<_>>();
    write_series(&dir.join("intf_error.csv"), "batch,error", indexed(&report.intf_error).into_iter())?;
    write_series(&dir.join("latency_error.csv"), "batch,error", indexed(&report.latency_error).into_iter())?;
    write_series(
        &dir.join("kernel_overhead.csv"),
        "batch,overhead",
        indexed(&report.kernel_overhead).into_iter(),
    )?;
    let w = report.window_ms;
    write_series(
        &dir.join("goodput.csv"),
        "window_start_ms,high,low",
        report
            .high
            .goodput
            .iter()
            .zip(&report.low.goodput)
            .enumerate()
            .map(|(i, (h, l))| format!("{},{h},{l}", i as f64 * w)),
    )?;
    write_series(
        &dir.join("c_low.csv"),
        "time,gpu,c_low",
        report.c_low.iter().map(|(t, g, c)| format!("{t},{g},{c}")),
    )?;
    Ok(summary)
}

fn write_run(dir: &Path, out: &SimOutput) -> Result<Summary> {
    fs::create_dir_all(dir)?;
    out.trace.write(&dir.join("trace.csv"))?;
    out.predictor.save(&dir.join("predictor.json"))?;
    fs::write(dir.join("trace.sha256"), format!("{}\n", out.trace.hash()))?;
    write_report(dir, &out.report)
}

fn one_line(label: &str, s: &Summary) -> String {
    format!(
        "{label}: hp_violation={:.2}% lp_violation={:.2}% batches={} intf_err_p95={:.3}",
        s.high.violation_pct,
        s.low.violation_pct,
        s.batches,
        s.intf_error.p95_abs.unwrap_or(f64::NAN)
    )
}

const SWEEP_HEADER: &str = "label,seed,hp_violation_pct,lp_violation_pct,hp_p99_ms,lp_p99_ms,batches,intf_err_p95,trace_sha256";

fn sweep_row(label: &str, seed: u64, s: &Summary, hash: &str) -> String {
    format!(
        "{label},{seed},{},{},{},{},{},{},{hash}",
        s.high.violation_pct,
        s.low.violation_pct,
        s.high.p99.unwrap_or(f64::NAN),
        s.low.p99.unwrap_or(f64::NAN),
        s.batches,
        s.intf_error.p95_abs.unwrap_or(f64::NAN)
    )
}

fn run_grid(jobs: Vec<(String, ExperimentConfig)>, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let results: Vec<Result<(String, u64, Summary, String)>> = jobs
        .into_par_iter()
        .map(|(label, cfg)| {
            let out = sim::run(&cfg).with_context(|| format!("run {label} seed {}", cfg.seed))?;
            let dir = out_dir.join(format!("{label}-seed{}", cfg.seed));
            let summary = write_run(&dir, &out)?;
            Ok((label, cfg.seed, summary, out.trace.hash()))
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        let (label, seed, s, hash) = r?;
        println!("{}", one_line(&format!("{label} seed {seed}"), &s));
        rows.push(sweep_row(&label, seed, &s, &hash));
    }
    write_series(&out_dir.join("sweep.csv"), SWEEP_HEADER, rows.into_iter())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let out = sim::run(&cfg)?;
            let s = write_run(&args.out_dir, &out)?;
            println!("{}", one_line(cfg.policy.name(), &s));
        }
        Command::Sweep { run, seeds, policies } => {
            let base = load_config(&run)?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse().with_context(|| format!("bad seed {s}")))
                .collect::<Result<_>>()?;
            let policies: Vec<PolicyKind> = if policies == "all" {
                PolicyKind::ALL.to_vec()
            } else {
                policies.split(',').map(|p| parse_policy(p.trim())).collect::<Result<_>>()?
            };
            let mut jobs = Vec::new();
            for &p in &policies {
                for &seed in &seeds {
                    let mut cfg = base.clone();
                    cfg.policy = p;
                    cfg.seed = seed;
                    jobs.push((p.name().to_string(), cfg));
                }
            }
            run_grid(jobs, &run.out_dir)?;
        }
        Command::Report {
            trace,
            window_ms,
            out_dir,
        } => {
            if !(window_ms > 0.0) {
                bail!("window must be positive");
            }
            let t = EventTrace::read(&trace)?;
            let report = compute_metrics(&t, window_ms);
            let s = write_report(&out_dir, &report)?;
            if s.partial {
                eprintln!("warning: trace has no end record; report is partial");
            }
            println!("{}", one_line("report", &s));
        }
        Command::Perturb {
            profiles_dir,
            magnitude,
            seed,
            out_dir,
        } => {
            if !(0.0..=100.0).contains(&magnitude) {
                bail!("magnitude must be within [0, 100]");
            }
            let set = match profiles_dir {
                Some(d) => ProfileSet::load_dir(&d)?,
                None => infersim::profile::builtin_profile_set(),
            };
            let perturbed = ProfileSet::new(perturb_profiles(set.as_slice(), magnitude, seed))?;
            perturbed.write_dir(&out_dir)?;
            println!("wrote {} profiles to {}", perturbed.len(), out_dir.display());
        }
        Command::Ablate(args) => {
            let base = load_config(&args)?;
            let jobs = Ablation::variants()
                .into_iter()
                .map(|(label, a)| {
                    let mut cfg = base.clone();
                    cfg.policy = PolicyKind::InterferenceAware;
                    cfg.ablation = a;
                    (label.to_string(), cfg)
                })
                .collect();
            run_grid(jobs, &args.out_dir)?;
        }
        Command::Init { out_dir } => {
            let profiles_dir = out_dir.join("profiles");
            infersim::profile::builtin_profile_set().write_dir(&profiles_dir)?;
            let mut cfg = ExperimentConfig::overload(0);
            cfg.profiles_dir = Some(PathBuf::from("profiles"));
            fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
            println!("wrote {} and {}", out_dir.join("config.toml").display(), profiles_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
