//! `gpmap`: runs the mapping experiments and writes their artifacts.

mod output;
mod summary;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gpmap_core::{run_experiment, Error, Experiment, Scheduler, SimConfig};

use output::{write_config_failure, Buffered, Manifest, RunWriter};

#[derive(Parser)]
#[command(name = "gpmap", version, about = "Distributed sparse GP mapping experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Batch models with a growing number of extra prior edges.
    Edges(RunArgs),
    /// Online distributed mapping against centralized batch baselines.
    Async(RunArgs),
    /// Mapping a time-varying field with inducing-point retirement.
    Dynamic(RunArgs),
    /// Single-pass occupancy mapping from simulated LIDAR.
    Occupancy(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SchedulerArg {
    Seq,
    Par,
}

#[derive(Args)]
struct RunArgs {
    /// TOML file overriding the experiment defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replays a previous run from its manifest.json (config and seeds).
    #[arg(long, conflicts_with_all = ["config", "seed", "seeds"])]
    manifest: Option<PathBuf>,
    /// Runs a single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Runs a seed range `N..M` (M excluded) or `N..=M`.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedRange>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "seq")]
    scheduler: SchedulerArg,
}

#[derive(Clone, Debug)]
struct SeedRange(Vec<u64>);

fn parse_seeds(s: &str) -> Result<SeedRange, String> {
    let (a, b, inclusive) = if let Some((a, b)) = s.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = s.split_once("..") {
        (a, b, false)
    } else {
        return Err(format!("expected N..M or N..=M, got `{s}`"));
    };
    let a: u64 = a.trim().parse().map_err(|e| format!("bad start `{a}`: {e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("bad end `{b}`: {e}"))?;
    let seeds: Vec<u64> = if inclusive { (a..=b).collect() } else { (a..b).collect() };
    if seeds.is_empty() {
        return Err(format!("seed range `{s}` is empty"));
    }
    Ok(SeedRange(seeds))
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    if e.is_config() { EXIT_CONFIG } else { EXIT_NUMERICAL }
}

fn resolve(experiment: Experiment, args: &RunArgs) -> Result<(SimConfig, Vec<u64>), Error> {
    if let Some(path) = &args.manifest {
        let m = Manifest::load(path)?;
        if m.experiment != experiment {
            return Err(Error::config("experiment", format!("manifest is for `{}`", m.experiment.name())));
        }
        let cfg = SimConfig::from_toml(&m.config, experiment)?;
        return Ok((cfg, m.seeds));
    }
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut cfg = SimConfig::from_toml(&text, experiment)?;
            cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
            cfg
        }
        None => {
            let mut cfg = SimConfig::defaults(experiment);
            cfg.resolve_paths(Path::new("."));
            cfg
        }
    };
    let seeds = match (&args.seed, &args.seeds) {
        (Some(s), _) => vec![*s],
        (None, Some(v)) => v.0.clone(),
        (None, None) => (cfg.seed..cfg.seed + cfg.seeds).collect(),
    };
    cfg.seed = seeds[0];
    cfg.seeds = seeds.len() as u64;
    Ok((cfg, seeds))
}

fn run(experiment: Experiment, args: &RunArgs) -> Result<(), (Error, bool)> {
    let (cfg, seeds) = match resolve(experiment, args) {
        Ok(v) => v,
        Err(e) => {
            let _ = write_config_failure(&args.out, experiment, &e.to_string());
            return Err((e, false));
        }
    };
    // the manifest goes out before any computation
    let mut writer = RunWriter::create(&args.out, &cfg, &seeds).map_err(|e| (e, false))?;
    let outcome = match args.scheduler {
        SchedulerArg::Seq => run_sequential(&cfg, &seeds, &mut writer),
        SchedulerArg::Par => run_parallel(&cfg, &seeds, &mut writer),
    };
    match outcome {
        Ok(()) => writer.finish(None).map_err(|e| (e, true)),
        Err((seed, e)) => {
            writer.finish(Some(&format!("seed {seed}: {e}"))).map_err(|e| (e, true))?;
            Err((e, true))
        }
    }
}

fn run_sequential(cfg: &SimConfig, seeds: &[u64], writer: &mut RunWriter) -> Result<(), (u64, Error)> {
    for &seed in seeds {
        eprintln!("{}: seed {seed}", cfg.experiment.name());
        run_experiment(cfg, seed, Scheduler::Sequential, writer).map_err(|e| (seed, e))?;
    }
    Ok(())
}

/// Seeds run concurrently; their output is written in seed order, up to the
/// first failing seed, so the files match a sequential run.
fn run_parallel(cfg: &SimConfig, seeds: &[u64], writer: &mut RunWriter) -> Result<(), (u64, Error)> {
    let results: Vec<(Buffered, Result<(), Error>)> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                s.spawn(move || {
                    let mut buf = Buffered::default();
                    let r = run_experiment(cfg, seed, Scheduler::Parallel, &mut buf);
                    (buf, r)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
    });
    for (&seed, (buf, r)) in seeds.iter().zip(results) {
        buf.replay(writer).map_err(|e| (seed, e))?;
        r.map_err(|e| (seed, e))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, args) = match &cli.command {
        Command::Edges(a) => (Experiment::Edges, a),
        Command::Async(a) => (Experiment::Async, a),
        Command::Dynamic(a) => (Experiment::Dynamic, a),
        Command::Occupancy(a) => (Experiment::Occupancy, a),
    };
    match run(experiment, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err((e, partial)) => {
            eprintln!("error: {e}");
            if partial {
                eprintln!("partial outputs left in {}", args.out.display());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
