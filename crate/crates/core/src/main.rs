use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gcr::cca::DofMode;
use gcr::cli;
use gcr::config::RunConfig;
use gcr::eval::MetricReport;
use gcr::synth::SynthSpec;
use gcr::GcrError;

#[derive(Parser)]
#[command(name = "gcr", version, about = "Graph cross-correlated recommendation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded execution for bit-exact runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, e.g. `--set model.L=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Split an interaction file into a dataset bundle.
    Ingest {
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a planted block dataset.
    Synth {
        #[arg(long, default_value_t = 8)]
        blocks: usize,
        #[arg(long, default_value_t = 40)]
        users_per_block: usize,
        #[arg(long, default_value_t = 40)]
        items_per_block: usize,
        #[arg(long, default_value_t = 0.3)]
        p_in: f64,
        #[arg(long, default_value_t = 0.005)]
        p_noise: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Cache hop readouts of a trained model.
    Precompute,
    Train,
    Evaluate {
        /// Also print the one-line TSV summary to stderr.
        #[arg(long)]
        tsv: bool,
    },
    /// Per-term weights of a linear cross head.
    ExportWeights,
    /// Aggregation degrees of freedom.
    Dof {
        /// ngcf, lightgcn, hcc, ecc, hcc-linear or ecc-linear.
        #[arg(long)]
        mode: Option<DofMode>,
    },
}

fn exit_code(err: &GcrError) -> u8 {
    match err {
        GcrError::Parse { .. } | GcrError::DuplicatePairs { .. } | GcrError::Config(_) | GcrError::NoInteractions => 2,
        GcrError::MissingArtifact { .. } => 3,
        _ => 1,
    }
}

fn resolve(global: &Global) -> gcr::Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for pair in &global.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn emit<T: Serialize>(value: &T, out: Option<&PathBuf>) -> gcr::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(args: Cli) -> gcr::Result<()> {
    let threads = if args.global.deterministic { Some(1) } else { args.global.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| GcrError::Config(e.to_string()))?;
    }
    let mut cfg = resolve(&args.global)?;
    let out = args.global.out.as_ref();
    match args.command {
        Command::Ingest { input, output } => {
            if let Some(dir) = output {
                cfg.paths.data = dir;
            }
            emit(&cli::ingest(&cfg, &input, &cfg.paths.data)?, out)
        }
        Command::Synth {
            blocks,
            users_per_block,
            items_per_block,
            p_in,
            p_noise,
            output,
        } => {
            let spec = SynthSpec {
                blocks,
                users_per_block,
                items_per_block,
                p_in,
                p_noise,
                seed: args.global.seed.unwrap_or(SynthSpec::default().seed),
            };
            emit(&cli::synth(&spec, &output)?, out)
        }
        Command::Precompute => emit(&cli::precompute(&cfg)?, out),
        Command::Train => emit(&cli::train(&cfg)?, out),
        Command::Evaluate { tsv } => {
            let report = cli::evaluate(&cfg)?;
            if tsv {
                eprintln!("{}\n{}", MetricReport::TSV_HEADER, report.tsv_line());
            }
            if let Some(path) = &cfg.paths.report {
                emit(&report, Some(path))?;
            }
            emit(&report, out)
        }
        Command::ExportWeights => emit(&cli::export_weights(&cfg)?, out),
        Command::Dof { mode } => {
            let v = cli::dof(&cfg, mode)?;
            match out {
                Some(_) => emit(&v, out),
                None => {
                    println!("{}", v["dof"]);
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("gcr: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
