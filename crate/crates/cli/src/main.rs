//! `cereals` command-line driver.

use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use cereals_core::experiment::driver::plot_results;
use cereals_core::experiment::{
    curves::render_svg, generate, load_data, load_results, run_experiment, run_reference, ExperimentConfig, RunOptions,
};
use cereals_core::learners::{serve, LearnerKind};
use cereals_core::pool::write_split;
use cereals_core::region::Fusion;
use cereals_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cereals", version, about = "Cost-aware region-based active learning for semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset described by the config to disk.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the full training split and print the reference mIoU.
    Reference {
        #[command(flatten)]
        common: Common,
    },
    /// Run the active-learning experiment.
    Run(RunArgs),
    /// Summarize one or more results directories.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Write an SVG with every mean curve.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Serve the JSON-lines learner protocol on stdin/stdout.
    Worker { workdir: PathBuf },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Load this generated dataset instead of generating in memory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    rng_seed: Option<u64>,
    /// Directory for cached reference results.
    #[arg(long, default_value = ".cereals-cache")]
    reference_cache: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// image_random | image_score | region_random | region_score
    #[arg(long)]
    strategy: Option<String>,
    /// entropy | vote_entropy | none
    #[arg(long)]
    measure: Option<String>,
    /// info_only | g1 | g2 | g3
    #[arg(long)]
    fusion: Option<String>,
    /// Trade-off for g3.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    region_size: Option<usize>,
    #[arg(long)]
    batch_images: Option<usize>,
    #[arg(long)]
    seed_images: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    max_rounds: Option<usize>,
    #[arg(long)]
    committee_size: Option<usize>,
    /// oracle | builtin | external
    #[arg(long)]
    cost_mode: Option<String>,
    /// Worker command line; selects the external learner.
    #[arg(long)]
    worker_cmd: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Continue from the per-repetition checkpoints in `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    dump_info_maps: Option<PathBuf>,
    #[arg(long)]
    dump_cost_maps: Option<PathBuf>,
    #[arg(long)]
    dump_region_maps: Option<PathBuf>,
    /// Also write `curves.svg` into the results directory.
    #[arg(long)]
    plot: bool,
}

fn parse_name<T: DeserializeOwned>(what: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::Config(format!("unknown {what} `{value}`")))
}

fn base_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &common.data {
        config.data_dir = Some(dir.clone());
    }
    if let Some(seed) = common.rng_seed {
        config.rng_seed = seed;
    }
    Ok(config)
}

fn run_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut c = base_config(&args.common)?;
    let a = &mut c.acquisition;
    if let Some(s) = &args.strategy {
        a.strategy = parse_name("strategy", s)?;
    }
    if let Some(m) = &args.measure {
        a.measure = parse_name("measure", m)?;
    }
    match (args.fusion.as_deref(), args.alpha) {
        (Some("g3"), Some(alpha)) => a.fusion = Fusion::G3 { alpha },
        (Some("g3"), None) => return Err(Error::Config("fusion g3 needs --alpha".into())),
        (Some(kind), None) => {
            a.fusion = serde_json::from_value(serde_json::json!({ "kind": kind }))
                .map_err(|_| Error::Config(format!("unknown fusion `{kind}`")))?
        }
        (Some(_), Some(_)) => return Err(Error::Config("--alpha only applies to g3".into())),
        (None, Some(alpha)) => match a.fusion {
            Fusion::G3 { .. } => a.fusion = Fusion::G3 { alpha },
            _ => return Err(Error::Config("--alpha only applies to g3".into())),
        },
        (None, None) => {}
    }
    if let Some(w) = args.region_size {
        a.region_size = Some(w);
    }
    if let Some(m) = args.batch_images {
        a.batch_images = m;
    }
    if let Some(n) = args.seed_images {
        c.seed_images = n;
    }
    if let Some(r) = args.repetitions {
        c.repetitions = r;
    }
    if let Some(r) = args.max_rounds {
        c.max_rounds = r;
    }
    if let Some(n) = args.committee_size {
        c.committee_size = n;
    }
    if let Some(m) = &args.cost_mode {
        c.cost_mode = parse_name("cost mode", m)?;
    }
    if let Some(cmd) = &args.worker_cmd {
        c.learner.kind = LearnerKind::External;
        c.learner.external.command = cmd.split_whitespace().map(str::to_string).collect();
    }
    if let Some(n) = args.workers {
        c.learner.external.workers = n;
    }
    c.validate()?;
    Ok(c)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_index(v: Option<f64>) -> String {
    v.map_or_else(|| "NOT_REACHED".to_string(), |x| format!("{:.4}", x))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate { common, out } => {
            let config = base_config(&common)?;
            let data = generate(&config.dataset)?;
            write_split(&out, &data, Some(serde_json::to_value(&config.dataset)?))?;
            println!(
                "wrote {} train and {} val images to {}",
                data.train.len(),
                data.val.len(),
                out.display()
            );
        }
        Command::Reference { common } => {
            let config = base_config(&common)?;
            config.validate()?;
            let data = load_data(&config)?;
            let reference = run_reference(&config, &data, Some(&common.reference_cache))?;
            println!("{}", serde_json::to_string_pretty(&reference)?);
        }
        Command::Run(args) => {
            let config = run_config(&args)?;
            let data = load_data(&config)?;
            let reference = run_reference(&config, &data, Some(&args.common.reference_cache))?;
            let options = RunOptions {
                out_dir: Some(args.out.clone()),
                resume: args.resume,
                dump_info_maps: args.dump_info_maps.clone(),
                dump_cost_maps: args.dump_cost_maps.clone(),
                dump_region_maps: args.dump_region_maps.clone(),
            };
            let result = run_experiment(&config, &data, reference.p100_miou, &options)?;
            if args.plot {
                let curves: Vec<_> = result.repetitions.iter().map(|r| r.curve.clone()).collect();
                write_file(&args.out.join("curves.svg"), &plot_results(&result.summary, &result.mean, &curves))?;
            }
            let s = &result.summary;
            println!(
                "{}: p100 mIoU {:.4}, p95 {}, c95 {}",
                s.label,
                s.p100_miou,
                fmt_index(s.index.p95),
                fmt_index(s.index.c95)
            );
        }
        Command::Report { results, plot } => {
            let mut loaded = Vec::new();
            println!("{:<40} {:>10} {:>12} {:>12} {:>7}", "setup", "p100", "p95", "c95", "rounds");
            for dir in &results {
                let (summary, mean, _) = load_results(dir)?;
                println!(
                    "{:<40} {:>10.4} {:>12} {:>12} {:>7}",
                    summary.label,
                    summary.p100_miou,
                    fmt_index(summary.index.p95),
                    fmt_index(summary.index.c95),
                    summary.rounds
                );
                loaded.push((summary, mean));
            }
            if let Some(path) = plot {
                let series: Vec<_> = loaded.iter().map(|(s, m)| (s.label.clone(), m)).collect();
                write_file(&path, &render_svg(&series, loaded.first().map(|(s, _)| s.p100_miou)))?;
            }
        }
        Command::Worker { workdir } => {
            let stdin = io::stdin();
            serve(stdin.lock(), BufWriter::new(io::stdout().lock()), &workdir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Protocol { stderr, .. } = &e {
                if !stderr.trim().is_empty() {
                    eprintln!("worker stderr:\n{}", stderr.trim_end());
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
