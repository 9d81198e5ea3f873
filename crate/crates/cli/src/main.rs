use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use trackmap::config::PipelineConfig;
use trackmap::exec::{with_workers, Execution};
use trackmap::pipeline::{self, EvalInputs, RunInput};
use trackmap::{Error, Result};

/// Ground-surface annotation, map fusion and planning from trajectories.
#[derive(Debug, Parser)]
#[command(name = "trackmap", version)]
struct Cli {
    /// TOML configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all randomness (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads, 0 for one per logical core (overrides the config).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Process frames one at a time.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a run directory with predictions and ground truth.
    Simulate,
    /// Write sparse per-frame annotations (D0) for a run.
    Annotate {
        /// Run directory written by `simulate` (or laid out the same way).
        run: PathBuf,
    },
    /// Fuse per-frame predictions of one or more runs into a map.
    Fuse {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Prediction directory per run, in order (default `<run>/pred`).
        #[arg(long)]
        pred: Vec<PathBuf>,
    },
    /// Render the fused map into every frame of a run (D1).
    Render {
        /// Fused `map.tmap`.
        map: PathBuf,
        /// Run whose poses and calibration are rendered.
        run: PathBuf,
        /// D0 directory for the coverage comparison.
        #[arg(long)]
        d0: Option<PathBuf>,
    },
    /// Score label sources against the run's ground truth.
    Eval {
        /// Run with ground truth in `gt/` and `gt_bev.png`.
        run: PathBuf,
        /// Per-frame predictions to score.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// D0 masks to score.
        #[arg(long)]
        d0: Option<PathBuf>,
        /// D1 masks to score; with `--pred`, also the targets of the weighted loss.
        #[arg(long)]
        d1: Option<PathBuf>,
        /// Directory containing the fused `map.png` and `map.json`.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Plan a path on a fused map.
    Plan {
        /// Directory containing the fused `map.png` and `map.json`.
        map: PathBuf,
        /// Run whose first and last poses are the default endpoints.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Start as `x,y` in world meters.
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
        start: Option<[f64; 2]>,
        /// Goal as `x,y` in world meters.
        #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
        goal: Option<[f64; 2]>,
    },
}

fn parse_point(s: &str) -> std::result::Result<[f64; 2], String> {
    let (x, y) = s.split_once(',').ok_or("expected x,y")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok([p(x)?, p(y)?])
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if cli.sequential {
        cfg.execution = Execution::Sequential;
    }
    if let Command::Plan { start, goal, .. } = &cli.command {
        cfg.plan.start = start.or(cfg.plan.start);
        cfg.plan.goal = goal.or(cfg.plan.goal);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_config(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let out = cli.out.as_path();
    with_workers(cfg.workers, || {
        match &cli.command {
            Command::Simulate => {
                pipeline::cmd_simulate(&cfg, out)?;
            }
            Command::Annotate { run } => {
                pipeline::cmd_annotate(&cfg, run, out)?;
            }
            Command::Fuse { runs, pred } => {
                if !pred.is_empty() && pred.len() != runs.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} runs but {} prediction directories",
                        runs.len(),
                        pred.len()
                    )));
                }
                let inputs: Vec<RunInput> = runs
                    .iter()
                    .enumerate()
                    .map(|(k, r)| RunInput::new(r, pred.get(k).cloned()))
                    .collect();
                pipeline::cmd_fuse(&cfg, &inputs, out)?;
            }
            Command::Render { map, run, d0 } => {
                pipeline::cmd_render(&cfg, map, run, d0.as_deref(), out)?;
            }
            Command::Eval { run, pred, d0, d1, map } => {
                let inputs = EvalInputs {
                    pred: pred.clone(),
                    d0: d0.clone(),
                    d1: d1.clone(),
                    map: map.clone(),
                };
                let report = pipeline::cmd_eval(&cfg, run, &inputs, out)?;
                print!("{}", report.to_table());
            }
            Command::Plan { map, run, .. } => {
                pipeline::cmd_plan(&cfg, map, run.as_deref(), out)?;
            }
        }
        write_config(&cfg, out)
    })?;
    info!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: class={} {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}
