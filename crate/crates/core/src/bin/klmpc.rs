//! Command-line front end for data collection, fitting and the experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use klmpc::edmd::Dataset;
use klmpc::harness::{self, ControllerKind, ExperimentConfig, ModelSet, TrackingReport};

#[derive(Parser)]
#[command(
    name = "klmpc",
    version,
    about = "Koopman MPC with online load estimation on a simulated two-link arm"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream; overrides the config and the environment.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Record wall-clock QP solve times in step logs (breaks byte-identical reruns).
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the ramp-and-hold campaign and write the dataset CSV.
    Collect {
        /// Comma-separated payloads in kg.
        #[arg(long, value_delimiter = ',')]
        loads: Option<Vec<f64>>,
        /// Trials per payload.
        #[arg(long)]
        trials: Option<usize>,
        /// Seconds per trial.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Fit the linear, Koopman and load-augmented Koopman models.
    Fit {
        /// Dataset CSV; collected on the fly when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Known-payload tracking with every selected controller.
    Track {
        #[command(flatten)]
        models: ModelArgs,
        /// Restrict to these controllers (L-MPC, K-MPC, KL-MPC).
        #[arg(long, value_delimiter = ',')]
        controller: Option<Vec<ControllerKind>>,
        /// Track the circle with the live load observer instead.
        #[arg(long)]
        unknown_load: bool,
    },
    /// Load estimation under ramp-and-hold excitation.
    Estimate {
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Estimate, bin and place randomly weighted objects.
    Sort {
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Render an RMSE CSV as a markdown table.
    Report {
        /// CSV with columns controller, payload, rmse.
        input: PathBuf,
        #[arg(long, default_value = "Trajectory following")]
        title: String,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Directory holding linear.json, koopman.json and koopman_load.json;
    /// defaults to `<out>/models`, fitting on demand when absent.
    #[arg(long)]
    models: Option<PathBuf>,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    cfg.seed = harness::resolve_seed(common.seed, cfg.seed)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.timing = common.timing;
    Ok(cfg)
}

fn models_for(cfg: &ExperimentConfig, args: &ModelArgs) -> Result<ModelSet> {
    let dir = args
        .models
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("models"));
    if dir.join("koopman_load.json").exists() {
        log::info!("loading models from {}", dir.display());
        return ModelSet::load_dir(&dir)
            .with_context(|| format!("loading models from {}", dir.display()));
    }
    if args.models.is_some() {
        bail!("no models in {}; run `klmpc fit` first", dir.display());
    }
    log::info!(
        "no models in {}; fitting from a fresh campaign",
        dir.display()
    );
    let models = harness::fit_on_demand(cfg)?;
    models.save_dir(&dir)?;
    Ok(models)
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let out = cfg.output_dir.clone();
    match cli.command {
        Command::Collect {
            loads,
            trials,
            duration,
        } => {
            if let Some(l) = loads {
                cfg.campaign.loads = l;
            }
            if let Some(t) = trials {
                cfg.campaign.trials = t;
            }
            if let Some(d) = duration {
                cfg.campaign.duration = d;
            }
            cfg.validate()?;
            let data = harness::collect_campaign(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("dataset.csv");
            data.save(&path)?;
            announce(&path);
        }
        Command::Fit { data } => {
            cfg.validate()?;
            let data = match data {
                Some(path) => Dataset::load(&path)
                    .with_context(|| format!("reading dataset {}", path.display()))?,
                None => harness::collect_campaign(&cfg)?,
            };
            let models = harness::fit_models(&data, &cfg.basis)?;
            let dir = out.join("models");
            models.save_dir(&dir)?;
            println!(
                "lifted dimension {} (load-augmented {}); wrote {}",
                models.koopman.n_z,
                models.koopman_load.n_z,
                dir.display()
            );
        }
        Command::Track {
            models,
            controller,
            unknown_load,
        } => {
            if let Some(c) = controller {
                cfg.controllers = c;
            }
            cfg.validate()?;
            let models = models_for(&cfg, &models)?;
            if unknown_load {
                let result = harness::run_experiment3(&cfg, &models)?;
                harness::write_experiment3(&result, &out)?;
                print!("{}", result.report.to_markdown());
            } else {
                let result = harness::run_experiment1(&cfg, &models)?;
                harness::write_experiment1(&result, &out)?;
                print!("{}", result.report.to_markdown());
            }
        }
        Command::Estimate { models } => {
            cfg.validate()?;
            let models = models_for(&cfg, &models)?;
            let traces = harness::run_experiment2(&cfg, &models.koopman_load)?;
            harness::write_experiment2(&traces, &out)?;
            let at = cfg.estimation.check_at;
            for t in &traces {
                let w = t.w_hat_at(at).map_or(f64::NAN, |w| w[0]);
                println!(
                    "payload {:.3} kg: estimate {:.4} kg at {at} s (error {:+.4})",
                    t.payload,
                    w,
                    w - t.payload
                );
            }
        }
        Command::Sort { models } => {
            cfg.validate()?;
            let models = models_for(&cfg, &models)?;
            let report = harness::run_experiment4(&cfg, &models.koopman_load)?;
            harness::write_experiment4(&report, &out)?;
            print!("{}", report.to_markdown());
        }
        Command::Report { input, title } => {
            let file = std::fs::File::open(&input)
                .with_context(|| format!("opening {}", input.display()))?;
            let report = TrackingReport::read_csv(&title, file)
                .with_context(|| format!("parsing {}", input.display()))?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
