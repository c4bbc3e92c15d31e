use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedfuse::harness::{run_ablation, Axis, ExperimentConfig, Run, Stage};
use fedfuse::Error;

#[derive(Parser)]
#[command(name = "fedfuse", version, about = "One-shot federated distillation on toy street scenes")]
struct Cli {
    /// TOML experiment config; the built-in toy world when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// With `run`: stop after this stage.
    #[arg(long, global = true)]
    stage: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write every dataset of the run (the server set without labels).
    GenData,
    /// Train client models; all of them unless `--client` is given.
    TrainClient {
        #[arg(long)]
        client: Option<String>,
    },
    /// Upload checkpoints and score per-class inconsistency on the server set.
    ScoreInconsistency,
    /// Generate images for unstable classes and assemble the distillation set.
    Augment,
    /// Distill the global model.
    Distill,
    /// Train the one-shot FedAvg baseline.
    Fedavg,
    /// Evaluate clients, global model and FedAvg on the target domains.
    Evaluate,
    /// Run or resume the full pipeline.
    Run,
    /// Ablation table over distillation components.
    Ablate {
        /// Comma-separated subset of fusion, augmentation, bce, dice.
        #[arg(long, value_delimiter = ',', default_value = "fusion,augmentation,bce,dice")]
        axes: Vec<String>,
    },
    /// Print the effective config as TOML.
    PrintConfig,
}

impl Command {
    fn label(&self) -> &'static str {
        match self {
            Command::GenData => "gen_data",
            Command::TrainClient { .. } => Stage::TrainClients.name(),
            Command::ScoreInconsistency => Stage::ScoreInconsistency.name(),
            Command::Augment => Stage::Augment.name(),
            Command::Distill => Stage::Distill.name(),
            Command::Fedavg => "fedavg",
            Command::Evaluate => Stage::Evaluate.name(),
            Command::Run => "run",
            Command::Ablate { .. } => "ablate",
            Command::PrintConfig => "print_config",
        }
    }
}

fn load_config(cli: &Cli) -> fedfuse::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::toy(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(run: &Run) -> fedfuse::Result<()> {
    let path = run.reports_dir().join("summary.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
    print!("{text}");
    Ok(())
}

fn execute(cli: &Cli) -> fedfuse::Result<()> {
    let cfg = load_config(cli)?;
    if cli.stage.is_some() && !matches!(cli.command, Command::Run) {
        return Err(Error::Config("--stage only applies to `run`".into()));
    }
    match &cli.command {
        Command::PrintConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::Ablate { axes } => {
            let axes = axes.iter().map(|a| a.parse()).collect::<fedfuse::Result<Vec<Axis>>>()?;
            let results = run_ablation(cfg, &axes)?;
            print!("{}", fedfuse::harness::ablation_csv(&results));
            Ok(())
        }
        command => {
            let mut run = Run::open(cfg)?;
            match command {
                Command::GenData => run.generate_data(),
                Command::TrainClient { client: Some(id) } => run.train_client(id),
                Command::TrainClient { client: None } => run.run_through(Stage::TrainClients),
                Command::ScoreInconsistency => {
                    run.run_through(Stage::ScoreInconsistency)?;
                    let report = run.inconsistency()?.report;
                    for (c, g) in report.classes.iter().zip(&report.gamma) {
                        println!("class {c}: gamma {g:.4}");
                    }
                    println!("unstable: {:?}", report.unstable);
                    Ok(())
                }
                Command::Augment => run.run_through(Stage::Augment),
                Command::Distill => run.run_through(Stage::Distill),
                Command::Fedavg => {
                    run.run_through(Stage::UploadCheckpoints)?;
                    run.fedavg_model().map(|_| ())
                }
                Command::Evaluate => {
                    run.run_through(Stage::Evaluate)?;
                    print_summary(&run)
                }
                Command::Run => {
                    let last = match &cli.stage {
                        Some(s) => s.parse()?,
                        None => Stage::Evaluate,
                    };
                    run.run_through(last)?;
                    if run.manifest.is_complete(Stage::Evaluate) {
                        print_summary(&run)?;
                    }
                    Ok(())
                }
                Command::PrintConfig | Command::Ablate { .. } => unreachable!("handled above"),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => stage.clone(),
                _ => cli.command.label().to_string(),
            };
            // stage and i/o errors already render their cause
            let msg = match &e {
                Error::Stage { source, .. } => source.to_string(),
                other => other.to_string(),
            };
            log::error!("stage {stage} failed: {msg}");
            eprintln!("fedfuse: stage `{stage}` failed: {msg}");
            ExitCode::from(2)
        }
    }
}
