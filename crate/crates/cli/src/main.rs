use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cmwm::pipeline::{Experiment, MdnVariant, Pipeline, RunConfig};
use cmwm::{verify, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "cmwm", version, about = "Concept-modulated world models on a toy driving simulator")]
struct Cli {
    /// TOML run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in configuration used when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,

    /// Override one config key, e.g. `--set dream.budget_steps=5000`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Base directory for all artifacts.
    #[arg(long, global = true, env = "CMWM_ARTIFACT_DIR", default_value = "artifacts")]
    artifacts: PathBuf,

    /// Worker threads for saliency extraction and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Default,
    Toy,
    Mini,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Mb,
    Cm,
}

impl From<Variant> for MdnVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Mb => MdnVariant::Mb,
            Variant::Cm => MdnVariant::Cm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Mf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExperimentArg {
    Unspecified,
    Specified,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect the initial dataset with a learning PPO policy.
    Collect,
    /// Train the VAE on the collected frames.
    TrainVae,
    /// Train the world model (plain or concept-modulated).
    TrainMdn {
        #[arg(long, value_enum)]
        variant: Variant,
    },
    /// Saliency patches and k-means concepts from the collected frames.
    ExtractConcepts,
    /// Train the model-free agent online.
    TrainAgent {
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Dream-train MB or CM agents from the MF checkpoints.
    DreamTrain {
        #[arg(long, value_enum)]
        agent: Variant,
        /// Seed dreams from these failure episodes instead of the collected data.
        #[arg(long)]
        failure_seeds: Option<PathBuf>,
    },
    /// Log one failure episode per train route with an obstacle ahead.
    MakeFailureSeeds {
        #[arg(long)]
        distance: Option<f64>,
    },
    /// Evaluate every agent greedily.
    Eval {
        #[arg(long, value_enum)]
        experiment: ExperimentArg,
    },
    /// Summary tables and charts from evaluation records.
    Report,
    /// Run the oracle and property checks.
    Selftest,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn set_key(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .map(|mut t| t.remove("v").expect("key present"))
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config section `{part}` in `{key}`")))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` does not name a config key")))?;
    let last = parts[parts.len() - 1];
    if !table.contains_key(last) {
        return Err(Error::Config(format!("unknown config key `{key}`")));
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => match cli.preset {
            Preset::Default => RunConfig::default(),
            Preset::Toy => RunConfig::toy(),
            Preset::Mini => RunConfig::mini(),
        },
    };
    if cli.overrides.is_empty() {
        return Ok(base);
    }
    let mut value = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
    for o in &cli.overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        set_key(&mut value, key.trim(), raw.trim())?;
    }
    RunConfig::from_toml(&toml::to_string(&value).map_err(|e| Error::Config(e.to_string()))?)
}

fn run(cli: &Cli) -> Result<bool> {
    if let Command::Selftest = cli.command {
        let checks = verify::selftest()?;
        for c in &checks {
            println!("{c}");
        }
        return Ok(checks.iter().all(|c| c.passed));
    }
    let config = load_config(cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_toml());
        return Ok(true);
    }
    let p = Pipeline::new(config, &cli.artifacts, cli.jobs)?;
    let root = p.artifacts.root.display();
    match &cli.command {
        Command::Collect => {
            let d = p.collect()?;
            println!("collect: {} episodes, {} transitions in {root}", d.episodes.len(), d.total_transitions());
        }
        Command::TrainVae => {
            let log = p.train_vae()?;
            let best = log.iter().map(|l| l.test_loss).fold(f64::INFINITY, f64::min);
            println!("train-vae: {} epochs, best test loss {best:.6}", log.len());
        }
        Command::TrainAgent { mode: Mode::Mf } => {
            p.train_mf()?;
            println!("train-agent: {} MF runs", p.config.n_runs);
        }
        Command::ExtractConcepts => {
            let fit = p.extract_concepts()?;
            println!("extract-concepts: {} patches, {} clusters, wcss {:.4}", fit.labels.len(), fit.centers.len(), fit.wcss);
        }
        Command::TrainMdn { variant } => {
            let log = p.train_mdn((*variant).into())?;
            let best = log.iter().map(|l| l.test.total).fold(f64::INFINITY, f64::min);
            println!("train-mdn: {} epochs, best test loss {best:.6}", log.len());
        }
        Command::MakeFailureSeeds { distance } => {
            let d = distance.unwrap_or(p.config.failure.distance);
            let data = p.make_failure_seeds(d)?;
            println!("make-failure-seeds: {} episodes at {}", data.episodes.len(), p.artifacts.failure_seeds(d).display());
        }
        Command::DreamTrain { agent, failure_seeds } => {
            let counts = p.dream_train((*agent).into(), failure_seeds.as_deref())?;
            for (run, c) in counts.iter().enumerate() {
                println!(
                    "dream-train: run {run}: {} transitions, {} sessions finished ({} immediately)",
                    c.transitions, c.sessions_finished, c.immediate_done
                );
            }
        }
        Command::Eval { experiment } => {
            let e = match experiment {
                ExperimentArg::Unspecified => Experiment::Unspecified,
                ExperimentArg::Specified => Experiment::Specified,
            };
            let records = p.eval(e)?;
            println!("eval: {} episodes -> {}", records.len(), p.artifacts.records(e).display());
        }
        Command::Report => {
            for (e, rows) in p.report()? {
                println!("report: {} ({} cells) -> {}", e.as_str(), rows.len(), p.artifacts.reports(e).display());
            }
        }
        Command::Selftest | Command::ShowConfig => unreachable!("handled above"),
    }
    Ok(true)
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidArgument(_) => "invalid_argument",
        Error::ShapeMismatch { .. } => "shape_mismatch",
        Error::InvalidScenario(_) => "invalid_scenario",
        Error::ContractViolation(_) => "contract_violation",
        Error::NonFinite(_) => "non_finite",
        Error::Format { .. } | Error::BadMagic { .. } | Error::VersionMismatch { .. } | Error::Truncated { .. } => "format",
        Error::Config(_) => "config",
        Error::MissingArtifact { .. } => "missing_artifact",
        Error::DegenerateWorldModel(_) => "degenerate_world_model",
        Error::Io { .. } => "io",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error kind=selftest message=\"one or more checks failed\"");
            ExitCode::from(1)
        }
        Err(e) => {
            let stage = match &e {
                Error::MissingArtifact { stage, .. } => format!(" stage=\"{stage}\""),
                _ => String::new(),
            };
            eprintln!("error kind={}{stage} message={:?}", error_kind(&e), e.to_string());
            ExitCode::from(match e {
                Error::Config(_) | Error::InvalidArgument(_) => 3,
                Error::MissingArtifact { .. } => 4,
                _ => 1,
            })
        }
    }
}
