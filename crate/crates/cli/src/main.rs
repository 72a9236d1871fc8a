use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use madt::dataset::Dataset;
use madt::evaluator::{Agent, EvalReport, Method};
use madt::experiment::{ExperimentConfig, Setup};
use madt::model::{Checkpoint, ModelConfig};
use madt::policies::PolicySpec;
use madt::trainer::EpochLog;
use madt::{check, io};

/// Environment variable naming the directory all outputs go to.
const OUT_ENV: &str = "MADT_OUT";

#[derive(Parser)]
#[command(name = "madt", version, about = "Multi-agent decision transformer for traffic signal control")]
struct Cli {
    /// Experiment config (TOML). Defaults to the chosen profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile used when no config file is given.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// Override a config field, e.g. `--set train.epochs=1`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the behavior policy and write the offline dataset.
    Collect,
    /// Fit the model on the collected dataset.
    Train,
    /// Evaluate baselines and checkpoints on paired episodes.
    Eval {
        /// Baseline controllers: fixed_time, max_pressure, random.
        #[arg(long = "baseline", value_name = "NAME")]
        baselines: Vec<String>,
        /// Checkpoint files to evaluate.
        #[arg(long = "checkpoint", value_name = "PATH")]
        checkpoints: Vec<PathBuf>,
    },
    /// Train and compare the model with and without graph attention and
    /// return conditioning.
    Ablate,
    /// Run the property suites.
    Check,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Command::Check = cli.command {
        return Ok(cmd_check());
    }
    let config = load_config(&cli)?;
    let out = out_dir();
    let setup = Setup::new(config)?;
    let cfg = setup.config.clone();
    cfg.run(|| -> Result<()> {
        match &cli.command {
            Command::Collect => cmd_collect(&setup, &out),
            Command::Train => cmd_train(&setup, &out),
            Command::Eval { baselines, checkpoints } => cmd_eval(&setup, &out, baselines, checkpoints),
            Command::Ablate => cmd_ablate(&setup, &out),
            Command::Check => unreachable!(),
        }
    })??;
    Ok(ExitCode::SUCCESS)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_toml_str(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => ExperimentConfig::profile(&cli.profile)?,
    };
    Ok(base.with_overrides(&cli.overrides)?)
}

fn out_dir() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("madt_out"))
}

/// Archives the effective config next to the outputs.
fn archive_config(setup: &Setup, out: &Path, command: &str) -> Result<()> {
    io::atomic_write(&out.join(format!("{command}_config.toml")), setup.config.to_toml_string().as_bytes())?;
    Ok(())
}

fn cmd_collect(setup: &Setup, out: &Path) -> Result<()> {
    let start = Instant::now();
    let (dataset, stats) = setup.collect()?;
    let paths = &setup.config.paths;
    io::atomic_write(&out.join(&paths.dataset), dataset.to_jsonl().as_bytes())?;
    io::write_json(&out.join(&paths.stats), &stats)?;
    archive_config(setup, out, "collect")?;
    let decisions: usize = dataset.trajectories.iter().map(|t| t.len()).sum();
    println!("episodes   {}", dataset.trajectories.len());
    println!("decisions  {decisions}");
    println!("R_max      {:.4}", stats.r_max);
    println!("wrote {} in {:.1}s", out.join(&paths.dataset).display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn load_dataset(setup: &Setup, out: &Path) -> Result<Dataset> {
    let path = out.join(&setup.config.paths.dataset);
    let file = File::open(&path).with_context(|| format!("dataset {} not found; run `madt collect` first", path.display()))?;
    let dataset = Dataset::from_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    setup.check_dataset(&dataset)?;
    Ok(dataset)
}

fn print_epoch(tag: &str, e: &EpochLog) {
    println!(
        "{tag} epoch {:>3}  loss {:.4}  acc {:.3}  {} steps  {:.1}s",
        e.epoch, e.mean_loss, e.accuracy, e.steps, e.seconds
    );
}

fn cmd_train(setup: &Setup, out: &Path) -> Result<()> {
    let dataset = load_dataset(setup, out)?;
    let tag = setup.model.variant();
    let fit = setup.train(&dataset, &setup.model, |e| print_epoch(tag, e))?;
    let paths = &setup.config.paths;
    io::write_json(&out.join(&paths.checkpoint), &fit.last)?;
    io::write_json(&out.join(&paths.best_checkpoint), &fit.best)?;
    io::atomic_write(&out.join(&paths.train_log), fit.log.to_jsonl().as_bytes())?;
    archive_config(setup, out, "train")?;
    println!("wrote {} ({tag})", out.join(&paths.checkpoint).display());
    Ok(())
}

fn baseline(name: &str) -> Result<PolicySpec> {
    Ok(match name {
        "fixed_time" => PolicySpec::fixed_time_default(),
        "max_pressure" => PolicySpec::max_pressure(),
        "random" => PolicySpec::Random,
        other => bail!("unknown baseline {other:?}; expected fixed_time, max_pressure or random"),
    })
}

/// Loads a checkpoint and refuses it unless it fits this network and
/// configuration.
fn load_checkpoint(setup: &Setup, path: &Path) -> Result<Checkpoint> {
    let ck: Checkpoint = io::read_json(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let expected = ModelConfig {
        num_agents: setup.network.num_intersections(),
        ..setup.model.clone()
    };
    ck.compatibility(&expected)
        .with_context(|| format!("checkpoint {} refused", path.display()))?;
    if ck.network_hash != setup.network.content_hash() {
        bail!("checkpoint {} was trained on a different network", path.display());
    }
    Ok(ck)
}

fn model_methods(setup: &Setup, name: &str, agent: Agent) -> Vec<Method> {
    let eval = &setup.config.eval;
    if eval.sweep.is_empty() {
        return vec![Method::Model {
            name: name.to_string(),
            agent: Box::new(agent),
            target_fraction: eval.target_fraction,
        }];
    }
    eval.sweep
        .iter()
        .map(|&f| Method::Model {
            name: format!("{name}@{f}"),
            agent: Box::new(agent.clone()),
            target_fraction: f,
        })
        .collect()
}

fn write_report(setup: &Setup, out: &Path, report: &EvalReport) -> Result<()> {
    let stem = out.join(&setup.config.paths.report);
    let table = report.to_table();
    io::write_json(&stem.with_extension("json"), report)?;
    io::atomic_write(&stem.with_extension("txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn cmd_eval(setup: &Setup, out: &Path, baselines: &[String], checkpoints: &[PathBuf]) -> Result<()> {
    let mut methods = Vec::new();
    for name in baselines {
        methods.push(Method::Baseline(baseline(name)?));
    }
    if baselines.is_empty() && checkpoints.is_empty() {
        methods.push(Method::Baseline(PolicySpec::max_pressure()));
        methods.push(Method::Baseline(PolicySpec::fixed_time_default()));
    }
    // Every checkpoint is validated before anything runs or is written.
    let mut loaded = Vec::new();
    for path in checkpoints {
        loaded.push((path, load_checkpoint(setup, path)?));
    }
    for (path, ck) in loaded {
        let duplicate = methods.iter().any(|m| m.name().split('@').next() == Some(ck.tag.as_str()));
        let name = if duplicate {
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| ck.tag.clone())
        } else {
            ck.tag.clone()
        };
        methods.extend(model_methods(setup, &name, Agent::from_checkpoint(&ck)?));
    }
    let report = setup.evaluate(&methods)?;
    write_report(setup, out, &report)?;
    archive_config(setup, out, "eval")
}

fn cmd_ablate(setup: &Setup, out: &Path) -> Result<()> {
    let dataset = load_dataset(setup, out)?;
    let ablation = setup.ablate(&dataset, print_epoch)?;
    for (name, fit) in &ablation.fits {
        io::write_json(&out.join(format!("ablate_{name}.json")), &fit.last)?;
    }
    write_report(setup, out, &ablation.report)?;
    archive_config(setup, out, "ablate")
}

fn cmd_check() -> ExitCode {
    let start = Instant::now();
    let report = check::run_all();
    print!("{}", report.summary());
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
