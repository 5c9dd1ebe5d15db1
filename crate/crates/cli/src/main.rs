use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

use socialtpp::data::{compute_tef, simulate_hawkes, write_events, write_social};
use socialtpp::evalcli::{
    cached_index, evaluate, export_attention, gradcheck_suite, load_data, model_with_params, run_ablation_suite,
    write_prepared, RunConfig,
};
use socialtpp::model::{load_checkpoint, save_checkpoint, Ablation, Checkpoint, ModelParams};
use socialtpp::training::train;

/// Finite-difference step and tolerance of the gradient suite.
const GRADCHECK_EPS: f64 = 1e-4;
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "socialtpp", version, about = "Time-aware social sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and split the event log, then cache it with its meta-path index.
    Prepare(Common),
    /// Write a synthetic Hawkes event log and friendship list.
    Simulate(Common),
    /// Train a model and save a checkpoint.
    Train(Common),
    /// Rank held-out events with a saved checkpoint.
    Evaluate(Common),
    /// Train and test the full model and each ablation.
    Ablate(Common),
    /// Compare analytic and finite-difference gradients module by module.
    Gradcheck(Common),
    /// Export the attention weights of one user.
    Explain(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides, written `--section.key value` or `--section.key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Prepare(c)
            | Command::Simulate(c)
            | Command::Train(c)
            | Command::Evaluate(c)
            | Command::Ablate(c)
            | Command::Gradcheck(c)
            | Command::Explain(c) => c,
        }
    }
}

fn usage_error(kind: ErrorKind, msg: String) -> ! {
    Cli::command().error(kind, msg).exit()
}

/// Splits `--key value` / `--key=value` pairs; anything else is a usage error.
fn parse_overrides(args: &[String]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            usage_error(ErrorKind::UnknownArgument, format!("unexpected argument `{arg}`"));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => match it.next() {
                Some(v) => (flag.to_string(), v.clone()),
                None => usage_error(ErrorKind::InvalidValue, format!("flag `--{flag}` needs a value")),
            },
        };
        out.push((key, value));
    }
    out
}

fn load_config(common: &Common, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        config.set(k, v)?;
    }
    config.validate()?;
    Ok(config)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| anyhow!("{}: {e}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_trained(config: &RunConfig) -> Result<Checkpoint> {
    let path = &config.eval.checkpoint;
    if !path.exists() {
        bail!("checkpoint not found: {}", path.display());
    }
    Ok(load_checkpoint(path)?)
}

fn prepare(config: &RunConfig) -> Result<()> {
    let (dataset, graph) = load_data(config)?;
    let index = cached_index(config, &config.model, &dataset, &graph)?;
    let (events, social) = write_prepared(&config.cache_dir(), &dataset, &graph)?;
    println!(
        "users {} items {} events {} friendships {} tef {:.4}",
        dataset.num_users,
        dataset.num_items,
        dataset.num_events(),
        graph.edges().len(),
        compute_tef(&dataset, &graph)
    );
    println!("meta-path orders {} cap {}", index.orders(), index.cap);
    println!("wrote {} and {}", events.display(), social.display());
    Ok(())
}

fn simulate(config: &RunConfig) -> Result<()> {
    let sim = simulate_hawkes(&config.sim)?;
    let (events, social) = (config.events_path(), config.social_path());
    for p in [&events, &social] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| anyhow!("{}: {e}", dir.display()))?;
        }
    }
    let header = config.sim.header();
    write_events(&events, &sim.records(), Some(&header))?;
    write_social(&social, &sim.raw_edges(), Some(&header))?;
    println!("{} events, {} friendships", sim.events.len(), sim.raw_edges().len());
    println!("wrote {} and {}", events.display(), social.display());
    Ok(())
}

fn train_cmd(config: &RunConfig) -> Result<()> {
    let (dataset, graph) = load_data(config)?;
    let params = ModelParams::init(&config.model, dataset.num_users, dataset.num_items);
    let mut model = model_with_params(config, &config.model, params, &dataset, &graph)?;
    println!("parameters {}", model.params.count());
    let outcome = train(&mut model, &dataset, &graph, &config.train, |log| println!("{}", log.to_line()))?;
    if let Some(msg) = &outcome.diverged {
        eprintln!("warning: stopped after divergence: {msg}");
    }
    save_checkpoint(
        &config.eval.checkpoint,
        &Checkpoint { config: model.config.clone(), params: model.params.clone() },
    )?;
    println!(
        "best epoch {} validation recall@10 {:.4}; saved {}",
        outcome.best_epoch,
        outcome.best_val_recall,
        config.eval.checkpoint.display()
    );
    Ok(())
}

fn evaluate_cmd(config: &RunConfig) -> Result<()> {
    let ck = load_trained(config)?;
    let (dataset, graph) = load_data(config)?;
    let model = model_with_params(config, &ck.config, ck.params, &dataset, &graph)?;
    let mut report = evaluate(&model, &dataset, &graph, config.eval.target, &config.eval.ks)?;
    report.timestamp = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
    print!("{}", report.table());
    print!("{}", report.to_lines());
    if let Some(out) = &config.eval.out {
        emit(Some(out), &report.to_json())?;
    }
    Ok(())
}

fn ablate(config: &RunConfig) -> Result<()> {
    let (dataset, graph) = load_data(config)?;
    let report = run_ablation_suite(&dataset, &graph, &config.model, &config.train, &Ablation::VARIANTS)?;
    print!("{}", report.table());
    print!("{}", report.to_lines());
    if let Some(out) = &config.eval.out {
        emit(Some(out), &report.to_lines())?;
    }
    Ok(())
}

fn gradcheck(config: &RunConfig) -> Result<()> {
    let checks = gradcheck_suite(&config.model, config.train.gamma, GRADCHECK_EPS)?;
    for c in &checks {
        println!("{}", c.to_line());
    }
    if let Some(bad) = checks.iter().find(|c| !(c.max_error <= GRADCHECK_TOL)) {
        bail!("module `{}` exceeds tolerance {GRADCHECK_TOL:e}: {:.3e}", bad.module, bad.max_error);
    }
    Ok(())
}

fn explain(config: &RunConfig) -> Result<()> {
    let Some(raw) = config.eval.user else {
        bail!("config field `eval.user`: required by explain");
    };
    let ck = load_trained(config)?;
    let (dataset, graph) = load_data(config)?;
    let user = *dataset.user_index().get(&raw).ok_or_else(|| anyhow!("unknown user {raw}"))?;
    let model = model_with_params(config, &ck.config, ck.params, &dataset, &graph)?;
    let record = export_attention(&model, &dataset, &graph, user, config.eval.position)?;
    emit(config.eval.out.as_deref(), &record.to_text())
}

fn run(command: &Command, config: &RunConfig) -> Result<()> {
    match command {
        Command::Prepare(_) => prepare(config),
        Command::Simulate(_) => simulate(config),
        Command::Train(_) => train_cmd(config),
        Command::Evaluate(_) => evaluate_cmd(config),
        Command::Ablate(_) => ablate(config),
        Command::Gradcheck(_) => gradcheck(config),
        Command::Explain(_) => explain(config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let overrides = parse_overrides(&cli.command.common().overrides);
    let probe = RunConfig::default();
    if let Some((k, _)) = overrides.iter().find(|(k, _)| !probe.is_key(k)) {
        usage_error(ErrorKind::UnknownArgument, format!("unknown flag `--{k}`"));
    }
    let result = load_config(cli.command.common(), &overrides).and_then(|c| run(&cli.command, &c));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
