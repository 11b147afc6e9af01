use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spikeattack::io::runner::{run, Command};
use spikeattack::io::RunConfig;
use spikeattack::Error;

/// Train spiking and conventional classifiers and attack them.
#[derive(Parser, Debug)]
#[command(name = "spikeattack", version)]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a model and write `model.snnm`.
    Train(TrainArgs),
    /// Convert a trained ANN checkpoint to an SNN and fine-tune it.
    Convert(ConvertArgs),
    /// Run one attack against one or more checkpoints.
    Attack(AttackArgs),
    /// Robust accuracy of an SNN under every backward surrogate.
    SweepSurrogate(SweepArgs),
    /// Transferability between every ordered pair of checkpoints.
    TransferMatrix(TransferArgs),
    /// MIM, PGD, SAGA and Auto-SAGA on every pair of checkpoints.
    MultiAttack(MultiArgs),
    /// Print what a checkpoint contains.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    surrogate: Option<String>,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    balance: Option<String>,
    #[arg(long)]
    percentile: Option<f64>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// fgsm, pgd, mim, saga or autosaga.
    #[arg(long)]
    kind: Option<String>,
    /// Comma list of `name=path` or paths.
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "eps-step")]
    eps_step: Option<f64>,
    /// Auto-SAGA coefficient learning rate.
    #[arg(long)]
    r: Option<f64>,
    /// Fixed SAGA weights, comma separated.
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    model: Option<String>,
    /// Comma list of budgets.
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    surrogates: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    attacks: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug)]
struct MultiArgs {
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "eps-step")]
    eps_step: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    checkpoint: String,
}

struct Flags(Vec<(String, String)>);

impl Flags {
    fn put(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.0.push((key.to_string(), v.to_string()));
        }
    }
}

fn collect(cli: Cli) -> Result<(Command, Option<PathBuf>, Vec<(String, String)>), Error> {
    let mut f = Flags(Vec::new());
    f.put("jobs", cli.jobs);
    f.put("out", cli.out);
    f.put("seed", cli.seed);
    f.put("dataset", cli.dataset);
    let cmd = match cli.command {
        Cmd::Train(a) => {
            f.put("arch", a.arch);
            f.put("epochs", a.epochs);
            f.put("lr", a.lr);
            f.put("surrogate", a.surrogate);
            Command::Train
        }
        Cmd::Convert(a) => {
            f.put("model", a.model);
            f.put("balance", a.balance);
            f.put("percentile", a.percentile);
            Command::Convert
        }
        Cmd::Attack(a) => {
            f.put("attack", a.kind);
            f.put("models", a.models);
            f.put("eps", a.eps);
            f.put("iterations", a.steps);
            f.put("eps_step", a.eps_step);
            f.put("coef_lr", a.r);
            f.put("alpha", a.alpha);
            f.put("eval_n", a.n);
            Command::Attack
        }
        Cmd::SweepSurrogate(a) => {
            f.put("model", a.model);
            f.put("sweep_eps", a.eps);
            f.put("surrogates", a.surrogates);
            f.put("iterations", a.steps);
            f.put("eval_n", a.n);
            Command::SweepSurrogate
        }
        Cmd::TransferMatrix(a) => {
            f.put("models", a.models);
            f.put("attacks", a.attacks);
            f.put("eps", a.eps);
            f.put("eval_n", a.n);
            Command::TransferMatrix
        }
        Cmd::MultiAttack(a) => {
            f.put("models", a.models);
            f.put("eps", a.eps);
            f.put("iterations", a.steps);
            f.put("eps_step", a.eps_step);
            f.put("eval_n", a.n);
            Command::MultiAttack
        }
        Cmd::Inspect(a) => {
            f.put("model", Some(a.checkpoint));
            Command::Inspect
        }
    };
    // --set overrides the dedicated flags.
    for item in cli.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{item}'")))?;
        f.0.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok((cmd, cli.config, f.0))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = collect(cli).and_then(|(cmd, file, flags)| {
        let cfg = RunConfig::resolve(file.as_deref(), std::env::vars(), &flags)?;
        run(cmd, &cfg)
    });
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(if e.kind() == "config" { 2 } else { 1 })
        }
    }
}
