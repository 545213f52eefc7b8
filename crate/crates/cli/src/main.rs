mod commands;
mod config;
mod error;
mod lock;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stopband_core::pruning::PruneMethod;
use stopband_core::Real;

use crate::commands::PruneArgs;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "stopband", version, about = "Train, prune and report on sparse networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write config, checkpoint, history and report.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory to create or overwrite.
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a trained checkpoint and measure it.
    Prune {
        /// Run directory holding config.txt and, by default, the checkpoint.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pruning rate; defaults to the run's prune_rate.
        #[arg(long)]
        rate: Option<Real>,
        #[arg(long, value_enum)]
        method: Method,
        /// Fine-tune under the pruning mask (magnitude pruning only).
        #[arg(long)]
        finetune: bool,
        #[arg(long, default_value_t = 20)]
        finetune_epochs: usize,
        /// Output directory; defaults to <run>/prune/<method>-p<rate>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure a checkpoint on the run's test data.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summarize every report under a directory and write plots.
    Report {
        dir: PathBuf,
        #[arg(long)]
        no_plots: bool,
    },
    /// Train and prune once per rate, then report.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.90,0.95,0.97,0.99")]
        rates: Vec<Real>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    #[value(name = "ours-effective")]
    OursEffective,
    Magnitude,
}

impl From<Method> for PruneMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::OursEffective => PruneMethod::Effective,
            Method::Magnitude => PruneMethod::Magnitude,
        }
    }
}

/// Config file plus one override flag per config key.
#[derive(Args)]
struct ConfigArgs {
    /// key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    model_seed: Option<String>,
    /// synthetic or cifar10.
    #[arg(long)]
    dataset: Option<String>,
    /// Defaults to $STOPBAND_DATA_DIR.
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    train_size: Option<String>,
    #[arg(long)]
    test_size: Option<String>,
    #[arg(long)]
    data_seed: Option<String>,
    #[arg(long)]
    classes: Option<String>,
    /// CxHxW of synthetic samples.
    #[arg(long)]
    input_shape: Option<String>,
    #[arg(long)]
    margin: Option<String>,
    #[arg(long)]
    val_split: Option<String>,
    #[arg(long)]
    prune_rate: Option<String>,
    /// Budget loss weight; 0 trains the plain network.
    #[arg(long)]
    lambda: Option<String>,
    /// Crispness exponent of the stopband function.
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    t_init: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    plateau_factor: Option<String>,
    #[arg(long)]
    plateau_patience: Option<String>,
    #[arg(long)]
    early_stop_patience: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    augment: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::from_env();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        let overrides = [
            ("model", &self.model),
            ("model_seed", &self.model_seed),
            ("dataset", &self.dataset),
            ("data_dir", &self.data_dir),
            ("train_size", &self.train_size),
            ("test_size", &self.test_size),
            ("data_seed", &self.data_seed),
            ("classes", &self.classes),
            ("input_shape", &self.input_shape),
            ("margin", &self.margin),
            ("val_split", &self.val_split),
            ("prune_rate", &self.prune_rate),
            ("lambda", &self.lambda),
            ("n", &self.n),
            ("t_init", &self.t_init),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("momentum", &self.momentum),
            ("weight_decay", &self.weight_decay),
            ("plateau_factor", &self.plateau_factor),
            ("plateau_patience", &self.plateau_patience),
            ("early_stop_patience", &self.early_stop_patience),
            ("seed", &self.seed),
            ("augment", &self.augment),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, out } => commands::cmd_train(&config.resolve()?, &out),
        Command::Prune {
            run,
            checkpoint,
            rate,
            method,
            finetune,
            finetune_epochs,
            out,
        } => commands::cmd_prune(&PruneArgs {
            run,
            checkpoint,
            rate,
            method: method.into(),
            finetune,
            finetune_epochs,
            out,
        })
        .map(|_| ()),
        Command::Eval { run, checkpoint } => commands::cmd_eval(&run, checkpoint.as_deref()),
        Command::Report { dir, no_plots } => commands::cmd_report(&dir, !no_plots),
        Command::Sweep { config, out, rates } => commands::cmd_sweep(&config.resolve()?, &out, &rates),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
