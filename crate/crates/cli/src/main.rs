use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use demem_core::lab::{self, memorize, ExperimentConfig};
use demem_core::mia::AttackMethod;
use demem_core::{Error, Result};

/// Shadow-ensemble experiments: adversarial training with a loss-variance
/// penalty, membership inference and memorization reports.
///
/// Exit status: 0 success, 2 configuration error, 3 data or file error,
/// 4 runtime or numeric error.
#[derive(Parser)]
#[command(name = "demem-lab", version)]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (`section.key=value` lines).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory; defaults to `output.dir` from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Overrides the experiment seed (`train.seed`; `data.seed` for gen-data).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads for model training and scoring (0 = all cores).
    #[arg(long, value_name = "N", default_value_t = 0)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset to DIR/dataset.csv.
    GenData(Common),
    /// Train one model on the full dataset.
    Train(Common),
    /// Train the shadow ensemble and write the confidence dump.
    Shadow(Common),
    /// Run membership-inference attacks over a shadow run in --out.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Comma-separated attacks (lira_online, lira_offline, loss).
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Comma-separated false-positive-rate targets.
        #[arg(long, value_delimiter = ',')]
        fpr: Option<Vec<f64>>,
    },
    /// Write memorization scores for the shadow run in --out, training it
    /// first if needed.
    Memorize(Common),
    /// Build leakage tables from attacked runs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Attacked shadow-run directories.
        #[arg(long, value_name = "DIR", num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Memorization dump for the per-bin table.
        #[arg(long, value_name = "PATH")]
        mem: Option<PathBuf>,
    },
    /// Repeat shadow + attack for each value of one config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Config key to vary, e.g. train.demem_lambda.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn load_config(common: &Common, seed_key: &str) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with(seed_key, &seed.to_string())?;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: Option<&ExperimentConfig>) -> Result<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output.dir".into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load_config(&c, "data.seed")?;
            let dir = out_dir(&c, Some(&cfg))?;
            lab::run_gen_data(&cfg, &dir)?;
            println!("{}", dir.join("dataset.csv").display());
        }
        Command::Train(c) => {
            let cfg = load_config(&c, "train.seed")?;
            let dir = out_dir(&c, Some(&cfg))?;
            lab::run_train(&cfg, &dir)?;
            println!("{}", dir.join("model.ckpt").display());
        }
        Command::Shadow(c) => {
            let cfg = load_config(&c, "train.seed")?;
            let dir = out_dir(&c, Some(&cfg))?;
            let manifest = lab::run_shadow(&cfg, &dir, c.workers)?;
            println!("{} models in {}", manifest.completed_models.len(), dir.display());
        }
        Command::Attack { common, methods, fpr } => {
            let cfg = common.config.as_ref().map(ExperimentConfig::from_file).transpose()?;
            let dir = out_dir(&common, cfg.as_ref())?;
            let methods = methods
                .map(|m| m.iter().map(|s| s.trim().parse()).collect::<Result<Vec<AttackMethod>>>())
                .transpose()?;
            let outcome = lab::run_attack(&dir, methods.as_deref(), fpr.as_deref(), common.workers)?;
            for s in &outcome.summary {
                println!(
                    "{} fpr={} tpr={:.4}{}",
                    s.attack_name,
                    s.fpr_target,
                    s.tpr_mean,
                    if s.resolvable { "" } else { " (unresolvable)" }
                );
            }
        }
        Command::Memorize(c) => {
            let cfg = load_config(&c, "train.seed")?;
            let dir = out_dir(&c, Some(&cfg))?;
            if !dir.join("confidences.csv").exists() || c.config.is_some() {
                lab::run_shadow(&cfg, &dir, c.workers)?;
            }
            let est = lab::run_memorize(&dir)?;
            println!(
                "{} ({} missing, {} clamped)",
                dir.join(memorize::MEM_DUMP).display(),
                est.missing(),
                est.clamped()
            );
        }
        Command::Report { common, runs, mem } => {
            let dir = out_dir(&common, None)?;
            let out = lab::run_report(&runs, mem.as_deref(), &dir)?;
            for f in out.files {
                println!("{}", f.display());
            }
        }
        Command::Sweep { common, param, values } => {
            let cfg = load_config(&common, "train.seed")?;
            let dir = out_dir(&common, Some(&cfg))?;
            let out = lab::run_sweep(&cfg, &param, &values, &dir, common.workers)?;
            for f in out.report.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
