//! `ghl`: train, evaluate and compare learning rules from the command line.

mod ablate;
mod config;
mod gradcheck;
mod manifest;
mod rundir;
mod sweep;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use ghl::datasets::data_dir;
use ghl::trainer::checkpoint::Checkpoint;
use ghl::trainer::{evaluate, DataSplits};

use config::Overrides;

#[derive(Parser)]
#[command(name = "ghl", version, about = "Global-guided Hebbian learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Built-in config name or a TOML file (which may set `base = "<name>"`).
    #[arg(long, default_value = "blobs_ghl")]
    config: String,
    #[command(flatten)]
    overrides: Overrides,
    /// Run directory; defaults to runs/<name>-<config hash>.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args)]
struct Threads {
    /// Worker threads; 1 is deterministic mode (no wall-clock column in metrics.csv).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on its dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = ["train", "val", "test"], default_value = "test")]
        split: String,
        #[command(flatten)]
        threads: Threads,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        /// Architecture name (mlp:A-B-..., tiny_mlp, tiny_conv, ...).
        #[arg(long, default_value = "tiny_mlp")]
        arch: String,
        /// Sample shape such as 16 or 3x8x8; inferred for MLPs.
        #[arg(long)]
        input: Option<String>,
        /// Output classes; inferred for MLPs.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Zero all weights and mirror the batch about the origin.
        #[arg(long)]
        zero_weights: bool,
        #[arg(long, hide = true)]
        corrupt_backward: Option<f64>,
        #[command(flatten)]
        threads: Threads,
    },
    /// Train across values of one config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Config key, dotted for nested tables (e.g. dataset.spread).
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Comma-separated seeds; defaults to the config's seed.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Compare rules, each at its best learning rate on the validation split.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "ghl,sign_only,hebb_swta,backprop_sgd")]
        rules: String,
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        #[arg(long, value_enum, default_value = "default")]
        grid: ablate::Grid,
    },
}

fn init_threads(t: &Threads) -> Result<usize> {
    if let Some(n) = t.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(rayon::current_num_threads())
}

fn gradcheck_shape(arch: &str, input: Option<&str>, classes: Option<usize>) -> Result<(Vec<usize>, usize)> {
    let widths: Option<Vec<usize>> = arch
        .strip_prefix("mlp:")
        .and_then(|r| r.split(':').next())
        .map(|w| w.split('-').filter_map(|t| t.parse().ok()).collect());
    let input = match input {
        Some(s) => gradcheck::parse_shape(s)?,
        None => match (&widths, arch) {
            (Some(w), _) if !w.is_empty() => vec![w[0]],
            (_, "tiny_mlp") => vec![6],
            _ => vec![2, 6, 6],
        },
    };
    let classes = classes.or_else(|| widths.as_ref().and_then(|w| w.last().copied())).unwrap_or(3);
    Ok((input, classes))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            common,
            resume,
            stop_after,
        } => {
            let threads = init_threads(&common.threads)?;
            let (cfg, name) = config::resolve(&common.config, &common.overrides)?;
            let res = train::run(train::TrainArgs {
                config: &cfg,
                name: &name,
                out_dir: common.out_dir,
                threads,
                deterministic: common.threads.threads == Some(1),
                resume,
                quiet: false,
                stop_after,
            })?;
            println!(
                "{}: test_acc {:.4} after {} epochs",
                res.dir.display(),
                res.final_record.test_acc,
                res.final_record.epoch
            );
        }
        Command::Eval {
            checkpoint,
            split,
            threads,
        } => {
            init_threads(&threads)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data = DataSplits::load(&ckpt.config, &data_dir())?;
            let ds = match split.as_str() {
                "train" => &data.train,
                "val" => match &data.val {
                    Some(v) => v,
                    None => bail!("the checkpoint's config has no validation split"),
                },
                _ => &data.test,
            };
            let e = evaluate(&ckpt.network, ds)?;
            println!(
                "{split}: loss {:.6} accuracy {:.4} ({} samples, epoch {})",
                e.loss,
                e.accuracy,
                ds.len(),
                ckpt.epoch
            );
        }
        Command::Gradcheck {
            arch,
            input,
            classes,
            seed,
            batch,
            eps,
            zero_weights,
            corrupt_backward,
            threads,
        } => {
            init_threads(&threads)?;
            let (input_shape, classes) = gradcheck_shape(&arch, input.as_deref(), classes)?;
            let checks = gradcheck::run(&gradcheck::GradcheckArgs {
                arch,
                input_shape,
                classes,
                seed,
                batch,
                eps,
                zero_weights,
                corrupt_backward,
            })?;
            if !gradcheck::report(&checks) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Sweep {
            common,
            param,
            values,
            seeds,
        } => {
            let threads = init_threads(&common.threads)?;
            let seeds = match seeds {
                Some(s) => ablate::parse_seeds(&s)?,
                None => vec![config::resolve(&common.config, &common.overrides)?.0.seed],
            };
            if seeds.is_empty() {
                bail!("--seeds is empty");
            }
            let dir = sweep::run(sweep::SweepArgs {
                config: &common.config,
                overrides: &common.overrides,
                param,
                values,
                seeds,
                out_dir: common.out_dir,
                threads,
                deterministic: common.threads.threads == Some(1),
            })?;
            println!("{}", dir.join("sweep.csv").display());
        }
        Command::Ablate {
            common,
            rules,
            seeds,
            grid,
        } => {
            let threads = init_threads(&common.threads)?;
            let (base, _) = config::resolve(&common.config, &common.overrides)?;
            let (dir, report) = ablate::run(ablate::AblateArgs {
                base,
                rules: ablate::parse_rules(&rules)?,
                seeds: ablate::parse_seeds(&seeds)?,
                grid,
                eta_given: common.overrides.eta.is_some(),
                out_dir: common.out_dir,
                threads,
            })?;
            print!("{}", ablate::table(&report));
            println!("{}", dir.join("summary.csv").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
