use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use evdose::exec;
use evdose::experiment::{self, EvalOptions, ExperimentConfig, Family};
use evdose::loss::LossVariant;
use evdose::train::EpochRecord;

#[derive(Parser)]
#[command(name = "evdose", version, about = "Evidential dose prediction experiments on synthetic phantoms")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed, overriding both the config and EVIDENTIAL_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset.
    Generate,
    /// Train one model family.
    Train {
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum)]
        loss_variant: Option<VariantArg>,
    },
    /// Evaluate trained families: metrics, threshold curves, ROI table and heatmaps.
    Eval {
        #[command(flatten)]
        select: Select,
        /// Also run the CT-noise sensitivity test.
        #[arg(long)]
        noise_test: bool,
        /// Also export DVH bands and the DVH score.
        #[arg(long)]
        dvh: bool,
    },
    /// CT-noise sensitivity test only.
    NoiseTest {
        #[command(flatten)]
        select: Select,
    },
    /// DVH band export only.
    Dvh {
        #[command(flatten)]
        select: Select,
    },
}

#[derive(Args)]
struct Select {
    /// Family to evaluate; every family with checkpoints when omitted.
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, value_enum)]
    loss_variant: Option<VariantArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Evidential,
    Dropout,
    Ensemble,
}

impl From<ModelArg> for Family {
    fn from(m: ModelArg) -> Family {
        match m {
            ModelArg::Evidential => Family::Evidential,
            ModelArg::Dropout => Family::Dropout,
            ModelArg::Ensemble => Family::Ensemble,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Original,
    Refined,
}

impl From<VariantArg> for LossVariant {
    fn from(v: VariantArg) -> LossVariant {
        match v {
            VariantArg::Original => LossVariant::Original,
            VariantArg::Refined => LossVariant::Refined,
        }
    }
}

/// Failure tagged with the stage it happened in and the exit code to use.
struct StageError {
    stage: &'static str,
    code: u8,
    error: anyhow::Error,
}

fn stage<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|error| StageError {
        stage: name,
        code: 1,
        error,
    })
}

fn load_config(common: &Common) -> std::result::Result<ExperimentConfig, StageError> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(StageError {
                    stage: "config",
                    code: 2,
                    error: anyhow!("config file not found: {}", path.display()),
                });
            }
            stage("config", ExperimentConfig::load(path).map_err(Into::into))?
        }
        None => ExperimentConfig::default(),
    };
    let env_seed = match std::env::var("EVIDENTIAL_SEED") {
        Ok(v) => Some(stage(
            "config",
            v.trim()
                .parse::<u64>()
                .with_context(|| format!("EVIDENTIAL_SEED is not an unsigned integer: {v:?}")),
        )?),
        Err(_) => None,
    };
    if let Some(seed) = common.seed.or(env_seed) {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn print_epoch(label: &str, r: &EpochRecord) {
    let val = r.val_mae.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
    eprintln!(
        "[{label}] epoch {:>4}  loss {:.5}  train MAE {:.3} Gy  val MAE {val} Gy",
        r.epoch, r.train_loss, r.train_mae
    );
}

fn families(cfg: &ExperimentConfig, model: Option<ModelArg>) -> Result<Vec<Family>> {
    if let Some(m) = model {
        return Ok(vec![m.into()]);
    }
    let paths = cfg.paths();
    let present: Vec<Family> = Family::ALL
        .into_iter()
        .filter(|&f| {
            let members = cfg.init_seeds(f).map(|s| s.len()).unwrap_or(0);
            let ckpts = paths.checkpoints(f, cfg.loss.variant, members);
            !ckpts.is_empty() && ckpts.iter().all(|p| p.exists())
        })
        .collect();
    if present.is_empty() {
        return Err(anyhow!(
            "no trained model family found under {}",
            paths.root.join("models").display()
        ));
    }
    Ok(present)
}

fn run(cli: Cli) -> std::result::Result<(), StageError> {
    let mut cfg = load_config(&cli.common)?;
    if cli.common.threads > 0 {
        stage("setup", exec::set_threads(cli.common.threads).map_err(|e| anyhow!(e)))?;
    }
    match cli.command {
        Command::Generate => {
            let ds = stage("generate", experiment::run_generate(&cfg).map_err(Into::into))?;
            println!(
                "wrote {} train, {} val, {} test cases to {}",
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                cfg.paths().data().display()
            );
        }
        Command::Train {
            model,
            epochs,
            loss_variant,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(v) = loss_variant {
                cfg.loss.variant = v.into();
            }
            let ds = stage("train", experiment::load_dataset(&cfg).context("loading dataset"))?;
            let out = stage(
                "train",
                experiment::run_train(&cfg, &ds, model.into(), &print_epoch).map_err(Into::into),
            )?;
            for p in &out.checkpoints {
                println!("wrote {}", p.display());
            }
        }
        Command::Eval { select, noise_test, dvh } => {
            let options = EvalOptions {
                metrics: true,
                noise: noise_test,
                dvh,
                heatmaps: true,
            };
            eval(&mut cfg, &select, options, "eval")?;
        }
        Command::NoiseTest { select } => {
            let options = EvalOptions {
                metrics: false,
                noise: true,
                dvh: false,
                heatmaps: false,
            };
            eval(&mut cfg, &select, options, "noise-test")?;
        }
        Command::Dvh { select } => {
            let options = EvalOptions {
                metrics: false,
                noise: false,
                dvh: true,
                heatmaps: false,
            };
            eval(&mut cfg, &select, options, "dvh")?;
        }
    }
    Ok(())
}

fn eval(
    cfg: &mut ExperimentConfig,
    select: &Select,
    options: EvalOptions,
    name: &'static str,
) -> std::result::Result<(), StageError> {
    if let Some(v) = select.loss_variant {
        cfg.loss.variant = v.into();
    }
    let fams = stage(name, families(cfg, select.model))?;
    let ds = stage(name, experiment::load_dataset(cfg).context("loading dataset"))?;
    let out = stage(name, experiment::run_eval(cfg, &ds, &fams, options).map_err(Into::into))?;
    for r in &out.reports {
        println!("{}: MAE {:.3} Gy", r.family, r.mae_gy);
    }
    for n in &out.noise {
        println!("noise {}: KL change {:+.4}", n.label, n.fractional_change);
    }
    for (f, s) in &out.dvh_scores {
        println!("{}: DVH score {s:.3} Gy", f.as_str());
    }
    println!("reports in {}", cfg.paths().reports().display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("evdose: {} failed: {:#}", e.stage, e.error);
            ExitCode::from(e.code)
        }
    }
}
