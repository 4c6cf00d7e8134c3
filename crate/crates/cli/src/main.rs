//! `teethseg` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use teethseg::gradcheck::GradCheckOptions;
use teethseg::run::{self, RunConfig, Variant};
use teethseg::Error;

#[derive(Parser)]
#[command(name = "teethseg", version, about = "Synthetic tooth segmentation: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true, default_value = "data")]
    data: PathBuf,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the model, scene and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Average the tooth loss over every pixel instead of tooth pixels only.
    #[arg(long, global = true)]
    lth_over_all_pixels: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test synthetic splits.
    Gen {
        /// Per-tooth dropout probability.
        #[arg(long)]
        dropout: Option<f64>,
    },
    /// Train the model on a generated dataset.
    Train {
        /// Continue from the last checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Per-class IoU of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train every ablation variant with a shared seed and budget.
    Ablate,
    /// Finite-difference check of every parameter group.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Variants to check (a..f); all when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        /// Use the small 16x16 configuration instead of the configured model.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        tiny: bool,
        /// Sign-flip the gradient of one tape op.
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            c.apply_env()?;
            c
        }
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if common.lth_over_all_pixels {
        cfg.train.th_over_all_pixels = true;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| run::default_out(command))
}

fn leak(op: String) -> &'static str {
    Box::leak(op.into_boxed_str())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let common = &cli.common;
    let mut cfg = load_config(common)?;
    match cli.command {
        Command::Gen { dropout } => {
            if let Some(p) = dropout {
                cfg.scene.dropout = p;
            }
            let out = common.out.clone().unwrap_or_else(|| common.data.clone());
            let table = run::cmd_gen(&cfg, &out, common.force)?;
            println!("wrote dataset to {}", out.display());
            print!("{table}");
        }
        Command::Train { resume } => {
            let out = out_dir(common, "train");
            if !resume {
                clear(&out, common.force)?;
            }
            let o = run::cmd_train(&cfg, &common.data, &out, resume)?;
            println!(
                "steps {} epochs {} best val mIoU {}",
                o.fit.steps,
                o.fit.epochs,
                fmt(o.fit.best_val_miou)
            );
            if let Some(t) = o.test {
                println!("test mIoU {}", fmt(t.miou));
            }
        }
        Command::Eval { checkpoint, split } => {
            let expected = common.config.as_ref().map(|_| &cfg.model);
            let o = run::cmd_eval(&checkpoint, &common.data, &split, expected, cfg.train.aggregation)?;
            print!("{}", o.csv);
            if let Some(out) = &common.out {
                cfg.write_resolved(out)?;
                let path = out.join(format!("eval_{split}.csv"));
                std::fs::write(&path, &o.csv).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Ablate => {
            let out = out_dir(common, "ablate");
            clear(&out, common.force)?;
            run::cmd_ablate(&cfg, &common.data, &out)?;
            print!("{}", std::fs::read_to_string(out.join(run::ABLATION_SUMMARY))?);
        }
        Command::Gradcheck {
            tol,
            variants,
            tiny,
            fault,
        } => {
            let mut model = if tiny { teethseg::model::ModelConfig::tiny() } else { cfg.model.clone() };
            model.seed = cfg.model.seed;
            let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants };
            let opts = GradCheckOptions {
                tol,
                fault: fault.map(leak),
                ..Default::default()
            };
            let report = run::cmd_gradcheck(&model, &variants, &opts)?;
            let text = run::gradcheck_text(&report);
            print!("{text}");
            if let Some(out) = &common.out {
                cfg.model = model;
                cfg.write_resolved(out)?;
                std::fs::write(out.join("gradcheck.csv"), &text)?;
            }
            if !report.passed() {
                return Err(Error::Numeric(format!("gradient check failed, max rel err {:.3e}", report.max_rel_err())).into());
            }
        }
    }
    Ok(())
}

fn clear(out: &Path, force: bool) -> anyhow::Result<()> {
    let occupied = std::fs::read_dir(out).is_ok_and(|mut d| d.next().is_some());
    if occupied && !force {
        return Err(Error::Config(format!("{} is not empty; pass --force or --resume", out.display())).into());
    }
    if occupied {
        std::fs::remove_dir_all(out)?;
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".into(), |v| format!("{v:.4}"))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) => e.exit_code() as u8,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
