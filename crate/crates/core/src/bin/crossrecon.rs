use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crossrecon::data::{self, Split};
use crossrecon::model::{micro_gradcheck, ModelConfig};
use crossrecon::train::ablation::{parse_axes, run_ablation_grid, save_rows, write_rows, Splits};
use crossrecon::train::{self, RunConfig};
use crossrecon::Result;

#[derive(Parser)]
#[command(version, about = "Referring segmentation with conditioned cross-modal reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset.
    GenData {
        #[arg(long, default_value_t = data::DEFAULT_COUNT)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes train_log.csv and the best checkpoint under OUT.
    Train {
        /// RunConfig JSON; defaults are used when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        data: PathBuf,
        /// per-sample CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Segment one image for one prompt.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        /// also write the patch-interest heatmap next to the mask
        #[arg(long)]
        emit_heatmaps: bool,
        #[arg(long, default_value = "mask.png")]
        out: PathBuf,
    },
    /// Finite-difference check of the full objective on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train a grid of configurations, three seeds per cell.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// comma-separated axes, e.g. `cvr,clr` or `variant` or `alpha_v:0.1/0.5`
        #[arg(long)]
        axes: String,
        #[arg(long)]
        data: PathBuf,
        /// output CSV (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { count, seed, out } => {
            let records = data::generate(&out, count, data::DEFAULT_RATIOS, seed)?;
            println!("wrote {} samples to {}", records.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let run = load_config(config.as_ref())?;
            let summary = train::train(&ModelConfig::default(), &run, &data, &out)?;
            let best = &summary.history[summary.best_epoch - 1];
            println!(
                "best epoch {}: val mIoU {:.4}, Dice {:.4} ({:.0}s); checkpoint {}",
                summary.best_epoch,
                best.val_miou,
                best.val_dice,
                summary.seconds,
                train::best_checkpoint_path(&out).display()
            );
        }
        Command::Eval { ckpt, split, data, csv } => {
            let report = train::evaluate(&ckpt, &data, split)?;
            println!(
                "{}: mIoU {:.4} Dice {:.4} (foreground IoU {:.4} Dice {:.4}) over {} samples",
                split.name(),
                report.miou,
                report.dice,
                report.miou_fg,
                report.dice_fg,
                report.per_sample.len()
            );
            if let Some(path) = csv {
                report.save_csv(&path)?;
            }
        }
        Command::Infer { ckpt, image, prompt, emit_heatmaps, out } => {
            let result = train::infer(&ckpt, &image, &prompt, emit_heatmaps)?;
            if let Some(w) = &result.warning {
                eprintln!("warning: {w}");
            }
            result.save_mask(&out)?;
            println!("mask: {}", out.display());
            if emit_heatmaps {
                if let Some(p) = result.save_heatmap(&out.with_extension("poi.png"))? {
                    println!("patch interest: {}", p.display());
                }
                if let Some(w) = &result.w_woi {
                    let words: Vec<String> = w.iter().map(|x| format!("{x:.3}")).collect();
                    println!("word interest: {}", words.join(" "));
                }
            }
        }
        Command::Gradcheck { seed, tol } => {
            let mut ok = true;
            for batch in [1, 2] {
                let r = micro_gradcheck(seed, batch)?;
                let pass = r.passes(tol);
                ok &= pass;
                println!(
                    "{} batch {batch}: max rel error {:.2e} over {} entries",
                    if pass { "PASS" } else { "FAIL" },
                    r.max_rel_error,
                    r.entries_checked
                );
            }
            return Ok(ok);
        }
        Command::Ablate { config, axes, data, out } => {
            let base = load_config(config.as_ref())?;
            let axes = parse_axes(&axes)?;
            let (train, val, test) = (
                data::load_split(&data, Split::Train)?,
                data::load_split(&data, Split::Val)?,
                data::load_split(&data, Split::Test)?,
            );
            let splits = Splits { train: &train, val: &val, test: &test };
            let rows = run_ablation_grid(&ModelConfig::default(), &base, &axes, &splits)?;
            match out {
                Some(p) => save_rows(&rows, &p)?,
                None => write_rows(&rows, std::io::stdout())?,
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
