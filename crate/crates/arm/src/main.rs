use anyhow::{bail, Context, Result};
use arm_ltsf::config::Config;
use arm_ltsf::data::{generate_multi, load_csv, save_csv, verify_multi_identities, Split};
use arm_ltsf::metrics::repeat_baseline;
use arm_ltsf::model::gradient_suite;
use arm_ltsf::tensor::{check_named_op, named_ops};
use arm_ltsf::{checkpoint, data, train};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "arm-ltsf", version, about = "Multivariate long-term time-series forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, JSON report and per-epoch CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split (metrics in standardized space).
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also report the last-value Repeat baseline on the same split.
        #[arg(long)]
        with_repeat: bool,
    },
    /// Generate the synthetic 8-series dataset with exact shift/combination
    /// identities and write it as CSV.
    GenerateMulti {
        #[arg(long, default_value_t = 18000)]
        length: usize,
        /// Four shift offsets, comma-separated.
        #[arg(long, default_value = "96,192,336,720", value_delimiter = ',')]
        shifts: Vec<usize>,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks per module.
    Gradcheck {
        /// One of: tensor, model, all.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, data, out } => {
            let cfg = Config::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let dataset = load_csv(&data).with_context(|| format!("loading {}", data.display()))?;
            let outcome = train::train(&cfg, &dataset, Some(&out))?;
            let r = &outcome.report;
            println!(
                "trained {} epochs (best epoch {}), test MSE {:.6}, test MAE {:.6}, {:.1}s",
                r.epochs_run, r.best_epoch, r.test_mse, r.test_mae, r.wall_clock_secs
            );
            println!("artifacts written to {}", out.display());
            Ok(())
        }
        Command::Evaluate { checkpoint, data, split, with_repeat } => {
            let (cfg, params) = checkpoint::load(&checkpoint)?;
            let dataset = load_csv(&data)?;
            let split: Split = split.parse()?;
            let metrics = train::evaluate_split(&cfg, &params, &dataset, split)?;
            println!("MSE {:.6}  MAE {:.6}", metrics.mse, metrics.mae);
            if with_repeat {
                let mut standardized = dataset.clone();
                let ranges = cfg.split.ranges(standardized.rows());
                let stats = data::TrainStats::fit(&standardized, ranges[0])?;
                stats.apply(&mut standardized);
                let range = cfg.split.range_of(standardized.rows(), split);
                let windows = data::make_windows(range, cfg.model.len_input, cfg.model.len_pred, cfg.stride)?;
                let repeat = repeat_baseline(&standardized, &windows)?;
                println!("repeat baseline: MSE {:.6}  MAE {:.6}", repeat.mse, repeat.mae);
            }
            Ok(())
        }
        Command::GenerateMulti { length, shifts, seed, out } => {
            let ds = generate_multi(length, &shifts, seed)?;
            verify_multi_identities(&ds, &shifts)?;
            save_csv(&ds, &out)?;
            println!("wrote {} rows x {} series to {}", ds.rows(), ds.cols(), out.display());
            Ok(())
        }
        Command::Gradcheck { module, seed, tolerance } => {
            if !["tensor", "model", "all"].contains(&module.as_str()) {
                bail!("unknown module `{module}` (expected tensor, model or all)");
            }
            let mut all_pass = true;
            if module == "tensor" || module == "all" {
                for op in named_ops() {
                    let report = check_named_op(op, seed, tolerance)?;
                    println!("{}", report.summary());
                    all_pass &= report.pass();
                }
            }
            if module == "model" || module == "all" {
                for report in gradient_suite(seed, tolerance)? {
                    println!("{}", report.summary());
                    all_pass &= report.pass();
                }
            }
            if !all_pass {
                bail!("gradient checks failed");
            }
            Ok(())
        }
    }
}
