use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rpo_core::config::RunConfig;
use rpo_core::eval::TrendCheck;
use rpo_core::run::{self, output_root, TrendRun};
use rpo_core::Result;

/// Exit status when `--assert-trends` is set and a trend check fails.
const TRENDS_FAILED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "rpo",
    version,
    about = "Reward preference optimization lab on a synthetic sprite world"
)]
struct Cli {
    /// Run config in TOML; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output root for run directories. Overrides RPO_OUTPUT_ROOT and the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default config to a file.
    InitConfig {
        #[arg(default_value = "rpo.toml")]
        path: PathBuf,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the base denoiser on every subject except the held-out one.
    Pretrain,
    /// Finetune a base checkpoint on the held-out subject.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        /// Subject id; defaults to the held-out subject.
        #[arg(long)]
        subject: Option<String>,
        /// Train for the full step budget and select the final checkpoint.
        #[arg(long)]
        no_early_stop: bool,
    },
    /// Score a checkpoint on the evaluation prompts.
    Eval {
        /// Checkpoint to evaluate; a freshly initialized model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        subject: Option<String>,
    },
    /// Run the four-arm loss ablation over the configured seeds.
    Ablate {
        /// Base checkpoint; pretrained inside the run when omitted.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also compare early stopping against a doubled step budget.
        #[arg(long)]
        overfit_check: bool,
        /// Exit with status 3 if any trend check fails.
        #[arg(long)]
        assert_trends: bool,
    },
    /// Sweep the validation reward weight over the configured values and seeds.
    Sweep {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        assert_trends: bool,
    },
    /// Export the validation-reward curve of a finetune run.
    Plot { run_dir: PathBuf },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn report_trends(run: &TrendRun, assert: bool) -> ExitCode {
    for t in &run.trends {
        println!("{t}");
    }
    println!("{}", run.dir.display());
    if assert && !run.trends.iter().all(TrendCheck::passed) {
        eprintln!("error: trend checks failed");
        return ExitCode::from(TRENDS_FAILED);
    }
    ExitCode::SUCCESS
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    if let Command::InitConfig { path, force } = &cli.command {
        run::init_config(path, *force)?;
        println!("{}", path.display());
        return Ok(ExitCode::SUCCESS);
    }
    let cfg = load_config(cli.config.as_deref())?;
    let root = output_root(cli.output.as_deref(), &cfg);
    match cli.command {
        Command::InitConfig { .. } => unreachable!("handled above"),
        Command::Pretrain => {
            let r = run::cmd_pretrain(&cfg, &root)?;
            println!("held-out loss {:.6} -> {:.6}", r.initial_loss, r.final_loss);
            println!("{}", r.checkpoint.display());
        }
        Command::Finetune {
            base,
            subject,
            no_early_stop,
        } => {
            let r = run::cmd_finetune(&cfg, &root, &base, subject.as_deref(), no_early_stop)?;
            println!(
                "best validation reward {:.4} at step {} ({} validations)",
                r.best_reward, r.best_step, r.n_validations
            );
            println!("{}", r.selected.display());
        }
        Command::Eval { checkpoint, subject } => {
            let r = run::cmd_eval(&cfg, &root, checkpoint.as_deref(), subject.as_deref())?;
            println!(
                "image_sim {:.4} text_sim {:.4} harmonic {:.4} over {} images",
                r.report.image_sim, r.report.text_sim, r.report.harmonic_03, r.report.n_images
            );
            println!("{}", r.dir.display());
        }
        Command::Ablate {
            base,
            jobs,
            overfit_check,
            assert_trends,
        } => {
            let r = run::cmd_ablate(&cfg, &root, base.as_deref(), jobs, overfit_check)?;
            return Ok(report_trends(&r, assert_trends));
        }
        Command::Sweep {
            base,
            jobs,
            assert_trends,
        } => {
            let r = run::cmd_sweep(&cfg, &root, base.as_deref(), jobs)?;
            return Ok(report_trends(&r, assert_trends));
        }
        Command::Plot { run_dir } => {
            let r = run::cmd_plot(&cfg, &root, &run_dir)?;
            println!("{}", r.svg.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
