use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use otkd_cli::commands::{self, CliError, EvalOptions};
use otkd_cli::config::{parse_kd_loss, parse_kind};
use otkd_core::distill::KdLoss;
use otkd_core::models::ModelKind;

/// Synthetic CTC tasks, target-conditioned teachers and student distillation.
///
/// Exit codes: 0 success, 1 other failure, 2 configuration error, 3 I/O
/// error, 4 training divergence, 5 checkpoint or data mismatch.
#[derive(Parser)]
#[command(name = "otkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes OUT.train.otds and OUT.eval.otds.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a teacher of the given kind with CTC.
    TrainTeacher {
        #[arg(long, value_parser = parse_kind)]
        kind: ModelKind,
        #[arg(long)]
        config: PathBuf,
        /// Prefix given to gen-data --out.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Initializes a student from a teacher, then trains it with CTC.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// fitnets, kl or l2; overrides the config.
        #[arg(long, value_parser = parse_kd_loss)]
        kd: Option<KdLoss>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also trains the no-distillation baseline and reports both.
        #[arg(long)]
        compare_baseline: bool,
    },
    /// Greedy-decodes the evaluation split and reports error rates.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV of per-frame posteriors for one sample.
        #[arg(long)]
        export_heatmap: Option<PathBuf>,
        /// CSV of last-layer cross attention; oracle-kind models only.
        #[arg(long)]
        export_attention: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample_index: usize,
    },
}

fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    match cli.command {
        Command::GenData { config, out } => commands::gen_data(&commands::read_config(&config)?, &out),
        Command::TrainTeacher {
            kind,
            config,
            data,
            out,
            seed,
        } => {
            let mut cfg = commands::read_config(&config)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            commands::train_teacher_cmd(kind, &cfg, &data, &out)
        }
        Command::Distill {
            teacher,
            config,
            data,
            out,
            kd,
            seed,
            compare_baseline,
        } => {
            let mut cfg = commands::read_config(&config)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.kd_loss = kd.unwrap_or(cfg.kd_loss);
            commands::distill_cmd(&teacher, &cfg, &data, &out, compare_baseline)
        }
        Command::Eval {
            model,
            data,
            export_heatmap,
            export_attention,
            sample_index,
        } => commands::eval_cmd(
            &model,
            &data,
            &EvalOptions {
                heatmap: export_heatmap.as_deref(),
                attention: export_attention.as_deref(),
                sample_index,
            },
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
