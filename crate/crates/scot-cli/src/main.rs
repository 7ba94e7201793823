use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scot_cli::commands;
use scot_cli::config::load_config;

#[derive(Parser)]
#[command(
    name = "scot",
    version,
    about = "Train, distill and evaluate few-step flow samplers on 2-D toy distributions"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the flow-matching teacher and write its checkpoint.
    TrainTeacher(RunArgs),
    /// Distill the teacher into a few-step student.
    Distill(RunArgs),
    /// Score a student checkpoint across sampling budgets.
    Eval(RunArgs),
    /// Re-run distillation under each weighting strategy and tabulate.
    Compare(RunArgs),
    /// Dump teacher and student trajectories for plotting.
    ExportTraj(RunArgs),
}

fn dispatch(cmd: &Cmd) -> scot_cli::error::Result<()> {
    let args = match cmd {
        Cmd::TrainTeacher(a)
        | Cmd::Distill(a)
        | Cmd::Eval(a)
        | Cmd::Compare(a)
        | Cmd::ExportTraj(a) => a,
    };
    let loaded = load_config(&args.config)?;
    match cmd {
        Cmd::TrainTeacher(_) => commands::run_train_teacher(&loaded, &args.out),
        Cmd::Distill(_) => commands::run_distill(&loaded, &args.out),
        Cmd::Eval(_) => commands::run_eval(&loaded, &args.out),
        Cmd::Compare(_) => commands::run_compare(&loaded, &args.out),
        Cmd::ExportTraj(_) => commands::run_export_traj(&loaded, &args.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successful exits; anything else is a usage
            // error and shares exit code 1 with config validation.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
