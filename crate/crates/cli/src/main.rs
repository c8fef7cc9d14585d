//! `clod`: generate synthetic detection benchmarks, train continual
//! detectors, evaluate checkpoints and turn result CSVs into tables and
//! plots.

mod plot;
mod results;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "clod", version, about = "Class-incremental object detection experiments")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that trains or evaluates.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// Experiment config (TOML). Defaults apply to anything left out.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for weight initialisation and training order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving results, checkpoints and the manifest.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Scenario in NpM form, e.g. 4p4 or 2p2.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Replay memory capacity for the +ocdm methods.
    #[arg(long)]
    pub memory_size: Option<usize>,
    /// Dataset written by `gen-data`; generated in memory from the config
    /// when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark with per-task annotation files.
    GenData {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train on every class at once (upper reference).
    TrainJoint {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train through every task of the scenario with one continual method.
    TrainCl {
        #[command(flatten)]
        run: RunArgs,
        /// finetune, lwf, lwf+ocdm, erd, erd+ocdm, yolo-lwf or yolo-lwf+ocdm.
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate a saved checkpoint after a given task.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// 1-based task whose classes count as "new".
        #[arg(long)]
        task: usize,
    },
    /// Format result CSVs as a final-task old/new/all table.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Draw per-task mAP curves (one SVG per scenario).
    Plot {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one method at two memory sizes and report the relative drop.
    Sensitivity {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        method: Option<String>,
        /// The two capacities, larger first.
        #[arg(long, value_delimiter = ',', required = true)]
        memory_sizes: Vec<usize>,
    },
    /// Toggle grid over the distillation components (ce, wce, mask, cls_iou).
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "ce,wce,mask,cls_iou")]
        toggles: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    let outcome = match cli.command {
        Command::GenData { run } => run::gen_data(&run),
        Command::TrainJoint { run } => run::train_joint(&run),
        Command::TrainCl { run, method } => run::train_cl(&run, method.as_deref()),
        Command::Eval { run, checkpoint, task } => run::eval(&run, &checkpoint, task),
        Command::Report { input, output } => run::report(&input, output.as_deref()),
        Command::Plot { input, out_dir } => run::plot(&input, &out_dir),
        Command::Sensitivity {
            run,
            method,
            memory_sizes,
        } => run::sensitivity(&run, method.as_deref(), &memory_sizes),
        Command::Ablate { run, toggles } => run::ablate(&run, &toggles),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
