use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vlfat::cli::{self, parse_resolutions};
use vlfat::data::Split;
use vlfat::training::SliceCount;
use vlfat::Result;

#[derive(Parser)]
#[command(name = "vlfat", version, about = "Variable-length volume classification experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by a run config.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a model and write checkpoint, metrics and summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Print per-epoch progress to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Slices per volume, or "all".
        #[arg(long, default_value = "all")]
        n_slices: String,
        /// Subsampling seed; defaults to the checkpoint's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sweep test-time slice counts for a FAT or VLFAT checkpoint.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "4,8,16,24,32")]
        resolutions: String,
        /// Only test volumes with at least this many slices; defaults to
        /// the largest resolution.
        #[arg(long)]
        min_slices: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV path; defaults to robustness.csv next to the checkpoint.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(args: Args) -> Result<()> {
    match args.command {
        Command::GenData { config } => {
            let r = cli::cmd_gen_data(&config)?;
            println!("manifest: {}", r.manifest.display());
            println!("train: {}  val: {}  test: {}", r.train, r.val, r.test);
        }
        Command::Train { config, verbose } => {
            let mut cfg = cli::RunConfig::load(&config)?;
            cfg.train.verbose = verbose;
            let s = cli::run_training(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            n_slices,
            seed,
            output,
        } => {
            let split = Split::parse(&split)?;
            let n = SliceCount::parse(&n_slices)?;
            let report = cli::cmd_eval(&checkpoint, &manifest, split, n, seed)?;
            for w in &report.result.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(path) = output {
                cli::write_json(&path, &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Robustness {
            checkpoint,
            manifest,
            resolutions,
            min_slices,
            seed,
            output,
        } => {
            let res = parse_resolutions(&resolutions)?;
            let output = output.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .map(|p| p.join("robustness.csv"))
                    .unwrap_or_else(|| "robustness.csv".into())
            });
            let rows = cli::cmd_robustness(&checkpoint, &manifest, &res, min_slices, seed, &output)?;
            println!("resolution,bacc,auroc_macro");
            for r in rows {
                let auroc = r.auroc_macro.map(|a| a.to_string()).unwrap_or_default();
                println!("{},{},{}", r.resolution, r.bacc, auroc);
            }
            eprintln!("wrote {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
