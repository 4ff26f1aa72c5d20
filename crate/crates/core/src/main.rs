use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use popfusion::par::Exec;
use popfusion::pipeline::{self, PipelineError, RunArgs, Split, SynthArgs};

#[derive(Parser)]
#[command(name = "popfusion", version, about = "Short-video engagement prediction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Dataset manifest (JSON). Required for `prepare`; later commands reuse
    /// the one recorded in run.json.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// JSON file of overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run every loop on the calling thread.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn run_args(&self) -> RunArgs {
        RunArgs {
            manifest: self.manifest.clone(),
            out: self.out.clone(),
            seed: self.seed,
            config: self.config.clone(),
            exec: if self.sequential { Exec::Sequential } else { Exec::default() },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Holdout,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset bundle.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
        /// Dimension of every embedding source.
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0.0)]
        missing_embedding_frac: f64,
        #[arg(long, default_value_t = 0.02)]
        outlier_frac: f64,
        /// Also write targets for the test table.
        #[arg(long)]
        test_targets: bool,
    },
    /// Validate inputs and build feature matrices.
    Prepare(Common),
    /// Fit one gradient-boosted model per target.
    TrainTabular(Common),
    /// Fit one fusion network per target.
    TrainFusion(Common),
    /// Train fusion networks over embedding-source subsets.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Stop after this many new cells (resume by rerunning).
        #[arg(long)]
        max_cells: Option<usize>,
    },
    /// Write per-row predictions for one split.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "holdout")]
        split: SplitArg,
    },
    /// Write leaderboard, density and importance reports.
    Report(Common),
}

fn run(command: &Command) -> Result<(), PipelineError> {
    match command {
        Command::Synth {
            out,
            seed,
            n_train,
            n_test,
            dim,
            missing_embedding_frac,
            outlier_frac,
            test_targets,
        } => {
            let manifest = pipeline::cmd_synth(&SynthArgs {
                out: out.clone(),
                seed: *seed,
                n_train: *n_train,
                n_test: *n_test,
                dim: *dim,
                missing_embedding_frac: *missing_embedding_frac,
                outlier_frac: *outlier_frac,
                test_targets: *test_targets,
            })?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Prepare(c) => pipeline::cmd_prepare(&c.run_args()),
        Command::TrainTabular(c) => pipeline::cmd_train_tabular(&c.run_args()),
        Command::TrainFusion(c) => pipeline::cmd_train_fusion(&c.run_args()),
        Command::Ablate { common, max_cells } => pipeline::cmd_ablate(&common.run_args(), *max_cells),
        Command::Predict { common, split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Holdout => Split::Holdout,
                SplitArg::Test => Split::Test,
                SplitArg::All => Split::All,
            };
            let path = pipeline::cmd_predict(&common.run_args(), split)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Report(c) => pipeline::cmd_report(&c.run_args()),
    }
}

fn out_dir(command: &Command) -> &PathBuf {
    match command {
        Command::Synth { out, .. } => out,
        Command::Prepare(c) | Command::TrainTabular(c) | Command::TrainFusion(c) | Command::Report(c) => &c.out,
        Command::Ablate { common, .. } | Command::Predict { common, .. } => &common.out,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => {
            let _ = fs::remove_file(out_dir(&cli.command).join("error.json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(hint) = &e.hint {
                eprintln!("hint: {hint}");
            }
            let dir = out_dir(&cli.command);
            if fs::create_dir_all(dir).is_ok() {
                let _ = fs::write(dir.join("error.json"), e.to_json());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
