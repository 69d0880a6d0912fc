mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qrs_core::PpLevel;

/// Missing input files, reported before any work starts.
#[derive(Debug)]
pub struct MissingInput(pub Vec<PathBuf>);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing input:")?;
        for p in &self.0 {
            write!(f, " {}", p.display())?;
        }
        Ok(())
    }
}

impl std::error::Error for MissingInput {}

const EXIT_MISSING: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(
    name = "qrs",
    version,
    about = "QRS detection with a 1D convolutional segmenter"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: a timestamped directory under `runs/`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub pp: Option<PpArg>,
    #[arg(long = "tol-ms", global = true)]
    pub tol_ms: Option<f64>,
    #[arg(long, global = true)]
    pub depth: Option<usize>,
    #[arg(long, global = true)]
    pub channels: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PpArg {
    None,
    Minimal,
    Moderate,
    Advanced,
}

impl From<PpArg> for PpLevel {
    fn from(p: PpArg) -> Self {
        match p {
            PpArg::None => PpLevel::None,
            PpArg::Minimal => PpLevel::Minimal,
            PpArg::Moderate => PpLevel::Moderate,
            PpArg::Advanced => PpLevel::Advanced,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write seeded synthetic records, annotations and a manifest.
    Generate {
        #[arg(short, long, default_value_t = 10)]
        n: usize,
    },
    /// Subject-wise k-fold training on a dataset directory.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
        /// Train only the first split (an 80/20 subject split at 5 folds).
        #[arg(long)]
        no_cv: bool,
    },
    /// Detect R-peaks in one record with a trained model.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        record: PathBuf,
        /// Sampling rate of a CSV record (`.f32` records carry their own).
        #[arg(long)]
        fs: Option<u32>,
        /// Also write the refined 0/1 stream at the working rate.
        #[arg(long)]
        dump_stream: bool,
    },
    /// Score trained fold models on a dataset at every refinement level.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding `model_fold{i}.qrscnn` and `folds.json`.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Score every model on every record instead of its held-out fold.
        #[arg(long)]
        all_records: bool,
    },
    /// Train and score one model family per depth; writes `sweep.csv`.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        depths: Vec<usize>,
        #[arg(long)]
        no_cv: bool,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<MissingInput>().is_some() {
        return EXIT_MISSING;
    }
    if err.downcast_ref::<commands::UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if let Some(qrs_core::Error::Io { source, .. }) = err.downcast_ref::<qrs_core::Error>() {
        if source.kind() == std::io::ErrorKind::NotFound {
            return EXIT_MISSING;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
