//! `relkd` command-line front end.

mod commands;
mod config;

pub use commands::{
    cmd_cache_teacher, cmd_distill, cmd_evaluate, cmd_gate_trace, cmd_mapreduce, cmd_train_teachers, CliError,
    EvalReport, Layout, MapReduceReport,
};
pub use config::{ConfigError, ConfigFile, ExperimentConfig, Preset, TeacherSpec, TeachersConfig, CONFIG_VERSION};

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "relkd", version, about = "Reliability-aware multi-teacher distillation lab")]
pub struct Cli {
    /// Experiment config (TOML). Without it, `--preset` picks the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, global = true, default_value = "A2")]
    pub preset: String,
    /// Overrides the config's root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    /// Directory for teacher checkpoints and caches (defaults to `--out`).
    #[arg(long, global = true)]
    pub artifacts: Option<PathBuf>,
    /// Also write intermediate traces.
    #[arg(long, global = true)]
    pub trace: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the resolved config as TOML.
    ShowConfig,
    /// Train both teachers with cross-entropy and write their checkpoints.
    TrainTeachers,
    /// Score the training split with both teachers; write top-k and pseudo-label caches.
    CacheTeacher,
    /// Train a student under the configured preset.
    Distill,
    /// Greedy ROUGE on the test split, with retention when a teacher is given.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Summarize a document file of `w<id>` tokens, chunking when it exceeds the context limit.
    Mapreduce {
        #[arg(long)]
        document: PathBuf,
        /// MAP model (defaults to the student checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// REDUCE model (defaults to the MAP model).
        #[arg(long)]
        reduce_checkpoint: Option<PathBuf>,
    },
    /// Per-token confidence, agreement and gate records for the given examples.
    GateTrace {
        /// Comma-separated example ids.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.clone(), e))?;
            Ok(ExperimentConfig::parse(&text, cli.seed)?)
        }
        None => {
            let text = format!("version = {CONFIG_VERSION}\npreset = {:?}\n", cli.preset);
            Ok(ExperimentConfig::parse(&text, cli.seed)?)
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("REL_KD_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("REL_KD_THREADS={v:?} is not a positive integer")))?;
        if n == 0 {
            return Err(CliError::Usage("REL_KD_THREADS must be at least 1".into()));
        }
        // Ignore the error when a pool already exists (e.g. in-process reuse).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    configure_threads()?;
    let cfg = load_config(cli)?;
    let layout = Layout::with_artifacts(&cli.out, cli.artifacts.as_deref().unwrap_or(&cli.out));
    match &cli.command {
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::TrainTeachers => cmd_train_teachers(&cfg, &layout),
        Command::CacheTeacher => cmd_cache_teacher(&cfg, &layout).map(|_| ()),
        Command::Distill => cmd_distill(&cfg, &layout).map(|_| ()),
        Command::Evaluate { checkpoint, teacher } => {
            let report = cmd_evaluate(&cfg, &layout, checkpoint.as_deref(), teacher.as_deref())?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            Ok(())
        }
        Command::Mapreduce {
            document,
            checkpoint,
            reduce_checkpoint,
        } => {
            let report = cmd_mapreduce(
                &cfg,
                &layout,
                document,
                checkpoint.as_deref(),
                reduce_checkpoint.as_deref(),
                cli.trace,
            )?;
            println!("{}", report.text);
            Ok(())
        }
        Command::GateTrace { ids, checkpoint } => cmd_gate_trace(&cfg, &layout, ids, checkpoint.as_deref()).map(|_| ()),
    }
}

/// Process entry point; returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
