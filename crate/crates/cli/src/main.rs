//! `pcs`: drives a predecessor combination search run from the shell.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 when a stage fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use pcs::ckptstore::BlockSource;
use pcs::pipeline::{self, Baseline, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "pcs", version, about = "Predecessor combination search over per-block training checkpoints")]
struct Cli {
    /// TOML run configuration; falls back to the run directory's
    /// config.json, then to built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,

    /// Root seed; overrides the configuration's.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or load) and split the dataset into the run directory.
    GenData,
    /// Train from scratch and store the candidate snapshots.
    Train,
    /// Per-block probe curves and the search's candidate histogram.
    ProbeBlocks,
    /// Warm-up plus surrogate-guided search on error and ECE.
    Search,
    /// Comparison methods.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineKind,
    },
    /// Score one combination (default: the search's best).
    Evaluate {
        /// JSON array of candidate indices, one per block.
        #[arg(long)]
        pc: Option<String>,
        #[arg(long, default_value = "evaluate")]
        name: String,
    },
    /// Collect every scored method into report.json and report.txt.
    Report,
    /// Every stage in order.
    RunAll,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineKind {
    EarlyStop,
    Random,
    LossSearch,
}

impl From<BaselineKind> for Baseline {
    fn from(k: BaselineKind) -> Self {
        match k {
            BaselineKind::EarlyStop => Baseline::EarlyStop,
            BaselineKind::Random => Baseline::Random,
            BaselineKind::LossSearch => Baseline::LossSearch,
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<pcs::Error> for Failure {
    fn from(e: pcs::Error) -> Self {
        let mut msg = e.to_string();
        let mut src = std::error::Error::source(&e);
        while let Some(s) = src {
            msg.push_str(&format!("\n  caused by: {s}"));
            src = s.source();
        }
        Failure::Runtime(msg)
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))?
    } else {
        let stored = cli.run_dir.join("config.json");
        match std::fs::read_to_string(&stored) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| Failure::Runtime(format!("invalid {}: {e}", stored.display())))?,
            Err(_) => RunConfig::default(),
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn print_record(name: &str, r: &pcs::orchestrator::EvalRecord) {
    let m = r.test.unwrap_or(r.val);
    println!(
        "{name}: pc {:?} (epochs {:?}) err {:.4} ece {:.4} nll {:.4} tau {:.1}",
        r.pc, r.epochs, m.err, m.ece, m.nll, r.temperature
    );
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if cli.threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let cfg = load_config(cli)?;
    let run: &Path = &cli.run_dir;
    match &cli.command {
        Command::GenData => {
            let s = pipeline::build_splits(&cfg)?;
            pipeline::write_splits(run, &s)?;
            println!(
                "wrote {} train / {} val / {} test / {} shifted samples",
                s.train.n_samples(),
                s.val.n_samples(),
                s.test.n_samples(),
                s.ood.n_samples()
            );
        }
        Command::Train => {
            let out = pipeline::train_stage(&cfg, run)?;
            let last = out.log.records.last().expect("at least one epoch");
            println!(
                "trained {} epochs; {} candidates at epochs {:?}; final val nll {:.4} err {:.4}",
                out.log.records.len(),
                out.pool.candidate_epochs().len(),
                out.pool.candidate_epochs(),
                last.val_loss,
                last.val_error
            );
        }
        Command::ProbeBlocks => {
            for c in pipeline::probe_stage(&cfg, run)? {
                println!(
                    "block {}: fixed at epoch {}, lowest val nll at epoch {}",
                    c.block,
                    c.fixing_epoch,
                    c.argmin_nll_epoch().unwrap_or(0)
                );
            }
        }
        Command::Search => print_record("pcs", &pipeline::search_stage(&cfg, run)?),
        Command::Baseline { kind } => {
            for m in pipeline::baseline_stage(&cfg, run, (*kind).into())? {
                print_record(&m.method, &m.record);
            }
        }
        Command::Evaluate { pc, name } => {
            let pc: Vec<usize> = match pc {
                Some(s) => serde_json::from_str(s).map_err(|e| Failure::Usage(format!("--pc: {e}")))?,
                None => pipeline::read_best_pc(run)?,
            };
            print_record(name, &pipeline::evaluate_stage(&cfg, run, &pc, name)?);
        }
        Command::Report => print!("{}", pipeline::report(run)?),
        Command::RunAll => {
            pipeline::run_all(&cfg, run)?;
            print!("{}", std::fs::read_to_string(run.join("report.txt")).map_err(|e| Failure::Runtime(e.to_string()))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            if !matches!(e.kind(), ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                eprintln!("\n{}", Cli::command().render_help());
            }
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_help());
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
