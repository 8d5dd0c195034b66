use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use promptsent::pipeline::{self, BackendKind, RunConfig};

/// Prompt-based scoring of recommendation letters and the downstream
/// aggregation, regression and random-forest analysis.
#[derive(Parser)]
#[command(name = "promptsent", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["mock", "http", "instruct"])]
    backend: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every document with the configured prompts and lexicons.
    Score,
    /// Predict metadata with a prompt and report precision/recall/F1.
    Evalmeta {
        /// Prompt spec (bundled name or file); overrides the config tasks.
        #[arg(long, requires = "gold")]
        prompt: Option<String>,
        /// Metadata key with the true labels.
        #[arg(long, requires = "prompt")]
        gold: Option<String>,
    },
    /// Collapse letter scores to one row per candidate.
    Aggregate,
    /// Fit the regression grid and summarize p-values.
    Regress,
    /// Train the forest; write OOB report, importances and partial dependence.
    Forest,
    /// Partial dependence of a saved forest on one or two features.
    Pd {
        /// Comma-separated feature names.
        #[arg(long, value_delimiter = ',', required = true)]
        features: Vec<String>,
        #[arg(long)]
        forest: Option<PathBuf>,
        /// Class whose probability is averaged (default: the last class).
        #[arg(long)]
        target: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Score => "score",
            Command::Evalmeta { .. } => "evalmeta",
            Command::Aggregate => "aggregate",
            Command::Regress => "regress",
            Command::Forest => "forest",
            Command::Pd { .. } => "pd",
        }
    }
}

fn configure(cli: &Cli) -> promptsent::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = &cli.backend {
        cfg.backend.kind = b.parse::<BackendKind>()?;
    }
    if let Some(o) = &cli.out {
        let cwd = std::env::current_dir().map_err(|e| promptsent::Error::InvalidInput(format!("current dir: {e}")))?;
        cfg.out = cwd.join(o);
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &mut RunConfig) -> promptsent::Result<Vec<PathBuf>> {
    match &cli.command {
        Command::Score => pipeline::cmd_score(cfg),
        Command::Evalmeta { prompt, gold } => {
            if let (Some(p), Some(g)) = (prompt, gold) {
                cfg.evalmeta.tasks = vec![pipeline::EvalTask {
                    prompt: p.clone(),
                    gold: g.clone(),
                }];
            }
            pipeline::cmd_evalmeta(cfg)
        }
        Command::Aggregate => pipeline::cmd_aggregate(cfg),
        Command::Regress => pipeline::cmd_regress(cfg),
        Command::Forest => pipeline::cmd_forest(cfg),
        Command::Pd { features, forest, target } => {
            pipeline::cmd_pd(cfg, features, forest.as_deref(), target.as_deref()).map(|p| vec![p])
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut cfg = match configure(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match run(&cli, &mut cfg) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Err(e2) = pipeline::write_error_record(&cfg.out_dir(), cli.command.name(), &e) {
                eprintln!("error: could not write error record: {e2}");
            }
            ExitCode::FAILURE
        }
    }
}
