//! Command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dipper::cli::{
    cmd_cache_purge, cmd_eval, cmd_gen_prompts, cmd_pipeline, cmd_report, cmd_score, cmd_select,
    cmd_sweep_alpha, load_config, Overrides, EXIT_ERROR,
};
use dipper::core::{Aggregator, SelectionMethod};

#[derive(Parser)]
#[command(
    name = "dipper",
    version,
    about = "Inference-time LLM ensembles from a single model via diverse system prompts"
)]
struct Cli {
    /// Flat key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run identifier (default: content hash of config + timestamp).
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Seed for the dev/test split and seeded sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a candidate prompt pool from the seed exemplars.
    GenPrompts {
        /// Pool output path (default: runs/<run-id>/pool.jsonl).
        #[arg(long)]
        pool_out: Option<PathBuf>,
    },
    /// Score each pool prompt's accuracy on the dev split.
    Score {
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        dev_size: Option<usize>,
    },
    /// Select the ensemble prompt subset from the scored pool.
    Select {
        #[arg(long)]
        method: Option<SelectionMethodArg>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Full pipeline: pool -> score -> select -> run -> report.
    Run {
        /// Evaluate with k unique prompts padded to the ensemble size.
        #[arg(long)]
        unique_k: Option<usize>,
    },
    /// Evaluate a persisted selection over the test split.
    Eval {
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        aggregator: Option<AggregatorArg>,
        #[arg(long)]
        unique_k: Option<usize>,
    },
    /// Correlate subset volume with ensemble accuracy over an alpha grid.
    SweepAlpha {
        /// Comma-separated alpha grid, e.g. 0,0.5,1,2,5.
        #[arg(long)]
        alphas: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Summarize a finished run.
    Report {
        #[arg(long, default_value = "table")]
        format: String,
    },
    /// Remove every cached provider response.
    CachePurge,
}

#[derive(Clone, clap::ValueEnum)]
enum SelectionMethodArg {
    Fasv,
    Topn,
    Randplus,
    #[value(name = "self")]
    SelfEnsemble,
    Exhaustive,
}

impl From<SelectionMethodArg> for SelectionMethod {
    fn from(v: SelectionMethodArg) -> Self {
        match v {
            SelectionMethodArg::Fasv => Self::Fasv,
            SelectionMethodArg::Topn => Self::Topn,
            SelectionMethodArg::Randplus => Self::Randplus,
            SelectionMethodArg::SelfEnsemble => Self::SelfEnsemble,
            SelectionMethodArg::Exhaustive => Self::Exhaustive,
        }
    }
}

#[derive(Clone, clap::ValueEnum)]
enum AggregatorArg {
    Mv,
    Bon,
}

impl From<AggregatorArg> for Aggregator {
    fn from(v: AggregatorArg) -> Self {
        match v {
            AggregatorArg::Mv => Self::Mv,
            AggregatorArg::Bon => Self::Bon,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut overrides = Overrides {
        run_id: cli.run_id.clone(),
        seed: cli.seed,
        ..Overrides::default()
    };
    let mut pool_out: Option<PathBuf> = None;
    let mut selection_path: Option<PathBuf> = None;
    let mut report_format = String::from("table");
    match &cli.command {
        Command::GenPrompts { pool_out: out } => pool_out = out.clone(),
        Command::Score {
            pool,
            data,
            dev_size,
        } => {
            overrides.pool = pool.clone();
            overrides.data = data.clone();
            overrides.dev_size = *dev_size;
        }
        Command::Select { method, n, alpha } => {
            overrides.method = method.clone().map(Into::into);
            overrides.n = *n;
            overrides.alpha = *alpha;
        }
        Command::Run { unique_k } => overrides.unique_k = *unique_k,
        Command::Eval {
            selection,
            data,
            aggregator,
            unique_k,
        } => {
            selection_path = selection.clone();
            overrides.data = data.clone();
            overrides.aggregator = aggregator.clone().map(Into::into);
            overrides.unique_k = *unique_k;
        }
        Command::SweepAlpha { alphas, trials } => {
            overrides.trials = *trials;
            if let Some(raw) = alphas {
                match raw
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                {
                    Ok(v) => overrides.alphas = Some(v),
                    Err(e) => {
                        eprintln!("error: --alphas {raw:?}: {e}");
                        return ExitCode::from(EXIT_ERROR);
                    }
                }
            }
        }
        Command::Report { format } => report_format = format.clone(),
        Command::CachePurge => {}
    }

    let cfg = match load_config(cli.config.as_deref(), &overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_ERROR);
        }
    };
    let result = match &cli.command {
        Command::GenPrompts { .. } => cmd_gen_prompts(&cfg, pool_out.as_deref()),
        Command::Score { .. } => cmd_score(&cfg),
        Command::Select { .. } => cmd_select(&cfg),
        Command::Run { .. } => cmd_pipeline(&cfg),
        Command::Eval { .. } => cmd_eval(&cfg, selection_path.as_deref()),
        Command::SweepAlpha { .. } => cmd_sweep_alpha(&cfg),
        Command::Report { .. } => cmd_report(&cfg, &report_format),
        Command::CachePurge => cmd_cache_purge(&cfg),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
