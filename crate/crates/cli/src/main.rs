//! `traffic-lm`: batch front end for corpus building, training, generation,
//! classification and evaluation.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use traffic_lm::lm::Mechanism;

use crate::commands::Ctx;
use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "traffic-lm", version, about = "Tokenize, model, generate and evaluate network traffic")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model context length (3072, 12032 or any N).
    #[arg(long, global = true)]
    max_len: Option<usize>,
    /// Sequence-mixing mechanism: linear, rwkv, retnet or vaswani-small.
    #[arg(long, global = true)]
    mechanism: Option<Mechanism>,
    #[arg(long, global = true)]
    top_k: Option<usize>,
    /// Leave wall-clock timestamps out of reports.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Split captures into one pcap per 5-tuple flow.
    SplitFlows {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Tokenize captures into token shards plus a corpus manifest.
    Tokenize {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Rebuild pcaps from token shards.
    Detokenize {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Train the language model on a token corpus.
    Pretrain {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Fine-tune a checkpoint for classification on a labelled manifest.
    Finetune {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Classify the flows of a labelled manifest and score them.
    Classify {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate flows as pcaps with a JSONL manifest.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Packet-header JSDs between two capture sets.
    EvalJsdPacket {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        r#gen: PathBuf,
    },
    /// Flow-feature JSDs between two capture sets.
    EvalJsdFlow {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        r#gen: PathBuf,
    },
    /// Empirical CDF exports per field.
    EvalCdf {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        r#gen: PathBuf,
        #[arg(long)]
        field: Vec<String>,
    },
    /// Real-versus-generated classification test.
    Discriminate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        r#gen: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SplitFlows { .. } => "split-flows",
            Command::Tokenize { .. } => "tokenize",
            Command::Detokenize { .. } => "detokenize",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Classify { .. } => "classify",
            Command::Generate { .. } => "generate",
            Command::EvalJsdPacket { .. } => "eval-jsd-packet",
            Command::EvalJsdFlow { .. } => "eval-jsd-flow",
            Command::EvalCdf { .. } => "eval-cdf",
            Command::Discriminate { .. } => "discriminate",
        }
    }
}

fn init_threads(cfg: &RunConfig) -> Result<(), CliError> {
    let env = match std::env::var("TRAFFIC_LM_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::config("init_threads", format!("TRAFFIC_LM_THREADS must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let cap = match (env, cfg.io.threads) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    if let Some(n) = cap {
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let overrides = Overrides { seed: g.seed, max_len: g.max_len, mechanism: g.mechanism, top_k: g.top_k };
    let mut cfg = RunConfig::load(g.config.as_deref(), &overrides)?;
    if let Command::Generate { count: Some(n), .. } = &cli.command {
        cfg.generate.count = *n;
    }
    init_threads(&cfg)?;
    let out = g.out.clone().ok_or_else(|| CliError::config(cli.command.name(), "--out is required"))?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::data("create_output_dir", format!("{}: {e}", out.display())))?;
    let ctx = Ctx { cfg, out, deterministic: g.deterministic, command: cli.command.name() };
    match &cli.command {
        Command::SplitFlows { input } => commands::split_flows_cmd(&ctx, input),
        Command::Tokenize { input } => commands::tokenize_cmd(&ctx, input),
        Command::Detokenize { input } => commands::detokenize_cmd(&ctx, input),
        Command::Pretrain { input } => commands::pretrain_cmd(&ctx, input),
        Command::Finetune { labels, checkpoint } => commands::finetune_cmd(&ctx, labels, checkpoint),
        Command::Classify { labels, checkpoint } => commands::classify_cmd(&ctx, labels, checkpoint),
        Command::Generate { checkpoint, .. } => commands::generate_cmd(&ctx, checkpoint),
        Command::EvalJsdPacket { real, r#gen } => commands::eval_jsd_packet_cmd(&ctx, real, r#gen),
        Command::EvalJsdFlow { real, r#gen } => commands::eval_jsd_flow_cmd(&ctx, real, r#gen),
        Command::EvalCdf { real, r#gen, field } => commands::eval_cdf_cmd(&ctx, real, r#gen, field),
        Command::Discriminate { real, r#gen, checkpoint } => commands::discriminate_cmd(&ctx, real, r#gen, checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
