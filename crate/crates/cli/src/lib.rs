//! The `discourse` command line: configuration, stage dispatch, manifests
//! and reports.

pub mod config;
pub mod exemplars;
pub mod manifest;
pub mod plot;
pub mod report;
pub mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use discourse_core::lir::Method;

use crate::config::{Config, ConfigError};
use crate::stages::{ClusterInput, Ctx, SynthKind, Task};

#[derive(Debug, Parser)]
#[command(name = "discourse", version, about = "Discourse-particle representation pipeline")]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output root for all artifacts.
    #[arg(long, global = true, env = "DISCOURSE_OUT", default_value = "out")]
    pub out_dir: PathBuf,

    /// Config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a bundled synthetic data set.
    Synth {
        #[arg(value_enum)]
        kind: SynthKind,
        /// Directory to write into.
        #[arg(long)]
        dir: PathBuf,
        /// Dialogue count, or seed-pair count for the language.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Normalize the corpus into `corpus.jsonl`.
    Ingest {
        /// Overrides the `corpus` key.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Overrides the `corpus_format` key.
        #[arg(long)]
        format: Option<String>,
    },
    /// Build the NSP, particle-prediction and substitution datasets.
    MakeTasks,
    /// Train the encoder and head on one task.
    Train {
        #[arg(long, value_enum)]
        task: Task,
    },
    /// Archive token embeddings of every particle window from a trained model.
    Embed {
        #[arg(long, value_enum)]
        task: Task,
    },
    /// Extract particle representations.
    Lir {
        #[arg(long, value_enum)]
        task: Task,
        /// Read embeddings from this archive instead of the trained model.
        #[arg(long)]
        archive: Option<PathBuf>,
    },
    /// t-SNE + DBSCAN sweep over representations.
    Cluster {
        #[arg(long, value_enum)]
        task: Task,
        /// One method; default: every configured method.
        #[arg(long)]
        method: Option<Method>,
        /// `all` or a particle; default: `all` plus every particle.
        #[arg(long)]
        scope: Option<String>,
        /// Representation archive; default: the `lir` stage output.
        #[arg(long, requires = "lir_manifest")]
        archive: Option<PathBuf>,
        /// Manifest matching `--archive`.
        #[arg(long)]
        lir_manifest: Option<PathBuf>,
    },
    /// Ranking and classification measures for a trained task.
    EvalRank {
        #[arg(long, value_enum)]
        task: Task,
    },
    /// ARI and permutation p-values of per-particle clusters against function labels.
    EvalAri {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Translate a text file line by line.
    Translate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Iterative back-translation on the configured seed pairs.
    Backtranslate,
    /// BLEU and sentiment agreement on the evaluation pairs.
    EvalMt,
    /// Render `report.md` from the latest manifests.
    Report,
    /// ingest → make-tasks → train → lir → cluster → eval-ari → eval-rank → report.
    Run {
        /// Also run backtranslate and eval-mt.
        #[arg(long)]
        with_mt: bool,
    },
    /// Print the documented config keys with their defaults.
    Keys,
}

fn build_config(cli: &Cli) -> Result<Config, ConfigError> {
    let mut c = Config::default();
    if let Some(path) = &cli.config {
        c.apply_file(path)?;
    }
    for o in &cli.overrides {
        c.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        c.set("seed", &seed.to_string())?;
    }
    if let Command::Ingest { corpus, format } = &cli.command {
        if let Some(p) = corpus {
            c.set("corpus", &p.to_string_lossy())?;
        }
        if let Some(f) = format {
            c.set("corpus_format", f)?;
        }
    }
    c.validate()?;
    Ok(c)
}

fn scopes(ctx: &Ctx, scope: &Option<String>) -> Vec<String> {
    match scope {
        Some(s) => vec![s.clone()],
        None => std::iter::once("all".to_string()).chain(ctx.particles()).collect(),
    }
}

fn methods(ctx: &Ctx, method: Option<Method>) -> Vec<Method> {
    method.map_or_else(|| ctx.methods(), |m| vec![m])
}

/// The full analysis pipeline.
pub fn run_pipeline(ctx: &Ctx, with_mt: bool) -> anyhow::Result<()> {
    stages::ingest(ctx)?;
    stages::make_tasks(ctx)?;
    let input = ClusterInput {
        archive: None,
        lir_manifest: None,
    };
    for task in ctx.tasks() {
        log::info!("training {task}");
        stages::train_task(ctx, task)?;
        stages::lir_stage(ctx, task, None)?;
        for method in ctx.methods() {
            log::info!("clustering {task}/{method}");
            stages::cluster_stage(ctx, task, method, &scopes(ctx, &None), &input)?;
            stages::eval_ari(ctx, task, method)?;
        }
        stages::eval_rank(ctx, task)?;
    }
    if with_mt {
        stages::backtranslate(ctx)?;
        stages::eval_mt(ctx)?;
    }
    report::report(ctx)
}

fn dispatch(cli: &Cli, ctx: &Ctx) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth { kind, dir, size } => stages::synth(ctx, *kind, dir, *size),
        Command::Ingest { .. } => stages::ingest(ctx),
        Command::MakeTasks => stages::make_tasks(ctx),
        Command::Train { task } => stages::train_task(ctx, *task),
        Command::Embed { task } => stages::embed(ctx, *task),
        Command::Lir { task, archive } => stages::lir_stage(ctx, *task, archive.as_deref()),
        Command::Cluster {
            task,
            method,
            scope,
            archive,
            lir_manifest,
        } => {
            let input = ClusterInput {
                archive: archive.as_deref(),
                lir_manifest: lir_manifest.as_deref(),
            };
            for m in methods(ctx, *method) {
                stages::cluster_stage(ctx, *task, m, &scopes(ctx, scope), &input)?;
            }
            Ok(())
        }
        Command::EvalRank { task } => stages::eval_rank(ctx, *task),
        Command::EvalAri { task, method } => {
            for m in methods(ctx, *method) {
                stages::eval_ari(ctx, *task, m)?;
            }
            Ok(())
        }
        Command::Translate { input, output } => stages::translate_stage(ctx, input, output.as_deref()),
        Command::Backtranslate => stages::backtranslate(ctx),
        Command::EvalMt => stages::eval_mt(ctx),
        Command::Report => report::report(ctx),
        Command::Run { with_mt } => run_pipeline(ctx, *with_mt),
        Command::Keys => {
            print!("{}", Config::documented());
            Ok(())
        }
    }
}

/// Exit status: 0 success, 1 stage failure, 2 usage or configuration error.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let config = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let ctx = Ctx {
        config,
        out: cli.out_dir.clone(),
    };
    match dispatch(&cli, &ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
