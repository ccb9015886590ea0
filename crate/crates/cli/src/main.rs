//! `factlink`: build fact-linking benchmarks, train and evaluate linkers.

mod artifact;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::Run;
use crate::config::{parse_override, DetectorKind, LinkerKind, RunConfig, CONFIG_ENV};
use crate::error::CliResult;

#[derive(Parser, Debug)]
#[command(name = "factlink", version, about = "Link open information extraction triples to knowledge-graph facts")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, env = CONFIG_ENV, global = true)]
    config: Option<PathBuf>,

    /// Override any configuration key, e.g. `--set preranker.epochs=30`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override, global = true)]
    set: Vec<(String, String)>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    #[arg(long, global = true)]
    kg_entries: Option<PathBuf>,

    #[arg(long, global = true)]
    kg_facts: Option<PathBuf>,

    #[arg(long, global = true)]
    oie: Option<PathBuf>,

    #[arg(long, global = true)]
    pairs: Option<PathBuf>,

    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct EvalFlags {
    /// transductive, inductive, polysemous or out_of_kg.
    #[arg(long)]
    facet: Option<String>,
    /// BRKG or Large.
    #[arg(long)]
    store: Option<String>,
    /// any_entity_unseen or all_entities_unseen.
    #[arg(long)]
    inductive_mode: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Stage {
    Preranker,
    Reranker,
    Ookg,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic KG, OIE corpus and sentence pairs.
    ToyWorld,
    /// Align, augment, de-leak and split.
    BuildBenchmark {
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Recompute one evaluation facet.
    Split {
        #[command(flatten)]
        eval: EvalFlags,
    },
    TrainPreranker {
        /// Continue from existing parameters.
        #[arg(long)]
        resume: bool,
    },
    TrainReranker {
        #[arg(long)]
        resume: bool,
    },
    /// Train the attention detector and calibrate thresholds.
    TrainOokg {
        #[arg(long)]
        resume: bool,
    },
    /// Train one stage.
    Train {
        stage: Stage,
        #[arg(long)]
        resume: bool,
    },
    /// Embed a KG store into entity and predicate indices.
    Index {
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Link OIE triples and write ranked candidates.
    Link {
        /// OIE records; defaults to paths.oie.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        rerank_k: Option<usize>,
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        with_context: Option<bool>,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Score a linker or an out-of-KG detector on a facet.
    Evaluate {
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        rerank_k: Option<usize>,
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        with_context: Option<bool>,
        #[arg(long, value_enum)]
        detector: Option<DetectorKind>,
        #[arg(long, value_enum)]
        linker: Option<LinkerKind>,
    },
    /// Run an out-of-KG detector and write every decision.
    Detect {
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long, value_enum)]
        detector: Option<DetectorKind>,
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        with_context: Option<bool>,
    },
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn value_name<T: ValueEnum>(v: T) -> String {
    quoted(v.to_possible_value().expect("no skipped variants").get_name())
}

impl Cli {
    /// `--set` pairs first, then dedicated flags, so flags win.
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = self.set.clone();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        if let Some(s) = self.seed {
            put("seed", s.to_string());
        }
        for (key, path) in [
            ("paths.output_dir", &self.output_dir),
            ("paths.kg_entries", &self.kg_entries),
            ("paths.kg_facts", &self.kg_facts),
            ("paths.oie", &self.oie),
            ("paths.pairs", &self.pairs),
        ] {
            if let Some(p) = path {
                put(key, quoted(&p.to_string_lossy()));
            }
        }
        let eval_flags = |eval: &EvalFlags, put: &mut dyn FnMut(&str, String)| {
            if let Some(f) = &eval.facet {
                put("eval.facet", quoted(if f == "ookg" { "out_of_kg" } else { f }));
            }
            if let Some(s) = &eval.store {
                put("eval.store", quoted(s));
            }
            if let Some(m) = &eval.inductive_mode {
                put("eval.inductive_mode", quoted(m));
            }
        };
        match &self.command {
            Command::BuildBenchmark { eval } | Command::Split { eval } | Command::Index { eval } => eval_flags(eval, &mut put),
            Command::Link {
                k,
                rerank_k,
                with_context,
                eval,
                ..
            } => {
                eval_flags(eval, &mut put);
                if let Some(k) = k {
                    put("eval.k", k.to_string());
                }
                if let Some(k) = rerank_k {
                    put("eval.rerank_k", k.to_string());
                }
                if let Some(c) = with_context {
                    put("eval.with_context", c.to_string());
                }
            }
            Command::Evaluate {
                eval,
                rerank_k,
                with_context,
                detector,
                linker,
            } => {
                eval_flags(eval, &mut put);
                if let Some(k) = rerank_k {
                    put("eval.rerank_k", k.to_string());
                }
                if let Some(c) = with_context {
                    put("eval.with_context", c.to_string());
                }
                if let Some(d) = detector {
                    put("eval.detector", value_name(*d));
                }
                if let Some(l) = linker {
                    put("eval.linker", value_name(*l));
                }
            }
            Command::Detect {
                eval,
                detector,
                with_context,
            } => {
                eval_flags(eval, &mut put);
                if let Some(d) = detector {
                    put("eval.detector", value_name(*d));
                }
                if let Some(c) = with_context {
                    put("eval.with_context", c.to_string());
                }
            }
            _ => {}
        }
        out
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides())?;
    let run = Run::new(config)?;
    match &cli.command {
        Command::ToyWorld => commands::toy(&run),
        Command::BuildBenchmark { .. } => commands::build(&run),
        Command::Split { .. } => commands::split(&run),
        Command::TrainPreranker { resume } => commands::train_preranker(&run, *resume),
        Command::TrainReranker { resume } => commands::train_reranker(&run, *resume),
        Command::TrainOokg { resume } => commands::train_ookg(&run, *resume),
        Command::Train { stage, resume } => match stage {
            Stage::Preranker => commands::train_preranker(&run, *resume),
            Stage::Reranker => commands::train_reranker(&run, *resume),
            Stage::Ookg => commands::train_ookg(&run, *resume),
        },
        Command::Index { .. } => commands::index(&run),
        Command::Link { input, .. } => commands::link(&run, input.as_deref()),
        Command::Evaluate { .. } => commands::evaluate(&run),
        Command::Detect { .. } => commands::detect(&run, true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
