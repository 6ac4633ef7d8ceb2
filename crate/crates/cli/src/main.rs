use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use reversener::embedder::ProviderKind;
use reversener::llm::BackendKind;
use reversener::pipeline::{self, CorpusFormat, PipelineError, RunConfig, LIBRARY_FILE, PREDICTIONS_FILE};
use reversener::recognizer::ScMode;

#[derive(Parser)]
#[command(name = "reversener", version, about = "Zero-shot NER with a self-built example library")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster the corpus and generate the example library.
    BuildLibrary(Common),
    /// Recognize entities in the corpus with an existing library.
    Recognize {
        #[command(flatten)]
        common: Common,
        /// Library file; defaults to <out>/library.json.
        #[arg(long)]
        library: Option<PathBuf>,
    },
    /// Score predictions against the corpus gold labels.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Predictions file; defaults to <out>/predictions.jsonl.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Library file for AHS/EDR; defaults to <out>/library.json when present.
        #[arg(long)]
        library: Option<PathBuf>,
    },
    /// build-library, recognize and evaluate in one run.
    Pipeline(Common),
    /// Per-sentence libraries: every sentence is its own task set.
    Isolated(Common),
    /// Grid over clusters × per-cluster with seeded repetitions.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        sweep_clusters: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        sweep_per_cluster: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScFlag {
    None,
    Entity,
    Response,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatFlag {
    Conll,
    Jsonl,
}

/// Flags shared by every command. Each one overrides the matching field of
/// the `--config` document.
#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatFlag>,
    /// `conll`, a label list such as `PER,LOC`, or a JSON definitions file.
    #[arg(long)]
    types: Option<String>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    per_cluster: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_enum)]
    sc: Option<ScFlag>,
    #[arg(long)]
    attempts: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Chat-completions URL; selects the remote backend.
    #[arg(long)]
    llm_endpoint: Option<String>,
    /// Replay tape. Alone it selects the replay backend; with
    /// --llm-endpoint it is read first and appended to.
    #[arg(long)]
    llm_replay: Option<PathBuf>,
    /// `hashing`, `remote=<url>` or `replay=<cache file>`.
    #[arg(long)]
    embed_provider: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep every attempt and its scores in the predictions file.
    #[arg(long)]
    audit: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.corpus {
            c.corpus = Some(v.clone());
        }
        if let Some(v) = self.format {
            c.format = match v {
                FormatFlag::Conll => CorpusFormat::Conll,
                FormatFlag::Jsonl => CorpusFormat::Jsonl,
            };
        }
        if let Some(v) = &self.types {
            c.types = v.clone();
        }
        if let Some(v) = self.clusters {
            c.clusters = v;
        }
        if let Some(v) = self.per_cluster {
            c.per_cluster = v;
        }
        if let Some(v) = self.top_k {
            c.top_k = v;
        }
        if let Some(v) = self.sc {
            c.sc = match v {
                ScFlag::None => ScMode::Single,
                ScFlag::Entity => ScMode::EntitySc,
                ScFlag::Response => ScMode::ResponseSc,
            };
        }
        if let Some(v) = self.attempts {
            c.attempts = v;
        }
        if let Some(v) = self.temperature {
            c.temperature = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.llm_replay {
            c.llm.replay_path = Some(v.clone());
            c.llm.kind = BackendKind::Replay;
        }
        if let Some(v) = &self.llm_endpoint {
            c.llm.endpoint = Some(v.clone());
            c.llm.kind = BackendKind::RemoteHttp;
        }
        if let Some(v) = &self.embed_provider {
            let (kind, arg) = v.split_once('=').unwrap_or((v.as_str(), ""));
            c.embedding.kind = kind.parse::<ProviderKind>().map_err(anyhow::Error::msg)?;
            match c.embedding.kind {
                ProviderKind::RemoteHttp if !arg.is_empty() => c.embedding.endpoint = Some(arg.into()),
                ProviderKind::ReplayFile if !arg.is_empty() => c.embedding.cache_path = Some(arg.into()),
                _ => {}
            }
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        c.audit |= self.audit;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildLibrary(common) => {
            let m = pipeline::cmd_build_library(&common.resolve()?)?;
            println!(
                "library: {} examples, {} completions",
                m.library_size, m.invocations.total
            );
        }
        Command::Recognize { common, library } => {
            let cfg = common.resolve()?;
            let library = library.unwrap_or_else(|| cfg.out.join(LIBRARY_FILE));
            let m = pipeline::cmd_recognize(&cfg, &library)?;
            println!(
                "recognized {} sentences, {} completions, {} flagged",
                m.sentences,
                m.invocations.total,
                m.flagged.len()
            );
        }
        Command::Evaluate {
            common,
            predictions,
            library,
        } => {
            let cfg = common.resolve()?;
            let predictions = predictions.unwrap_or_else(|| cfg.out.join(PREDICTIONS_FILE));
            let library = library.or_else(|| {
                let p = cfg.out.join(LIBRARY_FILE);
                p.exists().then_some(p)
            });
            let report = pipeline::cmd_evaluate(&cfg, &predictions, library.as_deref())?;
            print!("{}", report.text());
        }
        Command::Pipeline(common) => {
            let s = pipeline::cmd_pipeline(&common.resolve()?)?;
            if let Some(r) = &s.report {
                print!("{}", r.text());
            }
            println!(
                "completions: vocabulary {}, expansion {}, recognition {}, total {} ({} over the network)",
                s.invocations.vocabulary,
                s.invocations.expansion,
                s.invocations.recognition,
                s.invocations.total,
                s.network_calls
            );
        }
        Command::Isolated(common) => {
            let m = pipeline::cmd_isolated(&common.resolve()?)?;
            if let Some(r) = &m.report {
                print!("{}", r.text());
            }
            println!(
                "completions: vocabulary {}, expansion {}, recognition {}, total {}",
                m.invocations.vocabulary,
                m.invocations.expansion,
                m.invocations.recognition,
                m.invocations.total
            );
        }
        Command::Sweep {
            common,
            sweep_clusters,
            sweep_per_cluster,
            repeats,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(v) = sweep_clusters {
                cfg.sweep_clusters = v;
            }
            if let Some(v) = sweep_per_cluster {
                cfg.sweep_per_cluster = v;
            }
            if let Some(v) = repeats {
                cfg.sweep_repeats = v;
            }
            let cells = pipeline::cmd_sweep(&cfg)?;
            print!("{}", pipeline::sweep_csv(&cells));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<PipelineError>() {
                Some(p) => eprintln!("error in {} stage: {}", p.stage, p.source),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}
