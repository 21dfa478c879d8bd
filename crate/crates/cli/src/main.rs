use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use dalk::bench::{
    default_years, evolution_csv, evolution_curve, keyword_filter, leave_one_out, llm_judge, loo_csv,
    query_length_stats, sweep_csv, sweep_k, EvalReport, KeywordList, DEFAULT_SWEEP_KS,
};
use dalk::config::{EmbedderKind, PartialConfig, ProviderMode, RunConfig};
use dalk::construct::{construct_kg, BuildContext, ConstructError, ConstructOptions, ExtractionMethod};
use dalk::corpus::{attach_years, parse_pubtator_with, parse_year_map, ParseMode, YearPolicy};
use dalk::embed::{Embedder, EmbeddingCache, HashedBagEmbedder, HttpEmbedder};
use dalk::graph::KnowledgeGraph;
use dalk::llm::{ChatCompletionProvider, Gateway, LlmProvider, ReplayStore, ScriptedMock};
use dalk::prompt::Prompting;
use dalk::qa::{answer_detailed, read_samples, write_jsonl, AnswerMode, PredictionStatus, QASample, QaContext};
use dalk::rerank::RerankMode;

/// Knowledge-graph augmented question answering over biomedical literature.
#[derive(Parser)]
#[command(name = "dalk", version)]
struct Cli {
    #[command(flatten)]
    settings: Settings,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring the config file keys one to one.
#[derive(Args)]
struct Settings {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where model calls go [default: live].
    #[arg(long, global = true, value_enum)]
    provider: Option<ProviderArg>,
    /// OpenAI-compatible API root for chat and embeddings.
    #[arg(long, global = true)]
    base_url: Option<String>,
    /// Chat model name.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Sampling temperature.
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Reply length limit per call.
    #[arg(long, global = true)]
    max_tokens: Option<u32>,
    /// Maximum model calls in flight.
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    /// Entity-linking embedder [default: hashed].
    #[arg(long, global = true, value_enum)]
    embedder: Option<EmbedderArg>,
    /// Embedding model for the http embedder.
    #[arg(long, global = true)]
    embed_model: Option<String>,
    /// Triple extraction method [default: generative].
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    /// Maximum hops between seeds on an evidence path.
    #[arg(long, global = true)]
    hop_bound: Option<usize>,
    /// Minimum question similarity for a neighbor to be expanded, in [0, 1].
    #[arg(long, global = true)]
    relevance_threshold: Option<f64>,
    /// Cap on sampled triples per evidence subgraph.
    #[arg(long, global = true)]
    max_triples_per_subgraph: Option<usize>,
    /// Triples kept per subgraph after reranking.
    #[arg(long, global = true)]
    retrieve_k: Option<usize>,
    /// Rerank the two subgraphs separately or in one call.
    #[arg(long, global = true, value_enum)]
    rerank_mode: Option<RerankArg>,
    /// Full pipeline, pipeline without reranking, or no evidence.
    #[arg(long, global = true, value_enum)]
    answer_mode: Option<AnswerArg>,
    /// Extract question entities from the options as well as the stem.
    #[arg(long, global = true)]
    entities_from_options: Option<bool>,
    /// Drop question entities whose best node scores below this.
    #[arg(long, global = true)]
    min_link_similarity: Option<f64>,
    /// Replay store (JSON lines) used by the replay and record providers.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Scripted mock rules (JSON) for the mock provider, or the backing
    /// provider when recording.
    #[arg(long, global = true)]
    mock: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long, global = true)]
    templates: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ProviderArg {
    Live,
    Replay,
    Record,
    Mock,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum EmbedderArg {
    Hashed,
    Http,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    Generative,
    Pairwise,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RerankArg {
    Separate,
    Joint,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AnswerArg {
    Dalk,
    NoSelfRetrieval,
    Baseline,
}

impl Settings {
    fn partial(&self) -> PartialConfig {
        PartialConfig {
            provider: self.provider.map(|p| match p {
                ProviderArg::Live => ProviderMode::Live,
                ProviderArg::Replay => ProviderMode::Replay,
                ProviderArg::Record => ProviderMode::Record,
                ProviderArg::Mock => ProviderMode::Mock,
            }),
            base_url: self.base_url.clone(),
            model: self.model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            concurrency: self.concurrency,
            embedder: self.embedder.map(|e| match e {
                EmbedderArg::Hashed => EmbedderKind::Hashed,
                EmbedderArg::Http => EmbedderKind::Http,
            }),
            embed_model: self.embed_model.clone(),
            method: self.method.map(|m| match m {
                MethodArg::Generative => ExtractionMethod::Generative,
                MethodArg::Pairwise => ExtractionMethod::PairWise,
            }),
            hop_bound: self.hop_bound,
            relevance_threshold: self.relevance_threshold,
            max_triples_per_subgraph: self.max_triples_per_subgraph,
            retrieve_k: self.retrieve_k,
            rerank_mode: self.rerank_mode.map(|r| match r {
                RerankArg::Separate => RerankMode::Separate,
                RerankArg::Joint => RerankMode::Joint,
            }),
            answer_mode: self.answer_mode.map(|a| match a {
                AnswerArg::Dalk => AnswerMode::Dalk,
                AnswerArg::NoSelfRetrieval => AnswerMode::NoSelfRetrieval,
                AnswerArg::Baseline => AnswerMode::Baseline,
            }),
            entities_from_options: self.entities_from_options,
            min_link_similarity: self.min_link_similarity,
            cache: self.cache.clone(),
            mock: self.mock.clone(),
            templates: self.templates.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Extract triples from an annotated corpus into a graph TSV.
    BuildKg {
        /// PubTator file.
        #[arg(long)]
        corpus: PathBuf,
        /// TSV of `doc_id<TAB>year`.
        #[arg(long)]
        years: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop malformed annotations instead of failing.
        #[arg(long)]
        lenient: bool,
        /// Year for documents missing from the year map; without it they fail the run.
        #[arg(long)]
        default_year: Option<i32>,
        /// Give the model the title as well as the abstract.
        #[arg(long)]
        include_title: bool,
    },
    /// Answer the questions in a JSON-lines file, printing one prediction per line.
    Answer {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        question_file: PathBuf,
        /// Write the sampled subgraphs and evidence sentences here as JSON.
        #[arg(long)]
        dump_subgraphs: Option<PathBuf>,
    },
    /// Accuracy report over a QA dataset.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dump_subgraphs: Option<PathBuf>,
    },
    /// Accuracy for each retrieve_k.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_KS)]
        ks: Vec<usize>,
    },
    /// Accuracy with the samples matching each keyword left out.
    Loo {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        keywords: Option<Vec<String>>,
    },
    /// Accuracy against the graph as it stood at the end of each year.
    Evolve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        years: Option<Vec<i32>>,
    },
    /// Keep the questions that match a keyword and that the model judges relevant.
    FilterQa {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        keywords: Option<Vec<String>>,
        /// Keyword filter only.
        #[arg(long)]
        no_judge: bool,
    },
    /// Graph statistics and per-dataset question lengths.
    Stats {
        #[arg(long)]
        kg: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    kg: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Failure classes with their exit codes.
enum Failure {
    Input(anyhow::Error),
    Provider(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Provider(_) => 3,
            Failure::Internal(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Input(e) | Failure::Provider(e) | Failure::Internal(e) => e,
        }
    }
}

type Outcome = Result<(), Failure>;

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Input(e.into())
}

fn internal<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Internal(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

/// Everything built from the resolved configuration.
struct Runtime {
    config: RunConfig,
    gateway: Gateway,
    prompting: Prompting,
    embedder: Box<dyn Embedder>,
    cache: EmbeddingCache,
}

impl Runtime {
    fn new(settings: &Settings) -> Result<Self, Failure> {
        let config = RunConfig::layered(settings.partial(), settings.config.as_deref()).map_err(input)?;
        let mock = || -> Result<Arc<dyn LlmProvider>, Failure> {
            let path = config.mock.as_ref().expect("validated");
            let m = ScriptedMock::load(path).with_context(|| format!("loading mock rules {}", path.display()));
            Ok(Arc::new(m.map_err(input)?))
        };
        let live = || -> Arc<dyn LlmProvider> { Arc::new(ChatCompletionProvider::new(&config.base_url)) };
        let store = || -> Result<Arc<ReplayStore>, Failure> {
            let path = config.cache.as_ref().expect("validated");
            Ok(Arc::new(ReplayStore::open(path).map_err(input)?))
        };
        let gateway = match config.provider {
            ProviderMode::Live => Gateway::direct(live()),
            ProviderMode::Mock => Gateway::direct(mock()?),
            ProviderMode::Replay => Gateway::replay(store()?),
            ProviderMode::Record => {
                let backing = if config.mock.is_some() { mock()? } else { live() };
                Gateway::record(backing, store()?)
            }
        }
        .with_concurrency(config.concurrency);
        let mut prompting = Prompting::with_settings(config.generation.clone());
        if let Some(dir) = &config.templates {
            prompting = prompting.load_overrides(dir).map_err(input)?;
        }
        let embedder: Box<dyn Embedder> = match config.embedder {
            EmbedderKind::Hashed => Box::new(HashedBagEmbedder::default()),
            EmbedderKind::Http => Box::new(HttpEmbedder::new(&config.base_url, &config.embed_model)),
        };
        Ok(Runtime {
            config,
            gateway,
            prompting,
            embedder,
            cache: EmbeddingCache::new(),
        })
    }

    fn qa(&self) -> QaContext<'_> {
        let mut ctx = QaContext::new(&self.gateway, &self.prompting, self.embedder.as_ref(), &self.cache);
        ctx.sampler = self.config.sampler;
        ctx.retrieve_k = self.config.retrieve_k;
        ctx.rerank_mode = self.config.rerank_mode;
        ctx.min_link_similarity = self.config.min_link_similarity;
        ctx.entities_from_options = self.config.entities_from_options;
        ctx
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(input)
}

fn load_graph(path: &Path) -> Result<KnowledgeGraph, Failure> {
    KnowledgeGraph::from_tsv(&read(path)?)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(input)
}

fn load_samples(path: &Path) -> Result<Vec<QASample>, Failure> {
    read_samples(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(input)
}

fn out_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(input)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(internal)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(internal)?;
    text.push('\n');
    write(path, &text)
}

fn keywords(list: &Option<Vec<String>>) -> Result<KeywordList, Failure> {
    match list {
        None => Ok(KeywordList::default()),
        Some(v) => KeywordList::new(v.clone()).ok_or_else(|| input(anyhow!("keyword list is empty"))),
    }
}

/// Artifacts are written first; failed samples then turn into exit code 3.
fn check_failures(reports: &[&EvalReport]) -> Outcome {
    let failed: usize = reports.iter().map(|r| r.failures).sum();
    if failed > 0 {
        return Err(Failure::Provider(anyhow!(
            "{failed} sample evaluations failed; see the report"
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let rt = Runtime::new(&cli.settings)?;
    match cli.command {
        Command::BuildKg {
            corpus,
            years,
            out,
            lenient,
            default_year,
            include_title,
        } => {
            let mode = if lenient { ParseMode::Lenient } else { ParseMode::Strict };
            let parsed = parse_pubtator_with(&read(&corpus)?, mode)
                .with_context(|| format!("parsing {}", corpus.display()))
                .map_err(input)?;
            let mut docs = parsed.documents;
            let year_map = parse_year_map(&read(&years)?)
                .with_context(|| format!("parsing {}", years.display()))
                .map_err(input)?;
            let policy = default_year.map_or(YearPolicy::Strict, |y| YearPolicy::Lenient { default_year: y });
            let defaulted = attach_years(&mut docs, &year_map, policy).map_err(input)?;
            if !defaulted.is_empty() {
                log::warn!("{} documents given the default year", defaulted.len());
            }
            let mut ctx = BuildContext::new(&rt.gateway, &rt.prompting);
            ctx.options = ConstructOptions { include_title };
            let (graph, report) = construct_kg(&docs, rt.config.method, &ctx).map_err(|e| match e {
                ConstructError::Gateway(_) => Failure::Provider(e.into()),
                _ => input(e),
            })?;
            out_dir(&out)?;
            write(&out.join("kg.tsv"), &graph.to_tsv())?;
            write_json(&out.join("stats.json"), &graph.stats())?;
            write_json(&out.join("build_report.json"), &report)?;
            println!("{} triples, snapshot {}", graph.triples().len(), graph.snapshot_id());
            Ok(())
        }
        Command::Answer {
            kg,
            question_file,
            dump_subgraphs,
        } => {
            let graph = load_graph(&kg)?;
            let samples = load_samples(&question_file)?;
            let ctx = rt.qa();
            let mut dumps = Vec::new();
            let mut failed = 0;
            for s in &samples {
                let (pred, dump) = answer_detailed(s, &graph, &ctx, rt.config.answer_mode);
                failed += usize::from(matches!(pred.status, PredictionStatus::Failed(_)));
                println!("{}", serde_json::to_string(&pred).map_err(internal)?);
                dumps.extend(dump);
            }
            if let Some(path) = dump_subgraphs {
                write_json(&path, &dumps)?;
            }
            if failed > 0 {
                return Err(Failure::Provider(anyhow!("{failed} questions could not be answered")));
            }
            Ok(())
        }
        Command::Eval { run, dump_subgraphs } => {
            let graph = load_graph(&run.kg)?;
            let samples = load_samples(&run.dataset)?;
            out_dir(&run.out)?;
            let ctx = rt.qa();
            let mode = rt.config.answer_mode;
            let results = dalk::bench::par_map(&samples, rt.gateway.concurrency(), |s| {
                answer_detailed(s, &graph, &ctx, mode)
            });
            let (predictions, dumps): (Vec<_>, Vec<_>) = results.into_iter().unzip();
            let report = EvalReport::from_predictions(&predictions, &graph, &ctx, mode);
            write_json(&run.out.join("report.json"), &report)?;
            write_jsonl(&run.out.join("predictions.jsonl"), &predictions).map_err(internal)?;
            if let Some(path) = dump_subgraphs {
                write_json(&path, &dumps.into_iter().flatten().collect::<Vec<_>>())?;
            }
            println!(
                "n={} macro={} micro={}",
                report.n,
                report.macro_avg.map_or("-".into(), |a| format!("{a:.4}")),
                report.micro_avg.map_or("-".into(), |a| format!("{a:.4}"))
            );
            check_failures(&[&report])
        }
        Command::Sweep { run, ks } => {
            if ks.is_empty() || ks.contains(&0) {
                return Err(input(anyhow!("ks must be positive")));
            }
            let graph = load_graph(&run.kg)?;
            let samples = load_samples(&run.dataset)?;
            out_dir(&run.out)?;
            let rows = sweep_k(&samples, &graph, &rt.qa(), &ks);
            write(&run.out.join("sweep.csv"), &sweep_csv(&rows))?;
            write_json(&run.out.join("sweep.json"), &rows)?;
            check_failures(&rows.iter().map(|(_, r)| r).collect::<Vec<_>>())
        }
        Command::Loo { run, keywords: kw } => {
            let kw = keywords(&kw)?;
            let graph = load_graph(&run.kg)?;
            let samples = load_samples(&run.dataset)?;
            out_dir(&run.out)?;
            let rows = leave_one_out(&samples, &graph, &rt.qa(), rt.config.answer_mode, &kw);
            write(&run.out.join("loo.csv"), &loo_csv(&rows))?;
            write_json(&run.out.join("loo.json"), &rows)?;
            check_failures(&[&rows[0].report])
        }
        Command::Evolve { run, years } => {
            let years = years.unwrap_or_else(default_years);
            let graph = load_graph(&run.kg)?;
            let samples = load_samples(&run.dataset)?;
            out_dir(&run.out)?;
            let rows = evolution_curve(&samples, &graph, &rt.qa(), rt.config.answer_mode, &years);
            write(&run.out.join("evolution.csv"), &evolution_csv(&rows))?;
            write_json(&run.out.join("evolution.json"), &rows)?;
            check_failures(&rows.iter().map(|r| &r.report).collect::<Vec<_>>())
        }
        Command::FilterQa {
            dataset,
            out,
            keywords: kw,
            no_judge,
        } => {
            let kw = keywords(&kw)?;
            let samples = load_samples(&dataset)?;
            out_dir(&out)?;
            let (candidates, rejected) = keyword_filter(&samples, &kw);
            let (accepted, outcomes) = if no_judge {
                (candidates.clone(), Vec::new())
            } else {
                llm_judge(&candidates, &rt.gateway, &rt.prompting)
            };
            write_jsonl(&out.join("filtered.jsonl"), &accepted).map_err(internal)?;
            write_jsonl(&out.join("judge.jsonl"), &outcomes).map_err(internal)?;
            let count = |v: &[QASample]| {
                let mut m = std::collections::BTreeMap::new();
                for s in v {
                    *m.entry(s.dataset.to_string()).or_insert(0usize) += 1;
                }
                m
            };
            let summary = serde_json::json!({
                "input": samples.len(),
                "keyword_rejected": rejected.len(),
                "keyword_candidates": candidates.len(),
                "accepted": accepted.len(),
                "accepted_per_dataset": count(&accepted),
                "judge_failures": outcomes.iter().filter(|o| matches!(o.verdict, dalk::bench::JudgeVerdict::Failed(_))).count(),
            });
            write_json(&out.join("filter_report.json"), &summary)?;
            println!("{} of {} samples kept", accepted.len(), samples.len());
            Ok(())
        }
        Command::Stats { kg, dataset } => {
            if kg.is_none() && dataset.is_none() {
                return Err(input(anyhow!("give --kg, --dataset or both")));
            }
            let mut out = serde_json::Map::new();
            if let Some(kg) = kg {
                let g = load_graph(&kg)?;
                out.insert("graph".into(), serde_json::to_value(g.stats()).map_err(internal)?);
                out.insert("snapshot_id".into(), g.snapshot_id().into());
            }
            if let Some(ds) = dataset {
                let lengths: std::collections::BTreeMap<String, f64> = query_length_stats(&load_samples(&ds)?)
                    .into_iter()
                    .map(|(d, l)| (d.to_string(), l))
                    .collect();
                out.insert(
                    "avg_question_words".into(),
                    serde_json::to_value(lengths).map_err(internal)?,
                );
            }
            println!("{}", serde_json::to_string_pretty(&out).map_err(internal)?);
            Ok(())
        }
    }
}
