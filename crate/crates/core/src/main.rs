use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;

use bimem::construction::{construct_memory, ConstructionConfig, Conversation};
use bimem::embedding::{EmbeddingProvider, HashEmbedder, RemoteEmbedder};
use bimem::eval::{self, EvalConfig, EvalReport, DEFAULT_CONTEXT_BUDGET};
use bimem::graph::DEFAULT_TAU;
use bimem::model::{MemoryBank, QuestionCategory, UnitRef};
use bimem::operators::{ChatBackend, HttpChat, MockBackend, PromptedBackend};
use bimem::retrieval::{preset_k, LevelQuotas, RetrievalConfig, Retriever, Strategy};
use bimem::store::{self, StoreError};

#[derive(Parser)]
#[command(
    name = "bimem",
    version,
    about = "Hierarchical conversational memory: build, query, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a memory bank from a conversation file.
    Build {
        conversation: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Conversation id to build when the file holds several (default: the first).
        #[arg(long)]
        id: Option<String>,
        #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
        backend: BackendKind,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dimension of the offline hash embedder.
        #[arg(long, default_value_t = 384, value_parser = clap::value_parser!(u64).range(8..))]
        dim: u64,
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
        max_in_flight: u64,
    },
    /// Retrieve memory for a question and answer it.
    Query {
        bank: PathBuf,
        question: String,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        /// Use the k preset of a question category.
        #[arg(long, value_enum, conflicts_with = "k")]
        preset: Option<CategoryArg>,
        #[arg(long, value_enum, default_value_t = StrategyArg::Bimem)]
        strategy: StrategyArg,
        #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
        backend: BackendKind,
        /// Print the result as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Answer and score a QA file against a bank or a conversation file.
    Eval {
        /// A bank file, or a conversation file to build banks from.
        input: PathBuf,
        qa: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = StrategyArg::Bimem)]
        strategy: StrategyArg,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
        backend: BackendKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
        max_in_flight: u64,
        #[arg(long, default_value_t = DEFAULT_CONTEXT_BUDGET)]
        context_budget: usize,
        /// Hash embedder dimension when building from a conversation file.
        #[arg(long, default_value_t = 384, value_parser = clap::value_parser!(u64).range(8..))]
        dim: u64,
    },
    /// Print structure statistics for a bank.
    Inspect {
        bank: PathBuf,
        #[arg(long)]
        scenes: bool,
        #[arg(long)]
        persona: bool,
        #[arg(long)]
        graph: bool,
    },
}

#[derive(Args)]
struct RetrievalArgs {
    /// Initial search depth (default: per-category preset in eval, 30 in query).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k: Option<u64>,
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, default_value_t = 0.5, value_parser = unit_interval)]
    alpha: f64,
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Bimem,
    Hierarchical,
    Topdown,
    Bottomup,
    Scene2fact,
    Fact2scene,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Bimem => Strategy::Bimem,
            StrategyArg::Hierarchical => Strategy::Hierarchical,
            StrategyArg::Topdown => Strategy::Topdown,
            StrategyArg::Bottomup => Strategy::Bottomup,
            StrategyArg::Scene2fact => Strategy::Scene2fact,
            StrategyArg::Fact2scene => Strategy::Fact2scene,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CategoryArg {
    SingleHop,
    MultiHop,
    Temporal,
    OpenDomain,
}

impl From<CategoryArg> for QuestionCategory {
    fn from(c: CategoryArg) -> Self {
        match c {
            CategoryArg::SingleHop => QuestionCategory::SingleHop,
            CategoryArg::MultiHop => QuestionCategory::MultiHop,
            CategoryArg::Temporal => QuestionCategory::Temporal,
            CategoryArg::OpenDomain => QuestionCategory::OpenDomain,
        }
    }
}

enum Failure {
    Usage(String),
    Data(String),
    Backend(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Backend(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Backend(m) => m,
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure::Data(e.to_string())
    }
}

fn data(e: impl std::fmt::Display) -> Failure {
    Failure::Data(e.to_string())
}

fn backend(e: impl std::fmt::Display) -> Failure {
    Failure::Backend(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Build {
            conversation,
            output,
            id,
            backend: kind,
            tau,
            seed,
            dim,
            max_in_flight,
        } => {
            let dataset = eval::load_dataset(&conversation).map_err(data)?;
            let conv = pick_conversation(&dataset.conversations, id.as_deref())?;
            let cfg = ConstructionConfig {
                tau,
                seed,
                max_in_flight: max_in_flight as usize,
                ..Default::default()
            };
            let (embedder, chat) = build_stack(kind, dim as usize, max_in_flight as usize)?;
            let bank = build_bank(conv, &cfg, embedder.as_ref(), chat.as_ref())?;
            store::save_bank(&bank, &output)?;
            println!(
                "wrote {} ({} facts, {} scenes, {} edges)",
                output.display(),
                bank.facts.len(),
                bank.scenes.len(),
                bank.edge_count()
            );
            Ok(())
        }
        Command::Query {
            bank,
            question,
            retrieval,
            preset,
            strategy,
            backend: kind,
            json,
        } => {
            let bank = store::load_bank(&bank)?;
            let mut cfg = retrieval_config(&retrieval);
            if let Some(p) = preset {
                cfg.k = preset_k(p.into());
            }
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let embedder = bank_embedder(&bank, 1)?;
            let chat = chat_backend(kind, 1)?;
            let eval_cfg = EvalConfig {
                strategy: strategy.into(),
                retrieval: cfg.clone(),
                category_presets: false,
                ..Default::default()
            };
            let retriever = Retriever::new(&bank);
            let (set, answer) = eval::answer_question(&retriever, &question, &cfg, &eval_cfg, embedder.as_ref(), chat.as_ref())
                .map_err(backend)?;
            if json {
                let out = serde_json::json!({ "retrieved": set, "answer": answer });
                println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
            } else {
                println!(
                    "retrieved {} units (k={}, m={}, alpha={})",
                    set.len(),
                    cfg.k,
                    cfg.m,
                    cfg.alpha
                );
                for u in &set.units {
                    let src = u.source.map(|s| format!(" <- {s}")).unwrap_or_default();
                    println!("  {:<16} {:>7.4}  {:?}{}", u.unit.to_string(), u.score, u.origin, src);
                }
                println!("answer: {answer}");
            }
            Ok(())
        }
        Command::Eval {
            input,
            qa,
            output,
            strategy,
            retrieval,
            backend: kind,
            seed,
            tau,
            max_in_flight,
            context_budget,
            dim,
        } => {
            let inflight = max_in_flight as usize;
            let qa_set = eval::load_dataset(&qa).map_err(data)?;
            let chat = chat_backend(kind, inflight)?;
            let start = Instant::now();
            let (banks, embedder) = load_or_build(&input, kind, tau, seed, dim as usize, inflight, chat.as_ref())?;
            let construction_ms = start.elapsed().as_secs_f64() * 1000.0;
            let cfg = EvalConfig {
                strategy: strategy.into(),
                quotas: LevelQuotas::default(),
                retrieval: retrieval_config(&retrieval),
                category_presets: retrieval.k.is_none(),
                context_budget,
                max_in_flight: inflight,
            };
            cfg.retrieval.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let items = eval::run_eval(&banks, &qa_set.qa, &cfg, embedder.as_ref(), chat.as_ref());
            for it in items.iter().filter(|i| i.error.is_some()) {
                warn!("{:?}: {}", it.question, it.error.as_deref().unwrap_or_default());
            }
            let report = EvalReport::from_items(cfg.strategy, items, qa_set.skipped_adversarial, construction_ms);
            let text = serde_json::to_string_pretty(&report).expect("serializable");
            std::fs::write(&output, text + "\n").map_err(|e| Failure::Data(format!("cannot write {}: {e}", output.display())))?;
            print!("{}", report.table());
            Ok(())
        }
        Command::Inspect {
            bank,
            scenes,
            persona,
            graph,
        } => {
            let bank = store::load_bank(&bank)?;
            inspect(&bank, scenes, persona, graph);
            Ok(())
        }
    }
}

fn retrieval_config(a: &RetrievalArgs) -> RetrievalConfig {
    let mut cfg = RetrievalConfig {
        m: a.m,
        alpha: a.alpha,
        ..Default::default()
    };
    if let Some(k) = a.k {
        cfg.k = k as usize;
    }
    cfg
}

fn pick_conversation<'a>(convs: &'a [Conversation], id: Option<&str>) -> Result<&'a Conversation, Failure> {
    match id {
        Some(id) => convs
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Failure::Data(format!("no conversation with id {id:?}"))),
        None => convs
            .first()
            .ok_or_else(|| Failure::Data("file holds no conversations".into())),
    }
}

fn chat_backend(kind: BackendKind, max_in_flight: usize) -> Result<Box<dyn ChatBackend>, Failure> {
    Ok(match kind {
        BackendKind::Mock => Box::new(MockBackend),
        BackendKind::Remote => Box::new(PromptedBackend::new(HttpChat::from_env(max_in_flight).map_err(backend)?)),
    })
}

type Stack = (Box<dyn EmbeddingProvider>, Box<dyn ChatBackend>);

fn build_stack(kind: BackendKind, dim: usize, max_in_flight: usize) -> Result<Stack, Failure> {
    let embedder: Box<dyn EmbeddingProvider> = match kind {
        BackendKind::Mock => Box::new(HashEmbedder::new(dim)),
        BackendKind::Remote => Box::new(RemoteEmbedder::from_env(max_in_flight).map_err(backend)?),
    };
    Ok((embedder, chat_backend(kind, max_in_flight)?))
}

/// The embedder a bank was built with: hash embedders are rebuilt locally, anything else goes remote.
fn bank_embedder(bank: &MemoryBank, max_in_flight: usize) -> Result<Box<dyn EmbeddingProvider>, Failure> {
    if let Some(h) = HashEmbedder::from_name(&bank.provenance.embedder) {
        return Ok(Box::new(h));
    }
    let remote = RemoteEmbedder::from_env(max_in_flight).map_err(backend)?;
    if remote.dimension() != bank.dimension {
        return Err(Failure::Data(format!(
            "bank has dimension {} but the embedding endpoint returns {}",
            bank.dimension,
            remote.dimension()
        )));
    }
    Ok(Box::new(remote))
}

fn build_bank(
    conv: &Conversation,
    cfg: &ConstructionConfig,
    embedder: &dyn EmbeddingProvider,
    chat: &dyn ChatBackend,
) -> Result<MemoryBank, Failure> {
    let built = construct_memory(conv, cfg, embedder, chat).map_err(|e| if e.is_backend() { backend(&e) } else { data(&e) })?;
    for w in &built.warnings {
        warn!("{}: {w}", conv.id);
    }
    Ok(built.bank)
}

type Banks = (BTreeMap<String, MemoryBank>, Box<dyn EmbeddingProvider>);

fn load_or_build(
    input: &Path,
    kind: BackendKind,
    tau: f64,
    seed: u64,
    dim: usize,
    inflight: usize,
    chat: &dyn ChatBackend,
) -> Result<Banks, Failure> {
    let text = std::fs::read_to_string(input).map_err(|e| Failure::Data(format!("cannot read {}: {e}", input.display())))?;
    let is_bank = serde_json::from_str::<serde_json::Value>(&text)
        .map(|v| v.get("format_version").is_some())
        .unwrap_or(false);
    if is_bank {
        let bank = store::from_json(&text)?;
        let embedder = bank_embedder(&bank, inflight)?;
        return Ok(([(bank.provenance.conversation_id.clone(), bank)].into(), embedder));
    }
    let dataset = eval::parse_dataset(&text).map_err(data)?;
    let embedder: Box<dyn EmbeddingProvider> = match kind {
        BackendKind::Mock => Box::new(HashEmbedder::new(dim)),
        BackendKind::Remote => Box::new(RemoteEmbedder::from_env(inflight).map_err(backend)?),
    };
    let cfg = ConstructionConfig {
        tau,
        seed,
        max_in_flight: inflight,
        ..Default::default()
    };
    let mut banks = BTreeMap::new();
    for conv in &dataset.conversations {
        banks.insert(conv.id.clone(), build_bank(conv, &cfg, embedder.as_ref(), chat)?);
    }
    Ok((banks, embedder))
}

fn inspect(bank: &MemoryBank, scenes: bool, persona: bool, graph: bool) {
    let p = &bank.provenance;
    println!("conversation: {}", p.conversation_id);
    println!(
        "embedder: {} (dimension {})   backend: {}",
        p.embedder, bank.dimension, p.backend
    );
    println!("tau: {}   lpa iterations: {}   seed: {}", p.tau, p.lpa_max_iters, p.seed);
    println!(
        "facts: {}   scenes: {} ({} calibrated)   edges: {}   persona dimensions: {}",
        bank.facts.len(),
        bank.scenes.len(),
        bank.scenes.values().filter(|s| s.delta.is_some()).count(),
        bank.edge_count(),
        bank.persona.dimensions.len()
    );
    if scenes {
        println!();
        for s in bank.scenes.values() {
            let members: Vec<String> = s.members.iter().map(u64::to_string).collect();
            println!("scene {} [{}]", s.id, members.join(", "));
            println!("  summary: {}", s.summary);
            if let Some(d) = &s.delta {
                println!("  delta: {d}");
            }
        }
    }
    if persona {
        println!();
        for (d, e) in &bank.persona.dimensions {
            println!("{}: {}", UnitRef::Persona(*d), e.text);
        }
    }
    if graph {
        println!();
        let degrees: Vec<usize> = bank.facts.values().map(|f| f.edges.len()).collect();
        let isolated = degrees.iter().filter(|&&d| d == 0).count();
        let max = degrees.iter().copied().max().unwrap_or(0);
        let mean = if degrees.is_empty() {
            0.0
        } else {
            degrees.iter().sum::<usize>() as f64 / degrees.len() as f64
        };
        println!("degree: mean {mean:.2}, max {max}, isolated {isolated}");
        for f in bank.facts.values() {
            let n: Vec<String> = f.edges.iter().map(u64::to_string).collect();
            println!("  {} -> [{}]", f.id, n.join(", "));
        }
    }
}
