//! Subcommands of the `hyperrank` pipeline.
//!
//! Every command reads its inputs fully, computes, and only then writes its
//! outputs through a temporary file in the destination directory that is
//! renamed into place. A failed command leaves no partial output behind.

pub mod config;

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hyperrank_core::acronym::{build_table, AcronymTable, Wordlist};
use hyperrank_core::corpus::{
    load_labeled_terms, load_terms, split, AugmentedRecord, Dataset, LabelCatalog, LabelId, TermRow,
};
use hyperrank_core::embed::{
    BaselineConfig, BaselineEmbedder, EmbeddingBackend, IdfWeights, RemoteConfig, RemoteEmbedder,
};
use hyperrank_core::glossary::{
    augment, load_glossary, AugmentConfig, GlossaryIndex, HttpLookup, HttpLookupConfig, Lookup,
    LookupCache, MatchThresholds, RecordingLookup,
};
use hyperrank_core::jsonl;
use hyperrank_core::pairgen::{distribution_report, generate, load_pairs, undersample_zeros, PairGenConfig};
use hyperrank_core::rankeval::{
    classify_all, evaluate, load_predictions, train_softmax_classifier, ClassifierConfig,
    RankedPrediction, SimilarityRanker, SoftmaxClassifier,
};
use hyperrank_core::simtrain::{trace_csv, train, ProjectionHead, TrainConfig};
use hyperrank_core::taxonomy::{check_k, Taxonomy};

use config::{BackendKind, PipelineConfig};

pub const DEFAULT_SEED: u64 = 42;
const DEFAULT_BASELINE_DIM: usize = 32768;
const DEFAULT_REMOTE_DIM: usize = 768;

#[derive(Debug, Parser)]
#[command(name = "hyperrank", version, about = "Rank 17 financial hypernym labels for short terms")]
pub struct Cli {
    /// TOML configuration file; flags override its values
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed for every random choice (default 42)
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Never touch the network: lookups come from the cache only
    #[arg(long, global = true)]
    pub offline: bool,

    /// More log output (repeat for debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a labeled terms file into train and test parts
    Split(SplitArgs),
    /// Mine acronym definitions from a directory of text documents
    ExtractAcronyms(ExtractArgs),
    /// Add acronym expansions and glossary definitions as extra surfaces
    Augment(AugmentArgs),
    /// Build graded training pairs from the label hierarchy
    GenPairs(GenPairsArgs),
    /// Train a projection head on scored pairs
    TrainHead(TrainHeadArgs),
    /// Train a softmax classifier over embeddings
    TrainBaseline(TrainBaselineArgs),
    /// Write a ranked list of all 17 labels for every term
    Rank(RankArgs),
    /// Score predictions against gold labels (accuracy and mean rank)
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Labeled terms, JSON lines {"term", "label"}
    #[arg(long)]
    pub terms: PathBuf,
    #[arg(long)]
    pub train_out: PathBuf,
    #[arg(long)]
    pub test_out: PathBuf,
    /// Share of rows that go to the train part (default 0.8, an 80/20 split)
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Directory of plain-text documents
    #[arg(long)]
    pub corpus_dir: Option<PathBuf>,
    /// Acronym table output (JSON object short -> long)
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the kept definitions with their document ids (JSON lines)
    #[arg(long)]
    pub kept: Option<PathBuf>,
    /// Also write candidate and per-rule drop counts (JSON)
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// English word list, one word per line (default: bundled list)
    #[arg(long)]
    pub wordlist: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Terms, JSON lines {"term", "label"?}
    #[arg(long)]
    pub terms: PathBuf,
    /// Augmented records output (JSON lines)
    #[arg(long)]
    pub output: PathBuf,
    /// Acronym table from extract-acronyms
    #[arg(long)]
    pub acronyms: Option<PathBuf>,
    /// Glossary file, JSON lines {"term", "definition", "source"}; repeatable
    #[arg(long = "glossary")]
    pub glossaries: Vec<PathBuf>,
    /// Lookup cache: read for offline lookups, updated after live ones
    #[arg(long)]
    pub lookup_cache: Option<PathBuf>,
    /// Query the live lookup service for terms not in the cache
    #[arg(long)]
    pub dbpedia: bool,
    /// Maximum |s2|/|s1| for a lookup match (default 1.25; s1 must lie inside s2)
    #[arg(long)]
    pub max_ratio2: Option<f64>,
    /// Also write the per-source counts (JSON)
    #[arg(long)]
    pub counts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenPairsArgs {
    /// Augmented records or labeled terms (JSON lines)
    #[arg(long)]
    pub train: PathBuf,
    /// Scored pairs output (JSON lines)
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the score distribution (JSON)
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Hierarchy weight k, 0 < k < 0.5 (default 0.4): scores are 0, k, 2k or 1
    #[arg(long)]
    pub k: Option<f64>,
    /// Negative pairs sampled per record (default 10)
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Share of zero-score pairs kept after undersampling (default 0.30)
    #[arg(long)]
    pub zero_fraction: Option<f64>,
    /// Label hierarchy (JSON; default: bundled tree)
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Label definitions (JSON; default: bundled catalog)
    #[arg(long)]
    pub catalog: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Embedding backend (default baseline)
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Embedding service root for the remote backend (POST <url>/embed)
    #[arg(long)]
    pub embed_url: Option<String>,
    /// Baseline bucket count (power of two, default 32768) or remote width (default 768)
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainHeadArgs {
    /// Scored pairs from gen-pairs
    #[arg(long)]
    pub pairs: PathBuf,
    /// Projection head output (binary)
    #[arg(long)]
    pub output: PathBuf,
    /// Token weights fitted on the pair texts, needed again by rank (baseline backend)
    #[arg(long)]
    pub idf: Option<PathBuf>,
    /// Per-epoch losses (CSV)
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Training epochs (default 25)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Gradient descent step size (default 2e-5)
    #[arg(long)]
    pub lr: Option<f64>,
    /// Pairs per batch (default 20)
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Contrastive margin on cosine distance (default 0.5)
    #[arg(long)]
    pub margin: Option<f64>,
    /// Similarity scale of the ranking loss (default 20)
    #[arg(long)]
    pub scale: Option<f64>,
    /// Pairs scoring at least this count as positive for the contrastive loss (default 0.5)
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output width of the head (default: square up to 1024 inputs, else 256)
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct TrainBaselineArgs {
    /// Augmented records or labeled terms (JSON lines)
    #[arg(long)]
    pub train: PathBuf,
    /// Classifier output (JSON)
    #[arg(long)]
    pub output: PathBuf,
    /// Token weights fitted on the training surfaces (baseline backend)
    #[arg(long)]
    pub idf: Option<PathBuf>,
    /// Full-batch gradient descent epochs (default 200)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Step size (default 1.0)
    #[arg(long)]
    pub lr: Option<f64>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    /// Terms to rank, JSON lines {"term", "label"?}; one prediction per row
    #[arg(long)]
    pub terms: PathBuf,
    /// Augmented records supplying extra surfaces per term
    #[arg(long)]
    pub augmented: Option<PathBuf>,
    /// Predictions output (JSON lines)
    #[arg(long)]
    pub output: PathBuf,
    /// Projection head from train-head
    #[arg(long, conflicts_with = "classifier")]
    pub head: Option<PathBuf>,
    /// Classifier from train-baseline
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Token weights written by the training command (baseline backend)
    #[arg(long)]
    pub idf: Option<PathBuf>,
    /// Label definitions (JSON; default: bundled catalog)
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Gold labeled terms, in the order the predictions were made
    #[arg(long)]
    pub gold: PathBuf,
    /// Predictions from rank
    #[arg(long)]
    pub predictions: PathBuf,
    /// Also write the report (JSON)
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Marks an error as a configuration problem (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// A failed command. Configuration problems exit with 2, everything else with 1.
#[derive(Debug)]
pub struct Failure(pub anyhow::Error);

impl Failure {
    pub fn is_config(&self) -> bool {
        self.0.downcast_ref::<ConfigError>().is_some()
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_config() {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_config() {
            write!(f, "configuration error: {:#}", self.0)
        } else {
            write!(f, "{:#}", self.0)
        }
    }
}

type Outcome = anyhow::Result<()>;

fn config_error(msg: impl fmt::Display) -> anyhow::Error {
    ConfigError(msg.to_string()).into()
}

trait ConfigResult<T> {
    fn or_config(self) -> anyhow::Result<T>;
}

impl<T, E: fmt::Display> ConfigResult<T> for Result<T, E> {
    fn or_config(self) -> anyhow::Result<T> {
        self.map_err(config_error)
    }
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_error(format!("{what} not found: {}", path.display())))
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| anyhow!("writing {}: {}", path.display(), e.error))?;
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    write_atomic(path, jsonl::to_string(items).as_bytes())
}

/// Everything a command needs besides its own arguments.
struct Env {
    cfg: PipelineConfig,
    seed: u64,
    offline: bool,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    dispatch(cli).map_err(Failure)
}

fn dispatch(cli: Cli) -> Outcome {
    let cfg = match &cli.config {
        Some(path) => {
            require_file(path, "config file")?;
            PipelineConfig::load(path).or_config()?
        }
        None => PipelineConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let ctx = Env {
        cfg,
        seed,
        offline: cli.offline,
    };
    match cli.command {
        Command::Split(a) => cmd_split(&ctx, a),
        Command::ExtractAcronyms(a) => cmd_extract_acronyms(&ctx, a),
        Command::Augment(a) => cmd_augment(&ctx, a),
        Command::GenPairs(a) => cmd_gen_pairs(&ctx, a),
        Command::TrainHead(a) => cmd_train_head(&ctx, a),
        Command::TrainBaseline(a) => cmd_train_baseline(&ctx, a),
        Command::Rank(a) => cmd_rank(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

fn cmd_split(ctx: &Env, a: SplitArgs) -> Outcome {
    require_file(&a.terms, "terms file")?;
    let fraction = a.fraction.unwrap_or(ctx.cfg.split.fraction);
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(config_error(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let rows = load_labeled_terms(&a.terms)?;
    let (train, test) = split(&rows, fraction, ctx.seed).context("splitting terms")?;
    write_jsonl(&a.train_out, &train)?;
    write_jsonl(&a.test_out, &test)?;
    println!("train {} rows, test {} rows", train.len(), test.len());
    Ok(())
}

fn read_corpus(dir: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.is_file());
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
            let id = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            Ok((id, String::from_utf8_lossy(&bytes).into_owned()))
        })
        .collect()
}

fn cmd_extract_acronyms(ctx: &Env, a: ExtractArgs) -> Outcome {
    let dir = a
        .corpus_dir
        .or_else(|| ctx.cfg.paths.corpus_dir.clone())
        .ok_or_else(|| config_error("no corpus directory given (--corpus-dir or paths.corpus_dir)"))?;
    if !dir.is_dir() {
        return Err(config_error(format!("corpus directory not found: {}", dir.display())));
    }
    let wordlist = match a.wordlist.or_else(|| ctx.cfg.paths.wordlist.clone()) {
        Some(p) => {
            require_file(&p, "word list")?;
            Wordlist::load(&p).with_context(|| format!("reading {}", p.display()))?
        }
        None => Wordlist::bundled(),
    };
    let docs = read_corpus(&dir)?;
    let (table, kept, stats) = build_table(&docs, &wordlist);
    write_json(&a.output, &table)?;
    if let Some(p) = &a.kept {
        write_jsonl(p, &kept)?;
    }
    if let Some(p) = &a.stats {
        write_json(p, &stats)?;
    }
    println!("{}", serde_json::to_string_pretty(&stats)?);
    println!("{} documents, {} acronyms in table", docs.len(), table.len());
    Ok(())
}

fn load_acronyms(path: &Path) -> anyhow::Result<AcronymTable> {
    require_file(path, "acronym table")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_augment(ctx: &Env, a: AugmentArgs) -> Outcome {
    require_file(&a.terms, "terms file")?;
    let max_ratio2 = a.max_ratio2.unwrap_or(ctx.cfg.lookup.max_ratio2);
    if !(max_ratio2 >= 1.0) {
        return Err(config_error(format!("max ratio2 must be at least 1, got {max_ratio2}")));
    }
    let glossary_paths = if a.glossaries.is_empty() {
        ctx.cfg.paths.glossaries.clone()
    } else {
        a.glossaries
    };
    for p in &glossary_paths {
        require_file(p, "glossary")?;
    }
    let cache_path = a.lookup_cache.or_else(|| ctx.cfg.paths.lookup_cache.clone());
    let live = (a.dbpedia || ctx.cfg.lookup.enabled) && !ctx.offline;
    if ctx.offline && a.dbpedia {
        log::warn!("--offline set: live lookups disabled, using the cache only");
    }
    let cache = match &cache_path {
        Some(p) if p.is_file() => Some(LookupCache::load(p)?),
        Some(p) if !live => {
            return Err(config_error(format!("lookup cache not found: {}", p.display())));
        }
        _ => None,
    };

    let terms = load_terms(&a.terms)?;
    let table = match &a.acronyms {
        Some(p) => load_acronyms(p)?,
        None => AcronymTable::default(),
    };
    let mut entries = Vec::new();
    for p in &glossary_paths {
        entries.extend(load_glossary(p)?);
    }
    let index = GlossaryIndex::new(&entries);
    let aug_cfg = AugmentConfig {
        thresholds: MatchThresholds {
            min_ratio1: ctx.cfg.lookup.min_ratio1,
            max_ratio2,
        },
        max_in_flight: ctx.cfg.lookup.max_in_flight,
    };

    let (outcome, updated_cache) = if live {
        let http = HttpLookup::new(HttpLookupConfig {
            base_url: ctx.cfg.lookup.base_url.clone(),
            max_results: ctx.cfg.lookup.max_results,
            timeout: Duration::from_secs(ctx.cfg.lookup.timeout_secs),
        })
        ?;
        let recorder = RecordingLookup::new(http, cache.unwrap_or_default());
        let out = augment(&terms, &table, &index, Some(&recorder as &dyn Lookup), &aug_cfg);
        (out, Some(recorder.into_cache()))
    } else {
        let lookup = cache.as_ref().map(|c| c as &dyn Lookup);
        (augment(&terms, &table, &index, lookup, &aug_cfg), None)
    };
    for f in &outcome.failures {
        log::warn!("lookup failed for {:?}: {}", f.term, f.error);
    }

    write_jsonl(&a.output, &outcome.dataset.records)?;
    let counts: Vec<(String, usize)> = outcome
        .dataset
        .counts_by_source
        .iter()
        .map(|(s, n)| (s.to_string(), *n))
        .collect();
    if let Some(p) = &a.counts {
        let map: serde_json::Map<String, serde_json::Value> =
            counts.iter().map(|(s, n)| (s.clone(), (*n).into())).collect();
        write_json(p, &map)?;
    }
    if let (Some(p), Some(c)) = (&cache_path, updated_cache) {
        write_json(p, &c)?;
    }
    for (s, n) in &counts {
        println!("{s}\t{n}");
    }
    println!("total\t{}", outcome.dataset.len());
    if !outcome.failures.is_empty() {
        println!("lookup failures\t{}", outcome.failures.len());
    }
    Ok(())
}

/// Reads augmented records, or plain labeled terms as original records.
fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().find(|l| !l.trim().is_empty());
    let augmented = first
        .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .is_some_and(|v| v.get("surface").is_some());
    if augmented || first.is_none() {
        Ok(Dataset::load(path)?)
    } else {
        let rows = load_terms(path)?;
        Ok(Dataset::new(
            rows.iter().map(|r| AugmentedRecord::original(&r.term, r.label)).collect(),
        ))
    }
}

fn load_catalog(ctx: &Env, flag: Option<PathBuf>) -> anyhow::Result<LabelCatalog> {
    let catalog = match flag.or_else(|| ctx.cfg.paths.catalog.clone()) {
        Some(p) => {
            require_file(&p, "label catalog")?;
            LabelCatalog::load(&p).or_config()?
        }
        None => LabelCatalog::bundled(),
    };
    if let Err(issues) = catalog.validate() {
        let list: Vec<String> = issues.iter().map(|i| format!("{i:?}")).collect();
        return Err(config_error(format!("label catalog is invalid: {}", list.join(", "))));
    }
    Ok(catalog)
}

fn cmd_gen_pairs(ctx: &Env, a: GenPairsArgs) -> Outcome {
    let k = a.k.unwrap_or(ctx.cfg.pairs.k);
    check_k(k).or_config()?;
    let pg = PairGenConfig {
        k,
        negatives_per_positive: a.negatives.unwrap_or(ctx.cfg.pairs.negatives_per_positive),
        target_zero_fraction: a.zero_fraction.unwrap_or(ctx.cfg.pairs.target_zero_fraction),
        seed: ctx.seed,
    };
    pg.validate().or_config()?;
    require_file(&a.train, "training file")?;
    let labels: Vec<LabelId> = LabelId::all().collect();
    let taxonomy = match a.taxonomy.or_else(|| ctx.cfg.paths.taxonomy.clone()) {
        Some(p) => {
            require_file(&p, "taxonomy")?;
            Taxonomy::load(&p, &labels).or_config()?
        }
        None => Taxonomy::bundled(),
    };
    let catalog = load_catalog(ctx, a.catalog)?;

    let train = load_dataset(&a.train)?;
    let generated = generate(&train, &catalog, &taxonomy, &pg)?;
    let pairs = undersample_zeros(&generated.pairs, pg.target_zero_fraction, ctx.seed)
        ?;
    let report = distribution_report(&pairs);
    write_jsonl(&a.output, &pairs)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    println!(
        "{} pairs generated, {} after undersampling zero scores",
        generated.pairs.len(),
        pairs.len()
    );
    for b in &report {
        println!("score {}\t{}\t{:.4}", b.score, b.count, b.fraction);
    }
    Ok(())
}

/// Resolves the backend flags against the config. `idf` only matters for
/// the baseline backend.
fn build_backend(
    ctx: &Env,
    args: &BackendArgs,
    idf: IdfWeights,
) -> anyhow::Result<Box<dyn EmbeddingBackend>> {
    let e = &ctx.cfg.embed;
    match args.backend.unwrap_or(e.backend) {
        BackendKind::Baseline => {
            let cfg = BaselineConfig {
                dim: args.dim.or(e.dim).unwrap_or(DEFAULT_BASELINE_DIM),
                hash_seed: e.hash_seed,
            };
            Ok(Box::new(BaselineEmbedder::new(cfg, idf).or_config()?))
        }
        BackendKind::Remote => {
            if ctx.offline {
                return Err(config_error("the remote backend needs the network; drop --offline"));
            }
            let url = args
                .embed_url
                .clone()
                .or_else(|| e.url.clone())
                .ok_or_else(|| config_error("the remote backend needs --embed-url or embed.url"))?;
            let cfg = RemoteConfig {
                base_url: url,
                dim: args.dim.or(e.dim).unwrap_or(DEFAULT_REMOTE_DIM),
                batch_size: e.batch_size,
                max_in_flight: e.max_in_flight,
                max_retries: e.max_retries,
                initial_backoff_ms: e.initial_backoff_ms,
                timeout_ms: e.timeout_ms,
            };
            Ok(Box::new(RemoteEmbedder::new(cfg).or_config()?))
        }
    }
}

fn is_baseline(ctx: &Env, args: &BackendArgs) -> bool {
    args.backend.unwrap_or(ctx.cfg.embed.backend) == BackendKind::Baseline
}

fn unique_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen = std::collections::HashSet::new();
    texts.into_iter().filter(|t| seen.insert(*t)).collect()
}

fn cmd_train_head(ctx: &Env, a: TrainHeadArgs) -> Outcome {
    let t = &ctx.cfg.train;
    let cfg = TrainConfig {
        learning_rate: a.lr.unwrap_or(t.learning_rate),
        epochs: a.epochs.unwrap_or(t.epochs),
        batch_size: a.batch_size.unwrap_or(t.batch_size),
        margin: a.margin.unwrap_or(t.margin),
        mnrl_scale: a.scale.unwrap_or(t.mnrl_scale),
        binary_threshold: a.threshold.unwrap_or(t.binary_threshold),
        head_dim: a.head_dim.or(t.head_dim),
        seed: ctx.seed,
        ..*t
    };
    cfg.validate().or_config()?;
    require_file(&a.pairs, "pairs file")?;
    let baseline = is_baseline(ctx, &a.backend);
    if baseline && a.idf.is_none() {
        return Err(config_error("the baseline backend needs --idf to record its token weights"));
    }

    let pairs = load_pairs(&a.pairs)?;
    let idf = if baseline {
        IdfWeights::fit(&unique_texts(pairs.iter().flat_map(|p| [p.anchor.as_str(), p.other.as_str()])))
    } else {
        IdfWeights::default()
    };
    let backend = build_backend(ctx, &a.backend, idf.clone())?;
    let trained = train(&pairs, backend.as_ref(), &cfg).context("training the projection head")?;

    let mut bytes = Vec::new();
    trained.head.write_to(&mut bytes)?;
    write_atomic(&a.output, &bytes)?;
    if let (true, Some(p)) = (baseline, &a.idf) {
        write_json(p, &idf)?;
    }
    if let Some(p) = &a.trace {
        write_atomic(p, trace_csv(&trained.trace).as_bytes())?;
    }
    if let (Some(first), Some(last)) = (trained.trace.first(), trained.trace.last()) {
        println!(
            "trained {} epochs on {} pairs; loss {:.6} -> {:.6}",
            trained.trace.len(),
            pairs.len(),
            first.total,
            last.total
        );
    }
    Ok(())
}

fn cmd_train_baseline(ctx: &Env, a: TrainBaselineArgs) -> Outcome {
    let c = &ctx.cfg.classifier;
    let cfg = ClassifierConfig {
        learning_rate: a.lr.unwrap_or(c.learning_rate),
        epochs: a.epochs.unwrap_or(c.epochs),
        seed: ctx.seed,
        ..*c
    };
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(config_error("learning rate must be positive"));
    }
    require_file(&a.train, "training file")?;
    let baseline = is_baseline(ctx, &a.backend);
    if baseline && a.idf.is_none() {
        return Err(config_error("the baseline backend needs --idf to record its token weights"));
    }
    let data = load_dataset(&a.train)?;
    let idf = if baseline {
        IdfWeights::fit(&unique_texts(data.records.iter().map(|r| r.surface.as_str())))
    } else {
        IdfWeights::default()
    };
    let backend = build_backend(ctx, &a.backend, idf.clone())?;
    let model = train_softmax_classifier(&data, backend.as_ref(), &cfg).context("training the classifier")?;
    write_json(&a.output, &model)?;
    if let (true, Some(p)) = (baseline, &a.idf) {
        write_json(p, &idf)?;
    }
    println!("trained classifier on {} records", data.len());
    Ok(())
}

fn cmd_rank(ctx: &Env, a: RankArgs) -> Outcome {
    require_file(&a.terms, "terms file")?;
    for (p, what) in [
        (&a.augmented, "augmented records"),
        (&a.head, "projection head"),
        (&a.classifier, "classifier"),
        (&a.idf, "token weights"),
    ] {
        if let Some(p) = p {
            require_file(p, what)?;
        }
    }
    let catalog = load_catalog(ctx, a.catalog.clone())?;
    let idf = match &a.idf {
        Some(p) => IdfWeights::load(p)?,
        None => {
            if is_baseline(ctx, &a.backend) {
                log::warn!("no --idf given: every token weighs 1.0");
            }
            IdfWeights::default()
        }
    };
    let backend = build_backend(ctx, &a.backend, idf)?;

    let rows: Vec<TermRow> = load_terms(&a.terms)?;
    let extra = match &a.augmented {
        Some(p) => Dataset::load(p)?,
        None => Dataset::default(),
    };
    let groups: HashMap<&str, Vec<&str>> = extra.occurrences().into_iter().collect();
    let queries: Vec<(&str, Vec<&str>)> = rows
        .iter()
        .map(|r| {
            let occ = groups
                .get(r.term.as_str())
                .cloned()
                .unwrap_or_else(|| vec![r.term.as_str()]);
            (r.term.as_str(), occ)
        })
        .collect();

    let preds: Vec<RankedPrediction> = if let Some(p) = &a.classifier {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let model: SoftmaxClassifier =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        classify_all(&queries, &model, backend.as_ref()).context("ranking terms")?
    } else {
        let head = match &a.head {
            Some(p) => Some(ProjectionHead::load(p)?),
            None => None,
        };
        let ranker = SimilarityRanker::new(&catalog, backend.as_ref(), head.as_ref()).context("embedding labels")?;
        ranker.rank_all(&queries).context("ranking terms")?
    };
    write_jsonl(&a.output, &preds)?;
    println!("ranked {} terms", preds.len());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Outcome {
    require_file(&a.gold, "gold file")?;
    require_file(&a.predictions, "predictions file")?;
    let gold: Vec<(String, LabelId)> = load_labeled_terms(&a.gold)?
        .into_iter()
        .map(|t| (t.term, t.label))
        .collect();
    let preds = load_predictions(&a.predictions)?;
    let report = evaluate(&gold, &preds)?;
    if let Some(p) = &a.output {
        write_json(p, &report)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_lists_defaults() {
        let mut cmd = Cli::command();
        let pairs = cmd.find_subcommand_mut("gen-pairs").unwrap().render_long_help().to_string();
        assert!(pairs.contains("default 0.4"), "{pairs}");
        assert!(pairs.contains("default 10"));
        assert!(pairs.contains("default 0.30"));
        let train = cmd.find_subcommand_mut("train-head").unwrap().render_long_help().to_string();
        assert!(train.contains("default 0.5"));
        let split = cmd.find_subcommand_mut("split").unwrap().render_long_help().to_string();
        assert!(split.contains("80/20"));
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Failure(config_error("x")).exit_code(), 2);
        assert_eq!(Failure(anyhow!("y")).exit_code(), 1);
        assert_eq!(Failure(config_error("x").context("outer")).exit_code(), 2);
    }
}
