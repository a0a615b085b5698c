//! Command-line front end. Every command writes its outputs and a
//! `manifest.json` into one run directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{default_run_dir, BackendKind, Config, EmbedderKind, RunManifest};
use crate::demos::{load_demoset, save_demoset, DemoSet};
use crate::evaluation::{compare_reports, EvalMode, EvalReport};
use crate::ingest::{
    load_cord_split, load_dataset, load_normalized, load_predictions, write_normalized, write_predictions,
};
use crate::llm::{
    AnswerKey, Backend, HttpBackend, LlmClient, RecordingBackend, ResponseCache, ScriptedBackend, Transcript,
};
use crate::ordering::{cut_tree, order_document};
use crate::perturb::{load_lexicon, perturb_document};
use crate::pipeline::{
    default_eval_mode, default_style, end_to_end, evaluate_predictions, init_demoset, run_inference, DemoConfig,
    DocPrediction, InferenceOptions, RunConfig,
};
use crate::prompting::{CharEstimator, OrderPolicy};
use crate::similarity::{
    neighbor_pool, select_nearest_neighbors, CachedProvider, EmbeddingProvider, LocalProvider, NeighborMap,
    OpenAiEmbeddings, RemoteProvider,
};
use crate::types::{Dataset, Document, LabelSchema, Split};
use crate::updating::{update_hard_demos, UpdateOptions};

pub const NEIGHBORS_FORMAT: &str = "docicl-neighbors";

#[derive(Debug, Parser)]
#[command(name = "docicl", version, about = "In-context document information extraction")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; defaults to <runs-dir>/<timestamp>-<hash>.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Parent directory for generated run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub runs_dir: PathBuf,
    /// Extra gold documents for the oracle backend's answer key.
    #[arg(long, global = true)]
    pub answer_key: Vec<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override config-file and environment values.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Seed for demo sampling and perturbation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// http, oracle, transcript or layout.
    #[arg(long, global = true)]
    pub backend: Option<BackendKind>,
    /// Model name sent to the HTTP backend.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Base URL of an OpenAI-compatible endpoint.
    #[arg(long, global = true)]
    pub base_url: Option<String>,
    /// Maximum in-flight backend requests.
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    /// On-disk response cache directory.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Transcript file replayed by the transcript backend.
    #[arg(long, global = true)]
    pub transcript: Option<PathBuf>,
    /// Save every backend exchange to this transcript file.
    #[arg(long, global = true)]
    pub record: Option<PathBuf>,
    /// local, remote or openai.
    #[arg(long, global = true)]
    pub embedder: Option<EmbedderKind>,
    /// Base URL of the embedding service.
    #[arg(long, global = true)]
    pub embed_url: Option<String>,
    /// Prompt budget in tokens.
    #[arg(long, global = true)]
    pub budget: Option<usize>,
    /// M-H-L-F or M-L-H-F.
    #[arg(long, global = true)]
    pub order: Option<OrderPolicy>,
    /// Number of hard demonstrations.
    #[arg(long, global = true)]
    pub n_hard: Option<usize>,
    /// Number of layout demonstrations.
    #[arg(long, global = true)]
    pub n_layout: Option<usize>,
    /// Number of formatting demonstrations.
    #[arg(long, global = true)]
    pub n_formatting: Option<usize>,
    /// Updating iterations.
    #[arg(short = 'k', long, global = true)]
    pub iterations: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, c: &mut Config) {
        macro_rules! set {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = &self.$src {
                    $($dst)+ = v.clone().into();
                }
            };
        }
        set!(seed => c.seed);
        set!(backend => c.backend.kind);
        set!(model => c.backend.model);
        set!(base_url => c.backend.base_url);
        set!(concurrency => c.backend.concurrency);
        set!(cache_dir => c.backend.cache_dir);
        set!(transcript => c.backend.transcript);
        set!(record => c.backend.record);
        set!(embedder => c.embedding.provider);
        set!(embed_url => c.embedding.url);
        set!(budget => c.prompt.budget);
        set!(order => c.prompt.order);
        set!(n_hard => c.demos.n_hard);
        set!(n_layout => c.demos.n_layout);
        set!(n_formatting => c.demos.n_formatting);
        set!(iterations => c.update.k);
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a public dataset into the normalized document format.
    Ingest {
        /// FUNSD, CORD, SROIE or CUSTOM (a normalized file).
        #[arg(long)]
        dataset: Dataset,
        /// Dataset directory as distributed.
        #[arg(long)]
        root: PathBuf,
        /// Also load the CORD dev split (as training documents).
        #[arg(long)]
        with_dev: bool,
    },
    /// Put segments into XY-cut reading order.
    Order {
        #[arg(long)]
        input: PathBuf,
        /// Also write each document's cut tree to cut_trees.txt.
        #[arg(long)]
        dump_tree: bool,
    },
    /// Pick the nearest training document for each test document.
    Neighbors {
        /// Normalized file; only its training documents are used.
        #[arg(long)]
        train: PathBuf,
        /// Normalized file; only its test documents are used.
        #[arg(long)]
        test: PathBuf,
    },
    /// Build or update demonstration sets.
    #[command(subcommand)]
    Demos(DemosCommand),
    /// Label test documents with a demonstration set.
    Run {
        #[arg(long)]
        demoset: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Also write every prompt to prompts.jsonl.
        #[arg(long)]
        dump_prompts: bool,
    },
    /// Score predictions; with OOD inputs, also report the ID/OOD comparison.
    Eval {
        /// Predictions file.
        #[arg(long)]
        pred: PathBuf,
        /// Gold normalized file.
        #[arg(long)]
        gold: PathBuf,
        /// Predictions on the perturbed test set.
        #[arg(long, requires = "ood_gold")]
        ood_pred: Option<PathBuf>,
        /// Perturbed gold documents.
        #[arg(long, requires = "ood_pred")]
        ood_gold: Option<PathBuf>,
        /// segment or field; defaults by dataset.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<EvalMode>,
    },
    /// Write a perturbed (out-of-distribution) copy of documents.
    Perturb {
        #[arg(long)]
        input: PathBuf,
        /// Tab-separated substitution lexicon replacing the built-in one.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Order, select neighbors, build and update demonstrations, label and score.
    Pipeline {
        #[arg(long)]
        docs: PathBuf,
    },
    /// Re-execute a recorded command and compare its outputs.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum DemosCommand {
    /// Zero-shot score the neighbor pool and build the initial set.
    Init {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        neighbors: PathBuf,
    },
    /// Iteratively replace hard demonstrations.
    Update {
        #[arg(long)]
        demoset: PathBuf,
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        neighbors: PathBuf,
    },
}

fn parse_mode(s: &str) -> std::result::Result<EvalMode, String> {
    match s {
        "segment" => Ok(EvalMode::Segment),
        "sroie_field" | "field" => Ok(EvalMode::SroieField),
        _ => Err(format!("unknown mode {s:?} (segment, field)")),
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Order { .. } => "order",
            Command::Neighbors { .. } => "neighbors",
            Command::Demos(DemosCommand::Init { .. }) => "demos-init",
            Command::Demos(DemosCommand::Update { .. }) => "demos-update",
            Command::Run { .. } => "run",
            Command::Eval { .. } => "eval",
            Command::Perturb { .. } => "perturb",
            Command::Pipeline { .. } => "pipeline",
            Command::Rerun { .. } => "rerun",
        }
    }
}

/// Neighbor selections as written by `neighbors`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborsFile {
    pub format: String,
    pub version: u32,
    pub provider_id: String,
    pub neighbors: NeighborMap,
}

pub struct Outcome {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
}

/// Flags over `DOCICL_*` environment over config file over defaults.
pub fn resolve_config<I, K, V>(cli: &Cli, env: I) -> Result<Config>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_env(env)?;
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Parse `argv`, resolve configuration from the process environment and run.
pub fn main_with(argv: Vec<String>) -> Result<Outcome> {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => bail!("{}", e.to_string().trim_start_matches("error: ").trim_end()),
    };
    if let Command::Rerun { manifest } = &cli.command {
        return rerun(manifest, cli.out.clone(), &cli.runs_dir);
    }
    let cfg = resolve_config(&cli, std::env::vars())?;
    execute(&cli, &cfg, argv)
}

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: &'a Config,
    out: PathBuf,
    m: RunManifest,
    clock: Instant,
}

impl Ctx<'_> {
    fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.m.add_input(name, path).with_context(|| format!("reading {}", path.display()))
    }

    fn output(&mut self, name: &str, file: &str) -> PathBuf {
        let p = self.out.join(file);
        self.m.outputs.insert(name.into(), crate::config::FileDigest { path: p.clone(), sha256: String::new() });
        p
    }

    fn lap(&mut self, stage: &str) {
        self.m.timings_ms.insert(stage.into(), self.clock.elapsed().as_millis() as u64);
        self.clock = Instant::now();
    }

    fn finish(mut self) -> Result<Outcome> {
        let names: Vec<(String, PathBuf)> = self.m.outputs.iter().map(|(k, v)| (k.clone(), v.path.clone())).collect();
        for (name, path) in names {
            self.m.add_output(&name, &path).with_context(|| format!("hashing {}", path.display()))?;
        }
        self.m.save(&self.out.join("manifest.json"))?;
        Ok(Outcome { out_dir: self.out, manifest: self.m })
    }
}

/// Run `cli.command` with an already resolved configuration.
pub fn execute(cli: &Cli, cfg: &Config, argv: Vec<String>) -> Result<Outcome> {
    let out = cli.out.clone().unwrap_or_else(|| default_run_dir(&cli.runs_dir, &argv, cfg));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let m = RunManifest::new(cli.command.name(), argv, cfg);
    let mut ctx = Ctx { cli, cfg, out, m, clock: Instant::now() };
    match &cli.command {
        Command::Ingest { dataset, root, with_dev } => cmd_ingest(&mut ctx, *dataset, root, *with_dev)?,
        Command::Order { input, dump_tree } => cmd_order(&mut ctx, input, *dump_tree)?,
        Command::Neighbors { train, test } => cmd_neighbors(&mut ctx, train, test)?,
        Command::Demos(DemosCommand::Init { docs, neighbors }) => cmd_demos_init(&mut ctx, docs, neighbors)?,
        Command::Demos(DemosCommand::Update { demoset, docs, neighbors }) => {
            cmd_demos_update(&mut ctx, demoset, docs, neighbors)?
        }
        Command::Run { demoset, test, dump_prompts } => cmd_run(&mut ctx, demoset, test, *dump_prompts)?,
        Command::Eval { pred, gold, ood_pred, ood_gold, mode } => {
            cmd_eval(&mut ctx, pred, gold, ood_pred.as_deref().zip(ood_gold.as_deref()), *mode)?
        }
        Command::Perturb { input, lexicon } => cmd_perturb(&mut ctx, input, lexicon.as_deref())?,
        Command::Pipeline { docs } => cmd_pipeline(&mut ctx, docs)?,
        Command::Rerun { .. } => bail!("rerun cannot be nested"),
    }
    ctx.finish()
}

// ---------------------------------------------------------------------------
// Shared helpers

fn load_docs(ctx: &mut Ctx, name: &str, path: &Path) -> Result<Vec<Document>> {
    ctx.input(name, path)?;
    Ok(load_normalized(path)?)
}

fn ordered(docs: Vec<Document>, cfg: &Config) -> Vec<Document> {
    docs.into_iter().map(|d| if d.ordered { d } else { order_document(&d, &cfg.ordering) }).collect()
}

pub fn schema_for(docs: &[Document], cfg: &Config) -> Result<LabelSchema> {
    let dataset = docs.first().map(|d| d.dataset).ok_or_else(|| anyhow!("no documents"))?;
    if let Some(d) = docs.iter().find(|d| d.dataset != dataset) {
        bail!("mixed datasets: {} is {}, expected {}", d.doc_id, d.dataset, dataset);
    }
    if dataset != Dataset::Custom {
        return Ok(LabelSchema::for_dataset(dataset));
    }
    let labels: Vec<&str> = cfg.dataset.labels.iter().map(String::as_str).collect();
    if labels.is_empty() {
        bail!("custom datasets need dataset.labels in the config");
    }
    let schema =
        LabelSchema::natural(Dataset::Custom, &labels, &cfg.dataset.other_label, cfg.dataset.other_is_annotated);
    let problems = schema.check();
    if !problems.is_empty() {
        bail!("invalid label schema: {}", problems.join("; "));
    }
    Ok(schema)
}

struct Client {
    client: LlmClient,
    recorder: Option<Arc<RecordingBackend<Arc<dyn Backend>>>>,
}

fn build_client(ctx: &mut Ctx, key_docs: &[Document]) -> Result<Client> {
    let b = &ctx.cfg.backend;
    let base: Arc<dyn Backend> = match b.kind {
        BackendKind::Http => Arc::new(HttpBackend::new(b.http_config())?),
        BackendKind::Layout => Arc::new(ScriptedBackend::layout()),
        BackendKind::Transcript => {
            let p = b.transcript.as_ref().ok_or_else(|| anyhow!("backend.transcript is not set"))?;
            ctx.input("transcript", p)?;
            Arc::new(ScriptedBackend::transcript(Transcript::load(p)?))
        }
        BackendKind::Oracle => {
            let mut docs: Vec<Document> = key_docs.to_vec();
            for (i, p) in ctx.cli.answer_key.clone().iter().enumerate() {
                docs.extend(load_docs(ctx, &format!("answer_key_{i}"), p)?);
            }
            let other = docs.first().map_or("other".to_string(), |d| LabelSchema::for_dataset(d.dataset).other_label);
            Arc::new(ScriptedBackend::oracle(AnswerKey::from_documents(&docs, &other)))
        }
    };
    let cache = match &b.cache_dir {
        Some(d) => ResponseCache::on_disk(d)?,
        None => ResponseCache::in_memory(),
    };
    let (backend, recorder): (Arc<dyn Backend>, _) = if b.record.is_some() {
        let r = Arc::new(RecordingBackend::new(base));
        (r.clone(), Some(r))
    } else {
        (base, None)
    };
    let client = LlmClient::with_cache(backend, b.model.clone(), cache)
        .with_concurrency(b.concurrency)
        .with_max_output_tokens(b.max_output_tokens);
    ctx.m.backend_id = Some(client.backend_id());
    Ok(Client { client, recorder })
}

impl Client {
    fn close(self, ctx: &mut Ctx) -> Result<()> {
        let s = self.client.cache_stats();
        ctx.m.diagnostics.insert("cache_hits".into(), s.hits);
        ctx.m.diagnostics.insert("cache_misses".into(), s.misses);
        if let (Some(r), Some(path)) = (self.recorder, &ctx.cfg.backend.record) {
            r.transcript().save(path)?;
        }
        Ok(())
    }
}

fn with_cache<P: EmbeddingProvider + 'static>(p: P, dir: Option<&Path>) -> Result<Box<dyn EmbeddingProvider>> {
    Ok(match dir {
        Some(d) => Box::new(CachedProvider::new(p, d)?),
        None => Box::new(p),
    })
}

fn build_embedder(cfg: &Config) -> Result<Box<dyn EmbeddingProvider>> {
    let e = &cfg.embedding;
    let dir = e.cache_dir.as_deref();
    match e.provider {
        EmbedderKind::Local => with_cache(LocalProvider, dir),
        EmbedderKind::Remote => with_cache(RemoteProvider::new(e.url.clone())?, dir),
        EmbedderKind::Openai => {
            with_cache(OpenAiEmbeddings::new(&e.url, e.model.clone(), &cfg.backend.api_key_env)?, dir)
        }
    }
}

fn demo_config(cfg: &Config, dataset: Dataset) -> DemoConfig {
    DemoConfig {
        counts: cfg.demos.counts(),
        half_width: cfg.demos.half_width,
        format_span: cfg.demos.format_span,
        seed: cfg.seed,
        style: default_style(dataset),
        budget: cfg.prompt.budget,
        concurrency: cfg.backend.concurrency,
    }
}

fn inference_options(cfg: &Config) -> InferenceOptions {
    InferenceOptions { budget: cfg.prompt.budget, policy: cfg.prompt.order, concurrency: cfg.backend.concurrency }
}

fn update_options(cfg: &Config) -> UpdateOptions {
    UpdateOptions {
        capacity: cfg.update.capacity,
        grow: cfg.update.grow,
        half_width: cfg.demos.half_width,
        refresh_layout: cfg.update.refresh_layout,
        patience: cfg.update.patience,
        inference: InferenceOptions { policy: OrderPolicy::Mhlf, ..inference_options(cfg) },
    }
}

fn read_neighbors(ctx: &mut Ctx, path: &Path) -> Result<NeighborsFile> {
    ctx.input("neighbors", path)?;
    let f: NeighborsFile =
        serde_json::from_str(&fs::read_to_string(path)?).with_context(|| format!("parsing {}", path.display()))?;
    if f.format != NEIGHBORS_FORMAT {
        bail!("{}: not a neighbors file", path.display());
    }
    Ok(f)
}

fn neighbor_docs(docs: Vec<Document>, n: &NeighborsFile) -> Result<Vec<Document>> {
    let ids = neighbor_pool(&n.neighbors);
    let by_id: BTreeMap<String, Document> = docs.into_iter().map(|d| (d.doc_id.clone(), d)).collect();
    ids.iter()
        .map(|id| by_id.get(id).cloned().ok_or_else(|| anyhow!("neighbor {id} is not among the documents")))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn count_diagnostics(ctx: &mut Ctx, preds: &[DocPrediction]) {
    for d in preds.iter().flat_map(|p| &p.diagnostics) {
        *ctx.m.diagnostics.entry(d.kind().to_string()).or_default() += 1;
    }
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_ingest(ctx: &mut Ctx, dataset: Dataset, root: &Path, with_dev: bool) -> Result<()> {
    let mut docs = load_dataset(dataset, root)?;
    if with_dev && dataset == Dataset::Cord {
        docs.extend(load_cord_split(root, "dev")?);
    }
    ctx.lap("load");
    let n_train = docs.iter().filter(|d| d.split == Split::Train).count();
    ctx.m.diagnostics.insert("train_documents".into(), n_train as u64);
    ctx.m.diagnostics.insert("test_documents".into(), (docs.len() - n_train) as u64);
    let p = ctx.output("documents", "documents.jsonl");
    write_normalized(&docs, &p)?;
    ctx.lap("write");
    println!("{dataset}: {n_train} train, {} test documents -> {}", docs.len() - n_train, p.display());
    Ok(())
}

fn cmd_order(ctx: &mut Ctx, input: &Path, dump_tree: bool) -> Result<()> {
    let docs = load_docs(ctx, "documents", input)?;
    let out: Vec<Document> = docs.iter().map(|d| order_document(d, &ctx.cfg.ordering)).collect();
    ctx.lap("order");
    if dump_tree {
        let text: String = docs
            .iter()
            .map(|d| format!("# {}\n{}\n", d.doc_id, cut_tree(&d.segments, &ctx.cfg.ordering).dump()))
            .collect();
        fs::write(ctx.output("cut_trees", "cut_trees.txt"), text)?;
    }
    let p = ctx.output("documents", "ordered.jsonl");
    write_normalized(&out, &p)?;
    println!("ordered {} documents -> {}", out.len(), p.display());
    Ok(())
}

fn cmd_neighbors(ctx: &mut Ctx, train: &Path, test: &Path) -> Result<()> {
    let train: Vec<Document> =
        load_docs(ctx, "train", train)?.into_iter().filter(|d| d.split == Split::Train).collect();
    let test: Vec<Document> = load_docs(ctx, "test", test)?.into_iter().filter(|d| d.split == Split::Test).collect();
    let provider = build_embedder(ctx.cfg)?;
    let neighbors = select_nearest_neighbors(&train, &test, provider.as_ref(), ctx.cfg.backend.concurrency)?;
    ctx.lap("embed");
    let f = NeighborsFile { format: NEIGHBORS_FORMAT.into(), version: 1, provider_id: provider.id(), neighbors };
    let p = ctx.output("neighbors", "neighbors.json");
    write_json(&p, &f)?;
    println!("{} test documents, pool of {} -> {}", f.neighbors.len(), neighbor_pool(&f.neighbors).len(), p.display());
    Ok(())
}

fn cmd_demos_init(ctx: &mut Ctx, docs: &Path, neighbors: &Path) -> Result<()> {
    let docs = ordered(load_docs(ctx, "documents", docs)?, ctx.cfg);
    let n = read_neighbors(ctx, neighbors)?;
    let pool = neighbor_docs(docs, &n)?;
    let schema = schema_for(&pool, ctx.cfg)?;
    let client = build_client(ctx, &pool)?;
    let set = init_demoset(&pool, &schema, &client.client, &demo_config(ctx.cfg, schema.dataset), &CharEstimator)?;
    client.close(ctx)?;
    ctx.lap("init");
    ctx.m.demoset_hash = Some(set.hash());
    let p = ctx.output("demoset", "demoset.json");
    save_demoset(&p, &set)?;
    println!("demonstration set {} -> {}", &set.hash()[..12], p.display());
    Ok(())
}

fn cmd_demos_update(ctx: &mut Ctx, demoset: &Path, docs: &Path, neighbors: &Path) -> Result<()> {
    ctx.input("demoset", demoset)?;
    let set = load_demoset(demoset)?;
    let docs = ordered(load_docs(ctx, "documents", docs)?, ctx.cfg);
    let n = read_neighbors(ctx, neighbors)?;
    let pool = neighbor_docs(docs, &n)?;
    let schema = schema_for(&pool, ctx.cfg)?;
    let client = build_client(ctx, &pool)?;
    let result = update_hard_demos(
        &set,
        &pool,
        &client.client,
        ctx.cfg.update.k,
        &schema,
        &update_options(ctx.cfg),
        &CharEstimator,
    );
    let (set, trace) = match result {
        Ok(v) => v,
        Err(e) => {
            write_json(&ctx.out.join("trace.partial.json"), &e.trace)?;
            return Err(e.into());
        }
    };
    client.close(ctx)?;
    ctx.lap("update");
    ctx.m.demoset_hash = Some(set.hash());
    let p = ctx.output("demoset", "demoset.json");
    save_demoset(&p, &set)?;
    let t = ctx.output("trace", "trace.json");
    write_json(&t, &trace)?;
    let s = ctx.output("trace_summary", "trace.txt");
    fs::write(&s, trace.summary() + "\n")?;
    println!("{}", trace.summary());
    Ok(())
}

fn cmd_run(ctx: &mut Ctx, demoset: &Path, test: &Path, dump_prompts: bool) -> Result<()> {
    ctx.input("demoset", demoset)?;
    let set: DemoSet = load_demoset(demoset)?;
    ctx.m.demoset_hash = Some(set.hash());
    let test: Vec<Document> = ordered(load_docs(ctx, "test", test)?, ctx.cfg);
    let schema = schema_for(&test, ctx.cfg)?;
    let client = build_client(ctx, &test)?;
    let preds = run_inference(&test, &set, &schema, &client.client, &inference_options(ctx.cfg), &CharEstimator)?;
    client.close(ctx)?;
    ctx.lap("infer");
    count_diagnostics(ctx, &preds);
    let p = ctx.output("predictions", "predictions.jsonl");
    let docs: Vec<Document> = preds.iter().map(|x| x.doc.clone()).collect();
    write_predictions(&docs, &p)?;
    if dump_prompts {
        let pp = ctx.output("prompts", "prompts.jsonl");
        let mut f = std::io::BufWriter::new(fs::File::create(&pp)?);
        for x in &preds {
            for (chunk, text) in x.prompts.iter().enumerate() {
                writeln!(f, "{}", serde_json::json!({"doc_id": x.doc.doc_id, "chunk": chunk, "prompt": text}))?;
            }
        }
        f.flush()?;
    }
    println!("labeled {} documents -> {}", docs.len(), p.display());
    Ok(())
}

fn score(ctx: &mut Ctx, tag: &str, pred: &Path, gold: &Path, mode: Option<EvalMode>) -> Result<EvalReport> {
    ctx.input(&format!("{tag}_pred"), pred)?;
    let preds = load_predictions(pred)?;
    let gold = load_docs(ctx, &format!("{tag}_gold"), gold)?;
    let schema = schema_for(&gold, ctx.cfg)?;
    let mode = mode.unwrap_or_else(|| default_eval_mode(schema.dataset));
    let wrapped: Vec<DocPrediction> = preds
        .into_iter()
        .map(|doc| DocPrediction { doc, diagnostics: Vec::new(), chunks: 0, dropped: Vec::new(), prompts: Vec::new() })
        .collect();
    Ok(evaluate_predictions(&wrapped, &gold, &schema, mode)?)
}

fn cmd_eval(
    ctx: &mut Ctx,
    pred: &Path,
    gold: &Path,
    ood: Option<(&Path, &Path)>,
    mode: Option<EvalMode>,
) -> Result<()> {
    let id = score(ctx, "id", pred, gold, mode)?;
    let mut text = id.table();
    let p = ctx.output("report", "report.json");
    write_json(&p, &id)?;
    if let Some((op, og)) = ood {
        let ood = score(ctx, "ood", op, og, mode)?;
        let cmp = compare_reports(&id, &ood)?;
        write_json(&ctx.output("ood_report", "ood_report.json"), &ood)?;
        write_json(&ctx.output("comparison", "comparison.json"), &cmp)?;
        text = cmp.table("ID", "OOD");
    }
    ctx.lap("eval");
    fs::write(ctx.output("report_text", "report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_perturb(ctx: &mut Ctx, input: &Path, lexicon: Option<&Path>) -> Result<()> {
    let docs = load_docs(ctx, "documents", input)?;
    let lex = lexicon.map(Path::to_path_buf).or_else(|| ctx.cfg.perturb.lexicon.clone());
    let table = match &lex {
        Some(p) => {
            ctx.input("lexicon", p)?;
            load_lexicon(p)?
        }
        None => BTreeMap::new(),
    };
    let spec = ctx.cfg.perturb_spec_with_table(table);
    spec.validate()?;
    let (out, logs): (Vec<Document>, Vec<_>) = docs.iter().map(|d| perturb_document(d, &spec)).unzip();
    ctx.lap("perturb");
    let changed: usize = logs.iter().map(|l| l.entries.len()).sum();
    ctx.m.diagnostics.insert("perturbed_words".into(), changed as u64);
    let p = ctx.output("documents", "perturbed.jsonl");
    write_normalized(&out, &p)?;
    let lp = ctx.output("log", "perturb_log.jsonl");
    let mut f = std::io::BufWriter::new(fs::File::create(&lp)?);
    for l in &logs {
        writeln!(f, "{}", serde_json::to_string(l)?)?;
    }
    f.flush()?;
    println!("perturbed {changed} words in {} documents -> {}", out.len(), p.display());
    Ok(())
}

fn cmd_pipeline(ctx: &mut Ctx, docs: &Path) -> Result<()> {
    let docs = load_docs(ctx, "documents", docs)?;
    let schema = schema_for(&docs, ctx.cfg)?;
    let client = build_client(ctx, &docs)?;
    let provider = build_embedder(ctx.cfg)?;
    let mut rc = RunConfig::for_dataset(schema.dataset);
    rc.ordering = ctx.cfg.ordering;
    rc.demos = demo_config(ctx.cfg, schema.dataset);
    rc.inference = inference_options(ctx.cfg);
    rc.update = update_options(ctx.cfg);
    rc.update_iterations = ctx.cfg.update.k;
    let run = end_to_end(&docs, &schema, provider.as_ref(), &client.client, &rc, &CharEstimator)?;
    client.close(ctx)?;
    ctx.lap("pipeline");
    count_diagnostics(ctx, &run.predictions);
    ctx.m.demoset_hash = Some(run.demoset.hash());
    let nf = NeighborsFile {
        format: NEIGHBORS_FORMAT.into(),
        version: 1,
        provider_id: provider.id(),
        neighbors: run.neighbors,
    };
    write_json(&ctx.output("neighbors", "neighbors.json"), &nf)?;
    save_demoset(&ctx.output("demoset", "demoset.json"), &run.demoset)?;
    write_json(&ctx.output("trace", "trace.json"), &run.trace)?;
    let preds: Vec<Document> = run.predictions.iter().map(|p| p.doc.clone()).collect();
    write_predictions(&preds, &ctx.output("predictions", "predictions.jsonl"))?;
    write_json(&ctx.output("report", "report.json"), &run.report)?;
    let table = run.report.table();
    fs::write(ctx.output("report_text", "report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// Re-execute the command recorded in `manifest` with its recorded
/// configuration and fail if any output differs.
pub fn rerun(manifest: &Path, out: Option<PathBuf>, runs_dir: &Path) -> Result<Outcome> {
    let old = RunManifest::load(manifest)?;
    let mut cli = Cli::try_parse_from(&old.argv).map_err(|e| anyhow!("recorded argv: {e}"))?;
    cli.out = Some(out.unwrap_or_else(|| default_run_dir(runs_dir, &old.argv, &old.config)));
    for (name, d) in &old.inputs {
        let now =
            crate::config::file_digest(&d.path).with_context(|| format!("input {name} ({})", d.path.display()))?;
        if now.sha256 != d.sha256 {
            bail!("input {name} ({}) changed since the recorded run", d.path.display());
        }
    }
    let outcome = execute(&cli, &old.config, old.argv.clone())?;
    let mut diffs = Vec::new();
    for (name, d) in &old.outputs {
        match outcome.manifest.outputs.get(name) {
            Some(n) if n.sha256 == d.sha256 => {}
            _ => diffs.push(name.clone()),
        }
    }
    if !diffs.is_empty() {
        bail!("outputs differ from the recorded run: {}", diffs.join(", "));
    }
    println!("reproduced {} outputs -> {}", old.outputs.len(), outcome.out_dir.display());
    Ok(outcome)
}
