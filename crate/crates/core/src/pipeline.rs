//! In-context inference over documents and the end-to-end run.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demos::{
    build_formatting_demos, build_initial_hard, build_label_mapping, build_layout_demo, pick_windows, ranked_windows,
    sample_layout_regions, zero_shot_score, AnswerStyle, DemoCounts, DemoError, DemoKind, DemoSet, SegmentScore,
    DEFAULT_FORMAT_SPAN, DEFAULT_HALF_WIDTH,
};
use crate::evaluation::{evaluate, EvalError, EvalMode, EvalReport};
use crate::extraction::{
    align_predictions, align_sroie_answer, parse_labeled_segments, parse_sroie_grouped, Diagnostic,
};
use crate::llm::{LlmClient, LlmError};
use crate::ordering::{order_document, OrderingParams};
use crate::prompting::{assemble_prompt, chunk_query, OrderPolicy, PromptError, TokenEstimator, DEFAULT_BUDGET};
use crate::similarity::{neighbor_pool, select_nearest_neighbors, EmbeddingProvider, NeighborMap, SimilarityError};
use crate::types::{Dataset, Document, LabelSchema, Split};
use crate::updating::{update_hard_demos, UpdateError, UpdateOptions, UpdateTrace};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("document {0} is not in reading order")]
    NotOrdered(String),
    #[error("document {doc_id}: {source}")]
    Prompt { doc_id: String, source: PromptError },
    #[error("document {doc_id}, chunk {chunk}: {source}")]
    Backend { doc_id: String, chunk: usize, source: LlmError },
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Update(#[from] Box<UpdateError>),
    #[error("no {0} documents")]
    NoDocuments(&'static str),
    #[error("thread pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Receipts are answered in the grouped style, everything else per segment.
pub fn default_style(dataset: Dataset) -> AnswerStyle {
    match dataset {
        Dataset::Sroie => AnswerStyle::Grouped,
        _ => AnswerStyle::Labeled,
    }
}

pub fn default_eval_mode(dataset: Dataset) -> EvalMode {
    match dataset {
        Dataset::Sroie => EvalMode::SroieField,
        _ => EvalMode::Segment,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub budget: usize,
    pub policy: OrderPolicy,
    pub concurrency: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { budget: DEFAULT_BUDGET, policy: OrderPolicy::Mhlf, concurrency: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocPrediction {
    /// The query document with `predicted_label` set on every segment.
    pub doc: Document,
    pub diagnostics: Vec<Diagnostic>,
    pub chunks: usize,
    pub dropped: Vec<(DemoKind, usize)>,
    /// Prompt text per chunk.
    #[serde(skip)]
    pub prompts: Vec<String>,
}

impl DocPrediction {
    pub fn unmatched(&self) -> Vec<String> {
        self.diagnostics
            .iter()
            .filter_map(|d| match d {
                Diagnostic::Unmatched { segment_id } => Some(segment_id.clone()),
                _ => None,
            })
            .collect()
    }
}

fn run_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Tokens reserved for demonstrations when chunking a query. Falls back to
/// the mapping block alone when the full set would leave under a quarter
/// of the budget for the query.
pub fn demo_overhead(set: &DemoSet, budget: usize, est: &dyn TokenEstimator) -> usize {
    let all: String = set.all().map(|d| format!("{}\n", d.rendered)).collect();
    let full = est.estimate(&all);
    if budget.saturating_sub(full) >= budget / 4 {
        full
    } else {
        est.estimate(&format!("{}\n", set.mapping.rendered))
    }
}

pub fn infer_document(
    doc: &Document,
    set: &DemoSet,
    schema: &LabelSchema,
    client: &LlmClient,
    opts: &InferenceOptions,
    est: &dyn TokenEstimator,
) -> Result<DocPrediction> {
    if !doc.ordered {
        return Err(PipelineError::NotOrdered(doc.doc_id.clone()));
    }
    let prompt_err = |source| PipelineError::Prompt { doc_id: doc.doc_id.clone(), source };
    let overhead = demo_overhead(set, opts.budget, est);
    let chunks = chunk_query(&doc.segments, opts.budget, overhead, est, set.style).map_err(prompt_err)?;
    let mut out = doc.without_predictions();
    out.segments.clear();
    let mut diagnostics = Vec::new();
    let mut dropped = Vec::new();
    let mut prompts = Vec::with_capacity(chunks.len());
    for (ci, chunk) in chunks.iter().enumerate() {
        let bundle = assemble_prompt(set, chunk, opts.policy, opts.budget, est).map_err(prompt_err)?;
        dropped.extend(bundle.dropped.iter().copied());
        prompts.push(bundle.text.clone());
        let req = client.request(bundle.text).tagged(format!("infer:{}:{ci}", doc.doc_id));
        let resp = client.complete(&req).map_err(|source| PipelineError::Backend {
            doc_id: doc.doc_id.clone(),
            chunk: ci,
            source,
        })?;
        let (aligned, diags) = match set.style {
            AnswerStyle::Labeled => {
                let parsed = parse_labeled_segments(&resp.text);
                diagnostics.extend(parsed.diagnostics);
                align_predictions(&parsed.entities, chunk, schema)
            }
            AnswerStyle::Grouped => {
                let (answer, parse_diags) = parse_sroie_grouped(&resp.text);
                diagnostics.extend(parse_diags);
                align_sroie_answer(&answer, chunk, schema)
            }
        };
        diagnostics.extend(diags);
        out.segments.extend(aligned);
    }
    Ok(DocPrediction { doc: out, diagnostics, chunks: chunks.len(), dropped, prompts })
}

/// Infer every document, `opts.concurrency` at a time; output order follows input.
pub fn run_inference(
    docs: &[Document],
    set: &DemoSet,
    schema: &LabelSchema,
    client: &LlmClient,
    opts: &InferenceOptions,
    est: &dyn TokenEstimator,
) -> Result<Vec<DocPrediction>> {
    run_pool(opts.concurrency, || docs.par_iter().map(|d| infer_document(d, set, schema, client, opts, est)).collect())?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub counts: DemoCounts,
    pub half_width: usize,
    pub format_span: usize,
    pub seed: u64,
    pub style: AnswerStyle,
    pub budget: usize,
    pub concurrency: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            counts: DemoCounts::default(),
            half_width: DEFAULT_HALF_WIDTH,
            format_span: DEFAULT_FORMAT_SPAN,
            seed: 0,
            style: AnswerStyle::Labeled,
            budget: DEFAULT_BUDGET,
            concurrency: 4,
        }
    }
}

/// Zero-shot score every pool document and build the initial demonstration
/// set. A count of zero leaves that kind empty.
pub fn init_demoset(
    pool: &[Document],
    schema: &LabelSchema,
    client: &LlmClient,
    cfg: &DemoConfig,
    est: &dyn TokenEstimator,
) -> Result<DemoSet> {
    if pool.iter().all(|d| d.segments.is_empty()) {
        return Err(DemoError::EmptyPool.into());
    }
    let per_doc: Vec<Vec<SegmentScore>> = run_pool(cfg.concurrency, || {
        pool.par_iter()
            .map(|d| zero_shot_score(d, schema, client, cfg.budget, est))
            .collect::<std::result::Result<_, _>>()
    })??;
    let scores: Vec<SegmentScore> = per_doc.into_iter().flatten().collect();
    let other = schema.other_label.as_str();
    let (hard, windows) = if cfg.counts.n_hard > 0 {
        build_initial_hard(pool, &scores, cfg.counts.n_hard, cfg.half_width, cfg.style, other)?
    } else {
        let ranked = ranked_windows(pool, &scores, cfg.half_width);
        (Vec::new(), pick_windows(&ranked, cfg.counts.n_layout.max(1), &[]))
    };
    let mut layout = Vec::new();
    if cfg.counts.n_layout > 0 {
        let regions = sample_layout_regions(pool, &windows, cfg.counts.n_layout, cfg.seed);
        if regions.is_empty() {
            return Err(DemoError::RegionTooSmall(pool.iter().map(|d| d.segments.len()).max().unwrap_or(0)).into());
        }
        for (doc_id, start, end) in regions {
            let doc = pool.iter().find(|d| d.doc_id == doc_id).unwrap();
            layout.push(build_layout_demo(&doc_id, &doc.segments[start..end], client, other)?);
        }
    }
    let formatting = if cfg.counts.n_formatting > 0 {
        build_formatting_demos(pool, cfg.seed, cfg.counts.n_formatting, cfg.format_span, cfg.style, other)?
    } else {
        Vec::new()
    };
    Ok(DemoSet {
        mapping: build_label_mapping(schema),
        hard,
        layout,
        formatting,
        counts: cfg.counts,
        style: cfg.style,
        seed: cfg.seed,
    })
}

/// Gold documents paired with their predictions, in prediction order.
pub fn evaluate_predictions(
    preds: &[DocPrediction],
    gold: &[Document],
    schema: &LabelSchema,
    mode: EvalMode,
) -> Result<EvalReport> {
    let docs: Vec<Document> = preds.iter().map(|p| p.doc.clone()).collect();
    let report = evaluate(&docs, gold, schema, mode)?;
    Ok(report.with_diagnostics(preds.iter().flat_map(|p| &p.diagnostics)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub ordering: OrderingParams,
    pub demos: DemoConfig,
    pub inference: InferenceOptions,
    pub update: UpdateOptions,
    pub update_iterations: usize,
    pub eval_mode: EvalMode,
}

impl RunConfig {
    pub fn for_dataset(dataset: Dataset) -> Self {
        let style = default_style(dataset);
        Self {
            ordering: OrderingParams::default(),
            demos: DemoConfig { style, ..DemoConfig::default() },
            inference: InferenceOptions::default(),
            update: UpdateOptions::default(),
            update_iterations: 20,
            eval_mode: default_eval_mode(dataset),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub neighbors: NeighborMap,
    pub demoset: DemoSet,
    pub trace: UpdateTrace,
    pub predictions: Vec<DocPrediction>,
    pub report: EvalReport,
}

/// Order, select neighbors, build and update demonstrations, label the test
/// split and score it.
pub fn end_to_end(
    docs: &[Document],
    schema: &LabelSchema,
    provider: &dyn EmbeddingProvider,
    client: &LlmClient,
    cfg: &RunConfig,
    est: &dyn TokenEstimator,
) -> Result<RunOutput> {
    let ordered: Vec<Document> = docs.iter().map(|d| order_document(d, &cfg.ordering)).collect();
    let (train, test): (Vec<Document>, Vec<Document>) = ordered.into_iter().partition(|d| d.split == Split::Train);
    if train.is_empty() {
        return Err(PipelineError::NoDocuments("training"));
    }
    if test.is_empty() {
        return Err(PipelineError::NoDocuments("test"));
    }
    let neighbors = select_nearest_neighbors(&train, &test, provider, cfg.inference.concurrency)?;
    let by_id: BTreeMap<&str, &Document> = train.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let pool: Vec<Document> = neighbor_pool(&neighbors).iter().map(|id| by_id[id.as_str()].clone()).collect();
    log::info!("neighbor pool: {} of {} training documents", pool.len(), train.len());
    let initial = init_demoset(&pool, schema, client, &cfg.demos, est)?;
    let (demoset, trace) = update_hard_demos(&initial, &pool, client, cfg.update_iterations, schema, &cfg.update, est)
        .map_err(Box::new)?;
    let predictions = run_inference(&test, &demoset, schema, client, &cfg.inference, est)?;
    let report = evaluate_predictions(&predictions, &test, schema, cfg.eval_mode)?;
    Ok(RunOutput { neighbors, demoset, trace, predictions, report })
}
