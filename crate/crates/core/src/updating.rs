//! Iterative hard-demonstration updating over the neighbor pool.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demos::{
    build_layout_demo, hard_demo, pick_windows, ranked_windows, sample_layout_regions, score_segments, DemoError,
    DemoSet, SegmentScore, Window, DEFAULT_HALF_WIDTH,
};
use crate::evaluation::entity_f1;
use crate::llm::LlmClient;
use crate::pipeline::{run_inference, InferenceOptions, PipelineError};
use crate::prompting::TokenEstimator;
use crate::types::{Document, LabelSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateOptions {
    /// Hard-list capacity; `None` keeps the set's configured hard count.
    pub capacity: Option<usize>,
    /// Append without evicting.
    pub grow: bool,
    pub half_width: usize,
    /// Rebuild the layout demonstrations from the current hard windows after
    /// every iteration.
    pub refresh_layout: bool,
    /// Stop once pool micro-F1 has not improved for this many iterations.
    pub patience: Option<usize>,
    pub inference: InferenceOptions,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        Self {
            capacity: None,
            grow: false,
            half_width: DEFAULT_HALF_WIDTH,
            refresh_layout: false,
            patience: None,
            inference: InferenceOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppendedWindow {
    pub doc_id: String,
    pub center: usize,
    pub start: usize,
    pub end: usize,
    pub segment_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStep {
    pub iteration: usize,
    pub pool_micro_f1: f64,
    pub appended: Option<AppendedWindow>,
    pub evicted: usize,
    pub demoset_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateTrace {
    pub steps: Vec<UpdateStep>,
    /// Set when the patience limit ended the run before `k` iterations.
    #[serde(default)]
    pub stopped_early: bool,
}

impl UpdateTrace {
    pub fn summary(&self) -> String {
        self.steps.iter().map(step_line).collect::<Vec<_>>().join("\n")
    }
}

fn step_line(s: &UpdateStep) -> String {
    let win = s.appended.as_ref().map_or("none".to_string(), |w| format!("{}[{}..{}]", w.doc_id, w.start, w.end));
    format!("iter {:>2}  pool F1 {:.4}  appended {win}  hash {}", s.iteration, s.pool_micro_f1, &s.demoset_hash[..12])
}

#[derive(Debug, Error)]
#[error("update iteration {iteration}: {source}")]
pub struct UpdateError {
    pub iteration: usize,
    pub source: PipelineError,
    pub trace: UpdateTrace,
}

/// Windows around the anchors of the current hard demonstrations.
fn hard_windows(set: &DemoSet, pool: &[Document], half_width: usize) -> Vec<Window> {
    set.hard
        .iter()
        .filter_map(|d| {
            let doc = pool.iter().find(|p| Some(&p.doc_id) == d.source_doc.as_ref())?;
            let center = doc.segments.iter().position(|s| Some(&s.id) == d.anchor.as_ref())?;
            Some(Window {
                doc_id: doc.doc_id.clone(),
                center,
                start: center.saturating_sub(half_width),
                end: (center + half_width + 1).min(doc.segments.len()),
                center_score: 0.0,
                mean: 0.0,
            })
        })
        .collect()
}

fn refresh_layout(
    set: &mut DemoSet,
    pool: &[Document],
    client: &LlmClient,
    schema: &LabelSchema,
    opts: &UpdateOptions,
    iteration: usize,
) -> Result<(), DemoError> {
    let n = set.layout.len();
    let windows = hard_windows(set, pool, opts.half_width);
    let regions = sample_layout_regions(pool, &windows, n, set.seed.wrapping_add(iteration as u64 + 1));
    if regions.is_empty() {
        return Ok(());
    }
    let mut layout = Vec::with_capacity(n);
    for (doc_id, start, end) in regions {
        let doc = pool.iter().find(|d| d.doc_id == doc_id).unwrap();
        layout.push(build_layout_demo(&doc_id, &doc.segments[start..end], client, &schema.other_label)?);
    }
    set.layout = layout;
    Ok(())
}

/// Run `k` rounds of: label the pool with the current set, score windows,
/// append the worst window not already a hard demo, evict the oldest beyond
/// capacity.
pub fn update_hard_demos(
    set: &DemoSet,
    pool: &[Document],
    client: &LlmClient,
    k: usize,
    schema: &LabelSchema,
    opts: &UpdateOptions,
    est: &dyn TokenEstimator,
) -> Result<(DemoSet, UpdateTrace), UpdateError> {
    let mut current = set.clone();
    let mut trace = UpdateTrace::default();
    let capacity = opts.capacity.unwrap_or(set.counts.n_hard);
    let (mut best, mut stale) = (f64::NEG_INFINITY, 0usize);
    for iteration in 0..k {
        let fail = |source, trace: &UpdateTrace| UpdateError { iteration, source, trace: trace.clone() };
        let preds = run_inference(pool, &current, schema, client, &opts.inference, est).map_err(|e| fail(e, &trace))?;
        let mut scores: Vec<SegmentScore> = Vec::new();
        for (p, gold) in preds.iter().zip(pool) {
            scores.extend(score_segments(&p.doc.segments, gold, &p.unmatched()));
        }
        let pred_docs: Vec<Document> = preds.into_iter().map(|p| p.doc).collect();
        let micro = entity_f1(&pred_docs, pool, schema).map_err(|e| fail(e.into(), &trace))?.micro.f1;

        if micro > best {
            (best, stale) = (micro, 0);
        } else {
            stale += 1;
        }
        if opts.patience.is_some_and(|p| stale >= p) {
            log::info!("pool F1 has not improved for {stale} iterations; stopping at iteration {iteration}");
            trace.stopped_early = true;
            break;
        }

        let exclude: Vec<(String, usize)> =
            hard_windows(&current, pool, 0).into_iter().map(|w| (w.doc_id, w.center)).collect();
        let ranked = ranked_windows(pool, &scores, opts.half_width);
        let appended = pick_windows(&ranked, 1, &exclude).into_iter().next().map(|w| {
            let doc = pool.iter().find(|d| d.doc_id == w.doc_id).unwrap();
            current.hard.push(hard_demo(doc, &w, current.style, &schema.other_label, iteration as u32 + 1));
            AppendedWindow {
                segment_ids: doc.segments[w.start..w.end].iter().map(|s| s.id.clone()).collect(),
                doc_id: w.doc_id,
                center: w.center,
                start: w.start,
                end: w.end,
            }
        });
        let mut evicted = 0;
        if !opts.grow {
            while current.hard.len() > capacity {
                current.hard.remove(0);
                evicted += 1;
            }
        }
        current.counts.n_hard = current.hard.len();
        if opts.refresh_layout && !current.layout.is_empty() {
            refresh_layout(&mut current, pool, client, schema, opts, iteration).map_err(|e| fail(e.into(), &trace))?;
        }
        let step = UpdateStep { iteration, pool_micro_f1: micro, appended, evicted, demoset_hash: current.hash() };
        log::info!("{}", step_line(&step));
        trace.steps.push(step);
    }
    Ok((current, trace))
}
