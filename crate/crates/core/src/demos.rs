//! The four demonstration kinds: label mapping, hard, layout-aware and
//! formatting.
//!
//! Hard demonstrations are reading-order windows around the segments the
//! model labels worst. A window is centered on one segment and extends
//! `half_width` segments each side. Candidates rank by
//! `(center score, window mean, doc_id, center index)`, lowest first.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::extraction::{align_predictions, parse_labeled_segments, Diagnostic, SroieAnswer};
use crate::llm::{LlmClient, LlmError};
use crate::prompting::{chunk_query, TokenEstimator};
use crate::render::{
    gold_records, labeled_record, query_records, A_MARK, CONTEXT_MARK, PT_LABELS, PT_LAYOUT, PT_SROIE, Q_MARK,
};
use crate::types::{Document, LabelSchema, Segment};

pub const DEMOSET_FORMAT: &str = "docicl-demoset";
pub const DEMOSET_VERSION: u32 = 1;
pub const DEFAULT_HALF_WIDTH: usize = 3;
pub const DEFAULT_FORMAT_SPAN: usize = 2;
pub const LAYOUT_REGION_MIN: usize = 6;
pub const LAYOUT_REGION_MAX: usize = 20;
pub const NO_HARD_FOUND: &str = "no-hard-found";

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("demonstration pool is empty")]
    EmptyPool,
    #[error("document {0} is not in reading order")]
    NotOrdered(String),
    #[error("layout region needs at least 2 segments, got {0}")]
    RegionTooSmall(usize),
    #[error("{what} must be at least 1")]
    InvalidCount { what: &'static str },
    #[error("backend failed on chunk {chunk}: {source}")]
    Backend { chunk: usize, source: LlmError },
    #[error("{0}")]
    Prompt(#[from] crate::prompting::PromptError),
    #[error("demo store: {0}")]
    Store(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DemoKind {
    Mapping,
    Hard,
    Layout,
    Formatting,
}

impl DemoKind {
    pub fn letter(self) -> char {
        match self {
            DemoKind::Mapping => 'M',
            DemoKind::Hard => 'H',
            DemoKind::Layout => 'L',
            DemoKind::Formatting => 'F',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CreatedBy {
    Gold,
    Llm,
}

/// How answers are written: one labeled record per segment, or the grouped
/// receipt style (four quoted-value groups).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerStyle {
    #[default]
    Labeled,
    Grouped,
}

impl AnswerStyle {
    pub fn question(self) -> &'static str {
        match self {
            AnswerStyle::Labeled => PT_LABELS,
            AnswerStyle::Grouped => PT_SROIE,
        }
    }

    pub fn answer(self, segments: &[Segment], other: &str) -> String {
        match self {
            AnswerStyle::Labeled => format!("{}.", gold_records(segments, other)),
            AnswerStyle::Grouped => SroieAnswer::from_gold(segments).render(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub kind: DemoKind,
    pub rendered: String,
    pub source_doc: Option<String>,
    pub source_segments: Vec<String>,
    /// Segment id the window is centered on (hard demonstrations).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<String>,
    pub created_by: CreatedBy,
    pub iteration: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Demonstration {
    pub fn check(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.rendered.is_empty() || !self.rendered.ends_with('\n') {
            p.push(format!("{:?} demonstration is not newline-terminated", self.kind));
        }
        if (self.kind == DemoKind::Mapping) == self.source_doc.is_some() {
            p.push(format!("{:?} demonstration has wrong source_doc presence", self.kind));
        }
        if self.kind == DemoKind::Layout && self.created_by != CreatedBy::Llm {
            p.push("layout demonstration must be model-generated".into());
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoCounts {
    pub n_hard: usize,
    pub n_layout: usize,
    pub n_formatting: usize,
}

impl Default for DemoCounts {
    fn default() -> Self {
        Self { n_hard: 4, n_layout: 4, n_formatting: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoSet {
    pub mapping: Demonstration,
    pub hard: Vec<Demonstration>,
    pub layout: Vec<Demonstration>,
    pub formatting: Vec<Demonstration>,
    pub counts: DemoCounts,
    #[serde(default)]
    pub style: AnswerStyle,
    pub seed: u64,
}

impl DemoSet {
    /// Content hash over the canonical JSON of the set.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).unwrap()))
    }

    pub fn all(&self) -> impl Iterator<Item = &Demonstration> {
        std::iter::once(&self.mapping).chain(&self.hard).chain(&self.layout).chain(&self.formatting)
    }

    pub fn check(&self) -> Vec<String> {
        let mut p: Vec<String> = self.all().flat_map(Demonstration::check).collect();
        if self.mapping.kind != DemoKind::Mapping {
            p.push("mapping slot holds another kind".into());
        }
        for (list, kind, n) in [
            (&self.hard, DemoKind::Hard, self.counts.n_hard),
            (&self.layout, DemoKind::Layout, self.counts.n_layout),
            (&self.formatting, DemoKind::Formatting, self.counts.n_formatting),
        ] {
            if list.len() != n {
                p.push(format!("{kind:?} list has {} entries, expected {n}", list.len()));
            }
            if list.iter().any(|d| d.kind != kind) {
                p.push(format!("{kind:?} list holds another kind"));
            }
        }
        p
    }
}

#[derive(Serialize, Deserialize)]
struct StoredDemoSet {
    format: String,
    version: u32,
    hash: String,
    demoset: DemoSet,
}

pub fn save_demoset(path: &Path, set: &DemoSet) -> Result<(), DemoError> {
    let stored = StoredDemoSet {
        format: DEMOSET_FORMAT.into(),
        version: DEMOSET_VERSION,
        hash: set.hash(),
        demoset: set.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&stored).unwrap() + "\n")?;
    Ok(())
}

pub fn load_demoset(path: &Path) -> Result<DemoSet, DemoError> {
    let raw = fs::read_to_string(path)?;
    let stored: StoredDemoSet = serde_json::from_str(&raw).map_err(|e| DemoError::Store(e.to_string()))?;
    if stored.format != DEMOSET_FORMAT || stored.version != DEMOSET_VERSION {
        return Err(DemoError::Store(format!("unsupported {} v{}", stored.format, stored.version)));
    }
    if stored.demoset.hash() != stored.hash {
        return Err(DemoError::Store("hash does not match contents".into()));
    }
    Ok(stored.demoset)
}

// ---------------------------------------------------------------------------
// Scoring

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScore {
    pub doc_id: String,
    pub segment_id: String,
    pub index: usize,
    /// 1 when the predicted label equals gold, else 0.
    pub f1: f64,
}

/// Binary per-segment scores of a labeled prediction against gold.
/// Segments listed in `unmatched` score 0.
pub fn score_segments(pred: &[Segment], gold: &Document, unmatched: &[String]) -> Vec<SegmentScore> {
    gold.segments
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let ok = !unmatched.contains(&g.id)
                && pred.iter().find(|p| p.id == g.id).and_then(|p| p.predicted_label.as_ref()) == g.gold_label.as_ref();
            SegmentScore {
                doc_id: gold.doc_id.clone(),
                segment_id: g.id.clone(),
                index: i,
                f1: if ok { 1.0 } else { 0.0 },
            }
        })
        .collect()
}

/// Ask the zero-shot labeling question over `doc` (chunked to `budget`) and
/// score each segment.
pub fn zero_shot_score(
    doc: &Document,
    schema: &LabelSchema,
    client: &LlmClient,
    budget: usize,
    est: &dyn TokenEstimator,
) -> Result<Vec<SegmentScore>, DemoError> {
    if !doc.ordered {
        return Err(DemoError::NotOrdered(doc.doc_id.clone()));
    }
    let chunks = chunk_query(&doc.segments, budget, 0, est, AnswerStyle::Labeled)?;
    let mut pred = Vec::with_capacity(doc.segments.len());
    let mut unmatched = Vec::new();
    for (ci, chunk) in chunks.iter().enumerate() {
        let refs: Vec<&Segment> = chunk.iter().collect();
        let prompt = crate::render::labeling_query(&refs, PT_LABELS);
        let resp = client
            .complete(&client.request(prompt).tagged(format!("zero-shot:{}:{ci}", doc.doc_id)))
            .map_err(|source| DemoError::Backend { chunk: ci, source })?;
        let parsed = parse_labeled_segments(&resp.text);
        let (aligned, diags) = align_predictions(&parsed.entities, chunk, schema);
        for d in diags {
            if let Diagnostic::Unmatched { segment_id } = d {
                unmatched.push(segment_id);
            }
        }
        pred.extend(aligned);
    }
    Ok(score_segments(&pred, doc, &unmatched))
}

// ---------------------------------------------------------------------------
// Hard windows

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub doc_id: String,
    pub center: usize,
    /// Half-open segment index range.
    pub start: usize,
    pub end: usize,
    pub center_score: f64,
    pub mean: f64,
}

impl Window {
    fn key(&self) -> (f64, f64, &str, usize) {
        (self.center_score, self.mean, &self.doc_id, self.center)
    }

    pub fn covers(&self, doc_id: &str, index: usize) -> bool {
        self.doc_id == doc_id && (self.start..self.end).contains(&index)
    }
}

/// Every candidate window over `pool`, one per segment, ranked best (hardest) first.
pub fn ranked_windows(pool: &[Document], scores: &[SegmentScore], half_width: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for doc in pool {
        let s: Vec<f64> = doc
            .segments
            .iter()
            .map(|seg| scores.iter().find(|x| x.doc_id == doc.doc_id && x.segment_id == seg.id).map_or(1.0, |x| x.f1))
            .collect();
        for c in 0..s.len() {
            let start = c.saturating_sub(half_width);
            let end = (c + half_width + 1).min(s.len());
            let mean = s[start..end].iter().sum::<f64>() / (end - start) as f64;
            out.push(Window { doc_id: doc.doc_id.clone(), center: c, start, end, center_score: s[c], mean });
        }
    }
    out.sort_by(|a, b| a.key().partial_cmp(&b.key()).unwrap());
    out
}

/// Up to `k` windows in rank order; a candidate whose center lies inside an
/// already chosen window is passed over unless too few remain.
pub fn pick_windows(ranked: &[Window], k: usize, exclude: &[(String, usize)]) -> Vec<Window> {
    let allowed: Vec<&Window> =
        ranked.iter().filter(|w| !exclude.iter().any(|(d, c)| *d == w.doc_id && *c == w.center)).collect();
    let mut chosen: Vec<Window> = Vec::new();
    for w in &allowed {
        if chosen.len() == k {
            break;
        }
        if !chosen.iter().any(|c| c.covers(&w.doc_id, w.center)) {
            chosen.push((*w).clone());
        }
    }
    for w in &allowed {
        if chosen.len() == k {
            break;
        }
        if !chosen.iter().any(|c| c.doc_id == w.doc_id && c.center == w.center) {
            chosen.push((*w).clone());
        }
    }
    chosen
}

/// `Context:` block of the window's query records, the labeling question
/// and the gold answer.
pub fn render_hard(segments: &[Segment], style: AnswerStyle, other: &str) -> String {
    format!(
        "{CONTEXT_MARK}{},{}\n{A_MARK}{}\n",
        query_records(segments),
        style.question(),
        style.answer(segments, other)
    )
}

pub fn hard_demo(doc: &Document, w: &Window, style: AnswerStyle, other: &str, iteration: u32) -> Demonstration {
    let segs = &doc.segments[w.start..w.end];
    Demonstration {
        kind: DemoKind::Hard,
        rendered: render_hard(segs, style, other),
        source_doc: Some(doc.doc_id.clone()),
        source_segments: segs.iter().map(|s| s.id.clone()).collect(),
        anchor: Some(doc.segments[w.center].id.clone()),
        created_by: CreatedBy::Gold,
        iteration,
        notes: Vec::new(),
    }
}

pub fn build_initial_hard(
    pool: &[Document],
    scores: &[SegmentScore],
    k_hard: usize,
    half_width: usize,
    style: AnswerStyle,
    other: &str,
) -> Result<(Vec<Demonstration>, Vec<Window>), DemoError> {
    if k_hard == 0 {
        return Err(DemoError::InvalidCount { what: "k_hard" });
    }
    if pool.iter().all(|d| d.segments.is_empty()) {
        return Err(DemoError::EmptyPool);
    }
    let ranked = ranked_windows(pool, scores, half_width);
    let no_hard = ranked.iter().all(|w| w.center_score >= 1.0);
    let windows = pick_windows(&ranked, k_hard, &[]);
    let demos = windows
        .iter()
        .map(|w| {
            let doc = pool.iter().find(|d| d.doc_id == w.doc_id).unwrap();
            let mut d = hard_demo(doc, w, style, other, 0);
            if no_hard {
                d.notes.push(NO_HARD_FOUND.into());
            }
            d
        })
        .collect();
    Ok((demos, windows))
}

// ---------------------------------------------------------------------------
// Layout

/// Contiguous region of `LAYOUT_REGION_MIN..=LAYOUT_REGION_MAX` segments
/// (clipped to the document) containing each window's center, one per demo.
pub fn sample_layout_regions(
    pool: &[Document],
    windows: &[Window],
    n: usize,
    seed: u64,
) -> Vec<(String, usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c41_594f_5554);
    let usable: Vec<&Window> =
        windows.iter().filter(|w| pool.iter().any(|d| d.doc_id == w.doc_id && d.segments.len() >= 2)).collect();
    if usable.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|i| {
            let w = usable[i % usable.len()];
            let len = pool.iter().find(|d| d.doc_id == w.doc_id).unwrap().segments.len();
            let lo = LAYOUT_REGION_MIN.min(len).max(2);
            let hi = LAYOUT_REGION_MAX.min(len);
            let size = rng.gen_range(lo..=hi);
            let first = (w.center + 1).saturating_sub(size);
            let last = w.center.min(len - size);
            let start = rng.gen_range(first..=last);
            (w.doc_id.clone(), start, start + size)
        })
        .collect()
}

/// The layout question for a region: its labeled records followed by the
/// positional-relationship prompt.
pub fn layout_question(region: &[Segment], other: &str) -> String {
    let records: String =
        region.iter().map(|s| labeled_record(&s.text, &s.bbox, s.gold_label.as_deref().unwrap_or(other))).collect();
    format!("{Q_MARK}{records}, {PT_LAYOUT}\n{A_MARK}")
}

pub fn build_layout_demo(
    doc_id: &str,
    region: &[Segment],
    client: &LlmClient,
    other: &str,
) -> Result<Demonstration, DemoError> {
    if region.len() < 2 {
        return Err(DemoError::RegionTooSmall(region.len()));
    }
    let q = layout_question(region, other);
    let resp = client
        .complete(&client.request(q.clone()).tagged(format!("layout:{doc_id}")))
        .map_err(|source| DemoError::Backend { chunk: 0, source })?;
    let mut rendered = q + &resp.text;
    if !rendered.ends_with('\n') {
        rendered.push('\n');
    }
    Ok(Demonstration {
        kind: DemoKind::Layout,
        rendered,
        source_doc: Some(doc_id.to_string()),
        source_segments: region.iter().map(|s| s.id.clone()).collect(),
        anchor: None,
        created_by: CreatedBy::Llm,
        iteration: 0,
        notes: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Formatting

pub fn render_formatting(segments: &[Segment], style: AnswerStyle, other: &str) -> String {
    format!("{Q_MARK}{},{}\n{A_MARK}{}\n", query_records(segments), style.question(), style.answer(segments, other))
}

/// `k_fmt` demos, each starting at a segment drawn uniformly (without
/// replacement) from the pool and spanning `span` consecutive segments.
pub fn build_formatting_demos(
    pool: &[Document],
    seed: u64,
    k_fmt: usize,
    span: usize,
    style: AnswerStyle,
    other: &str,
) -> Result<Vec<Demonstration>, DemoError> {
    if k_fmt == 0 {
        return Err(DemoError::InvalidCount { what: "k_fmt" });
    }
    if span == 0 {
        return Err(DemoError::InvalidCount { what: "span" });
    }
    let positions: Vec<(usize, usize)> =
        pool.iter().enumerate().flat_map(|(di, d)| (0..d.segments.len()).map(move |si| (di, si))).collect();
    if positions.is_empty() {
        return Err(DemoError::EmptyPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = Vec::with_capacity(k_fmt);
    while picks.len() < k_fmt {
        let n = (k_fmt - picks.len()).min(positions.len());
        picks.extend(sample(&mut rng, positions.len(), n));
    }
    Ok(picks
        .into_iter()
        .map(|p| {
            let (di, si) = positions[p];
            let doc = &pool[di];
            let segs = &doc.segments[si..(si + span).min(doc.segments.len())];
            Demonstration {
                kind: DemoKind::Formatting,
                rendered: render_formatting(segs, style, other),
                source_doc: Some(doc.doc_id.clone()),
                source_segments: segs.iter().map(|s| s.id.clone()).collect(),
                anchor: None,
                created_by: CreatedBy::Gold,
                iteration: 0,
                notes: Vec::new(),
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Label mapping

fn number_word(n: usize) -> String {
    const WORDS: [&str; 21] = [
        "zero",
        "one",
        "two",
        "three",
        "four",
        "five",
        "six",
        "seven",
        "eight",
        "nine",
        "ten",
        "eleven",
        "twelve",
        "thirteen",
        "fourteen",
        "fifteen",
        "sixteen",
        "seventeen",
        "eighteen",
        "nineteen",
        "twenty",
    ];
    WORDS.get(n).map_or_else(|| n.to_string(), |w| w.to_string())
}

fn oxford(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [a] => a.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

/// Labels a mapping block mentions: all of them, minus the other label when
/// it only marks unaligned text.
pub fn mapped_labels(schema: &LabelSchema) -> Vec<&str> {
    schema.labels.iter().map(String::as_str).filter(|l| schema.other_is_annotated || *l != schema.other_label).collect()
}

pub fn build_label_mapping(schema: &LabelSchema) -> Demonstration {
    let labels = mapped_labels(schema);
    let rendered = if schema.is_natural() {
        let quoted: Vec<String> = labels.iter().map(|l| format!("\"{l}\"")).collect();
        let noun = if labels.len() == 1 { "label" } else { "labels" };
        let verb = if labels.len() == 1 { "is" } else { "are" };
        format!("There {verb} {} {noun} for selection, {}.\n", number_word(labels.len()), oxford(&quoted))
    } else {
        labels.iter().map(|l| format!("{l} : {}\n", schema.description(l).unwrap_or(l))).collect()
    };
    Demonstration {
        kind: DemoKind::Mapping,
        rendered,
        source_doc: None,
        source_segments: Vec::new(),
        anchor: None,
        created_by: CreatedBy::Gold,
        iteration: 0,
        notes: Vec::new(),
    }
}
