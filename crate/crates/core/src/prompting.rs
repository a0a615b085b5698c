//! Prompt assembly under a token budget.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demos::{AnswerStyle, DemoKind, DemoSet};
use crate::render::{query_record, query_records, A_MARK, Q_MARK};
use crate::types::Segment;

pub const DEFAULT_BUDGET: usize = 3600;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("query of {tokens} tokens does not fit budget {budget} next to the label mapping")]
    QueryTooLarge { tokens: usize, budget: usize },
    #[error("segment {id} needs {tokens} tokens, only {residual} available")]
    SegmentTooLarge { id: String, tokens: usize, residual: usize },
    #[error("query chunk is empty")]
    EmptyQuery,
}

pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(chars / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharEstimator;

impl TokenEstimator for CharEstimator {
    fn estimate(&self, text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OrderPolicy {
    #[default]
    #[serde(rename = "M-H-L-F")]
    Mhlf,
    #[serde(rename = "M-L-H-F")]
    Mlhf,
}

impl OrderPolicy {
    pub fn kinds(self) -> [DemoKind; 4] {
        match self {
            OrderPolicy::Mhlf => [DemoKind::Mapping, DemoKind::Hard, DemoKind::Layout, DemoKind::Formatting],
            OrderPolicy::Mlhf => [DemoKind::Mapping, DemoKind::Layout, DemoKind::Hard, DemoKind::Formatting],
        }
    }
}

impl fmt::Display for OrderPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrderPolicy::Mhlf => "M-H-L-F",
            OrderPolicy::Mlhf => "M-L-H-F",
        })
    }
}

impl FromStr for OrderPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "").as_str() {
            "MHLF" => Ok(OrderPolicy::Mhlf),
            "MLHF" => Ok(OrderPolicy::Mlhf),
            _ => Err(format!("unknown order policy {s:?} (expected M-H-L-F or M-L-H-F)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub kind: DemoKind,
    /// Position within its kind's list in the demo set.
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub text: String,
    /// Kinds of the included blocks, in prompt order.
    pub order: Vec<DemoKind>,
    pub blocks: Vec<Block>,
    pub query: String,
    pub query_segments: Vec<String>,
    pub token_estimate: usize,
    pub budget: usize,
    pub dropped: Vec<(DemoKind, usize)>,
}

/// Closing query block: unlabeled records, the question, and an open answer.
pub fn query_block(chunk: &[Segment], style: AnswerStyle) -> String {
    format!("{Q_MARK}{},{}\n{A_MARK}", query_records(chunk), style.question())
}

fn join(blocks: &[Block], query: &str) -> String {
    let mut s = String::new();
    for b in blocks {
        s.push_str(&b.text);
        s.push('\n');
    }
    s.push_str(query);
    s
}

fn ordered_blocks(set: &DemoSet, policy: OrderPolicy) -> Vec<Block> {
    let mut out = Vec::new();
    for kind in policy.kinds() {
        let list: Vec<&crate::demos::Demonstration> = match kind {
            DemoKind::Mapping => vec![&set.mapping],
            DemoKind::Hard => set.hard.iter().collect(),
            DemoKind::Layout => set.layout.iter().collect(),
            DemoKind::Formatting => set.formatting.iter().collect(),
        };
        out.extend(list.into_iter().enumerate().map(|(index, d)| Block { kind, index, text: d.rendered.clone() }));
    }
    out
}

/// Next block to drop: oldest hard first, then newest layout, then newest
/// formatting.
fn sacrifice(blocks: &[Block]) -> Option<usize> {
    let pos = |k: DemoKind| blocks.iter().enumerate().filter(move |(_, b)| b.kind == k);
    pos(DemoKind::Hard)
        .min_by_key(|(_, b)| b.index)
        .or_else(|| pos(DemoKind::Layout).max_by_key(|(_, b)| b.index))
        .or_else(|| pos(DemoKind::Formatting).max_by_key(|(_, b)| b.index))
        .map(|(i, _)| i)
}

pub fn assemble_prompt(
    set: &DemoSet,
    chunk: &[Segment],
    policy: OrderPolicy,
    budget: usize,
    est: &dyn TokenEstimator,
) -> Result<PromptBundle, PromptError> {
    if chunk.is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    let query = query_block(chunk, set.style);
    let mut blocks = ordered_blocks(set, policy);
    let mut dropped = Vec::new();
    let mut text = join(&blocks, &query);
    let mut tokens = est.estimate(&text);
    while tokens > budget {
        match sacrifice(&blocks) {
            Some(i) => {
                let b = blocks.remove(i);
                dropped.push((b.kind, b.index));
            }
            None => return Err(PromptError::QueryTooLarge { tokens, budget }),
        }
        text = join(&blocks, &query);
        tokens = est.estimate(&text);
    }
    Ok(PromptBundle {
        order: blocks.iter().map(|b| b.kind).collect(),
        blocks,
        query,
        query_segments: chunk.iter().map(|s| s.id.clone()).collect(),
        token_estimate: tokens,
        text,
        budget,
        dropped,
    })
}

/// Split `segments` into consecutive chunks whose query blocks each fit in
/// `budget - overhead` tokens.
pub fn chunk_query(
    segments: &[Segment],
    budget: usize,
    overhead: usize,
    est: &dyn TokenEstimator,
    style: AnswerStyle,
) -> Result<Vec<Vec<Segment>>, PromptError> {
    let frame = est.estimate(&query_block(&[], style)) + 1;
    let residual = budget.saturating_sub(overhead).saturating_sub(frame);
    let mut chunks: Vec<Vec<Segment>> = Vec::new();
    let mut current: Vec<Segment> = Vec::new();
    let mut used = 0;
    for s in segments {
        let cost = est.estimate(&query_record(&s.text, &s.bbox));
        if cost > residual {
            return Err(PromptError::SegmentTooLarge { id: s.id.clone(), tokens: cost, residual });
        }
        if used + cost > residual && !current.is_empty() {
            chunks.push(std::mem::take(&mut current));
            used = 0;
        }
        used += cost;
        current.push(s.clone());
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    Ok(chunks)
}
