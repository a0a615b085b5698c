//! Reading-order recovery by recursive XY-cut.
//!
//! At each node the boxes are projected on both axes. Whitespace gaps of at
//! least the configured width qualify as cuts; the axis holding the widest
//! qualifying gap is cut at every qualifying gap (horizontal gaps split
//! top/bottom, vertical gaps split left/right; ties go to the horizontal
//! cut). Nodes with no qualifying gap, or at the depth bound, are leaves
//! sorted by `(y0, x0, id)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::types::{Document, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderingParams {
    pub min_gap_x: u32,
    pub min_gap_y: u32,
    pub max_depth: u32,
}

impl Default for OrderingParams {
    fn default() -> Self {
        Self { min_gap_x: 10, min_gap_y: 10, max_depth: 32 }
    }
}

impl OrderingParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_depth < 1 {
            return Err("max_depth must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    /// Cut along a horizontal whitespace band: top part, then bottom part.
    Horizontal,
    /// Cut along a vertical whitespace band: left part, then right part.
    Vertical,
}

/// Node of the cut tree, kept for debug dumps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CutNode {
    Leaf(Vec<String>),
    Split { horizontal: bool, children: Vec<CutNode> },
}

impl CutNode {
    fn flatten(&self, out: &mut Vec<String>) {
        match self {
            CutNode::Leaf(ids) => out.extend(ids.iter().cloned()),
            CutNode::Split { children, .. } => children.iter().for_each(|c| c.flatten(out)),
        }
    }

    /// Indented text rendering of the tree.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        self.dump_into(&mut s, 0);
        s
    }

    fn dump_into(&self, s: &mut String, depth: usize) {
        let pad = "  ".repeat(depth);
        match self {
            CutNode::Leaf(ids) => {
                let _ = writeln!(s, "{pad}leaf [{}]", ids.join(", "));
            }
            CutNode::Split { horizontal, children } => {
                let _ = writeln!(
                    s,
                    "{pad}{} cut ({} parts)",
                    if *horizontal { "horizontal" } else { "vertical" },
                    children.len()
                );
                for c in children {
                    c.dump_into(s, depth + 1);
                }
            }
        }
    }
}

/// Split points along one axis: returns the groups (as index lists into
/// `items`) and the widest gap, or `None` if no gap qualifies.
fn gaps(items: &[&Segment], axis: Axis, min_gap: u32) -> Option<(u32, Vec<Vec<usize>>)> {
    let span = |s: &Segment| match axis {
        Axis::Horizontal => (s.bbox.y0(), s.bbox.y1()),
        Axis::Vertical => (s.bbox.x0(), s.bbox.x1()),
    };
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by_key(|&i| (span(items[i]).0, span(items[i]).1, i));
    let mut groups: Vec<Vec<usize>> = vec![vec![idx[0]]];
    let mut reach = span(items[idx[0]]).1;
    let mut widest = 0;
    for &i in &idx[1..] {
        let (lo, hi) = span(items[i]);
        let gap = lo.saturating_sub(reach);
        if gap > 0 && gap >= min_gap {
            widest = widest.max(gap);
            groups.push(Vec::new());
        }
        groups.last_mut().unwrap().push(i);
        reach = reach.max(hi);
    }
    (groups.len() > 1).then_some((widest, groups))
}

fn leaf(items: &[&Segment]) -> CutNode {
    let mut v: Vec<&Segment> = items.to_vec();
    v.sort_by(|a, b| (a.bbox.y0(), a.bbox.x0(), &a.id).cmp(&(b.bbox.y0(), b.bbox.x0(), &b.id)));
    CutNode::Leaf(v.into_iter().map(|s| s.id.clone()).collect())
}

fn cut(items: &[&Segment], params: &OrderingParams, depth: u32) -> CutNode {
    if items.len() <= 1 || depth >= params.max_depth {
        return leaf(items);
    }
    let h = gaps(items, Axis::Horizontal, params.min_gap_y);
    let v = gaps(items, Axis::Vertical, params.min_gap_x);
    let (horizontal, groups) = match (h, v) {
        (None, None) => return leaf(items),
        (Some((_, g)), None) => (true, g),
        (None, Some((_, g))) => (false, g),
        (Some((hw, hg)), Some((vw, vg))) => {
            if hw >= vw {
                (true, hg)
            } else {
                (false, vg)
            }
        }
    };
    let children = groups
        .into_iter()
        .map(|g| {
            let sub: Vec<&Segment> = g.into_iter().map(|i| items[i]).collect();
            cut(&sub, params, depth + 1)
        })
        .collect();
    CutNode::Split { horizontal, children }
}

/// Build the cut tree for `segments`.
pub fn cut_tree(segments: &[Segment], params: &OrderingParams) -> CutNode {
    let refs: Vec<&Segment> = segments.iter().collect();
    if refs.is_empty() {
        return CutNode::Leaf(Vec::new());
    }
    cut(&refs, params, 0)
}

/// Reading order of `segments` as a permutation of their ids.
pub fn xy_cut(segments: &[Segment], params: &OrderingParams) -> Vec<String> {
    let mut out = Vec::with_capacity(segments.len());
    cut_tree(segments, params).flatten(&mut out);
    out
}

/// Reorder a document's segments and mark it ordered.
pub fn order_document(doc: &Document, params: &OrderingParams) -> Document {
    let order = xy_cut(&doc.segments, params);
    let mut by_id: std::collections::HashMap<&str, &Segment> =
        doc.segments.iter().map(|s| (s.id.as_str(), s)).collect();
    let segments = order.iter().filter_map(|id| by_id.remove(id.as_str()).cloned()).collect();
    Document { segments, ordered: true, ..doc.clone() }
}
