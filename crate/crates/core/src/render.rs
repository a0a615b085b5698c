//! Text serialization of segments inside prompts and answers.
//!
//! Record grammar, shared with the parser in [`crate::extraction`]:
//!
//! ```text
//! {text:"<escaped text>",Box:[x0 y0 x1 y1]}                 query record
//! {text:"<escaped text>",Box:[x0 y0 x1 y1],entity:<LABEL>}  labeled record
//! ```
//!
//! Inside the quoted text `"` is written `\"` and `\` is written `\\`.

use crate::types::{BBox, Segment};

/// Zero-shot labeling question, also closing every labeling query.
pub const PT_LABELS: &str = "What are the labels for these texts?";
/// Question asking for a positional description of a region.
pub const PT_LAYOUT: &str = "Please describe the positional relationship of these texts?";
/// Question for the grouped receipt answer style.
pub const PT_SROIE: &str = "Return text labeled as company, original address, total, and date?";

/// Marker that opens a question block.
pub const Q_MARK: &str = "Q:";
/// Marker that opens an answer block.
pub const A_MARK: &str = "A:";
/// Marker that opens a labeled context block.
pub const CONTEXT_MARK: &str = "Context:";

pub fn escape_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    for ch in text.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out
}

pub fn query_record(text: &str, bbox: &BBox) -> String {
    format!("{{text:\"{}\",Box:{}}}", escape_text(text), bbox)
}

pub fn labeled_record(text: &str, bbox: &BBox, label: &str) -> String {
    format!("{{text:\"{}\",Box:{},entity:{}}}", escape_text(text), bbox, label)
}

/// Unlabeled records for `segments`, concatenated without separators.
pub fn query_records<'a>(segments: impl IntoIterator<Item = &'a Segment>) -> String {
    segments.into_iter().map(|s| query_record(&s.text, &s.bbox)).collect()
}

/// Gold-labeled records; segments without a gold label are rendered with `fallback`.
pub fn gold_records<'a>(segments: impl IntoIterator<Item = &'a Segment>, fallback: &str) -> String {
    segments
        .into_iter()
        .map(|s| labeled_record(&s.text, &s.bbox, s.gold_label.as_deref().unwrap_or(fallback)))
        .collect()
}

/// `Q:{..}{..},<question>` line followed by `A:` with nothing after it.
pub fn labeling_query(segments: &[&Segment], question: &str) -> String {
    format!("{Q_MARK}{},{question}\n{A_MARK}", query_records(segments.iter().copied()))
}

/// Quoted-string group as used by the grouped receipt answers: `{"a"}{"b"}.`
pub fn quoted_group<'a>(values: impl IntoIterator<Item = &'a str>) -> String {
    let mut s: String = values.into_iter().map(|v| format!("{{\"{}\"}}", escape_text(v))).collect();
    s.push('.');
    s
}
