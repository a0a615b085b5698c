//! Turning raw model output back into per-segment labels.
//!
//! Parsers are total: any input yields a result plus diagnostics, never an
//! error. Label tokens are not checked here; [`align_predictions`] maps
//! unknown tokens to the schema's other label.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::types::{normalize_text, BBox, LabelSchema, Segment};

/// A labeled record recovered from model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedEntity {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: Option<BBox>,
    pub label: String,
    /// Byte span of the record in the raw output.
    pub span: (usize, usize),
}

/// An unlabeled (query-style) record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedQuery {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: Option<BBox>,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    MalformedBox { offset: usize },
    BoxOutOfRange { offset: usize },
    UnterminatedText { offset: usize },
    MalformedRecord { offset: usize, detail: String },
    ExtraGroup { index: usize },
    Unmatched { segment_id: String },
    UnknownLabel { segment_id: String, label: String },
    UnmatchedValue { field: String, value: String },
}

impl Diagnostic {
    pub fn kind(&self) -> &'static str {
        match self {
            Diagnostic::MalformedBox { .. } => "malformed_box",
            Diagnostic::BoxOutOfRange { .. } => "box_out_of_range",
            Diagnostic::UnterminatedText { .. } => "unterminated_text",
            Diagnostic::MalformedRecord { .. } => "malformed_record",
            Diagnostic::ExtraGroup { .. } => "extra_group",
            Diagnostic::Unmatched { .. } => "unmatched",
            Diagnostic::UnknownLabel { .. } => "unknown_label",
            Diagnostic::UnmatchedValue { .. } => "unmatched_value",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOutput {
    pub entities: Vec<ParsedEntity>,
    pub queries: Vec<ParsedQuery>,
    pub diagnostics: Vec<Diagnostic>,
}

enum Record {
    Labeled(ParsedEntity),
    Query(ParsedQuery),
}

enum Attempt {
    Parsed { record: Record, end: usize, diag: Option<Diagnostic> },
    NotARecord,
    Malformed { diag: Diagnostic, resume: usize },
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    /// Key, optionally quoted, followed by `:`; case-insensitive.
    fn eat_key(&mut self, key: &str) -> bool {
        let save = self.pos;
        self.skip_ws();
        let quoted = self.eat('"');
        let rest = &self.src[self.pos..];
        if rest.len() >= key.len() && rest.is_char_boundary(key.len()) && rest[..key.len()].eq_ignore_ascii_case(key) {
            self.pos += key.len();
            if quoted && !self.eat('"') {
                self.pos = save;
                return false;
            }
            self.skip_ws();
            if self.eat(':') {
                self.skip_ws();
                return true;
            }
        }
        self.pos = save;
        false
    }

    /// Reads a `"..."` string starting at the opening quote. `None` when unterminated.
    fn quoted(&mut self) -> Option<String> {
        if !self.eat('"') {
            return None;
        }
        let mut out = String::new();
        loop {
            match self.bump()? {
                '"' => return Some(out),
                '\\' => match self.bump()? {
                    '"' => out.push('"'),
                    '\\' => out.push('\\'),
                    other => {
                        out.push('\\');
                        out.push(other);
                    }
                },
                c => out.push(c),
            }
        }
    }

    /// Resume point after a malformed record: just past the next `}`, or at
    /// the next `{` if that comes first.
    fn resync(&self) -> usize {
        let rest = &self.src[self.pos..];
        let close = rest.find('}');
        let open = rest.find('{');
        match (open, close) {
            (Some(o), Some(c)) if o < c => self.pos + o,
            (_, Some(c)) => self.pos + c + 1,
            (Some(o), None) => self.pos + o,
            (None, None) => self.src.len(),
        }
    }
}

fn parse_box(content: &str) -> Result<Option<BBox>, ()> {
    let nums: Vec<i64> = content
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<i64>())
        .collect::<Result<_, _>>()
        .map_err(|_| ())?;
    if nums.len() != 4 {
        return Err(());
    }
    if nums.iter().any(|v| *v < 0 || *v > u32::MAX as i64) {
        return Ok(None);
    }
    Ok(BBox::new(nums[0] as u32, nums[1] as u32, nums[2] as u32, nums[3] as u32).ok())
}

fn attempt(src: &str, start: usize) -> Attempt {
    let mut c = Cursor { src, pos: start + 1 };
    if !c.eat_key("text") {
        return Attempt::NotARecord;
    }
    let text = match c.quoted() {
        Some(t) => t,
        None => return Attempt::Malformed { diag: Diagnostic::UnterminatedText { offset: start }, resume: src.len() },
    };
    c.skip_ws();
    if !c.eat(',') || !c.eat_key("box") || !c.eat('[') {
        let diag = Diagnostic::MalformedRecord { offset: start, detail: "expected Box after text".into() };
        return Attempt::Malformed { diag, resume: c.resync() };
    }
    let rest = &src[c.pos..];
    let close = match rest.find([']', '}', '{']) {
        Some(i) if rest[i..].starts_with(']') => i,
        _ => return Attempt::Malformed { diag: Diagnostic::MalformedBox { offset: start }, resume: c.resync() },
    };
    let bbox = match parse_box(&rest[..close]) {
        Ok(b) => b,
        Err(()) => {
            c.pos += close + 1;
            return Attempt::Malformed { diag: Diagnostic::MalformedBox { offset: start }, resume: c.resync() };
        }
    };
    let box_diag = bbox.is_none().then_some(Diagnostic::BoxOutOfRange { offset: start });
    c.pos += close + 1;
    c.skip_ws();
    if c.eat('}') {
        let q = ParsedQuery { text, bbox, span: (start, c.pos) };
        return Attempt::Parsed { record: Record::Query(q), end: c.pos, diag: box_diag };
    }
    if !c.eat(',') || !c.eat_key("entity") {
        let diag = Diagnostic::MalformedRecord { offset: start, detail: "expected entity or closing brace".into() };
        return Attempt::Malformed { diag, resume: c.resync() };
    }
    let rest = &src[c.pos..];
    let end = match rest.find(['}', '{', '\n']) {
        Some(i) if rest[i..].starts_with('}') => i,
        _ => {
            let diag = Diagnostic::MalformedRecord { offset: start, detail: "unterminated entity".into() };
            return Attempt::Malformed { diag, resume: c.resync() };
        }
    };
    let label = rest[..end].trim().trim_matches('"').trim().to_string();
    c.pos += end + 1;
    if label.is_empty() {
        let diag = Diagnostic::MalformedRecord { offset: start, detail: "empty entity".into() };
        return Attempt::Malformed { diag, resume: c.pos };
    }
    let e = ParsedEntity { text, bbox, label, span: (start, c.pos) };
    Attempt::Parsed { record: Record::Labeled(e), end: c.pos, diag: box_diag }
}

/// Scan `raw` for `{text:"…",Box:[…],entity:…}` records.
///
/// Well-formed unlabeled records land in `queries`; malformed fragments are
/// skipped with a diagnostic and scanning continues after them.
pub fn parse_labeled_segments(raw: &str) -> ParseOutput {
    let mut out = ParseOutput::default();
    let mut i = 0;
    while let Some(rel) = raw[i..].find('{') {
        let start = i + rel;
        match attempt(raw, start) {
            Attempt::Parsed { record, end, diag } => {
                match record {
                    Record::Labeled(e) => out.entities.push(e),
                    Record::Query(q) => out.queries.push(q),
                }
                out.diagnostics.extend(diag);
                i = end;
            }
            Attempt::NotARecord => i = start + 1,
            Attempt::Malformed { diag, resume } => {
                out.diagnostics.push(diag);
                i = resume.max(start + 1);
            }
        }
    }
    out
}

/// Grouped receipt answer: one list per key field, in answer order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SroieAnswer {
    pub company: Vec<String>,
    pub address: Vec<String>,
    pub date: Vec<String>,
    pub total: Vec<String>,
}

/// Positional order of the answer groups.
pub const SROIE_GROUP_ORDER: [&str; 4] = ["company", "address", "total", "date"];

impl SroieAnswer {
    pub fn field_mut(&mut self, name: &str) -> Option<&mut Vec<String>> {
        match name {
            "company" => Some(&mut self.company),
            "address" => Some(&mut self.address),
            "date" => Some(&mut self.date),
            "total" => Some(&mut self.total),
            _ => None,
        }
    }

    pub fn field(&self, name: &str) -> Option<&[String]> {
        match name {
            "company" => Some(&self.company),
            "address" => Some(&self.address),
            "date" => Some(&self.date),
            "total" => Some(&self.total),
            _ => None,
        }
    }

    /// Render in the grouped answer format, one group per line.
    pub fn render(&self) -> String {
        SROIE_GROUP_ORDER
            .iter()
            .map(|f| crate::render::quoted_group(self.field(f).unwrap().iter().map(String::as_str)))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Gold answer from a labeled document, values in segment order.
    pub fn from_gold(segments: &[Segment]) -> SroieAnswer {
        let mut a = SroieAnswer::default();
        for s in segments {
            if let Some(v) = s.gold_label.as_deref().and_then(|l| a.field_mut(l)) {
                v.push(s.text.clone());
            }
        }
        a
    }
}

fn line_keyword(line: &str) -> Option<&'static str> {
    let t = line.trim_start().to_ascii_lowercase();
    SROIE_GROUP_ORDER.into_iter().find(|k| t.strip_prefix(k).map(|r| r.trim_start().starts_with(':')).unwrap_or(false))
}

/// Parse four period-terminated groups of `{"…"}` values.
///
/// Groups map positionally to company, address, total, date. A line that
/// starts with `company:` (etc.) assigns its group to that field instead, and
/// the remaining groups fill the unclaimed fields in order.
pub fn parse_sroie_grouped(raw: &str) -> (SroieAnswer, Vec<Diagnostic>) {
    let mut groups: Vec<(Option<&'static str>, Vec<String>)> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut keyword: Option<&'static str> = None;
    let mut c = Cursor { src: raw, pos: 0 };
    let mut at_line_start = true;
    while let Some(ch) = c.peek() {
        if at_line_start {
            if let Some(k) = line_keyword(&raw[c.pos..raw[c.pos..].find('\n').map_or(raw.len(), |i| c.pos + i)]) {
                keyword = Some(k);
                let colon = raw[c.pos..].find(':').unwrap();
                c.pos += colon + 1;
                at_line_start = false;
                continue;
            }
            at_line_start = false;
        }
        match ch {
            '{' => {
                let save = c.pos;
                c.bump();
                c.skip_ws();
                if c.peek() == Some('"') {
                    match c.quoted() {
                        Some(v) => {
                            current.push(v);
                            c.skip_ws();
                            c.eat('}');
                        }
                        None => c.pos = raw.len(),
                    }
                } else {
                    c.pos = save + 1;
                }
            }
            '.' => {
                c.bump();
                groups.push((keyword.take(), std::mem::take(&mut current)));
            }
            '\n' => {
                c.bump();
                at_line_start = true;
            }
            _ => {
                c.bump();
            }
        }
    }
    if !current.is_empty() {
        groups.push((keyword.take(), current));
    }

    let mut answer = SroieAnswer::default();
    let mut diags = Vec::new();
    let free: Vec<&str> =
        SROIE_GROUP_ORDER.into_iter().filter(|f| !groups.iter().any(|(k, _)| *k == Some(*f))).collect();
    let mut positional = 0usize;
    for (idx, (kw, values)) in groups.into_iter().enumerate() {
        let field = match kw {
            Some(k) => k,
            None => {
                let f = free.get(positional).copied();
                positional += 1;
                match f {
                    Some(f) => f,
                    None => {
                        diags.push(Diagnostic::ExtraGroup { index: idx });
                        continue;
                    }
                }
            }
        };
        answer.field_mut(field).unwrap().extend(values);
    }
    (answer, diags)
}

/// Set `predicted_label` on every segment of `chunk` from parsed entities.
///
/// Matching is by exact `(text, box)`, then by text with each box
/// coordinate within ±2. Each entity is used at most once.
pub fn align_predictions(
    entities: &[ParsedEntity],
    chunk: &[Segment],
    schema: &LabelSchema,
) -> (Vec<Segment>, Vec<Diagnostic>) {
    const BOX_TOLERANCE: u32 = 2;
    let mut by_key: HashMap<(String, BBox), VecDeque<usize>> = HashMap::new();
    let mut by_text: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, e) in entities.iter().enumerate() {
        let t = normalize_text(&e.text);
        if let Some(b) = e.bbox {
            by_key.entry((t.clone(), b)).or_default().push_back(i);
        }
        by_text.entry(t).or_default().push(i);
    }
    let mut used = vec![false; entities.len()];
    let mut diags = Vec::new();
    let mut out = Vec::with_capacity(chunk.len());
    for seg in chunk {
        let mut hit = None;
        if let Some(q) = by_key.get_mut(&(seg.text.clone(), seg.bbox)) {
            while let Some(i) = q.pop_front() {
                if !used[i] {
                    hit = Some(i);
                    break;
                }
            }
        }
        if hit.is_none() {
            hit = by_text.get(&seg.text).and_then(|cands| {
                cands
                    .iter()
                    .copied()
                    .find(|&i| !used[i] && entities[i].bbox.is_some_and(|b| b.within(&seg.bbox, BOX_TOLERANCE)))
            });
        }
        let mut s = seg.clone();
        match hit {
            Some(i) => {
                used[i] = true;
                let label = &entities[i].label;
                if schema.contains(label) {
                    s.predicted_label = Some(label.clone());
                } else {
                    diags.push(Diagnostic::UnknownLabel { segment_id: seg.id.clone(), label: label.clone() });
                    s.predicted_label = Some(schema.other_label.clone());
                }
            }
            None => {
                diags.push(Diagnostic::Unmatched { segment_id: seg.id.clone() });
                s.predicted_label = Some(schema.other_label.clone());
            }
        }
        out.push(s);
    }
    (out, diags)
}

/// Label segments from a grouped receipt answer; each value claims the first
/// still-unlabeled segment with equal normalized text.
pub fn align_sroie_answer(
    answer: &SroieAnswer,
    chunk: &[Segment],
    schema: &LabelSchema,
) -> (Vec<Segment>, Vec<Diagnostic>) {
    let mut out: Vec<Segment> = chunk.to_vec();
    let mut claimed = vec![false; out.len()];
    let mut diags = Vec::new();
    for field in SROIE_GROUP_ORDER {
        for value in answer.field(field).unwrap() {
            let v = normalize_text(value);
            match (0..out.len()).find(|&i| !claimed[i] && out[i].text == v) {
                Some(i) => {
                    claimed[i] = true;
                    out[i].predicted_label = Some(field.to_string());
                }
                None => diags.push(Diagnostic::UnmatchedValue { field: field.into(), value: value.clone() }),
            }
        }
    }
    for (i, s) in out.iter_mut().enumerate() {
        if !claimed[i] {
            s.predicted_label = Some(schema.other_label.clone());
        }
    }
    (out, diags)
}
