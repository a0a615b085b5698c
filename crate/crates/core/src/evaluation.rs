//! Entity-level precision, recall and F1.
//!
//! A segment is one entity. For a label `L` other than the schema's other
//! label: tp when gold = predicted = L, fp when predicted = L ≠ gold, fn
//! when gold = L ≠ predicted. Micro scores sum the per-label counts.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::{Diagnostic, SroieAnswer, SROIE_GROUP_ORDER};
use crate::types::{Document, LabelSchema, Segment};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("predictions and gold do not cover the same segments; missing: {}", missing.join(", "))]
    CoverageMismatch { missing: Vec<String> },
    #[error("reports use different label sets: {detail}")]
    SchemaMismatch { detail: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// One entity per segment.
    #[default]
    Segment,
    /// One entity per receipt key field (receipt datasets only).
    SroieField,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }

    fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub label: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Score {
    fn from_counts(label: &str, c: &Counts) -> Self {
        Self {
            label: label.into(),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub other_label: String,
    /// Per-label scores in schema order, then any extra labels seen in the data.
    pub per_label: Vec<Score>,
    pub micro: Score,
    pub n_documents: usize,
    pub n_segments: usize,
    /// Diagnostic counts by kind.
    #[serde(default)]
    pub diagnostics: BTreeMap<String, u64>,
}

impl EvalReport {
    pub fn label(&self, label: &str) -> Option<&Score> {
        self.per_label.iter().find(|s| s.label == label)
    }

    pub fn with_diagnostics<'a>(mut self, diags: impl IntoIterator<Item = &'a Diagnostic>) -> Self {
        for d in diags {
            *self.diagnostics.entry(d.kind().to_string()).or_default() += 1;
        }
        self
    }

    /// Fixed-width text table, rows in report order, micro last.
    pub fn table(&self) -> String {
        let w = self.per_label.iter().map(|s| s.label.len()).chain([5]).max().unwrap();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<w$}  {:>6} {:>6} {:>6}  {:>9} {:>9} {:>9}",
            "label", "tp", "fp", "fn", "precision", "recall", "f1"
        );
        let row = |out: &mut String, s: &Score| {
            let _ = writeln!(
                out,
                "{:<w$}  {:>6} {:>6} {:>6}  {:>9.4} {:>9.4} {:>9.4}",
                s.label, s.tp, s.fp, s.fn_, s.precision, s.recall, s.f1
            );
        };
        for s in &self.per_label {
            row(&mut out, s);
        }
        row(&mut out, &self.micro);
        let _ = writeln!(out, "documents: {}  segments: {}", self.n_documents, self.n_segments);
        for (k, v) in &self.diagnostics {
            let _ = writeln!(out, "diagnostic {k}: {v}");
        }
        out
    }
}

/// Tally (gold, predicted) pairs into a report.
pub fn score_pairs<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    schema: &LabelSchema,
) -> (Vec<Score>, Score, usize) {
    let other = schema.other_label.as_str();
    let mut counts: BTreeMap<&str, Counts> = BTreeMap::new();
    let mut n = 0;
    for (g, p) in pairs {
        n += 1;
        if g == p {
            if g != other {
                counts.entry(g).or_default().tp += 1;
            }
            continue;
        }
        if p != other {
            counts.entry(p).or_default().fp += 1;
        }
        if g != other {
            counts.entry(g).or_default().fn_ += 1;
        }
    }
    let mut per_label = Vec::new();
    let mut micro = Counts::default();
    for l in schema.entity_labels() {
        let c = counts.remove(l).unwrap_or_default();
        micro.add(&c);
        per_label.push(Score::from_counts(l, &c));
    }
    for (l, c) in counts {
        micro.add(&c);
        per_label.push(Score::from_counts(l, &c));
    }
    (per_label, Score::from_counts("micro", &micro), n)
}

fn coverage<'a>(
    pred_docs: &'a [Document],
    gold_docs: &'a [Document],
) -> Result<Vec<(&'a Document, &'a Document)>, EvalError> {
    let pred: HashMap<&str, &Document> = pred_docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let gold_ids: std::collections::HashSet<&str> = gold_docs.iter().map(|d| d.doc_id.as_str()).collect();
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for g in gold_docs {
        match pred.get(g.doc_id.as_str()) {
            Some(p) => pairs.push((*p, g)),
            None => missing.push(format!("{} (no prediction)", g.doc_id)),
        }
    }
    for p in pred_docs {
        if !gold_ids.contains(p.doc_id.as_str()) {
            missing.push(format!("{} (no gold)", p.doc_id));
        }
    }
    for (p, g) in &pairs {
        let pseg: HashMap<&str, &Segment> = p.segments.iter().map(|s| (s.id.as_str(), s)).collect();
        for s in &g.segments {
            match pseg.get(s.id.as_str()) {
                None => missing.push(format!("{}/{} (no prediction)", g.doc_id, s.id)),
                Some(ps) if ps.predicted_label.is_none() => {
                    missing.push(format!("{}/{} (unlabeled prediction)", g.doc_id, s.id))
                }
                Some(_) => {}
            }
            if s.gold_label.is_none() {
                missing.push(format!("{}/{} (no gold label)", g.doc_id, s.id));
            }
        }
        if p.segments.len() != g.segments.len() {
            let gseg: std::collections::HashSet<&str> = g.segments.iter().map(|s| s.id.as_str()).collect();
            for s in &p.segments {
                if !gseg.contains(s.id.as_str()) {
                    missing.push(format!("{}/{} (no gold)", p.doc_id, s.id));
                }
            }
        }
    }
    if missing.is_empty() {
        Ok(pairs)
    } else {
        Err(EvalError::CoverageMismatch { missing })
    }
}

/// Segment-level entity F1 of `pred_docs` (predicted labels) against `gold_docs` (gold labels).
pub fn entity_f1(
    pred_docs: &[Document],
    gold_docs: &[Document],
    schema: &LabelSchema,
) -> Result<EvalReport, EvalError> {
    let pairs = coverage(pred_docs, gold_docs)?;
    let mut labels: Vec<(&str, &str)> = Vec::new();
    for (p, g) in &pairs {
        let pseg: HashMap<&str, &Segment> = p.segments.iter().map(|s| (s.id.as_str(), s)).collect();
        for s in &g.segments {
            let pl = pseg[s.id.as_str()].predicted_label.as_deref().unwrap();
            labels.push((s.gold_label.as_deref().unwrap(), pl));
        }
    }
    let (per_label, micro, n) = score_pairs(labels, schema);
    Ok(EvalReport {
        mode: EvalMode::Segment,
        other_label: schema.other_label.clone(),
        per_label,
        micro,
        n_documents: pairs.len(),
        n_segments: n,
        diagnostics: BTreeMap::new(),
    })
}

fn distinct(values: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for v in values {
        if !out.contains(v) {
            out.push(v.clone());
        }
    }
    out
}

/// Receipt key-field F1: per document and field, the distinct values in
/// reading order form one entity; it is a tp when prediction and gold agree.
pub fn sroie_field_f1(
    pred_docs: &[Document],
    gold_docs: &[Document],
    schema: &LabelSchema,
) -> Result<EvalReport, EvalError> {
    let pairs = coverage(pred_docs, gold_docs)?;
    let mut counts: BTreeMap<&str, Counts> = BTreeMap::new();
    let mut n_segments = 0;
    for (p, g) in &pairs {
        n_segments += g.segments.len();
        let gold = SroieAnswer::from_gold(&g.segments);
        let by_id: HashMap<&str, &Segment> = p.segments.iter().map(|s| (s.id.as_str(), s)).collect();
        let mut pred = SroieAnswer::default();
        for s in &g.segments {
            let ps = by_id[s.id.as_str()];
            if let Some(v) = ps.predicted_label.as_deref().and_then(|l| pred.field_mut(l)) {
                v.push(ps.text.clone());
            }
        }
        for f in SROIE_GROUP_ORDER {
            let gv = distinct(gold.field(f).unwrap());
            let pv = distinct(pred.field(f).unwrap());
            let c = counts.entry(f).or_default();
            match (gv.is_empty(), pv.is_empty()) {
                (true, true) => {}
                (false, false) if gv == pv => c.tp += 1,
                _ => {
                    c.fp += u64::from(!pv.is_empty());
                    c.fn_ += u64::from(!gv.is_empty());
                }
            }
        }
    }
    let mut per_label = Vec::new();
    let mut micro = Counts::default();
    for l in schema.entity_labels() {
        let c = counts.get(l).copied().unwrap_or_default();
        micro.add(&c);
        per_label.push(Score::from_counts(l, &c));
    }
    Ok(EvalReport {
        mode: EvalMode::SroieField,
        other_label: schema.other_label.clone(),
        per_label,
        micro: Score::from_counts("micro", &micro),
        n_documents: pairs.len(),
        n_segments,
        diagnostics: BTreeMap::new(),
    })
}

pub fn evaluate(
    pred_docs: &[Document],
    gold_docs: &[Document],
    schema: &LabelSchema,
    mode: EvalMode,
) -> Result<EvalReport, EvalError> {
    match mode {
        EvalMode::Segment => entity_f1(pred_docs, gold_docs, schema),
        EvalMode::SroieField => sroie_field_f1(pred_docs, gold_docs, schema),
    }
}

/// Mean of two percentages, rounded half-up to hundredths.
pub fn average_percent(a: f64, b: f64) -> f64 {
    let ha = (a * 100.0).round() as i64;
    let hb = (b * 100.0).round() as i64;
    let sum = ha + hb;
    (sum + sum.signum()).div_euclid(2) as f64 / 100.0
}

/// F1 as a percentage rounded to hundredths.
pub fn percent(f: f64) -> f64 {
    (f * 10000.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    /// F1 percentages, rounded to hundredths.
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    pub average: f64,
}

/// Side-by-side scores of two runs (typically ID and OOD).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub micro: ComparisonRow,
}

fn row(label: &str, a: f64, b: f64) -> ComparisonRow {
    let (pa, pb) = (percent(a), percent(b));
    ComparisonRow {
        label: label.into(),
        a: pa,
        b: pb,
        delta: ((pb - pa) * 100.0).round() / 100.0,
        average: average_percent(pa, pb),
    }
}

pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<Comparison, EvalError> {
    let la: Vec<&str> = a.per_label.iter().map(|s| s.label.as_str()).collect();
    let lb: Vec<&str> = b.per_label.iter().map(|s| s.label.as_str()).collect();
    let mut sa = la.clone();
    let mut sb = lb.clone();
    sa.sort_unstable();
    sb.sort_unstable();
    if sa != sb || a.other_label != b.other_label || a.mode != b.mode {
        return Err(EvalError::SchemaMismatch { detail: format!("[{}] vs [{}]", la.join(", "), lb.join(", ")) });
    }
    let rows = a.per_label.iter().map(|s| row(&s.label, s.f1, b.label(&s.label).unwrap().f1)).collect();
    Ok(Comparison { rows, micro: row("micro", a.micro.f1, b.micro.f1) })
}

impl Comparison {
    pub fn table(&self, a_name: &str, b_name: &str) -> String {
        let w = self.rows.iter().map(|r| r.label.len()).chain([5]).max().unwrap();
        let mut out = String::new();
        let _ = writeln!(out, "{:<w$}  {:>8} {:>8} {:>8} {:>8}", "label", a_name, b_name, "delta", "average");
        for r in self.rows.iter().chain(std::iter::once(&self.micro)) {
            let _ = writeln!(out, "{:<w$}  {:>8.2} {:>8.2} {:>8.2} {:>8.2}", r.label, r.a, r.b, r.delta, r.average);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BBox, Dataset, Split};

    fn docs(gold: &[&str], pred: &[&str]) -> (Vec<Document>, Vec<Document>) {
        let segs: Vec<Segment> = gold
            .iter()
            .enumerate()
            .map(|(i, g)| Segment::new(i.to_string(), &format!("t{i}"), BBox::new(0, 0, 1, 1).unwrap()).with_gold(*g))
            .collect();
        let g = Document::new("d", Dataset::Funsd, Split::Test, segs);
        let mut p = g.clone();
        for (s, l) in p.segments.iter_mut().zip(pred) {
            s.predicted_label = Some(l.to_string());
        }
        (vec![p], vec![g])
    }

    #[test]
    fn perfect_predictions() {
        let (p, g) = docs(&["question", "answer", "other"], &["question", "answer", "other"]);
        let r = entity_f1(&p, &g, &LabelSchema::funsd()).unwrap();
        assert_eq!(r.micro.f1, 1.0);
    }

    #[test]
    fn hand_computed_three_questions() {
        let (p, g) = docs(&["question", "question", "question"], &["question", "answer", "question"]);
        let r = entity_f1(&p, &g, &LabelSchema::funsd()).unwrap();
        let q = r.label("question").unwrap();
        assert_eq!((q.tp, q.fp, q.fn_), (2, 0, 1));
        let a = r.label("answer").unwrap();
        assert_eq!((a.tp, a.fp, a.fn_), (0, 1, 0));
        // micro: tp 2, fp 1, fn 1 -> P = R = 2/3
        assert!((r.micro.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_other_scores_zero() {
        let (p, g) = docs(&["question", "answer"], &["other", "other"]);
        let r = entity_f1(&p, &g, &LabelSchema::funsd()).unwrap();
        assert_eq!((r.micro.precision, r.micro.recall, r.micro.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn coverage_mismatch_names_ids() {
        let (mut p, g) = docs(&["question", "answer"], &["question", "answer"]);
        p[0].segments.pop();
        match entity_f1(&p, &g, &LabelSchema::funsd()) {
            Err(EvalError::CoverageMismatch { missing }) => assert_eq!(missing, ["d/1 (no prediction)"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn table_one_average() {
        assert_eq!(average_percent(90.32, 88.71), 89.52);
        assert_eq!(average_percent(97.88, 97.88), 97.88);
    }

    #[test]
    fn compare_identical_and_mismatch() {
        let (p, g) = docs(&["question", "answer"], &["question", "other"]);
        let r = entity_f1(&p, &g, &LabelSchema::funsd()).unwrap();
        let c = compare_reports(&r, &r).unwrap();
        assert!(c.rows.iter().chain([&c.micro]).all(|row| row.delta == 0.0));
        let mut r2 = r.clone();
        r2.per_label.retain(|s| s.label != "header");
        assert!(matches!(compare_reports(&r, &r2), Err(EvalError::SchemaMismatch { .. })));
    }

    #[test]
    fn swap_exchanges_precision_and_recall() {
        let (p, g) = docs(&["question", "answer", "other", "header"], &["answer", "answer", "question", "other"]);
        let r = entity_f1(&p, &g, &LabelSchema::funsd()).unwrap();
        let mut sg = g[0].clone();
        let mut sp = g[0].clone();
        for i in 0..sg.segments.len() {
            sg.segments[i].gold_label = p[0].segments[i].predicted_label.clone();
            sp.segments[i].predicted_label = g[0].segments[i].gold_label.clone();
        }
        let swapped = entity_f1(&[sp], &[sg], &LabelSchema::funsd()).unwrap();
        assert_eq!(r.micro.precision, swapped.micro.recall);
        assert_eq!(r.micro.recall, swapped.micro.precision);
    }

    #[test]
    fn sroie_field_mode() {
        let segs = vec![
            Segment::new("0", "SHOP", BBox::new(0, 0, 9, 9).unwrap()).with_gold("company"),
            Segment::new("1", "8.50", BBox::new(0, 20, 9, 29).unwrap()).with_gold("total"),
            Segment::new("2", "8.50", BBox::new(0, 40, 9, 49).unwrap()).with_gold("total"),
            Segment::new("3", "x", BBox::new(0, 60, 9, 69).unwrap()).with_gold("other"),
        ];
        let g = Document::new("r", Dataset::Sroie, Split::Test, segs);
        let mut p = g.clone();
        for (s, l) in p.segments.iter_mut().zip(["company", "total", "other", "date"]) {
            s.predicted_label = Some(l.into());
        }
        let r = sroie_field_f1(&[p], &[g], &LabelSchema::sroie()).unwrap();
        assert_eq!(r.label("company").unwrap().tp, 1);
        assert_eq!(r.label("total").unwrap().tp, 1);
        assert_eq!(r.label("date").unwrap().fp, 1);
    }

    #[test]
    fn table_lists_every_label() {
        let (p, g) = docs(&["question"], &["question"]);
        let t = entity_f1(&p, &g, &LabelSchema::funsd()).unwrap().table();
        for l in ["question", "answer", "header", "micro"] {
            assert!(t.contains(l));
        }
    }
}
