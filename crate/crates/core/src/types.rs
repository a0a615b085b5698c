//! Shared domain types: boxes on the 0-1000 grid, segments, documents and
//! label schemas, plus normalization and validation helpers.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of the canonical coordinate grid.
pub const GRID: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BoxError {
    #[error("coordinate {value} out of bounds 0..={limit}")]
    OutOfBounds { value: i64, limit: i64 },
    #[error("degenerate box: {0}")]
    Degenerate(String),
    #[error("page dimensions must be positive (got {width}x{height})")]
    BadPage { width: i64, height: i64 },
    #[error("cannot parse box from {0:?}")]
    Parse(String),
}

/// Axis-aligned box on the 0-1000 grid.
///
/// Construct through [`BBox::new`] so the ordering and range invariants hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self, BoxError> {
        for v in [x0, y0, x1, y1] {
            if v > GRID {
                return Err(BoxError::OutOfBounds { value: v as i64, limit: GRID as i64 });
            }
        }
        if x0 > x1 || y0 > y1 {
            return Err(BoxError::Degenerate(format!("[{x0} {y0} {x1} {y1}]")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn x0(&self) -> u32 {
        self.x0
    }
    pub fn y0(&self) -> u32 {
        self.y0
    }
    pub fn x1(&self) -> u32 {
        self.x1
    }
    pub fn y1(&self) -> u32 {
        self.y1
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn coords(&self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    /// True when every coordinate differs by at most `tol`.
    pub fn within(&self, other: &BBox, tol: u32) -> bool {
        self.coords().iter().zip(other.coords().iter()).all(|(a, b)| a.abs_diff(*b) <= tol)
    }
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = BoxError;
    fn try_from(c: [u32; 4]) -> Result<Self, Self::Error> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{} {} {} {}]", self.x0, self.y0, self.x1, self.y1)
    }
}

impl FromStr for BBox {
    type Err = BoxError;

    /// Parses `"[x0 y0 x1 y1]"`; any run of whitespace separates the numbers.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let inner = s
            .trim()
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| BoxError::Parse(s.to_string()))?;
        let nums: Vec<u32> = inner
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|_| BoxError::Parse(s.to_string()))?;
        if nums.len() != 4 {
            return Err(BoxError::Parse(s.to_string()));
        }
        BBox::new(nums[0], nums[1], nums[2], nums[3])
    }
}

/// Scale raw page coordinates onto the 0-1000 grid, rounding half-up.
pub fn normalize_box(raw: [i64; 4], page_width: i64, page_height: i64) -> Result<BBox, BoxError> {
    if page_width <= 0 || page_height <= 0 {
        return Err(BoxError::BadPage { width: page_width, height: page_height });
    }
    let [x0, y0, x1, y1] = raw;
    for (v, limit) in [(x0, page_width), (x1, page_width), (y0, page_height), (y1, page_height)] {
        if v < 0 || v > limit {
            return Err(BoxError::OutOfBounds { value: v, limit });
        }
    }
    if x0 > x1 || y0 > y1 {
        return Err(BoxError::Degenerate(format!("[{x0} {y0} {x1} {y1}]")));
    }
    let scale = |v: i64, dim: i64| -> u32 {
        // half-up on exact integers: floor((2*v*G + dim) / (2*dim))
        ((2 * v * GRID as i64 + dim) / (2 * dim)) as u32
    };
    BBox::new(scale(x0, page_width), scale(y0, page_height), scale(x1, page_width), scale(y1, page_height))
}

/// Collapse whitespace runs to single spaces, drop control characters, trim.
pub fn normalize_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for ch in raw.chars() {
        if ch.is_whitespace() {
            pending_space = true;
        } else if ch.is_control() {
            continue;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(ch);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Dataset {
    Funsd,
    Cord,
    Sroie,
    Custom,
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::Funsd => "FUNSD",
            Dataset::Cord => "CORD",
            Dataset::Sroie => "SROIE",
            Dataset::Custom => "CUSTOM",
        })
    }
}

impl FromStr for Dataset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "FUNSD" => Ok(Dataset::Funsd),
            "CORD" => Ok(Dataset::Cord),
            "SROIE" => Ok(Dataset::Sroie),
            "CUSTOM" => Ok(Dataset::Custom),
            other => Err(format!("unknown dataset {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One text span with its box; the unit of labeling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_label: Option<String>,
}

impl Segment {
    pub fn new(id: impl Into<String>, text: &str, bbox: BBox) -> Self {
        Self { id: id.into(), text: normalize_text(text), bbox, gold_label: None, predicted_label: None }
    }

    pub fn with_gold(mut self, label: impl Into<String>) -> Self {
        self.gold_label = Some(label.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub dataset: Dataset,
    pub split: Split,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub ordered: bool,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, dataset: Dataset, split: Split, segments: Vec<Segment>) -> Self {
        Self { doc_id: doc_id.into(), dataset, split, segments, ordered: false }
    }

    /// Plain text of the document in its current segment order.
    pub fn full_text(&self) -> String {
        self.segments.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n")
    }

    pub fn segment(&self, id: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }

    /// Copy with every predicted label cleared.
    pub fn without_predictions(&self) -> Document {
        let mut d = self.clone();
        for s in &mut d.segments {
            s.predicted_label = None;
        }
        d
    }
}

/// Label vocabulary for one dataset, with natural-language descriptions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub dataset: Dataset,
    pub labels: Vec<String>,
    pub descriptions: BTreeMap<String, String>,
    pub other_label: String,
    /// Whether `other_label` is a real annotated class (FUNSD) rather than
    /// filler for unaligned lines (SROIE). Controls whether the label
    /// enumeration mentions it.
    #[serde(default)]
    pub other_is_annotated: bool,
}

impl LabelSchema {
    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn description(&self, label: &str) -> Option<&str> {
        self.descriptions.get(label).map(String::as_str)
    }

    /// All labels except `other_label`.
    pub fn entity_labels(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str).filter(move |l| *l != self.other_label)
    }

    /// True when every description is just the label itself.
    pub fn is_natural(&self) -> bool {
        self.labels.iter().all(|l| self.description(l) == Some(l.as_str()))
    }

    pub fn for_dataset(dataset: Dataset) -> LabelSchema {
        match dataset {
            Dataset::Funsd => Self::funsd(),
            Dataset::Cord => Self::cord(),
            Dataset::Sroie => Self::sroie(),
            Dataset::Custom => Self::natural(Dataset::Custom, &["other"], "other", true),
        }
    }

    pub fn funsd() -> LabelSchema {
        Self::natural(Dataset::Funsd, &["question", "answer", "header", "other"], "other", true)
    }

    pub fn sroie() -> LabelSchema {
        Self::natural(Dataset::Sroie, &["company", "address", "date", "total", "other"], "other", false)
    }

    pub fn cord() -> LabelSchema {
        let mut labels = Vec::new();
        let mut descriptions = BTreeMap::new();
        for (label, desc) in CORD_LABELS {
            labels.push(label.to_string());
            descriptions.insert(label.to_string(), desc.to_string());
        }
        labels.push("other".into());
        descriptions.insert("other".into(), "text that belongs to none of the labels above".into());
        LabelSchema {
            dataset: Dataset::Cord,
            labels,
            descriptions,
            other_label: "other".into(),
            other_is_annotated: false,
        }
    }

    /// Schema whose descriptions equal the labels.
    pub fn natural(dataset: Dataset, labels: &[&str], other: &str, other_is_annotated: bool) -> LabelSchema {
        LabelSchema {
            dataset,
            labels: labels.iter().map(|s| s.to_string()).collect(),
            descriptions: labels.iter().map(|s| (s.to_string(), s.to_string())).collect(),
            other_label: other.to_string(),
            other_is_annotated,
        }
    }

    pub fn check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !self.contains(&self.other_label) {
            problems.push(format!("other label {:?} not in labels", self.other_label));
        }
        let mut seen = HashSet::new();
        for l in &self.labels {
            if !seen.insert(l) {
                problems.push(format!("duplicate label {l:?}"));
            }
            if !self.descriptions.contains_key(l) {
                problems.push(format!("label {l:?} has no description"));
            }
        }
        for k in self.descriptions.keys() {
            if !self.contains(k) {
                problems.push(format!("description for unknown label {k:?}"));
            }
        }
        problems
    }
}

/// The 30 CORD labels with descriptions (quoted examples where the dataset
/// offers no prose description).
pub const CORD_LABELS: [(&str, &str); 30] = [
    ("MENU.NM", "name of menu"),
    ("MENU.NUM", "identification of menu"),
    ("MENU.UNITPRICE", "unit price of menu"),
    ("MENU.CNT", "quantity of menu"),
    ("MENU.DISCOUNTPRICE", "discounted price of menu"),
    ("MENU.PRICE", "total price of menu"),
    ("MENU.ITEMSUBTOTAL", "price of each menu after discount applied"),
    ("MENU.VATYN", "\"Sales included PB1\""),
    ("MENU.ETC", "\"TMBHN CUP\""),
    ("MENU.SUB_NM", "name of submenu"),
    ("MENU.SUB_UNITPRICE", "unit price of submenu"),
    ("MENU.SUB_CNT", "quantity of submenu"),
    ("MENU.SUB_PRICE", "total price of submenu"),
    ("MENU.SUB_ETC", "\"Gula Murni 100%\""),
    ("VOID_MENU.NM", "\"SOP AYM BNG\""),
    ("VOID_MENU.PRICE", "price of void menu"),
    ("SUB_TOTAL.SUBTOTAL_PRICE", "subtotal price"),
    ("SUB_TOTAL.DISCOUNT_PRICE", "discounted price in total"),
    ("SUB_TOTAL.SERVICE_PRICE", "service charge"),
    ("SUB_TOTAL.OTHERSVC_PRICE", "\"BIAYA TAMBAHAN 27,300\""),
    ("SUB_TOTAL.TAX_PRICE", "tax amount"),
    ("SUB_TOTAL.ETC", "etc"),
    ("TOTAL.TOTAL_PRICE", "total price"),
    ("TOTAL.TOTAL_ETC", "\"Coupon 100,000\""),
    ("TOTAL.CASHPRICE", "amount of price paid in cash"),
    ("TOTAL.CHANGEPRICE", "amount of change in cash"),
    ("TOTAL.CREDITCARDPRICE", "amount of price paid in credit/debit card"),
    ("TOTAL.EMONEYPRICE", "amount of price paid in emoney, point"),
    ("TOTAL.MENUTYPE_CNT", "total count of type of menu"),
    ("TOTAL.MENUQTY_CNT", "total count of quantity"),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DuplicateId { id: String },
    EmptyText { id: String },
    BadText { id: String },
    UnknownLabel { id: String, label: String },
    UnknownPrediction { id: String, label: String },
    DatasetMismatch { expected: Dataset, found: Dataset },
    SchemaProblem { detail: String },
}

/// Check Segment/Document invariants against `schema`; returns every violation found.
pub fn validate_document(doc: &Document, schema: &LabelSchema) -> Vec<Violation> {
    let mut out = Vec::new();
    for detail in schema.check() {
        out.push(Violation::SchemaProblem { detail });
    }
    if schema.dataset != doc.dataset && schema.dataset != Dataset::Custom {
        out.push(Violation::DatasetMismatch { expected: schema.dataset, found: doc.dataset });
    }
    let mut seen = HashSet::new();
    for seg in &doc.segments {
        if !seen.insert(seg.id.as_str()) {
            out.push(Violation::DuplicateId { id: seg.id.clone() });
        }
        if seg.text.is_empty() {
            out.push(Violation::EmptyText { id: seg.id.clone() });
        } else if seg.text != normalize_text(&seg.text) {
            out.push(Violation::BadText { id: seg.id.clone() });
        }
        if let Some(l) = &seg.gold_label {
            if !schema.contains(l) {
                out.push(Violation::UnknownLabel { id: seg.id.clone(), label: l.clone() });
            }
        }
        if let Some(l) = &seg.predicted_label {
            if !schema.contains(l) {
                out.push(Violation::UnknownPrediction { id: seg.id.clone(), label: l.clone() });
            }
        }
    }
    out
}
