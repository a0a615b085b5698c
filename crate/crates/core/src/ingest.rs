//! Dataset loaders and the line-delimited interchange format.
//!
//! Expected layouts:
//!
//! ```text
//! FUNSD  <root>/{training_data,testing_data}/annotations/*.json   (+ images/*.png)
//! CORD   <root>/{train,dev,test}/json/*.json                      (+ image/*)
//! SROIE  <root>/{train,test}/box/*.txt, entities/*.txt            (+ img/*.jpg)
//! ```
//!
//! Page sizes come from the annotation when it carries one, else from the
//! image header, else from the largest box extent. Raw boxes are clamped to
//! the page before normalization.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::types::{normalize_box, normalize_text, BBox, Dataset, Document, LabelSchema, Segment, Split};

pub const NORMALIZED_FORMAT: &str = "docicl-normalized";
pub const PREDICTIONS_FORMAT: &str = "docicl-predictions";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: malformed annotation ({key})")]
    MalformedAnnotation { path: PathBuf, key: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: expected {expected} v{FORMAT_VERSION}, found {found}")]
    SchemaMismatch { path: PathBuf, expected: &'static str, found: String },
    #[error("{path} line {line}: {detail}")]
    Format { path: PathBuf, line: usize, detail: String },
}

type Result<T> = std::result::Result<T, IngestError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

fn require_dir(root: &Path) -> Result<()> {
    if root.is_dir() {
        return Ok(());
    }
    let source = std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory");
    Err(IngestError::Io { path: root.to_path_buf(), source })
}

fn malformed(path: &Path, key: &str) -> IngestError {
    IngestError::MalformedAnnotation { path: path.to_path_buf(), key: key.to_string() }
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = e.map_err(io_err(dir))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_json(path: &Path) -> Result<Value> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&raw).map_err(|e| malformed(path, &format!("json: {e}")))
}

/// First image next to the annotations (`dir/<stem>.<ext>`) whose header can be read.
fn image_size(dir: &Path, stem: &str) -> Option<(i64, i64)> {
    for ext in ["png", "jpg", "jpeg", "PNG", "JPG", "JPEG"] {
        if let Ok(s) = imagesize::size(dir.join(format!("{stem}.{ext}"))) {
            return Some((s.width as i64, s.height as i64));
        }
    }
    None
}

fn extent(raw: &[[i64; 4]]) -> (i64, i64) {
    let w = raw.iter().map(|b| b[2]).max().unwrap_or(1).max(1);
    let h = raw.iter().map(|b| b[3]).max().unwrap_or(1).max(1);
    (w, h)
}

fn clamp_box(b: [i64; 4], w: i64, h: i64) -> [i64; 4] {
    let cx = |v: i64| v.clamp(0, w);
    let cy = |v: i64| v.clamp(0, h);
    let (x0, x1) = (cx(b[0].min(b[2])), cx(b[0].max(b[2])));
    let (y0, y1) = (cy(b[1].min(b[3])), cy(b[1].max(b[3])));
    [x0, y0, x1, y1]
}

fn to_bbox(path: &Path, raw: [i64; 4], size: (i64, i64)) -> Result<BBox> {
    normalize_box(clamp_box(raw, size.0, size.1), size.0, size.1).map_err(|e| malformed(path, &format!("box: {e}")))
}

fn int_array(v: &Value, path: &Path, key: &str) -> Result<[i64; 4]> {
    let arr = v.as_array().filter(|a| a.len() == 4).ok_or_else(|| malformed(path, key))?;
    let mut out = [0i64; 4];
    for (o, x) in out.iter_mut().zip(arr) {
        *o = x.as_f64().ok_or_else(|| malformed(path, key))?.round() as i64;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// FUNSD

fn funsd_file(path: &Path, images: &Path, split: Split) -> Result<Document> {
    let v = read_json(path)?;
    let form = v.get("form").and_then(Value::as_array).ok_or_else(|| malformed(path, "form"))?;
    let mut raw = Vec::new();
    for (i, entry) in form.iter().enumerate() {
        let id = match entry.get("id") {
            Some(Value::Number(n)) => n.to_string(),
            Some(Value::String(s)) => s.clone(),
            _ => i.to_string(),
        };
        let mut text =
            entry.get("text").and_then(Value::as_str).ok_or_else(|| malformed(path, "form[].text"))?.to_string();
        if normalize_text(&text).is_empty() {
            if let Some(words) = entry.get("words").and_then(Value::as_array) {
                text = words.iter().filter_map(|w| w.get("text").and_then(Value::as_str)).collect::<Vec<_>>().join(" ");
            }
        }
        let bx = int_array(entry.get("box").ok_or_else(|| malformed(path, "form[].box"))?, path, "form[].box")?;
        let label = entry.get("label").and_then(Value::as_str).ok_or_else(|| malformed(path, "form[].label"))?;
        raw.push((id, text, bx, label.to_ascii_lowercase()));
    }
    let boxes: Vec<[i64; 4]> = raw.iter().map(|r| r.2).collect();
    let size = image_size(images, &stem(path)).unwrap_or_else(|| extent(&boxes));
    let schema = LabelSchema::funsd();
    let mut segments = Vec::new();
    for (id, text, bx, label) in raw {
        if normalize_text(&text).is_empty() {
            continue;
        }
        let label = if schema.contains(&label) { label } else { schema.other_label.clone() };
        segments.push(Segment::new(id, &text, to_bbox(path, bx, size)?).with_gold(label));
    }
    Ok(Document::new(stem(path), Dataset::Funsd, split, segments))
}

fn load_dir<F>(files: Vec<PathBuf>, f: F) -> Result<Vec<Document>>
where
    F: Fn(&Path) -> Result<Document> + Sync,
{
    let mut docs: Vec<Document> = files.par_iter().map(|p| f(p)).collect::<Result<_>>()?;
    docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    Ok(docs)
}

/// All FUNSD documents under `root`, training split first.
pub fn load_funsd(root: &Path) -> Result<Vec<Document>> {
    require_dir(root)?;
    let mut out = Vec::new();
    for (sub, split) in [("training_data", Split::Train), ("testing_data", Split::Test)] {
        let base = root.join(sub);
        let images = base.join("images");
        let files = files_with_ext(&base.join("annotations"), "json")?;
        out.extend(load_dir(files, |p| funsd_file(p, &images, split))?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// CORD

/// `menu.nm` becomes `MENU.NM`; deeper paths join their tail with `_`.
pub fn cord_label(category: &str) -> String {
    let mut parts = category.split('.');
    let head = parts.next().unwrap_or("").to_ascii_uppercase();
    let tail: Vec<String> = parts.map(str::to_ascii_uppercase).collect();
    if tail.is_empty() {
        head
    } else {
        format!("{head}.{}", tail.join("_"))
    }
}

fn quad_box(q: &Value, path: &Path) -> Result<[i64; 4]> {
    let get = |k: &str| {
        q.get(k)
            .and_then(Value::as_f64)
            .map(|v| v.round() as i64)
            .ok_or_else(|| malformed(path, "valid_line[].words[].quad"))
    };
    let xs = [get("x1")?, get("x2")?, get("x3")?, get("x4")?];
    let ys = [get("y1")?, get("y2")?, get("y3")?, get("y4")?];
    Ok([*xs.iter().min().unwrap(), *ys.iter().min().unwrap(), *xs.iter().max().unwrap(), *ys.iter().max().unwrap()])
}

fn cord_file(path: &Path, images: &Path, split: Split) -> Result<Document> {
    let v = read_json(path)?;
    let lines = v.get("valid_line").and_then(Value::as_array).ok_or_else(|| malformed(path, "valid_line"))?;
    let schema = LabelSchema::cord();
    let mut raw = Vec::new();
    for line in lines {
        let words = line.get("words").and_then(Value::as_array).ok_or_else(|| malformed(path, "valid_line[].words"))?;
        let category =
            line.get("category").and_then(Value::as_str).ok_or_else(|| malformed(path, "valid_line[].category"))?;
        let mut text = Vec::new();
        let mut bx: Option<[i64; 4]> = None;
        for w in words {
            text.push(w.get("text").and_then(Value::as_str).unwrap_or(""));
            let q = quad_box(w.get("quad").ok_or_else(|| malformed(path, "valid_line[].words[].quad"))?, path)?;
            bx = Some(match bx {
                None => q,
                Some(b) => [b[0].min(q[0]), b[1].min(q[1]), b[2].max(q[2]), b[3].max(q[3])],
            });
        }
        let Some(bx) = bx else { continue };
        let label = cord_label(category);
        let label = if schema.contains(&label) { label } else { schema.other_label.clone() };
        raw.push((text.join(" "), bx, label));
    }
    let meta = v.get("meta").and_then(|m| m.get("image_size"));
    let from_meta = meta
        .and_then(|m| Some((m.get("width")?.as_i64()?, m.get("height")?.as_i64()?)))
        .filter(|(w, h)| *w > 0 && *h > 0);
    let boxes: Vec<[i64; 4]> = raw.iter().map(|r| r.1).collect();
    let size = from_meta.or_else(|| image_size(images, &stem(path))).unwrap_or_else(|| extent(&boxes));
    let mut segments = Vec::new();
    for (text, bx, label) in raw {
        if normalize_text(&text).is_empty() {
            continue;
        }
        let id = segments.len().to_string();
        segments.push(Segment::new(id, &text, to_bbox(path, bx, size)?).with_gold(label));
    }
    Ok(Document::new(stem(path), Dataset::Cord, split, segments))
}

/// CORD documents from one split directory (`train`, `dev` or `test`).
/// `dev` documents are tagged as training documents.
pub fn load_cord_split(root: &Path, dir: &str) -> Result<Vec<Document>> {
    require_dir(root)?;
    let split = if dir == "test" { Split::Test } else { Split::Train };
    let base = root.join(dir);
    let images = base.join("image");
    let files = files_with_ext(&base.join("json"), "json")?;
    load_dir(files, |p| cord_file(p, &images, split))
}

/// CORD train and test documents (the dev split is loaded separately).
pub fn load_cord(root: &Path) -> Result<Vec<Document>> {
    let mut out = load_cord_split(root, "train")?;
    out.extend(load_cord_split(root, "test")?);
    Ok(out)
}

// ---------------------------------------------------------------------------
// SROIE

fn loose(s: &str) -> String {
    normalize_text(s).to_uppercase()
}

/// Label OCR lines from key-field values: exact matches first; a field with
/// no exact match falls back to substring containment in either direction.
/// A line matching several fields takes company, address, date, total in
/// that order.
pub fn align_sroie_lines(lines: &[String], fields: &BTreeMap<String, String>) -> Vec<Option<&'static str>> {
    const PRIORITY: [&str; 4] = ["company", "address", "date", "total"];
    let mut out: Vec<Option<&'static str>> = vec![None; lines.len()];
    let norm: Vec<String> = lines.iter().map(|l| loose(l)).collect();
    for field in PRIORITY {
        let Some(value) = fields.get(field).map(|v| loose(v)).filter(|v| !v.is_empty()) else { continue };
        let exact: Vec<usize> = (0..lines.len()).filter(|&i| out[i].is_none() && norm[i] == value).collect();
        let hits = if exact.is_empty() {
            (0..lines.len())
                .filter(|&i| {
                    out[i].is_none()
                        && !norm[i].is_empty()
                        && ((norm[i].chars().count() >= 3 && value.contains(norm[i].as_str()))
                            || norm[i].contains(value.as_str()))
                })
                .collect()
        } else {
            exact
        };
        for i in hits {
            out[i] = Some(field);
        }
    }
    out
}

fn parse_sroie_box_line(line: &str) -> Option<([i64; 4], String)> {
    let mut parts = line.splitn(9, ',');
    let mut coords = [0i64; 8];
    for c in &mut coords {
        *c = parts.next()?.trim().parse().ok()?;
    }
    let text = parts.next().unwrap_or("").to_string();
    let xs = [coords[0], coords[2], coords[4], coords[6]];
    let ys = [coords[1], coords[3], coords[5], coords[7]];
    Some(([*xs.iter().min()?, *ys.iter().min()?, *xs.iter().max()?, *ys.iter().max()?], text))
}

fn sroie_file(box_path: &Path, entities_dir: &Path, images: &Path, split: Split) -> Result<Document> {
    let raw = fs::read(box_path).map_err(io_err(box_path))?;
    let raw = String::from_utf8_lossy(&raw);
    let mut lines = Vec::new();
    for (i, l) in raw.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let parsed = parse_sroie_box_line(l).ok_or_else(|| malformed(box_path, &format!("line {}", i + 1)))?;
        if !normalize_text(&parsed.1).is_empty() {
            lines.push(parsed);
        }
    }
    let ent_path = entities_dir.join(format!("{}.txt", stem(box_path)));
    let fields: BTreeMap<String, String> = if ent_path.exists() {
        let v = read_json(&ent_path)?;
        let obj = v.as_object().ok_or_else(|| malformed(&ent_path, "object"))?;
        obj.iter().filter_map(|(k, v)| v.as_str().map(|s| (k.to_ascii_lowercase(), s.to_string()))).collect()
    } else {
        BTreeMap::new()
    };
    let texts: Vec<String> = lines.iter().map(|l| l.1.clone()).collect();
    let labels = align_sroie_lines(&texts, &fields);
    let boxes: Vec<[i64; 4]> = lines.iter().map(|l| l.0).collect();
    let size = image_size(images, &stem(box_path)).unwrap_or_else(|| extent(&boxes));
    let mut segments = Vec::new();
    for (i, ((bx, text), label)) in lines.into_iter().zip(labels).enumerate() {
        segments
            .push(Segment::new(i.to_string(), &text, to_bbox(box_path, bx, size)?).with_gold(label.unwrap_or("other")));
    }
    Ok(Document::new(stem(box_path), Dataset::Sroie, split, segments))
}

pub fn load_sroie(root: &Path) -> Result<Vec<Document>> {
    require_dir(root)?;
    let mut out = Vec::new();
    for (sub, split) in [("train", Split::Train), ("test", Split::Test)] {
        let base = root.join(sub);
        let (ents, imgs) = (base.join("entities"), base.join("img"));
        let files = files_with_ext(&base.join("box"), "txt")?;
        out.extend(load_dir(files, |p| sroie_file(p, &ents, &imgs, split))?);
    }
    Ok(out)
}

pub fn load_dataset(dataset: Dataset, root: &Path) -> Result<Vec<Document>> {
    match dataset {
        Dataset::Funsd => load_funsd(root),
        Dataset::Cord => load_cord(root),
        Dataset::Sroie => load_sroie(root),
        Dataset::Custom => load_normalized(root),
    }
}

// ---------------------------------------------------------------------------
// Interchange files

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn write_lines(path: &Path, format: &str, docs: &[Document]) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let header = Header { format: format.into(), version: FORMAT_VERSION };
    writeln!(w, "{}", serde_json::to_string(&header).unwrap()).map_err(io_err(path))?;
    for d in docs {
        writeln!(w, "{}", serde_json::to_string(d).unwrap()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_lines(path: &Path, format: &'static str) -> Result<Vec<Document>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(f).lines();
    let first = match lines.next() {
        Some(l) => l.map_err(io_err(path))?,
        None => {
            return Err(IngestError::SchemaMismatch { path: path.into(), expected: format, found: "empty file".into() })
        }
    };
    let header: Header = serde_json::from_str(&first).map_err(|e| IngestError::Format {
        path: path.into(),
        line: 1,
        detail: e.to_string(),
    })?;
    if header.format != format || header.version != FORMAT_VERSION {
        return Err(IngestError::SchemaMismatch {
            path: path.into(),
            expected: format,
            found: format!("{} v{}", header.format, header.version),
        });
    }
    let mut docs = Vec::new();
    for (i, l) in lines.enumerate() {
        let l = l.map_err(io_err(path))?;
        if l.trim().is_empty() {
            continue;
        }
        let d: Document = serde_json::from_str(&l).map_err(|e| IngestError::Format {
            path: path.into(),
            line: i + 2,
            detail: e.to_string(),
        })?;
        docs.push(d);
    }
    Ok(docs)
}

/// Write gold documents; predicted labels are not persisted.
pub fn write_normalized(docs: &[Document], path: &Path) -> Result<()> {
    let stripped: Vec<Document> = docs.iter().map(Document::without_predictions).collect();
    write_lines(path, NORMALIZED_FORMAT, &stripped)
}

pub fn load_normalized(path: &Path) -> Result<Vec<Document>> {
    read_lines(path, NORMALIZED_FORMAT)
}

/// Write documents with their predicted labels.
pub fn write_predictions(docs: &[Document], path: &Path) -> Result<()> {
    write_lines(path, PREDICTIONS_FORMAT, docs)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Document>> {
    read_lines(path, PREDICTIONS_FORMAT)
}
