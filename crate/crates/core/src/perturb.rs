//! Out-of-distribution test documents: visually similar substitutions and
//! single-character deletions, decided independently per word.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{normalize_text, Document};

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("invalid perturbation spec: {0}")]
    InvalidSpec(String),
    #[error("lexicon line {line}: {detail}")]
    Lexicon { line: usize, detail: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Built-in confusions. Keys of one or two characters replace one
/// occurrence inside a word; longer keys replace the whole word.
pub const DEFAULT_LEXICON: [(&str, &str); 14] = [
    ("l", "I"),
    ("I", "l"),
    ("O", "0"),
    ("0", "O"),
    ("o", "0"),
    ("rn", "m"),
    ("m", "rn"),
    ("1", "l"),
    ("S", "5"),
    ("5", "S"),
    ("B", "8"),
    ("cl", "d"),
    ("vv", "w"),
    ("e", "c"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub seed: u64,
    pub p_char_delete: f64,
    pub p_substitute: f64,
    pub substitution_table: BTreeMap<String, String>,
    pub min_word_len: usize,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            p_char_delete: 0.15,
            p_substitute: 0.15,
            substitution_table: DEFAULT_LEXICON.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            min_word_len: 3,
        }
    }
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<(), PerturbError> {
        for (name, p) in [("p_char_delete", self.p_char_delete), ("p_substitute", self.p_substitute)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(PerturbError::InvalidSpec(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.p_char_delete + self.p_substitute > 1.0 {
            return Err(PerturbError::InvalidSpec("p_char_delete + p_substitute exceeds 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbOp {
    Substitute,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbEntry {
    pub segment_id: String,
    pub word_index: usize,
    pub op: PerturbOp,
    pub original: String,
    pub replaced: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbLog {
    pub doc_id: String,
    pub seed: u64,
    pub entries: Vec<PerturbEntry>,
}

/// Remove the character at `index` (in chars); the first character and
/// single-character words are left alone.
pub fn delete_char(word: &str, index: usize) -> String {
    let n = word.chars().count();
    if index == 0 || index >= n || n < 2 {
        return word.to_string();
    }
    word.chars().enumerate().filter(|(i, _)| *i != index).map(|(_, c)| c).collect()
}

/// Every substitution the table allows for `word`.
pub fn substitutions(word: &str, table: &BTreeMap<String, String>) -> Vec<String> {
    if let Some(r) = table.get(word).filter(|_| word.chars().count() > 2) {
        return vec![r.clone()];
    }
    let mut out = Vec::new();
    for (k, v) in table.iter().filter(|(k, _)| k.chars().count() <= 2 && !k.is_empty()) {
        for (pos, _) in word.match_indices(k.as_str()) {
            out.push(format!("{}{}{}", &word[..pos], v, &word[pos + k.len()..]));
        }
    }
    out
}

fn doc_seed(seed: u64, doc_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(doc_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Perturbed copy of `doc`; ids, boxes and labels are unchanged.
pub fn perturb_document(doc: &Document, spec: &PerturbSpec) -> (Document, PerturbLog) {
    let mut rng = ChaCha8Rng::seed_from_u64(doc_seed(spec.seed, &doc.doc_id));
    let mut out = doc.clone();
    let mut log = PerturbLog { doc_id: doc.doc_id.clone(), seed: spec.seed, entries: Vec::new() };
    let min_len = spec.min_word_len.max(2);
    for seg in &mut out.segments {
        let mut words: Vec<String> = seg.text.split(' ').map(str::to_string).collect();
        for (wi, w) in words.iter_mut().enumerate() {
            let n = w.chars().count();
            if n < min_len {
                continue;
            }
            let r: f64 = rng.gen();
            let (op, replaced) = if r < spec.p_substitute {
                let options = substitutions(w, &spec.substitution_table);
                if options.is_empty() {
                    continue;
                }
                (PerturbOp::Substitute, options[rng.gen_range(0..options.len())].clone())
            } else if r < spec.p_substitute + spec.p_char_delete {
                (PerturbOp::Delete, delete_char(w, rng.gen_range(1..n)))
            } else {
                continue;
            };
            log.entries.push(PerturbEntry {
                segment_id: seg.id.clone(),
                word_index: wi,
                op,
                original: w.clone(),
                replaced: replaced.clone(),
            });
            *w = replaced;
        }
        let text = normalize_text(&words.join(" "));
        if !text.is_empty() {
            seg.text = text;
        }
    }
    (out, log)
}

/// One `word<TAB>replacement` per line; blank lines and `#` comments skipped.
pub fn parse_lexicon(src: &str) -> Result<BTreeMap<String, String>, PerturbError> {
    let mut table = BTreeMap::new();
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) =
            line.split_once('\t').ok_or_else(|| PerturbError::Lexicon { line: i + 1, detail: "missing tab".into() })?;
        if k.is_empty() || v.is_empty() {
            return Err(PerturbError::Lexicon { line: i + 1, detail: "empty field".into() });
        }
        table.insert(k.to_string(), v.to_string());
    }
    Ok(table)
}

pub fn load_lexicon(path: &Path) -> Result<BTreeMap<String, String>, PerturbError> {
    parse_lexicon(&fs::read_to_string(path)?)
}
