#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};

use docicl::ingest::{load_cord, load_funsd, load_sroie};
use docicl::llm::{AnswerKey, LlmClient, ScriptedBackend};
use docicl::types::{Document, LabelSchema};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

pub fn funsd() -> Vec<Document> {
    load_funsd(&fixtures().join("funsd")).unwrap()
}

pub fn cord() -> Vec<Document> {
    load_cord(&fixtures().join("cord")).unwrap()
}

pub fn sroie() -> Vec<Document> {
    load_sroie(&fixtures().join("sroie")).unwrap()
}

pub fn oracle(docs: &[Document], schema: &LabelSchema) -> LlmClient {
    LlmClient::new(ScriptedBackend::oracle(AnswerKey::from_documents(docs, &schema.other_label)), "oracle")
}

/// Compare `actual` with a golden file; `UPDATE_GOLDENS=1` rewrites it.
pub fn check_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_dir().join(name);
    if std::env::var_os("UPDATE_GOLDENS").is_some() {
        std::fs::create_dir_all(golden_dir()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return Ok(());
    }
    let expected =
        std::fs::read_to_string(&path).map_err(|e| format!("{}: {e} (run with UPDATE_GOLDENS=1)", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        let line = expected.lines().zip(actual.lines()).position(|(a, b)| a != b).map_or(0, |i| i + 1);
        Err(format!("{name} differs from golden (first differing line {line})"))
    }
}

/// Print one verdict line straight to stderr (bypassing output capture) and
/// fail the test on FAIL.
pub fn verdict(id: &str, criterion: &str, tolerance: &str, result: Result<String, String>) {
    let line = match &result {
        Ok(detail) => format!("PASS  {id:<18} {criterion} [{tolerance}] {detail}"),
        Err(why) => format!("FAIL  {id:<18} {criterion} [{tolerance}] {why}"),
    };
    let _ = writeln!(std::io::stderr().lock(), "{line}");
    if let Err(why) = result {
        panic!("{id}: {why}");
    }
}

pub fn skip(id: &str, criterion: &str, why: &str) {
    let _ = writeln!(std::io::stderr().lock(), "SKIP  {id:<18} {criterion} ({why})");
}

/// Error-collecting assertion for acceptance checks.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($fmt)+)),
        }
    };
}
