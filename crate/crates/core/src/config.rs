//! Run configuration and run manifests.
//!
//! Values resolve as: command-line flags, then `DOCICL_*` environment
//! variables, then the config file, then built-in defaults. API keys are
//! read from the environment only and never stored.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::demos::{DemoCounts, DEFAULT_FORMAT_SPAN, DEFAULT_HALF_WIDTH};
use crate::llm::{HttpConfig, DEFAULT_MAX_OUTPUT_TOKENS};
use crate::ordering::OrderingParams;
use crate::perturb::PerturbSpec;
use crate::prompting::{OrderPolicy, DEFAULT_BUDGET};

pub const CONFIG_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "docicl-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("config version {found} is not supported (expected {CONFIG_VERSION})")]
    Version { found: u32 },
    #[error("{key}: {detail}")]
    Invalid { key: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Oracle,
    Transcript,
    Layout,
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "http" => Ok(Self::Http),
            "oracle" => Ok(Self::Oracle),
            "transcript" => Ok(Self::Transcript),
            "layout" => Ok(Self::Layout),
            _ => Err(format!("unknown backend {s:?} (http, oracle, transcript, layout)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Local,
    Remote,
    Openai,
}

impl std::str::FromStr for EmbedderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "local" => Ok(Self::Local),
            "remote" => Ok(Self::Remote),
            "openai" => Ok(Self::Openai),
            _ => Err(format!("unknown embedder {s:?} (local, remote, openai)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Labels for custom datasets; the built-in datasets carry their own.
    pub labels: Vec<String>,
    pub other_label: String,
    pub other_is_annotated: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { labels: Vec::new(), other_label: "other".into(), other_is_annotated: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub model: String,
    pub base_url: String,
    pub path: String,
    pub api_key_env: String,
    pub max_retries: u32,
    pub max_output_tokens: u32,
    pub concurrency: usize,
    pub cache_dir: Option<PathBuf>,
    pub transcript: Option<PathBuf>,
    /// Save every exchange to this transcript file.
    pub record: Option<PathBuf>,
}

impl Default for BackendSection {
    fn default() -> Self {
        let http = HttpConfig::default();
        Self {
            kind: BackendKind::Http,
            model: "gpt-3.5-turbo".into(),
            base_url: http.base_url,
            path: http.path,
            api_key_env: http.api_key_env,
            max_retries: http.max_retries,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            concurrency: 4,
            cache_dir: None,
            transcript: None,
            record: None,
        }
    }
}

impl BackendSection {
    pub fn http_config(&self) -> HttpConfig {
        HttpConfig {
            base_url: self.base_url.clone(),
            path: self.path.clone(),
            api_key_env: self.api_key_env.clone(),
            max_retries: self.max_retries,
            ..HttpConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub provider: EmbedderKind,
    pub url: String,
    pub model: String,
    pub cache_dir: Option<PathBuf>,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            provider: EmbedderKind::Local,
            url: "http://127.0.0.1:8100".into(),
            model: "text-embedding-3-small".into(),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemosSection {
    pub n_hard: usize,
    pub n_layout: usize,
    pub n_formatting: usize,
    pub half_width: usize,
    pub format_span: usize,
}

impl Default for DemosSection {
    fn default() -> Self {
        let c = DemoCounts::default();
        Self {
            n_hard: c.n_hard,
            n_layout: c.n_layout,
            n_formatting: c.n_formatting,
            half_width: DEFAULT_HALF_WIDTH,
            format_span: DEFAULT_FORMAT_SPAN,
        }
    }
}

impl DemosSection {
    pub fn counts(&self) -> DemoCounts {
        DemoCounts { n_hard: self.n_hard, n_layout: self.n_layout, n_formatting: self.n_formatting }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdateSection {
    pub k: usize,
    pub capacity: Option<usize>,
    pub grow: bool,
    pub refresh_layout: bool,
    pub patience: Option<usize>,
}

impl Default for UpdateSection {
    fn default() -> Self {
        Self { k: 20, capacity: None, grow: false, refresh_layout: false, patience: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub budget: usize,
    pub order: OrderPolicy,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self { budget: DEFAULT_BUDGET, order: OrderPolicy::Mhlf }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSection {
    pub p_char_delete: f64,
    pub p_substitute: f64,
    pub min_word_len: usize,
    /// Tab-separated confusion table replacing the built-in one.
    pub lexicon: Option<PathBuf>,
}

impl Default for PerturbSection {
    fn default() -> Self {
        let s = PerturbSpec::default();
        Self {
            p_char_delete: s.p_char_delete,
            p_substitute: s.p_substitute,
            min_word_len: s.min_word_len,
            lexicon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub seed: u64,
    pub dataset: DatasetSection,
    pub ordering: OrderingParams,
    pub backend: BackendSection,
    pub embedding: EmbeddingSection,
    pub demos: DemosSection,
    pub update: UpdateSection,
    pub prompt: PromptSection,
    pub perturb: PerturbSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            dataset: DatasetSection::default(),
            ordering: OrderingParams::default(),
            backend: BackendSection::default(),
            embedding: EmbeddingSection::default(),
            demos: DemosSection::default(),
            update: UpdateSection::default(),
            prompt: PromptSection::default(),
            perturb: PerturbSection::default(),
        }
    }
}

fn invalid(key: &str, detail: impl ToString) -> ConfigError {
    ConfigError::Invalid { key: key.into(), detail: detail.to_string() }
}

fn parse_env<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| invalid(key, e))
}

impl Config {
    pub fn from_toml(src: &str, path: &Path) -> Result<Config, ConfigError> {
        let cfg: Config =
            toml::from_str(src).map_err(|e| ConfigError::Parse { path: path.into(), detail: e.to_string() })?;
        if cfg.version != CONFIG_VERSION {
            return Err(ConfigError::Version { found: cfg.version });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let src = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Config::from_toml(&src, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `DOCICL_*` overrides from `vars`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            let (k, v) = (k.as_ref(), v.as_ref());
            match k {
                "DOCICL_SEED" => self.seed = parse_env(k, v)?,
                "DOCICL_BACKEND" => self.backend.kind = parse_env(k, v)?,
                "DOCICL_MODEL" => self.backend.model = v.into(),
                "DOCICL_BASE_URL" => self.backend.base_url = v.into(),
                "DOCICL_CONCURRENCY" => self.backend.concurrency = parse_env(k, v)?,
                "DOCICL_CACHE_DIR" => self.backend.cache_dir = Some(v.into()),
                "DOCICL_TRANSCRIPT" => self.backend.transcript = Some(v.into()),
                "DOCICL_EMBEDDER" => self.embedding.provider = parse_env(k, v)?,
                "DOCICL_EMBED_URL" => self.embedding.url = v.into(),
                "DOCICL_BUDGET" => self.prompt.budget = parse_env(k, v)?,
                "DOCICL_ORDER" => self.prompt.order = parse_env(k, v)?,
                "DOCICL_K" => self.update.k = parse_env(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.ordering.validate().map_err(|e| invalid("ordering", e))?;
        if self.backend.concurrency == 0 {
            return Err(invalid("backend.concurrency", "must be at least 1"));
        }
        if self.prompt.budget == 0 {
            return Err(invalid("prompt.budget", "must be positive"));
        }
        if self.demos.format_span == 0 {
            return Err(invalid("demos.format_span", "must be at least 1"));
        }
        if self.update.patience == Some(0) {
            return Err(invalid("update.patience", "must be at least 1"));
        }
        if self.backend.kind == BackendKind::Transcript && self.backend.transcript.is_none() {
            return Err(invalid("backend.transcript", "required by the transcript backend"));
        }
        self.perturb_spec_with_table(Default::default()).validate().map_err(|e| invalid("perturb", e))?;
        Ok(())
    }

    /// Perturbation spec with the given substitution table (the built-in
    /// table when empty).
    pub fn perturb_spec_with_table(&self, table: BTreeMap<String, String>) -> PerturbSpec {
        let base = PerturbSpec::default();
        PerturbSpec {
            seed: self.seed,
            p_char_delete: self.perturb.p_char_delete,
            p_substitute: self.perturb.p_substitute,
            substitution_table: if table.is_empty() { base.substitution_table } else { table },
            min_word_len: self.perturb.min_word_len,
        }
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).unwrap()))
    }
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn file_digest(path: &Path) -> std::io::Result<FileDigest> {
    let bytes = fs::read(path)?;
    Ok(FileDigest { path: path.to_path_buf(), sha256: hex::encode(Sha256::digest(bytes)) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub argv: Vec<String>,
    pub created_at: String,
    pub config: Config,
    pub inputs: BTreeMap<String, FileDigest>,
    pub outputs: BTreeMap<String, FileDigest>,
    pub demoset_hash: Option<String>,
    pub backend_id: Option<String>,
    pub model: String,
    pub seed: u64,
    pub timings_ms: BTreeMap<String, u64>,
    pub diagnostics: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, config: &Config) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            command: command.into(),
            argv,
            created_at: chrono::Utc::now().to_rfc3339(),
            model: config.backend.model.clone(),
            seed: config.seed,
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            demoset_hash: None,
            backend_id: None,
            timings_ms: BTreeMap::new(),
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> std::io::Result<()> {
        self.inputs.insert(name.into(), file_digest(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, name: &str, path: &Path) -> std::io::Result<()> {
        self.outputs.insert(name.into(), file_digest(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).unwrap() + "\n")
    }

    pub fn load(path: &Path) -> Result<RunManifest, ConfigError> {
        let src = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let m: RunManifest =
            serde_json::from_str(&src).map_err(|e| ConfigError::Parse { path: path.into(), detail: e.to_string() })?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(ConfigError::Parse {
                path: path.into(),
                detail: format!("not a {MANIFEST_FORMAT} v{MANIFEST_VERSION}"),
            });
        }
        Ok(m)
    }
}

/// `runs/<UTC timestamp>-<first 8 hex of hash(argv, config)>`.
pub fn default_run_dir(base: &Path, argv: &[String], config: &Config) -> PathBuf {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(argv).unwrap());
    h.update(config.hash());
    let tag = &hex::encode(h.finalize())[..8];
    base.join(format!("{}-{tag}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        let back = Config::from_toml(&c.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, c);
        assert_eq!((c.demos.n_hard, c.demos.n_layout, c.demos.n_formatting, c.update.k), (4, 4, 4, 20));
        assert_eq!(c.prompt.budget, 3600);
        assert_eq!(c.backend.max_output_tokens, 1024);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = Config::from_toml("version = 1\nseed = 9\n[prompt]\norder = \"M-L-H-F\"\n", Path::new("x")).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.prompt.order, OrderPolicy::Mlhf);
        assert_eq!(c.prompt.budget, DEFAULT_BUDGET);
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(matches!(
            Config::from_toml("version = 1\nbogus = 1\n", Path::new("x")),
            Err(ConfigError::Parse { .. })
        ));
        assert!(matches!(Config::from_toml("version = 2\n", Path::new("x")), Err(ConfigError::Version { found: 2 })));
    }

    #[test]
    fn env_overrides_file() {
        let mut c = Config::from_toml("version = 1\nseed = 9\n", Path::new("x")).unwrap();
        c.apply_env([("DOCICL_SEED", "11"), ("DOCICL_BACKEND", "oracle"), ("HOME", "/x"), ("DOCICL_ORDER", "M-L-H-F")])
            .unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.backend.kind, BackendKind::Oracle);
        assert_eq!(c.prompt.order, OrderPolicy::Mlhf);
        assert!(c.apply_env([("DOCICL_SEED", "x")]).is_err());
    }

    #[test]
    fn validation() {
        let mut c = Config::default();
        assert!(c.validate().is_ok());
        c.backend.kind = BackendKind::Transcript;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.perturb.p_char_delete = 0.9;
        assert!(c.validate().is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let f = d.path().join("in.txt");
        fs::write(&f, "abc").unwrap();
        let mut m = RunManifest::new("order", vec!["docicl".into(), "order".into()], &Config::default());
        m.add_input("docs", &f).unwrap();
        assert_eq!(m.inputs["docs"].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        let p = d.path().join("manifest.json");
        m.save(&p).unwrap();
        assert_eq!(RunManifest::load(&p).unwrap(), m);
    }

    #[test]
    fn run_dir_name() {
        let p = default_run_dir(Path::new("runs"), &["a".into()], &Config::default());
        let name = p.file_name().unwrap().to_str().unwrap();
        assert_eq!(name.len(), "20261015T000000Z-".len() + 8);
        assert!(p.starts_with("runs"));
    }
}
