//! JSON engine configuration: vocabulary, providers, classifiers and
//! generation defaults.
//!
//! ```json
//! {
//!   "vocabulary": "vocab.txt",
//!   "providers": [
//!     {"kind": "ngram", "name": "M", "corpus": "corpus.txt", "order": 3, "alpha": 0.1},
//!     {"kind": "tabular", "name": "T", "default": [0.5, 0.5],
//!      "entries": [{"context": [1], "probs": [0.9, 0.1]}]},
//!     {"kind": "remote", "name": "R", "endpoint": "http://localhost:8000", "model": "m"}
//!   ],
//!   "classifiers": [
//!     {"kind": "token_set", "name": "C", "tokens": [1], "weight": 2.0, "bias": -1.0}
//!   ],
//!   "defaults": {"seed": 0, "mode": "raw", "top_k": 100, "s_max": 64}
//! }
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! Without a vocabulary the byte tokenizer (256 tokens) is used.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use model_arith::dist::{LogDistribution, SamplingPolicy, TokenId, Tokenizer, Vocabulary, DEFAULT_FLOOR};
use model_arith::formula::{Formula, FormulaError, Normalization, Registry, DEFAULT_TOP_K};
use model_arith::providers::{
    parse_corpus, NgramProvider, RemoteConfig, RemoteProvider, TabularClassifier, TabularProvider,
    TokenSetClassifier, DEFAULT_KEY_LEN,
};
use model_arith::speculative::DEFAULT_S_MAX;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("invalid config {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// One sequence per line, encoded with the configured tokenizer.
    #[default]
    Text,
    /// One sequence per line of whitespace-separated token ids.
    Ids,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    pub context: Vec<TokenId>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreEntry {
    pub context: Vec<TokenId>,
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

fn default_key_len() -> usize {
    DEFAULT_KEY_LEN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Ngram {
        name: String,
        corpus: PathBuf,
        #[serde(default)]
        corpus_format: CorpusFormat,
        order: usize,
        alpha: f64,
        #[serde(default = "one")]
        cost: f64,
    },
    Tabular {
        name: String,
        /// Probabilities used when no table key matches.
        default: Vec<f64>,
        #[serde(default = "default_key_len")]
        key_len: usize,
        #[serde(default)]
        entries: Vec<TableEntry>,
        #[serde(default = "one")]
        cost: f64,
    },
    Remote {
        name: String,
        endpoint: String,
        model: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_ms: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        retry_budget: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_context: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        initial_cost: Option<f64>,
    },
}

impl ProviderConfig {
    pub fn name(&self) -> &str {
        match self {
            Self::Ngram { name, .. } | Self::Tabular { name, .. } | Self::Remote { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassifierConfig {
    /// Logistic score on the fraction of context tokens in `tokens`.
    TokenSet {
        name: String,
        tokens: Vec<TokenId>,
        weight: f64,
        bias: f64,
    },
    Tabular {
        name: String,
        default: f64,
        #[serde(default = "default_key_len")]
        key_len: usize,
        #[serde(default)]
        entries: Vec<ScoreEntry>,
    },
}

impl ClassifierConfig {
    pub fn name(&self) -> &str {
        match self {
            Self::TokenSet { name, .. } | Self::Tabular { name, .. } => name,
        }
    }
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

fn default_s_max() -> usize {
    DEFAULT_S_MAX
}

fn default_max_tokens() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    #[serde(default)]
    pub policy: SamplingPolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub mode: Normalization,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default = "default_s_max")]
    pub s_max: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            policy: SamplingPolicy::Full,
            seed: 0,
            top_k: DEFAULT_TOP_K,
            mode: Normalization::Raw,
            floor: DEFAULT_FLOOR,
            s_max: DEFAULT_S_MAX,
            max_tokens: default_max_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<PathBuf>,
    #[serde(default)]
    pub providers: Vec<ProviderConfig>,
    #[serde(default)]
    pub classifiers: Vec<ClassifierConfig>,
    #[serde(default)]
    pub defaults: Defaults,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A loaded configuration, ready for use.
#[derive(Debug, Clone)]
pub struct Engine {
    pub registry: Registry,
    pub tokenizer: Tokenizer,
    pub defaults: Defaults,
}

impl Engine {
    /// Compiles `src` with the configured mode, top-k and floor.
    pub fn formula(&self, src: &str, mode: Option<Normalization>) -> Result<Formula, FormulaError> {
        model_arith::formula::parse_formula(src, &self.registry)?
            .with_mode(mode.unwrap_or(self.defaults.mode))
            .with_top_k(self.defaults.top_k)?
            .with_floor(self.defaults.floor)
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

impl EngineConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let mut c: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            reason: e.to_string(),
        })?;
        c.base_dir = base_dir.into();
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = read(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base).map_err(|e| match e {
            ConfigError::Parse { reason, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn tokenizer(&self) -> Result<Tokenizer, ConfigError> {
        match &self.vocabulary {
            None => Ok(Tokenizer::Bytes),
            Some(p) => {
                let v = Vocabulary::parse(&read(&self.resolve(p))?).map_err(invalid)?;
                Ok(Tokenizer::Words(v))
            }
        }
    }

    /// Loads the vocabulary, trains or builds every provider and classifier,
    /// and checks the defaults.
    pub fn build(&self) -> Result<Engine, ConfigError> {
        if self.defaults.s_max == 0 || self.defaults.top_k == 0 || self.defaults.max_tokens == 0 {
            return Err(invalid("defaults: s_max, top_k and max_tokens must be at least 1"));
        }
        if !(self.defaults.floor.is_finite() && self.defaults.floor < 0.0) {
            return Err(invalid("defaults: floor must be negative and finite"));
        }
        let tokenizer = self.tokenizer()?;
        let n = tokenizer.vocab_size();
        let mut registry = Registry::new(n);
        for p in &self.providers {
            let name = p.name();
            let context = |e: &dyn std::fmt::Display| invalid(format!("provider `{name}`: {e}"));
            let provider: model_arith::providers::SharedProvider = match p {
                ProviderConfig::Ngram {
                    corpus,
                    corpus_format,
                    order,
                    alpha,
                    cost,
                    ..
                } => {
                    let text = read(&self.resolve(corpus))?;
                    let seqs = match corpus_format {
                        CorpusFormat::Ids => parse_corpus(&text).map_err(|e| context(&e))?,
                        CorpusFormat::Text => text
                            .lines()
                            .filter(|l| !l.trim().is_empty())
                            .map(|l| tokenizer.encode(l))
                            .collect::<Result<_, _>>()
                            .map_err(|e| context(&e))?,
                    };
                    Arc::new(
                        NgramProvider::train(name, &seqs, *order, *alpha, n)
                            .map_err(|e| context(&e))?
                            .with_cost(*cost),
                    )
                }
                ProviderConfig::Tabular {
                    default,
                    key_len,
                    entries,
                    cost,
                    ..
                } => {
                    let dist = |probs: &[f64]| {
                        if probs.len() != n {
                            return Err(context(&format!(
                                "{} probabilities for a vocabulary of {n}",
                                probs.len()
                            )));
                        }
                        LogDistribution::from_probs(probs).map_err(|e| context(&e))
                    };
                    let mut t = TabularProvider::new(name, dist(default)?)
                        .with_key_len(*key_len)
                        .with_cost(*cost);
                    for e in entries {
                        t.insert(e.context.clone(), dist(&e.probs)?)
                            .map_err(|e| context(&e))?;
                    }
                    Arc::new(t)
                }
                ProviderConfig::Remote {
                    endpoint,
                    model,
                    timeout_ms,
                    retry_budget,
                    max_context,
                    initial_cost,
                    ..
                } => {
                    let mut rc = RemoteConfig::new(endpoint.clone(), model.clone());
                    rc.timeout_ms = timeout_ms.unwrap_or(rc.timeout_ms);
                    rc.retry_budget = retry_budget.unwrap_or(rc.retry_budget);
                    rc.max_context = *max_context;
                    rc.initial_cost = initial_cost.unwrap_or(rc.initial_cost);
                    Arc::new(RemoteProvider::new(name, n, rc).map_err(|e| context(&e))?)
                }
            };
            registry.add_provider(provider).map_err(invalid)?;
        }
        for c in &self.classifiers {
            let name = c.name();
            let context = |e: &dyn std::fmt::Display| invalid(format!("classifier `{name}`: {e}"));
            let classifier: model_arith::providers::SharedClassifier = match c {
                ClassifierConfig::TokenSet {
                    tokens, weight, bias, ..
                } => Arc::new(
                    TokenSetClassifier::new(name, n, tokens, *weight, *bias).map_err(|e| context(&e))?,
                ),
                ClassifierConfig::Tabular {
                    default,
                    key_len,
                    entries,
                    ..
                } => {
                    if !(*default > 0.0 && *default < 1.0) {
                        return Err(context(&format!("default score {default} is outside (0, 1)")));
                    }
                    let mut t = TabularClassifier::new(name, *default).with_key_len(*key_len);
                    for e in entries {
                        t.insert(e.context.clone(), e.score).map_err(|e| context(&e))?;
                    }
                    Arc::new(t)
                }
            };
            registry.add_classifier(classifier).map_err(invalid)?;
        }
        Ok(Engine {
            registry,
            tokenizer,
            defaults: self.defaults.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "providers": [
            {"kind": "tabular", "name": "T", "default": [0.25, 0.75],
             "entries": [{"context": [1], "probs": [0.9, 0.1]}]},
            {"kind": "remote", "name": "R", "endpoint": "http://127.0.0.1:9", "model": "m",
             "retry_budget": 0}
        ],
        "classifiers": [{"kind": "tabular", "name": "C", "default": 0.5}]
    }"#;

    fn two_token_vocab(dir: &Path) {
        std::fs::write(dir.join("v.txt"), "a\nb\n").unwrap();
    }

    #[test]
    fn round_trip_is_idempotent() {
        let c = EngineConfig::parse(SAMPLE, ".").unwrap();
        let once = c.to_json();
        let again = EngineConfig::parse(&once, ".").unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_json(), once);
        assert_eq!(c.defaults, Defaults::default());
    }

    #[test]
    fn builds_registry_from_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        two_token_vocab(dir.path());
        let text = SAMPLE.replacen('{', r#"{"vocabulary": "v.txt", "#, 1);
        std::fs::write(dir.path().join("c.json"), &text).unwrap();
        let engine = EngineConfig::load(dir.path().join("c.json")).unwrap().build().unwrap();
        assert_eq!(engine.tokenizer.vocab_size(), 2);
        let f = engine.formula("T", None).unwrap();
        assert!((f.evaluate(&[1]).unwrap().prob(0) - 0.9).abs() < 1e-12);
        assert!(engine.registry.classifier("C").is_some());
    }

    #[test]
    fn rejects_bad_configs() {
        // byte vocabulary: a two-entry table does not fit
        assert!(EngineConfig::parse(SAMPLE, ".").unwrap().build().is_err());
        assert!(matches!(
            EngineConfig::parse(r#"{"providers": [], "extra": 1}"#, "."),
            Err(ConfigError::Parse { .. })
        ));
        let dup = r#"{"providers": [
            {"kind": "tabular", "name": "T", "default": [1.0, 1.0]},
            {"kind": "tabular", "name": "T", "default": [1.0, 1.0]}]}"#;
        let dir = tempfile::tempdir().unwrap();
        two_token_vocab(dir.path());
        let mut c = EngineConfig::parse(dup, dir.path()).unwrap();
        c.vocabulary = Some("v.txt".into());
        assert!(c.build().is_err());
        assert!(matches!(EngineConfig::load("/nonexistent.json"), Err(ConfigError::Io { .. })));
    }

    #[test]
    fn ngram_from_text_corpus() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("corpus.txt"), "abab\nbaba\n").unwrap();
        let c = EngineConfig::parse(
            r#"{"providers": [{"kind": "ngram", "name": "M", "corpus": "corpus.txt",
                "order": 2, "alpha": 0.5}]}"#,
            dir.path(),
        )
        .unwrap();
        let e = c.build().unwrap();
        let f = e.formula("M", None).unwrap();
        let d = f.evaluate(&[b'a' as TokenId]).unwrap();
        assert_eq!(d.argmax(), b'b' as TokenId);
    }
}
