//! Deterministic text surrogates: a hash-projection semantic encoder and a
//! frequency-filtered keyword extractor, plus an optional HTTP client for
//! delegating keyword extraction to an external service.
//!
//! Token vectors are derived from `(master_seed, token)` with FNV-1a and
//! SplitMix64 only, so any reimplementation reproduces them bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::Item;
use crate::error::{Error, Result};
use crate::numerics::{fnv1a64, Vector};

pub const DEFAULT_TOKEN_SEED: u64 = 0x7e11_5eed_0000_0001;

pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "and", "at", "by", "for", "from", "in", "is", "of", "on", "or", "the", "to", "with",
];

/// Set of tokens dropped before encoding or keyword counting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stopwords(BTreeSet<String>);

impl Default for Stopwords {
    fn default() -> Self {
        Stopwords(DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect())
    }
}

impl Stopwords {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Stopwords(words.into_iter().map(|w| w.into().to_lowercase()).collect())
    }

    /// Plain text, one token per line; blank lines and `#` comments skipped.
    pub fn parse(text: &str) -> Self {
        Stopwords::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Stopwords::parse(&text))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

/// Unit-norm embedding of a caption.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbedding {
    pub vec: Vector,
    pub source_item: Option<String>,
}

impl SemanticEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        self.vec.as_slice()
    }
}

/// Bag-of-tokens encoder: the normalized sum of per-token hash projections.
#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    dim: usize,
    master_seed: u64,
    stopwords: Stopwords,
}

impl SemanticEncoder {
    pub fn new(dim: usize, master_seed: u64, stopwords: Stopwords) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        SemanticEncoder {
            dim,
            master_seed,
            stopwords,
        }
    }

    pub fn with_dim(dim: usize) -> Self {
        SemanticEncoder::new(dim, DEFAULT_TOKEN_SEED, Stopwords::default())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stopwords(&self) -> &Stopwords {
        &self.stopwords
    }

    /// Projection of a single token, entries uniform in [-1, 1).
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        token_projection(token, self.dim, self.master_seed)
    }

    pub fn encode<S: AsRef<str>>(&self, caption: &[S]) -> Result<SemanticEmbedding> {
        let mut sum = vec![0.0; self.dim];
        let mut used = 0usize;
        for token in caption {
            let token = token.as_ref();
            if token.is_empty() || self.stopwords.contains(token) {
                continue;
            }
            for (s, v) in sum.iter_mut().zip(self.token_vector(token)) {
                *s += v;
            }
            used += 1;
        }
        if used == 0 {
            return Err(Error::domain("caption is empty after stopword removal"));
        }
        let vec = Vector::new(sum)?
            .normalized()
            .map_err(|_| Error::domain("caption tokens cancel to a zero embedding"))?;
        Ok(SemanticEmbedding {
            vec,
            source_item: None,
        })
    }

    /// Encodes an item's caption and tags the embedding with its id.
    pub fn encode_item(&self, item: &Item) -> Result<SemanticEmbedding> {
        let mut e = self
            .encode(&item.caption)
            .map_err(|e| e.context(format!("item {}", item.item_id)))?;
        e.source_item = Some(item.item_id.clone());
        Ok(e)
    }
}

/// Whitespace tokenization to lowercase words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

pub(crate) fn token_projection(token: &str, dim: usize, master_seed: u64) -> Vec<f64> {
    let mut state = fnv1a64(token.as_bytes()) ^ master_seed;
    (0..dim)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            // 53 high bits -> [0, 1), then onto [-1, 1)
            (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeywordMode {
    #[default]
    Deterministic,
    External,
}

/// Which history items feed keyword extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeywordsOver {
    #[default]
    Retrieved,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_inflight: usize,
    pub batch_size: usize,
    /// Use deterministic extraction when the endpoint fails.
    pub fallback_to_deterministic: bool,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            url: None,
            timeout_ms: 10_000,
            retries: 3,
            backoff_ms: 100,
            max_inflight: 4,
            batch_size: 16,
            fallback_to_deterministic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeywordExtractorConfig {
    pub mode: KeywordMode,
    /// Optional stopword file; the built-in list is used when absent.
    pub stopwords_path: Option<PathBuf>,
    pub min_count: usize,
    pub n: usize,
    pub keywords_over: KeywordsOver,
    pub endpoint: EndpointConfig,
}

impl Default for KeywordExtractorConfig {
    fn default() -> Self {
        KeywordExtractorConfig {
            mode: KeywordMode::Deterministic,
            stopwords_path: None,
            min_count: 2,
            n: 10,
            keywords_over: KeywordsOver::Retrieved,
            endpoint: EndpointConfig::default(),
        }
    }
}

impl KeywordExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_count == 0 {
            return Err(Error::config("keywords.min_count must be at least 1"));
        }
        if self.n == 0 {
            return Err(Error::config("keywords.n must be at least 1"));
        }
        if self.mode == KeywordMode::External {
            if self.endpoint.url.as_deref().is_none_or(str::is_empty) {
                return Err(Error::config(
                    "external keyword mode requires keywords.endpoint.url",
                ));
            }
            if self.endpoint.max_inflight == 0 || self.endpoint.batch_size == 0 {
                return Err(Error::config(
                    "keywords.endpoint.max_inflight and batch_size must be positive",
                ));
            }
        }
        Ok(())
    }

    pub fn stopwords(&self) -> Result<Stopwords> {
        match &self.stopwords_path {
            Some(p) => Stopwords::load(p),
            None => Ok(Stopwords::default()),
        }
    }
}

/// Per-item keyword lists and the frequency-filtered summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSet {
    pub per_item: BTreeMap<String, Vec<String>>,
    /// `(keyword, count)` sorted by count desc then keyword asc.
    pub filtered: Vec<(String, usize)>,
}

impl KeywordSet {
    pub fn filtered_tokens(&self) -> Vec<String> {
        self.filtered.iter().map(|(k, _)| k.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.filtered.is_empty()
    }
}

pub fn extract_keywords(
    items: &[&Item],
    cfg: &KeywordExtractorConfig,
    stopwords: &Stopwords,
) -> Result<KeywordSet> {
    if items.is_empty() {
        return Err(Error::domain("keyword extraction needs at least one item"));
    }
    cfg.validate()?;
    let raw: Vec<Vec<String>> = match cfg.mode {
        KeywordMode::Deterministic => items
            .iter()
            .map(|it| it.caption.iter().chain(&it.text).cloned().collect())
            .collect(),
        KeywordMode::External => match fetch_external_keywords(items, &cfg.endpoint) {
            Ok(lists) => lists,
            Err(_) if cfg.endpoint.fallback_to_deterministic => items
                .iter()
                .map(|it| it.caption.iter().chain(&it.text).cloned().collect())
                .collect(),
            Err(e) => return Err(e),
        },
    };
    let lists: Vec<(String, Vec<String>)> = items
        .iter()
        .zip(raw)
        .map(|(it, toks)| (it.item_id.clone(), clean_keywords(toks, stopwords)))
        .collect();
    Ok(filter_keywords(lists, cfg.min_count, cfg.n))
}

/// Lowercases, drops stopwords and duplicates, keeps first-seen order.
fn clean_keywords(tokens: Vec<String>, stopwords: &Stopwords) -> Vec<String> {
    let mut seen = BTreeSet::new();
    tokens
        .into_iter()
        .map(|t| t.trim().to_lowercase())
        .filter(|t| !t.is_empty() && !stopwords.contains(t))
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

fn filter_keywords(lists: Vec<(String, Vec<String>)>, min_count: usize, n: usize) -> KeywordSet {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, kws) in &lists {
        for k in kws {
            *counts.entry(k.as_str()).or_default() += 1;
        }
    }
    let mut filtered: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .map(|(k, c)| (k.to_string(), c))
        .collect();
    filtered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    filtered.truncate(n);
    let mut per_item = BTreeMap::new();
    for (id, kws) in lists {
        per_item.entry(id).or_insert_with(Vec::new).extend(kws);
    }
    KeywordSet { per_item, filtered }
}

#[derive(Serialize)]
struct KeywordRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct KeywordResponse {
    keywords: Vec<Vec<String>>,
}

/// Sends item texts in batches, at most `max_inflight` requests at a time.
/// Results come back in input order regardless of completion order.
pub fn fetch_external_keywords(items: &[&Item], cfg: &EndpointConfig) -> Result<Vec<Vec<String>>> {
    let url = cfg
        .url
        .as_deref()
        .ok_or_else(|| Error::config("external keyword mode requires an endpoint url"))?;
    let texts: Vec<String> = items
        .iter()
        .map(|it| {
            it.caption
                .iter()
                .chain(&it.text)
                .cloned()
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let batches: Vec<&[String]> = texts.chunks(cfg.batch_size.max(1)).collect();
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .build()
        .into();

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Vec<Vec<String>>>>>> =
        Mutex::new((0..batches.len()).map(|_| None).collect());
    let workers = cfg.max_inflight.max(1).min(batches.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= batches.len() {
                    break;
                }
                let r = post_with_retries(&agent, url, batches[i], cfg);
                results.lock().expect("result slot lock")[i] = Some(r);
            });
        }
    });

    let mut out = Vec::with_capacity(texts.len());
    for r in results.into_inner().expect("result slot lock") {
        out.extend(r.expect("every batch is processed")?);
    }
    Ok(out)
}

fn post_with_retries(
    agent: &ureq::Agent,
    url: &str,
    texts: &[String],
    cfg: &EndpointConfig,
) -> Result<Vec<Vec<String>>> {
    let mut attempt = 0u32;
    loop {
        match post_once(agent, url, texts) {
            Ok(body) => return parse_keyword_response(&body, texts.len()),
            Err(message) if attempt >= cfg.retries => {
                return Err(Error::Endpoint {
                    retries: attempt,
                    message,
                })
            }
            Err(_) => {
                std::thread::sleep(Duration::from_millis(cfg.backoff_ms << attempt.min(16)));
                attempt += 1;
            }
        }
    }
}

fn post_once(
    agent: &ureq::Agent,
    url: &str,
    texts: &[String],
) -> std::result::Result<String, String> {
    let resp = agent
        .post(url)
        .send_json(KeywordRequest { texts })
        .map_err(|e| e.to_string())?;
    resp.into_body().read_to_string().map_err(|e| e.to_string())
}

pub(crate) fn parse_keyword_response(body: &str, expected: usize) -> Result<Vec<Vec<String>>> {
    let parsed: KeywordResponse =
        serde_json::from_str(body).map_err(|e| Error::EndpointResponse(e.to_string()))?;
    if parsed.keywords.len() != expected {
        return Err(Error::EndpointResponse(format!(
            "expected {expected} keyword lists, got {}",
            parsed.keywords.len()
        )));
    }
    Ok(parsed.keywords)
}
