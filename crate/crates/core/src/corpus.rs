//! Synthetic multi-modal interaction corpora with planted preferences, and
//! the line-delimited record format used to persist or substitute them.
//!
//! Categories sit on a ring; each prototype is a Gaussian-kernel blend of
//! per-category random directions, so ring neighbours are visually similar.
//! A user prefers a primary category and one ring neighbour. History items
//! from those categories are the best of a small candidate pool by cosine
//! with the planted preference; the remainder come from distant categories.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::encoders::DEFAULT_STOPWORDS;
use crate::error::{Error, Result};
use crate::numerics::{dot, normalize, Matrix, SeededRng, Vector};

pub const SCHEMA_VERSION: u64 = 1;

/// Square grayscale raster, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    size: usize,
    data: Vec<f64>,
}

impl PixelGrid {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if size == 0 || data.len() != size * size {
            return Err(Error::domain(format!(
                "pixel grid of side {size} needs {} values, got {}",
                size * size,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(PixelGrid { size, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::domain("pixel grid must be square"));
        }
        PixelGrid::new(size, rows.into_iter().flatten().collect())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.size + c]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.size).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub item_id: String,
    pub caption: Vec<String>,
    pub text: Vec<String>,
    pub visual_feature: Vector,
    pub pixel_grid: Option<PixelGrid>,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSequence {
    pub user_id: String,
    pub history: Vec<Arc<Item>>,
    pub reference: Arc<Item>,
    pub planted_preference: Option<Vector>,
    pub held_out_positives: Vec<String>,
}

impl UserSequence {
    pub fn history_features(&self) -> Vec<&[f64]> {
        self.history
            .iter()
            .map(|it| it.visual_feature.as_slice())
            .collect()
    }

    /// Items sharing the reference item's category.
    pub fn in_cluster_history(&self) -> impl Iterator<Item = &Arc<Item>> {
        self.history
            .iter()
            .filter(|it| it.category == self.reference.category)
    }

    /// Ids of every item the user interacted with, reference included.
    pub fn interacted_ids(&self) -> BTreeSet<&str> {
        self.history
            .iter()
            .map(|it| it.item_id.as_str())
            .chain(std::iter::once(self.reference.item_id.as_str()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSelection {
    /// Reference drawn from the user's primary category.
    #[default]
    InPreference,
    /// Reference drawn from a distant category the user does not prefer.
    OutOfPreference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub users: usize,
    pub history_len: usize,
    pub categories: usize,
    pub items_per_category: usize,
    pub visual_dim: usize,
    pub vocab_per_category: usize,
    pub caption_tokens: usize,
    pub text_tokens: usize,
    pub stopwords_per_caption: usize,
    /// Chance a caption token comes from a ring neighbour's vocabulary.
    pub neighbor_token_prob: f64,
    pub prototype_width: f64,
    pub item_offset_scale: f64,
    pub item_noise_scale: f64,
    pub preference_noise: f64,
    pub secondary_weight: f64,
    pub secondary_prob: f64,
    pub relevant_fraction: f64,
    pub secondary_fraction: f64,
    pub candidate_pool: usize,
    pub side_categories: usize,
    pub min_side_distance: usize,
    pub held_out: usize,
    pub reference_selection: ReferenceSelection,
    pub pixel_size: usize,
    pub render_seed: u64,
    pub render_scale: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            users: 100,
            history_len: 20,
            categories: 16,
            items_per_category: 48,
            visual_dim: 32,
            vocab_per_category: 4,
            caption_tokens: 8,
            text_tokens: 6,
            stopwords_per_caption: 2,
            neighbor_token_prob: 0.4,
            prototype_width: 1.0,
            item_offset_scale: 0.5,
            item_noise_scale: 0.2,
            preference_noise: 0.3,
            secondary_weight: 0.7,
            secondary_prob: 1.0,
            relevant_fraction: 0.25,
            secondary_fraction: 0.3,
            candidate_pool: 4,
            side_categories: 1,
            min_side_distance: 3,
            held_out: 5,
            reference_selection: ReferenceSelection::InPreference,
            pixel_size: 16,
            render_seed: 0x5eed_0f_9a1d,
            render_scale: 0.25,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.categories < 2 {
            return bad("corpus.categories must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.relevant_fraction) {
            return bad("corpus.relevant_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.secondary_fraction) {
            return bad("corpus.secondary_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.secondary_prob)
            || !(0.0..=1.0).contains(&self.neighbor_token_prob)
        {
            return bad("corpus probabilities must lie in [0, 1]");
        }
        if self.users == 0 || self.history_len == 0 {
            return bad("corpus.users and corpus.history_len must be positive");
        }
        if self.visual_dim == 0 || self.vocab_per_category == 0 || self.caption_tokens == 0 {
            return bad(
                "corpus.visual_dim, vocab_per_category and caption_tokens must be positive",
            );
        }
        if self.candidate_pool == 0 || self.side_categories == 0 || self.pixel_size == 0 {
            return bad("corpus.candidate_pool, side_categories and pixel_size must be positive");
        }
        if self.items_per_category < self.history_len + self.held_out + 2 {
            return bad("corpus.items_per_category must exceed history_len + held_out + 1");
        }
        let scales = [
            self.prototype_width,
            self.item_offset_scale,
            self.item_noise_scale,
            self.preference_noise,
            self.secondary_weight,
            self.render_scale,
        ];
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) || self.prototype_width == 0.0 {
            return bad("corpus scale parameters must be finite and non-negative");
        }
        Ok(())
    }

    pub fn relevant_count(&self) -> usize {
        (self.relevant_fraction * self.history_len as f64).round() as usize
    }
}

/// Parameters that reproduce a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub seed: u64,
    pub config: CorpusConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub items: BTreeMap<String, Arc<Item>>,
    pub users: Vec<UserSequence>,
    pub generation_config: Option<GenerationRecord>,
    pub category_prototypes: BTreeMap<String, Vector>,
}

impl Corpus {
    pub fn item(&self, id: &str) -> Option<&Arc<Item>> {
        self.items.get(id)
    }

    pub fn user(&self, id: &str) -> Option<&UserSequence> {
        self.users.iter().find(|u| u.user_id == id)
    }

    pub fn visual_dim(&self) -> usize {
        self.items
            .values()
            .next()
            .map_or(0, |it| it.visual_feature.dim())
    }

    pub fn items_in_category<'a>(
        &'a self,
        category: &'a str,
    ) -> impl Iterator<Item = &'a Arc<Item>> + 'a {
        self.items
            .values()
            .filter(move |it| it.category == category)
    }

    /// The exact bytes [`save_corpus`] writes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_records(self, &mut out).expect("writing to a Vec cannot fail");
        out
    }
}

pub fn category_label(c: usize) -> String {
    format!("cat{c:02}")
}

pub fn item_label(c: usize, i: usize) -> String {
    format!("c{c:02}-{i:03}")
}

fn ring_distance(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b) % n;
    d.min(n - d)
}

/// Pronounceable token for a global vocabulary index; distinct indices give
/// distinct words.
pub fn pseudo_word(index: usize) -> String {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    const SYLLABLES: usize = 14 * 5;
    const SPACE: usize = SYLLABLES * SYLLABLES * SYLLABLES;
    let mut code = (index % SPACE) * 7919 % SPACE;
    let mut word = String::with_capacity(6 + index / SPACE);
    for _ in 0..3 {
        let s = code % SYLLABLES;
        code /= SYLLABLES;
        word.push(CONS[s / 5] as char);
        word.push(VOWELS[s % 5] as char);
    }
    for _ in 0..index / SPACE {
        word.push('x');
    }
    word
}

/// Seeded linear renderer from visual features to pixel grids.
#[derive(Debug, Clone)]
pub struct Renderer {
    size: usize,
    weights: Matrix,
}

impl Renderer {
    pub fn new(size: usize, dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        Renderer {
            size,
            weights: Matrix::random_normal(size * size, dim, scale, &mut rng),
        }
    }

    pub fn from_config(cfg: &CorpusConfig) -> Self {
        Renderer::new(
            cfg.pixel_size,
            cfg.visual_dim,
            cfg.render_scale,
            cfg.render_seed,
        )
    }

    pub fn render(&self, feature: &[f64]) -> Result<PixelGrid> {
        crate::error::ensure_dim("render", self.weights.cols(), feature.len())?;
        let data = self
            .weights
            .matvec(feature)
            .into_iter()
            .map(|v| (0.5 + v).clamp(0.0, 1.0))
            .collect();
        PixelGrid::new(self.size, data)
    }
}

pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let root = SeededRng::new(seed);
    let c_count = cfg.categories;
    let d = cfg.visual_dim;
    let unit = 1.0 / (d as f64).sqrt();

    let mut proto_rng = root.fork_named("prototypes");
    let bases: Vec<Vec<f64>> = (0..c_count)
        .map(|_| proto_rng.normal_vec(d, unit))
        .collect();
    let mut prototypes = Vec::with_capacity(c_count);
    for c in 0..c_count {
        let mut p = vec![0.0; d];
        for (j, b) in bases.iter().enumerate() {
            let r = ring_distance(c, j, c_count) as f64;
            let w = (-r * r / (2.0 * cfg.prototype_width * cfg.prototype_width)).exp();
            crate::numerics::axpy(w, b, &mut p);
        }
        prototypes.push(normalize(&p)?);
    }

    let renderer = Renderer::from_config(cfg);
    let mut item_rng = root.fork_named("items");
    let mut items: Vec<Vec<Arc<Item>>> = Vec::with_capacity(c_count);
    for (c, proto) in prototypes.iter().enumerate() {
        let mut row = Vec::with_capacity(cfg.items_per_category);
        for i in 0..cfg.items_per_category {
            let offset = item_rng.normal_vec(d, cfg.item_offset_scale * unit);
            let noise = item_rng.normal_vec(d, cfg.item_noise_scale * unit);
            let raw: Vec<f64> = (0..d).map(|j| proto[j] + offset[j] + noise[j]).collect();
            let feature = Vector::new(normalize(&raw)?)?;
            let mut caption = draw_tokens(c, cfg.caption_tokens, cfg, &mut item_rng);
            for _ in 0..cfg.stopwords_per_caption {
                caption
                    .push(DEFAULT_STOPWORDS[item_rng.index(DEFAULT_STOPWORDS.len())].to_string());
            }
            item_rng.shuffle(&mut caption);
            let text = draw_tokens(c, cfg.text_tokens, cfg, &mut item_rng);
            let pixel_grid = Some(renderer.render(feature.as_slice())?);
            row.push(Arc::new(Item {
                item_id: item_label(c, i),
                caption,
                text,
                visual_feature: feature,
                pixel_grid,
                category: category_label(c),
            }));
        }
        items.push(row);
    }

    let mut user_rng = root.fork_named("users");
    let users = (0..cfg.users)
        .map(|u| generate_user(u, cfg, &prototypes, &items, &mut user_rng))
        .collect::<Result<Vec<_>>>()?;

    let category_prototypes = prototypes
        .into_iter()
        .enumerate()
        .map(|(c, p)| Ok((category_label(c), Vector::new(p)?)))
        .collect::<Result<_>>()?;
    Ok(Corpus {
        items: items
            .into_iter()
            .flatten()
            .map(|it| (it.item_id.clone(), it))
            .collect(),
        users,
        generation_config: Some(GenerationRecord {
            seed,
            config: cfg.clone(),
        }),
        category_prototypes,
    })
}

fn draw_tokens(c: usize, count: usize, cfg: &CorpusConfig, rng: &mut SeededRng) -> Vec<String> {
    let n = cfg.categories;
    (0..count)
        .map(|_| {
            let src = if rng.bernoulli(cfg.neighbor_token_prob) {
                if rng.bernoulli(0.5) {
                    (c + 1) % n
                } else {
                    (c + n - 1) % n
                }
            } else {
                c
            };
            pseudo_word(src * cfg.vocab_per_category + rng.index(cfg.vocab_per_category))
        })
        .collect()
}

fn generate_user(
    u: usize,
    cfg: &CorpusConfig,
    prototypes: &[Vec<f64>],
    items: &[Vec<Arc<Item>>],
    rng: &mut SeededRng,
) -> Result<UserSequence> {
    let n = cfg.categories;
    let d = cfg.visual_dim;
    let unit = 1.0 / (d as f64).sqrt();
    let primary = rng.index(n);
    let secondary = rng
        .bernoulli(cfg.secondary_prob)
        .then(|| {
            if rng.bernoulli(0.5) {
                (primary + 1) % n
            } else {
                (primary + n - 1) % n
            }
        })
        .filter(|&s| s != primary);

    let mut planted = prototypes[primary].clone();
    if let Some(s) = secondary {
        crate::numerics::axpy(cfg.secondary_weight, &prototypes[s], &mut planted);
    }
    let noise = rng.normal_vec(d, cfg.preference_noise * unit);
    crate::numerics::axpy(1.0, &noise, &mut planted);
    let planted = normalize(&planted)?;

    let preferred = |c: usize| c == primary || Some(c) == secondary;
    let far_from = |c: usize| {
        ring_distance(c, primary, n) >= cfg.min_side_distance
            && secondary.is_none_or(|s| ring_distance(c, s, n) >= cfg.min_side_distance)
    };
    let mut far: Vec<usize> = (0..n).filter(|&c| far_from(c)).collect();
    if far.is_empty() {
        far = (0..n).filter(|&c| !preferred(c)).collect();
    }
    if far.is_empty() {
        far = (0..n).filter(|&c| c != primary).collect();
    }
    let sides: Vec<usize> = rng
        .sample_distinct(far.len(), cfg.side_categories.min(far.len()))
        .into_iter()
        .map(|i| far[i])
        .collect();

    let h = cfg.history_len;
    let n_rel = cfg.relevant_count();
    let n_sec = if secondary.is_some() {
        ((cfg.secondary_fraction * h as f64).round() as usize).min(h - n_rel)
    } else {
        0
    };

    let mut taken: BTreeSet<(usize, usize)> = BTreeSet::new();
    let pick =
        |c: usize, aligned: bool, taken: &mut BTreeSet<(usize, usize)>, rng: &mut SeededRng| loop {
            let pool = if aligned { cfg.candidate_pool } else { 1 };
            let best = (0..pool)
                .map(|_| rng.index(cfg.items_per_category))
                .filter(|i| !taken.contains(&(c, *i)))
                .max_by(|a, b| {
                    let sa = dot(items[c][*a].visual_feature.as_slice(), &planted);
                    let sb = dot(items[c][*b].visual_feature.as_slice(), &planted);
                    sa.total_cmp(&sb).then(b.cmp(a))
                });
            if let Some(i) = best {
                taken.insert((c, i));
                return i;
            }
        };

    let reference_cat = match cfg.reference_selection {
        ReferenceSelection::InPreference => primary,
        ReferenceSelection::OutOfPreference => sides[0],
    };
    let mut history: Vec<(usize, usize)> = Vec::with_capacity(h);
    for _ in 0..n_rel {
        let aligned = cfg.reference_selection == ReferenceSelection::InPreference;
        history.push((reference_cat, pick(reference_cat, aligned, &mut taken, rng)));
    }
    if let Some(s) = secondary {
        for _ in 0..n_sec {
            history.push((s, pick(s, true, &mut taken, rng)));
        }
    }
    let distractors: Vec<usize> = match cfg.reference_selection {
        ReferenceSelection::InPreference => sides.clone(),
        ReferenceSelection::OutOfPreference => vec![primary],
    };
    while history.len() < h {
        let c = distractors[rng.index(distractors.len())];
        let aligned = cfg.reference_selection == ReferenceSelection::OutOfPreference;
        history.push((c, pick(c, aligned, &mut taken, rng)));
    }
    rng.shuffle(&mut history);

    let reference = pick(reference_cat, false, &mut taken, rng);
    let held_out = (0..cfg.held_out)
        .map(|_| {
            let c = match secondary {
                Some(s) if rng.bernoulli(0.5) => s,
                _ => primary,
            };
            let i = pick(c, true, &mut taken, rng);
            items[c][i].item_id.clone()
        })
        .collect();

    Ok(UserSequence {
        user_id: format!("u{u:04}"),
        history: history.iter().map(|&(c, i)| items[c][i].clone()).collect(),
        reference: items[reference_cat][reference].clone(),
        planted_preference: Some(Vector::new(planted)?),
        held_out_positives: held_out,
    })
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_records(corpus, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_records<W: Write>(corpus: &Corpus, w: &mut W) -> std::io::Result<()> {
    let mut header = Map::new();
    header.insert("record".into(), json!("header"));
    header.insert("schema_version".into(), json!(SCHEMA_VERSION));
    if let Some(g) = &corpus.generation_config {
        header.insert("seed".into(), json!(g.seed));
        header.insert(
            "generation_config".into(),
            serde_json::to_value(&g.config).expect("config serializes"),
        );
    }
    let protos: Map<String, Value> = corpus
        .category_prototypes
        .iter()
        .map(|(k, v)| (k.clone(), json!(v.as_slice())))
        .collect();
    header.insert("category_prototypes".into(), Value::Object(protos));
    writeln!(w, "{}", Value::Object(header))?;

    for it in corpus.items.values() {
        let mut rec = Map::new();
        rec.insert("record".into(), json!("item"));
        rec.insert("item_id".into(), json!(it.item_id));
        rec.insert("caption".into(), json!(it.caption));
        rec.insert("text".into(), json!(it.text));
        rec.insert("visual_feature".into(), json!(it.visual_feature.as_slice()));
        if let Some(g) = &it.pixel_grid {
            rec.insert("pixel_grid".into(), json!(g.rows()));
        }
        rec.insert("category".into(), json!(it.category));
        writeln!(w, "{}", Value::Object(rec))?;
    }
    for u in &corpus.users {
        let mut rec = Map::new();
        rec.insert("record".into(), json!("user"));
        rec.insert("user_id".into(), json!(u.user_id));
        let hist: Vec<&str> = u.history.iter().map(|i| i.item_id.as_str()).collect();
        rec.insert("history_ids".into(), json!(hist));
        rec.insert("reference_id".into(), json!(u.reference.item_id));
        rec.insert("held_out_ids".into(), json!(u.held_out_positives));
        if let Some(p) = &u.planted_preference {
            rec.insert("planted_preference".into(), json!(p.as_slice()));
        }
        writeln!(w, "{}", Value::Object(rec))?;
    }
    Ok(())
}

struct Fields<'a> {
    line: usize,
    obj: &'a Map<String, Value>,
}

impl<'a> Fields<'a> {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn req(&self, field: &str) -> Result<&'a Value> {
        self.obj
            .get(field)
            .ok_or_else(|| self.err(field, "missing required field"))
    }

    fn string(&self, field: &str) -> Result<String> {
        self.req(field)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.err(field, "expected a string"))
    }

    fn strings(&self, field: &str) -> Result<Vec<String>> {
        self.req(field)?
            .as_array()
            .and_then(|a| a.iter().map(|v| v.as_str().map(str::to_string)).collect())
            .ok_or_else(|| self.err(field, "expected a list of strings"))
    }

    fn numbers(&self, field: &str, v: &Value) -> Result<Vec<f64>> {
        v.as_array()
            .and_then(|a| a.iter().map(Value::as_f64).collect())
            .ok_or_else(|| self.err(field, "expected a list of numbers"))
    }

    fn vector(&self, field: &str, v: &Value) -> Result<Vector> {
        let values = self.numbers(field, v)?;
        let vec = Vector::new(values).map_err(|e| self.err(field, e.to_string()))?;
        Ok(vec)
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut header_seen = false;
    let mut generation_config = None;
    let mut category_prototypes = BTreeMap::new();
    let mut items: BTreeMap<String, Arc<Item>> = BTreeMap::new();
    let mut pending_users = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            field: "<record>".into(),
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line: line_no,
            field: "<record>".into(),
            message: "expected a JSON object".into(),
        })?;
        let f = Fields { line: line_no, obj };
        match f.string("record")?.as_str() {
            "header" => {
                if header_seen {
                    return Err(f.err("record", "duplicate header"));
                }
                header_seen = true;
                let version = f
                    .req("schema_version")?
                    .as_u64()
                    .ok_or_else(|| f.err("schema_version", "expected an integer"))?;
                if version != SCHEMA_VERSION {
                    return Err(f.err("schema_version", format!("unsupported version {version}")));
                }
                if let Some(cfg) = obj.get("generation_config") {
                    let config: CorpusConfig = serde_json::from_value(cfg.clone())
                        .map_err(|e| f.err("generation_config", e.to_string()))?;
                    let seed = f
                        .req("seed")?
                        .as_u64()
                        .ok_or_else(|| f.err("seed", "expected an integer"))?;
                    generation_config = Some(GenerationRecord { seed, config });
                }
                if let Some(protos) = obj.get("category_prototypes") {
                    let protos = protos
                        .as_object()
                        .ok_or_else(|| f.err("category_prototypes", "expected an object"))?;
                    for (k, v) in protos {
                        category_prototypes.insert(k.clone(), f.vector("category_prototypes", v)?);
                    }
                }
            }
            "item" => {
                if !header_seen {
                    return Err(f.err("record", "item record before header"));
                }
                let item_id = f.string("item_id")?;
                let caption = f.strings("caption")?;
                let text = f.strings("text")?;
                let visual_feature = f.vector("visual_feature", f.req("visual_feature")?)?;
                if visual_feature.norm() == 0.0 {
                    return Err(f.err("visual_feature", "zero-norm feature"));
                }
                let pixel_grid = match obj.get("pixel_grid") {
                    None | Some(Value::Null) => None,
                    Some(v) => {
                        let rows = v
                            .as_array()
                            .ok_or_else(|| f.err("pixel_grid", "expected a list of rows"))?
                            .iter()
                            .map(|r| f.numbers("pixel_grid", r))
                            .collect::<Result<Vec<_>>>()?;
                        Some(
                            PixelGrid::from_rows(rows)
                                .map_err(|e| f.err("pixel_grid", e.to_string()))?,
                        )
                    }
                };
                let category = f.string("category")?;
                if items.contains_key(&item_id) {
                    return Err(f.err("item_id", format!("duplicate item id {item_id}")));
                }
                items.insert(
                    item_id.clone(),
                    Arc::new(Item {
                        item_id,
                        caption,
                        text,
                        visual_feature,
                        pixel_grid,
                        category,
                    }),
                );
            }
            "user" => {
                if !header_seen {
                    return Err(f.err("record", "user record before header"));
                }
                let user_id = f.string("user_id")?;
                let history_ids = f.strings("history_ids")?;
                let reference_id = f.string("reference_id")?;
                let held_out = f.strings("held_out_ids")?;
                let planted = match obj.get("planted_preference") {
                    None | Some(Value::Null) => None,
                    Some(v) => Some(f.vector("planted_preference", v)?),
                };
                if history_ids.is_empty() {
                    return Err(f.err("history_ids", "history must contain at least one item"));
                }
                if history_ids.contains(&reference_id) {
                    return Err(f.err("reference_id", "reference item appears in history"));
                }
                pending_users.push((
                    line_no,
                    user_id,
                    history_ids,
                    reference_id,
                    held_out,
                    planted,
                ));
            }
            other => return Err(f.err("record", format!("unknown record type `{other}`"))),
        }
    }
    if !header_seen {
        return Err(Error::Parse {
            line: 0,
            field: "record".into(),
            message: "corpus has no header record".into(),
        });
    }

    let mut users = Vec::with_capacity(pending_users.len());
    for (line, user_id, history_ids, reference_id, held_out, planted) in pending_users {
        let resolve = |field: &str, id: &str| {
            items.get(id).cloned().ok_or_else(|| Error::Parse {
                line,
                field: field.to_string(),
                message: format!("unknown item id {id}"),
            })
        };
        let history = history_ids
            .iter()
            .map(|id| resolve("history_ids", id))
            .collect::<Result<Vec<_>>>()?;
        let reference = resolve("reference_id", &reference_id)?;
        for id in &held_out {
            resolve("held_out_ids", id)?;
        }
        users.push(UserSequence {
            user_id,
            history,
            reference,
            planted_preference: planted,
            held_out_positives: held_out,
        });
    }
    Ok(Corpus {
        items,
        users,
        generation_config,
        category_prototypes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine_similarity;

    fn small() -> CorpusConfig {
        CorpusConfig {
            users: 12,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let a = generate_corpus(&small(), 7).unwrap();
        let b = generate_corpus(&small(), 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate_corpus(&small(), 8).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn relevant_fraction_quarter_gives_five() {
        let c = generate_corpus(&small(), 3).unwrap();
        for u in &c.users {
            assert_eq!(u.history.len(), 20);
            assert_eq!(u.in_cluster_history().count(), 5, "user {}", u.user_id);
        }
    }

    #[test]
    fn relevant_fraction_one_is_all_in_cluster() {
        let cfg = CorpusConfig {
            relevant_fraction: 1.0,
            ..small()
        };
        let c = generate_corpus(&cfg, 3).unwrap();
        for u in &c.users {
            assert!(u
                .history
                .iter()
                .all(|it| it.category == u.reference.category));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            CorpusConfig {
                categories: 1,
                ..small()
            },
            CorpusConfig {
                relevant_fraction: 1.5,
                ..small()
            },
            CorpusConfig {
                relevant_fraction: -0.1,
                ..small()
            },
        ] {
            assert!(matches!(generate_corpus(&cfg, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn structural_invariants() {
        let c = generate_corpus(&small(), 11).unwrap();
        for u in &c.users {
            let hist: BTreeSet<&str> = u.history.iter().map(|i| i.item_id.as_str()).collect();
            assert_eq!(hist.len(), u.history.len());
            assert!(!hist.contains(u.reference.item_id.as_str()));
            assert_eq!(u.held_out_positives.len(), 5);
            for id in &u.held_out_positives {
                assert!(!hist.contains(id.as_str()) && *id != u.reference.item_id);
                assert!(c.items.contains_key(id));
            }
        }
        for it in c.items.values() {
            let g = it.pixel_grid.as_ref().unwrap();
            assert_eq!(g.size(), 16);
            assert!(g.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((it.visual_feature.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_preference_reference_is_far_from_planted() {
        let cfg = CorpusConfig {
            reference_selection: ReferenceSelection::OutOfPreference,
            ..small()
        };
        let c = generate_corpus(&cfg, 5).unwrap();
        for u in &c.users {
            let p = u.planted_preference.as_ref().unwrap();
            let cos =
                cosine_similarity(u.reference.visual_feature.as_slice(), p.as_slice()).unwrap();
            assert!(cos < 0.6, "user {} cos {cos}", u.user_id);
        }
    }

    #[test]
    fn pseudo_words_are_distinct() {
        let words: BTreeSet<String> = (0..5000).map(pseudo_word).collect();
        assert_eq!(words.len(), 5000);
        assert!(words
            .iter()
            .all(|w| !DEFAULT_STOPWORDS.contains(&w.as_str())));
    }

    #[test]
    fn ring_distance_wraps() {
        assert_eq!(ring_distance(0, 15, 16), 1);
        assert_eq!(ring_distance(3, 11, 16), 8);
        assert_eq!(ring_distance(5, 5, 16), 0);
    }
}
