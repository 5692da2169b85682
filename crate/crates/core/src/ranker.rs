//! Two-tower ranking model trained with a logistic pairwise loss, candidate
//! scoring over `{reference, global, generated}`, and Recall/NDCG.
//!
//! ```text
//! user  = user_proj · mean(history features)
//! item  = w · item_proj_visual · feature + (1 − w) · item_proj_text · e_sem
//! score = user · item
//! ```

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{Corpus, UserSequence};
use crate::encoders::SemanticEncoder;
use crate::error::{ensure_dim, Error, Result};
use crate::generator::{GeneratedImage, Provenance};
use crate::numerics::{axpy, dot, Matrix, SeededRng, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerConfig {
    pub dim: usize,
    pub fusion_weight: f64,
    pub epochs: usize,
    pub lr: f64,
    pub init_noise: f64,
    pub weight_decay: f64,
    /// Sampled `(positive, negative)` pairs per user for the AUC estimate.
    pub auc_pairs_per_user: usize,
    pub seed: u64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            dim: 32,
            fusion_weight: 0.7,
            epochs: 10,
            lr: 0.05,
            init_noise: 0.1,
            weight_decay: 1e-4,
            auc_pairs_per_user: 20,
            seed: 0x4a11_0001,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("ranker.dim must be positive"));
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(Error::config("ranker.fusion_weight must lie in [0, 1]"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0)
            || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0)
        {
            return Err(Error::config(
                "ranker.lr and weight_decay must be finite and non-negative",
            ));
        }
        if !(self.init_noise.is_finite() && self.init_noise >= 0.0) {
            return Err(Error::config(
                "ranker.init_noise must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankModelParams {
    pub user_proj: Matrix,
    pub item_proj_visual: Matrix,
    pub item_proj_text: Matrix,
    pub fusion_weight: f64,
}

fn near_identity(rows: usize, cols: usize, noise: f64, rng: &mut SeededRng) -> Matrix {
    let n = Matrix::random_normal(rows, cols, noise / (cols as f64).sqrt(), rng);
    Matrix::from_fn(
        rows,
        cols,
        |r, c| if r == c { 1.0 } else { 0.0 } + n.get(r, c),
    )
}

impl RankModelParams {
    pub fn init(cfg: &RankerConfig, visual_dim: usize, text_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed).fork_named("rank-init");
        let p = RankModelParams {
            user_proj: near_identity(cfg.dim, visual_dim, cfg.init_noise, &mut rng),
            item_proj_visual: near_identity(cfg.dim, visual_dim, cfg.init_noise, &mut rng),
            item_proj_text: near_identity(cfg.dim, text_dim, cfg.init_noise, &mut rng),
            fusion_weight: cfg.fusion_weight,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.user_proj.rows();
        ensure_dim("item_proj_visual rows", d, self.item_proj_visual.rows())?;
        ensure_dim("item_proj_text rows", d, self.item_proj_text.rows())?;
        ensure_dim(
            "item_proj_visual cols",
            self.user_proj.cols(),
            self.item_proj_visual.cols(),
        )?;
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(Error::domain("fusion_weight must lie in [0, 1]"));
        }
        if !(self.user_proj.is_finite()
            && self.item_proj_visual.is_finite()
            && self.item_proj_text.is_finite())
        {
            return Err(Error::domain("rank model has non-finite parameters"));
        }
        Ok(())
    }

    pub fn visual_dim(&self) -> usize {
        self.user_proj.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.item_proj_text.cols()
    }

    pub fn user_embedding_from(&self, features: &[&[f64]]) -> Result<Vec<f64>> {
        if features.is_empty() {
            return Err(Error::domain("user tower needs at least one history item"));
        }
        let mut mean = vec![0.0; self.visual_dim()];
        for f in features {
            ensure_dim("history feature", mean.len(), f.len())?;
            axpy(1.0 / features.len() as f64, f, &mut mean);
        }
        Ok(self.user_proj.matvec(&mean))
    }

    pub fn user_embedding(&self, user: &UserSequence) -> Result<Vec<f64>> {
        self.user_embedding_from(&user.history_features())
    }

    pub fn item_embedding(&self, feature: &[f64], sem: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("candidate feature", self.visual_dim(), feature.len())?;
        ensure_dim("candidate semantic embedding", self.text_dim(), sem.len())?;
        let w = self.fusion_weight;
        let mut e: Vec<f64> = self
            .item_proj_visual
            .matvec(feature)
            .iter()
            .map(|v| w * v)
            .collect();
        axpy(1.0 - w, &self.item_proj_text.matvec(sem), &mut e);
        Ok(e)
    }

    pub fn score(&self, user_emb: &[f64], feature: &[f64], sem: &[f64]) -> Result<f64> {
        Ok(dot(user_emb, &self.item_embedding(feature, sem)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("rank_model").with_meta("fusion_weight", self.fusion_weight);
        ck.push("user_proj", &self.user_proj);
        ck.push("item_proj_visual", &self.item_proj_visual);
        ck.push("item_proj_text", &self.item_proj_text);
        ck
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        ck.expect_kind("rank_model")?;
        let p = RankModelParams {
            fusion_weight: ck.meta_parse("fusion_weight")?,
            user_proj: ck.take("user_proj")?,
            item_proj_visual: ck.take("item_proj_visual")?,
            item_proj_text: ck.take("item_proj_text")?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Precomputed pieces for scoring many candidates against one user with a
/// shared caption embedding.
#[derive(Debug, Clone)]
pub struct UserScorer<'a> {
    params: &'a RankModelParams,
    user_emb: Vec<f64>,
    /// Projection of the user embedding onto the visual tower.
    visual_dir: Vec<f64>,
    text_term: f64,
}

impl<'a> UserScorer<'a> {
    pub fn new(params: &'a RankModelParams, user: &UserSequence, sem: &[f64]) -> Result<Self> {
        let user_emb = params.user_embedding(user)?;
        ensure_dim("candidate semantic embedding", params.text_dim(), sem.len())?;
        let w = params.fusion_weight;
        let visual_dir: Vec<f64> = params
            .item_proj_visual
            .matvec_t(&user_emb)
            .iter()
            .map(|v| w * v)
            .collect();
        let text_term = (1.0 - w) * dot(&user_emb, &params.item_proj_text.matvec(sem));
        Ok(UserScorer {
            params,
            user_emb,
            visual_dir,
            text_term,
        })
    }

    pub fn user_embedding(&self) -> &[f64] {
        &self.user_emb
    }

    pub fn params(&self) -> &RankModelParams {
        self.params
    }

    pub fn score(&self, feature: &[f64]) -> Result<f64> {
        ensure_dim("candidate feature", self.visual_dir.len(), feature.len())?;
        Ok(dot(&self.visual_dir, feature) + self.text_term)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankOutcome {
    /// Indexed in [`Provenance::ALL`] order.
    pub scores: [f64; 3],
    pub ranks: [usize; 3],
}

impl RankOutcome {
    /// Rank 1 is the highest score; ties go to the earlier provenance.
    pub fn from_scores(scores: [f64; 3]) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::domain("candidate scores must be finite"));
        }
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut ranks = [0usize; 3];
        for (pos, &i) in order.iter().enumerate() {
            ranks[i] = pos + 1;
        }
        Ok(RankOutcome { scores, ranks })
    }

    fn idx(p: Provenance) -> usize {
        p as usize
    }

    pub fn score(&self, p: Provenance) -> f64 {
        self.scores[Self::idx(p)]
    }

    pub fn rank(&self, p: Provenance) -> usize {
        self.ranks[Self::idx(p)]
    }
}

/// Scores the three candidates against the user, with every candidate's
/// text side taken from the reference caption.
pub fn score_candidates(
    user: &UserSequence,
    candidates: &[GeneratedImage],
    params: &RankModelParams,
    encoder: &SemanticEncoder,
) -> Result<RankOutcome> {
    if candidates.len() != 3 {
        return Err(Error::domain(format!(
            "expected 3 candidates, got {}",
            candidates.len()
        )));
    }
    let mut slots: [Option<&GeneratedImage>; 3] = [None; 3];
    for c in candidates {
        let slot = &mut slots[c.provenance as usize];
        if slot.is_some() {
            return Err(Error::domain(format!(
                "duplicate {} candidate",
                c.provenance.as_str()
            )));
        }
        *slot = Some(c);
    }
    let sem = encoder.encode_item(&user.reference)?;
    let scorer = UserScorer::new(params, user, sem.as_slice())?;
    let mut scores = [0.0; 3];
    for (s, c) in scores.iter_mut().zip(slots) {
        *s = scorer.score(c.expect("all provenances present").feature.as_slice())?;
    }
    RankOutcome::from_scores(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub auc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedRankModel {
    pub params: RankModelParams,
    pub log: Vec<EpochLog>,
}

/// Semantic embeddings of every caption in the corpus.
pub fn caption_table(
    corpus: &Corpus,
    encoder: &SemanticEncoder,
) -> Result<BTreeMap<String, Vec<f64>>> {
    corpus
        .items
        .values()
        .map(|it| {
            Ok((
                it.item_id.clone(),
                encoder.encode_item(it)?.vec.into_inner(),
            ))
        })
        .collect()
}

struct TrainingView<'a> {
    ids: Vec<&'a str>,
    features: Vec<&'a [f64]>,
    sems: Vec<&'a [f64]>,
    /// Per user: history mean, positive item indices, excluded indices.
    users: Vec<(Vec<f64>, Vec<usize>, BTreeSet<usize>)>,
}

impl<'a> TrainingView<'a> {
    /// With `references`, user `u`'s reference positive uses
    /// `references[u]` as its feature; the catalog and negative sampling
    /// are unchanged.
    fn build(
        corpus: &'a Corpus,
        captions: &'a BTreeMap<String, Vec<f64>>,
        references: Option<&'a [Vector]>,
    ) -> Result<Self> {
        let ids: Vec<&str> = corpus.items.keys().map(String::as_str).collect();
        let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut features: Vec<&[f64]> = corpus
            .items
            .values()
            .map(|it| it.visual_feature.as_slice())
            .collect();
        let mut sems: Vec<&[f64]> = ids
            .iter()
            .map(|id| {
                captions
                    .get(*id)
                    .map(Vec::as_slice)
                    .ok_or_else(|| Error::domain(format!("no caption embedding for {id}")))
            })
            .collect::<Result<_>>()?;
        if let Some(refs) = references {
            ensure_dim("reference overrides", corpus.users.len(), refs.len())?;
        }
        let mut users = Vec::with_capacity(corpus.users.len());
        for (ui, u) in corpus.users.iter().enumerate() {
            let dim = u.reference.visual_feature.dim();
            let mut mean = vec![0.0; dim];
            for it in &u.history {
                axpy(
                    1.0 / u.history.len() as f64,
                    it.visual_feature.as_slice(),
                    &mut mean,
                );
            }
            let mut positives: Vec<usize> = u
                .history
                .iter()
                .map(|it| index[it.item_id.as_str()])
                .collect();
            let ref_index = index[u.reference.item_id.as_str()];
            let mut excluded: BTreeSet<usize> = positives.iter().copied().collect();
            excluded.insert(ref_index);
            match references {
                Some(refs) => {
                    ensure_dim("reference override", corpus.visual_dim(), refs[ui].dim())?;
                    positives.push(features.len());
                    features.push(refs[ui].as_slice());
                    let sem = sems[ref_index];
                    sems.push(sem);
                }
                None => positives.push(ref_index),
            }
            for id in &u.held_out_positives {
                if let Some(&i) = index.get(id.as_str()) {
                    excluded.insert(i);
                }
            }
            users.push((mean, positives, excluded));
        }
        Ok(TrainingView {
            ids,
            features,
            sems,
            users,
        })
    }

    fn sample_negative(&self, excluded: &BTreeSet<usize>, rng: &mut SeededRng) -> Option<usize> {
        if excluded.len() >= self.ids.len() {
            return None;
        }
        loop {
            let j = rng.index(self.ids.len());
            if !excluded.contains(&j) {
                return Some(j);
            }
        }
    }
}

/// Gradient step on `−log σ(s_pos − s_neg)`; returns the loss.
fn pairwise_step(
    p: &mut RankModelParams,
    mean: &[f64],
    pos: (&[f64], &[f64]),
    neg: (&[f64], &[f64]),
    lr: f64,
    decay: f64,
) -> f64 {
    let w = p.fusion_weight;
    let u = p.user_proj.matvec(mean);
    let df: Vec<f64> = pos.0.iter().zip(neg.0).map(|(a, b)| a - b).collect();
    let ds: Vec<f64> = pos.1.iter().zip(neg.1).map(|(a, b)| a - b).collect();
    let mut di: Vec<f64> = p
        .item_proj_visual
        .matvec(&df)
        .iter()
        .map(|v| w * v)
        .collect();
    axpy(1.0 - w, &p.item_proj_text.matvec(&ds), &mut di);
    let margin = dot(&u, &di);
    let loss = softplus(-margin);
    let g = -sigmoid(-margin);
    if decay > 0.0 {
        for m in [
            &mut p.user_proj,
            &mut p.item_proj_visual,
            &mut p.item_proj_text,
        ] {
            m.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v *= 1.0 - lr * decay);
        }
    }
    p.user_proj.add_outer(-lr * g, &di, mean);
    p.item_proj_visual.add_outer(-lr * g * w, &u, &df);
    p.item_proj_text.add_outer(-lr * g * (1.0 - w), &u, &ds);
    loss
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Fraction of sampled `(positive, negative)` pairs ordered correctly, ties
/// counting one half.
fn pairwise_auc(
    p: &RankModelParams,
    view: &TrainingView<'_>,
    pairs: &[(usize, usize, usize)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut wins = 0.0;
    let mut cache: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(u, pos, neg) in pairs {
        let emb = match cache.get(&u) {
            Some(e) => e.clone(),
            None => {
                let e = p.user_proj.matvec(&view.users[u].0);
                cache.insert(u, e.clone());
                e
            }
        };
        let sp = p.score(&emb, view.features[pos], view.sems[pos])?;
        let sn = p.score(&emb, view.features[neg], view.sems[neg])?;
        wins += if sp > sn {
            1.0
        } else if sp == sn {
            0.5
        } else {
            0.0
        };
    }
    Ok(wins / pairs.len() as f64)
}

pub fn train_rank_model(
    corpus: &Corpus,
    encoder: &SemanticEncoder,
    cfg: &RankerConfig,
) -> Result<TrainedRankModel> {
    let captions = caption_table(corpus, encoder)?;
    train_rank_model_with_captions(corpus, &captions, cfg)
}

pub fn train_rank_model_with_captions(
    corpus: &Corpus,
    captions: &BTreeMap<String, Vec<f64>>,
    cfg: &RankerConfig,
) -> Result<TrainedRankModel> {
    train_rank_model_with_references(corpus, captions, cfg, None)
}

/// Training where each user's reference positive takes its visual feature
/// from `references` (indexed like `corpus.users`) instead of the item.
pub fn train_rank_model_with_references(
    corpus: &Corpus,
    captions: &BTreeMap<String, Vec<f64>>,
    cfg: &RankerConfig,
    references: Option<&[Vector]>,
) -> Result<TrainedRankModel> {
    cfg.validate()?;
    if corpus.users.is_empty() || corpus.users.iter().all(|u| u.held_out_positives.is_empty()) {
        return Err(Error::config(
            "rank model training needs users with held-out positives",
        ));
    }
    let text_dim = captions
        .values()
        .next()
        .map(Vec::len)
        .ok_or_else(|| Error::config("corpus has no items"))?;
    let mut params = RankModelParams::init(cfg, corpus.visual_dim(), text_dim)?;
    let view = TrainingView::build(corpus, captions, references)?;
    let root = SeededRng::new(cfg.seed);

    let mut eval_rng = root.fork_named("auc-pairs");
    let mut eval_pairs = Vec::new();
    for (u, (_, positives, excluded)) in view.users.iter().enumerate() {
        for _ in 0..cfg.auc_pairs_per_user {
            let pos = positives[eval_rng.index(positives.len())];
            if let Some(neg) = view.sample_negative(excluded, &mut eval_rng) {
                eval_pairs.push((u, pos, neg));
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = view
        .users
        .iter()
        .enumerate()
        .flat_map(|(u, (_, positives, _))| positives.iter().map(move |&p| (u, p)))
        .collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = root.fork_named("epoch").fork(epoch as u64);
        rng.shuffle(&mut pairs);
        let mut total = 0.0;
        let mut count = 0usize;
        for &(u, pos) in &pairs {
            let (mean, _, excluded) = &view.users[u];
            let Some(neg) = view.sample_negative(excluded, &mut rng) else {
                continue;
            };
            total += pairwise_step(
                &mut params,
                mean,
                (view.features[pos], view.sems[pos]),
                (view.features[neg], view.sems[neg]),
                cfg.lr,
                cfg.weight_decay,
            );
            count += 1;
        }
        if !(params.user_proj.is_finite()
            && params.item_proj_visual.is_finite()
            && params.item_proj_text.is_finite())
        {
            return Err(Error::domain(format!(
                "rank model diverged in epoch {epoch}"
            )));
        }
        log.push(EpochLog {
            epoch,
            mean_loss: if count > 0 { total / count as f64 } else { 0.0 },
            auc: pairwise_auc(&params, &view, &eval_pairs)?,
        });
    }
    Ok(TrainedRankModel { params, log })
}

/// Pairwise AUC of `params` on freshly sampled training pairs.
pub fn training_auc(
    corpus: &Corpus,
    captions: &BTreeMap<String, Vec<f64>>,
    params: &RankModelParams,
    pairs_per_user: usize,
    seed: u64,
) -> Result<f64> {
    let view = TrainingView::build(corpus, captions, None)?;
    let mut rng = SeededRng::new(seed);
    let mut pairs = Vec::new();
    for (u, (_, positives, excluded)) in view.users.iter().enumerate() {
        for _ in 0..pairs_per_user {
            let pos = positives[rng.index(positives.len())];
            if let Some(neg) = view.sample_negative(excluded, &mut rng) {
                pairs.push((u, pos, neg));
            }
        }
    }
    pairwise_auc(params, &view, &pairs)
}

fn check_k(k: usize, positives: &BTreeSet<&str>) -> Result<()> {
    if k == 0 {
        return Err(Error::domain("k must be at least 1"));
    }
    if positives.is_empty() {
        return Err(Error::domain(
            "relevance metrics need at least one positive",
        ));
    }
    Ok(())
}

/// Share of positives appearing in the top `k` of `ranked`.
pub fn recall_at_k<S: AsRef<str>>(positives: &[S], ranked: &[S], k: usize) -> Result<f64> {
    let pos: BTreeSet<&str> = positives.iter().map(AsRef::as_ref).collect();
    check_k(k, &pos)?;
    let hits = ranked
        .iter()
        .take(k)
        .filter(|id| pos.contains(id.as_ref()))
        .count();
    Ok(hits as f64 / pos.len() as f64)
}

/// Binary-relevance NDCG with a log₂ discount.
pub fn ndcg_at_k<S: AsRef<str>>(positives: &[S], ranked: &[S], k: usize) -> Result<f64> {
    let pos: BTreeSet<&str> = positives.iter().map(AsRef::as_ref).collect();
    check_k(k, &pos)?;
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| pos.contains(id.as_ref()))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..pos.len().min(k))
        .map(|i| 1.0 / ((i + 2) as f64).log2())
        .sum();
    Ok(dcg / ideal)
}

/// Every non-interacted item for `user`, best first (ties by id).
pub fn rank_catalog(
    corpus: &Corpus,
    captions: &BTreeMap<String, Vec<f64>>,
    user: &UserSequence,
    user_emb: &[f64],
    params: &RankModelParams,
) -> Result<Vec<String>> {
    let seen = user.interacted_ids();
    let mut scored: Vec<(f64, &str)> = Vec::with_capacity(corpus.items.len());
    for (id, it) in &corpus.items {
        if seen.contains(id.as_str()) {
            continue;
        }
        let sem = captions
            .get(id)
            .ok_or_else(|| Error::domain(format!("no caption embedding for {id}")))?;
        scored.push((
            params.score(user_emb, it.visual_feature.as_slice(), sem)?,
            id,
        ));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().map(|(_, id)| id.to_string()).collect())
}
