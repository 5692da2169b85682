use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_corpus, Corpus, UserSequence};
use crate::error::{Error, Result};
use crate::harness::config::{AblationAxis, RunConfig};
use crate::harness::report::{ExperimentReport, Record};
use crate::metrics::{evaluate_user, DeltaROrigin, UserMetrics};
use crate::numerics::{cosine_similarity, Vector};
use crate::pipeline::{Pipeline, PipelineConfig, UserContext};
use crate::preference::{forward, CalibratorParams, PreferenceConfig};
use crate::ranker::{
    caption_table, ndcg_at_k, rank_catalog, recall_at_k, train_rank_model_with_captions,
    train_rank_model_with_references, RankModelParams,
};
use crate::reflection::{reflect, ReflectionConfig, ReflectionRun};
use crate::retrieval::{fuse, score_history, select, Strategy};

/// Runs `f` on a dedicated pool of `jobs` threads.
pub fn run_in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(f)
}

/// Corpus, frozen pipeline and trained rank model for one seed.
#[derive(Debug, Clone)]
pub struct SeedSetup {
    pub cfg: RunConfig,
    pub corpus: Corpus,
    pub pipeline: Pipeline,
    pub captions: BTreeMap<String, Vec<f64>>,
    pub rm: RankModelParams,
}

impl SeedSetup {
    pub fn build(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let cfg = cfg.for_seed(seed);
        let corpus = generate_corpus(&cfg.corpus, seed)?;
        Self::from_corpus(cfg, corpus)
    }

    pub fn from_corpus(cfg: RunConfig, corpus: Corpus) -> Result<Self> {
        let pipeline = Pipeline::new(&cfg.pipeline, &corpus, cfg.seed)?;
        let captions = caption_table(&corpus, &pipeline.encoder)?;
        let rm = train_rank_model_with_captions(&corpus, &captions, &cfg.ranker)?.params;
        Ok(SeedSetup {
            cfg,
            corpus,
            pipeline,
            captions,
            rm,
        })
    }
}

/// Untrained calibrator for a user, seeded per user.
pub fn initial_calibrator(
    pipeline: &Pipeline,
    cfg: &PreferenceConfig,
    user_id: &str,
) -> Result<CalibratorParams> {
    CalibratorParams::init(cfg, &mut pipeline.user_rng(user_id, "calibrator"))
}

#[derive(Debug, Clone)]
pub struct UserReflection {
    pub ctx: UserContext,
    pub initial: CalibratorParams,
    pub run: ReflectionRun,
}

pub fn reflect_user(
    pipeline: &Pipeline,
    pcfg: &PipelineConfig,
    rcfg: &ReflectionConfig,
    rm: &RankModelParams,
    user: &UserSequence,
) -> Result<UserReflection> {
    let ctx = pipeline.context(user)?;
    let initial = initial_calibrator(pipeline, &pcfg.preference, &user.user_id)?;
    let run = reflect(&ctx, pipeline, &initial, rm, rcfg)
        .map_err(|e| e.context(format!("user {}", user.user_id)))?;
    Ok(UserReflection { ctx, initial, run })
}

/// Feature of the image generated from the calibrator's current output.
pub fn generated_feature(
    pipeline: &Pipeline,
    ctx: &UserContext,
    params: &CalibratorParams,
) -> Result<Vector> {
    let cache = forward(ctx.e_txt.as_slice(), ctx.e_g.as_slice(), params)?;
    Ok(pipeline.generator.generate(&cache.p_gen)?.feature)
}

fn planted(user: &UserSequence) -> Result<&[f64]> {
    user.planted_preference
        .as_ref()
        .map(Vector::as_slice)
        .ok_or_else(|| Error::config(format!("user {} has no planted preference", user.user_id)))
}

fn mean_penalty(run: &ReflectionRun, range: std::ops::Range<usize>) -> f64 {
    let logs = &run.logs[range];
    logs.iter().map(|l| l.mean_penalty).sum::<f64>() / logs.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub seed: u64,
    pub user_id: String,
    pub first_penalty: f64,
    pub last_penalty: f64,
    pub metrics: UserMetrics,
}

/// Reflection on the first user of the seed's corpus, evaluated against the
/// reference image. Penalty means cover the first and last `window` steps.
pub fn toy_run(cfg: &RunConfig, seed: u64, window: usize) -> Result<ToyRun> {
    let setup = SeedSetup::build(cfg, seed)?;
    let user = setup
        .corpus
        .users
        .first()
        .ok_or_else(|| Error::config("toy run needs at least one user"))?;
    let steps = setup.cfg.reflection.steps;
    if window == 0 || window > steps {
        return Err(Error::config(format!(
            "toy window {window} must be within 1..={steps}"
        )));
    }
    let r = reflect_user(
        &setup.pipeline,
        &setup.cfg.pipeline,
        &setup.cfg.reflection,
        &setup.rm,
        user,
    )?;
    let metrics = evaluate_user(
        &setup.corpus,
        &setup.pipeline,
        &r.ctx,
        &r.run.params,
        &setup.rm,
        &DeltaROrigin::Reference,
        &setup.cfg.eval.delta_r,
    )?;
    Ok(ToyRun {
        seed,
        user_id: user.user_id.clone(),
        first_penalty: mean_penalty(&r.run, 0..window),
        last_penalty: mean_penalty(&r.run, steps - window..steps),
        metrics,
    })
}

/// Alignment of each retrieval strategy's sequence with the planted
/// preference, plus the rank model's score of the reference under it.
pub fn validate_retrieval(cfg: &RunConfig) -> Result<ExperimentReport> {
    let v = &cfg.validation;
    if v.strategies.is_empty() {
        return Err(Error::config("validation.strategies must not be empty"));
    }
    if v.strategies.contains(&Strategy::All) {
        return Err(Error::config(
            "validation.strategies accepts ret, exp_ret and random",
        ));
    }
    if v.k == 0 {
        return Err(Error::config("validation.k must be at least 1"));
    }
    if 2 * v.k > cfg.corpus.history_len {
        return Err(Error::config(format!(
            "validation.k = {} needs a history of at least {} items, corpus.history_len is {}",
            v.k,
            2 * v.k,
            cfg.corpus.history_len
        )));
    }
    let seeds = cfg.seeds(v.num_seeds);
    let per_seed: Vec<Vec<Record>> = seeds
        .par_iter()
        .map(|&seed| validate_seed(cfg, seed).map_err(|e| e.context(format!("seed {seed}"))))
        .collect::<Result<_>>()?;
    let arms: Vec<String> = v.strategies.iter().map(|s| s.to_string()).collect();
    ExperimentReport::from_records(
        &cfg.experiment,
        "validate-retrieval",
        &arms,
        &["alignment", "rm_score"],
        &seeds,
        per_seed.into_iter().flatten().collect(),
    )
}

fn validate_seed(cfg: &RunConfig, seed: u64) -> Result<Vec<Record>> {
    let setup = SeedSetup::build(cfg, seed)?;
    let k = cfg.validation.k;
    let temperature = setup.cfg.pipeline.retrieval.score_temperature;
    let mut records = Vec::new();
    for user in &setup.corpus.users {
        if user.history.len() < 2 * k {
            return Err(Error::config(format!(
                "user {} has {} history items, fewer than 2k = {}",
                user.user_id,
                user.history.len(),
                2 * k
            )));
        }
        let target = planted(user)?;
        let scores = score_history(user, &setup.pipeline.encoder)?;
        let ref_sem = &setup.captions[&user.reference.item_id];
        for &strategy in &cfg.validation.strategies {
            let mut rng = setup
                .pipeline
                .user_rng(&user.user_id, "validate")
                .fork_named(&strategy.to_string());
            let selected = select(&scores, k, strategy, &mut rng)?;
            let fused = fuse(user, &selected, &scores, strategy, temperature)?;
            let features: Vec<&[f64]> = selected
                .iter()
                .map(|&i| user.history[i].visual_feature.as_slice())
                .collect();
            let emb = setup.rm.user_embedding_from(&features)?;
            let rm_score =
                setup
                    .rm
                    .score(&emb, user.reference.visual_feature.as_slice(), ref_sem)?;
            let arm = strategy.to_string();
            for (metric, value) in [
                (
                    "alignment",
                    cosine_similarity(fused.p_ret.as_slice(), target)?,
                ),
                ("rm_score", rm_score),
            ] {
                records.push(Record {
                    seed,
                    user: user.user_id.clone(),
                    arm: arm.clone(),
                    metric: metric.into(),
                    value,
                });
            }
        }
    }
    Ok(records)
}

pub const ABLATION_METRICS: [&str; 7] = [
    "alignment",
    "final_penalty",
    "delta_r",
    "cps",
    "cpis",
    "cs",
    "cis",
];

fn ablation_arm(axis: AblationAxis, value: usize) -> String {
    match axis {
        AblationAxis::RetrievalK => format!("k={value}"),
        AblationAxis::NoiseR => format!("r={value}"),
    }
}

/// Full reflect and eval per value and seed. `alignment` is the cosine of
/// the generated feature with the planted preference; `final_penalty` is
/// the mean penalty over the last `min(20, steps)` steps.
pub fn ablate(cfg: &RunConfig) -> Result<ExperimentReport> {
    let a = &cfg.ablation;
    if a.values.is_empty() {
        return Err(Error::config("ablation.values must not be empty"));
    }
    if a.users == 0 {
        return Err(Error::config("ablation.users must be at least 1"));
    }
    if a.axis == AblationAxis::NoiseR && a.values.contains(&0) {
        return Err(Error::config("noise_r values must be at least 1"));
    }
    let seeds = cfg.seeds(a.num_seeds);
    let per_seed: Vec<Vec<Record>> = seeds
        .par_iter()
        .map(|&seed| ablate_seed(cfg, seed).map_err(|e| e.context(format!("seed {seed}"))))
        .collect::<Result<_>>()?;
    let arms: Vec<String> = a.values.iter().map(|&v| ablation_arm(a.axis, v)).collect();
    ExperimentReport::from_records(
        &cfg.experiment,
        &format!("ablate:{}", a.axis.as_str()),
        &arms,
        &ABLATION_METRICS,
        &seeds,
        per_seed.into_iter().flatten().collect(),
    )
}

fn ablate_seed(cfg: &RunConfig, seed: u64) -> Result<Vec<Record>> {
    let setup = SeedSetup::build(cfg, seed)?;
    let a = &cfg.ablation;
    let users = &setup.corpus.users[..a.users.min(setup.corpus.users.len())];
    let mut records = Vec::new();
    for &value in &a.values {
        let mut arm_cfg = setup.cfg.clone();
        match a.axis {
            AblationAxis::RetrievalK => arm_cfg.pipeline.retrieval.k = value,
            AblationAxis::NoiseR => arm_cfg.reflection.r = value,
        }
        let pipeline = Pipeline::new(&arm_cfg.pipeline, &setup.corpus, arm_cfg.seed)?;
        let arm = ablation_arm(a.axis, value);
        let rows: Vec<Vec<(&str, f64)>> = users
            .par_iter()
            .map(|user| {
                let r = reflect_user(
                    &pipeline,
                    &arm_cfg.pipeline,
                    &arm_cfg.reflection,
                    &setup.rm,
                    user,
                )?;
                let m = evaluate_user(
                    &setup.corpus,
                    &pipeline,
                    &r.ctx,
                    &r.run.params,
                    &setup.rm,
                    &DeltaROrigin::Reference,
                    &arm_cfg.eval.delta_r,
                )?;
                let feature = generated_feature(&pipeline, &r.ctx, &r.run.params)?;
                let steps = r.run.logs.len();
                Ok(vec![
                    (
                        "alignment",
                        cosine_similarity(feature.as_slice(), planted(user)?)?,
                    ),
                    (
                        "final_penalty",
                        mean_penalty(&r.run, steps.saturating_sub(20)..steps),
                    ),
                    ("delta_r", m.delta_r),
                    ("cps", m.cps),
                    ("cpis", m.cpis),
                    ("cs", m.cs),
                    ("cis", m.cis),
                ])
            })
            .collect::<Result<_>>()?;
        for (user, row) in users.iter().zip(rows) {
            for (metric, value) in row {
                records.push(Record {
                    seed,
                    user: user.user_id.clone(),
                    arm: arm.clone(),
                    metric: metric.into(),
                    value,
                });
            }
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationMetrics {
    pub user_id: String,
    pub recall: f64,
    pub ndcg: f64,
}

/// Recall@k and NDCG@k on held-out positives over the corpus catalog. The
/// user is represented by the full observed sequence: history plus the
/// reference, whose feature may be substituted through `references`.
pub fn recommendation_metrics(
    corpus: &Corpus,
    captions: &BTreeMap<String, Vec<f64>>,
    params: &RankModelParams,
    references: Option<&[Vector]>,
    k: usize,
) -> Result<Vec<RecommendationMetrics>> {
    if let Some(r) = references {
        if r.len() != corpus.users.len() {
            return Err(Error::DimensionMismatch {
                context: "reference substitutes",
                expected: corpus.users.len(),
                actual: r.len(),
            });
        }
    }
    corpus
        .users
        .par_iter()
        .enumerate()
        .filter(|(_, u)| !u.held_out_positives.is_empty())
        .map(|(i, u)| {
            let mut features = u.history_features();
            features.push(match references {
                Some(r) => r[i].as_slice(),
                None => u.reference.visual_feature.as_slice(),
            });
            let emb = params.user_embedding_from(&features)?;
            let ranked = rank_catalog(corpus, captions, u, &emb, params)?;
            Ok(RecommendationMetrics {
                user_id: u.user_id.clone(),
                recall: recall_at_k(&u.held_out_positives, &ranked, k)?,
                ndcg: ndcg_at_k(&u.held_out_positives, &ranked, k)?,
            })
        })
        .collect()
}

pub const AUX_ARMS: [&str; 3] = ["ori", "ragar", "global"];

/// Retrains the rank model with each user's reference replaced by the
/// reflected image (`ragar`) or the global image (`global`) and compares
/// held-out recommendation quality with the original (`ori`).
pub fn auxiliary(cfg: &RunConfig) -> Result<ExperimentReport> {
    if cfg.auxiliary.top_k == 0 {
        return Err(Error::config("auxiliary.top_k must be at least 1"));
    }
    let seeds = cfg.seeds(cfg.auxiliary.num_seeds);
    let per_seed: Vec<Vec<Record>> = seeds
        .iter()
        .map(|&seed| auxiliary_seed(cfg, seed).map_err(|e| e.context(format!("seed {seed}"))))
        .collect::<Result<_>>()?;
    let arms: Vec<String> = AUX_ARMS.iter().map(|s| s.to_string()).collect();
    let k = cfg.auxiliary.top_k;
    ExperimentReport::from_records(
        &cfg.experiment,
        "auxiliary",
        &arms,
        &[&format!("recall@{k}"), &format!("ndcg@{k}")],
        &seeds,
        per_seed.into_iter().flatten().collect(),
    )
}

fn auxiliary_seed(cfg: &RunConfig, seed: u64) -> Result<Vec<Record>> {
    let setup = SeedSetup::build(cfg, seed)?;
    let features: Vec<(Vector, Vector)> = setup
        .corpus
        .users
        .par_iter()
        .map(|user| {
            let r = reflect_user(
                &setup.pipeline,
                &setup.cfg.pipeline,
                &setup.cfg.reflection,
                &setup.rm,
                user,
            )?;
            let gen = generated_feature(&setup.pipeline, &r.ctx, &r.run.params)?;
            Ok((gen, r.ctx.global_image.feature.clone()))
        })
        .collect::<Result<_>>()?;
    let (gen, global): (Vec<Vector>, Vec<Vector>) = features.into_iter().unzip();
    let k = cfg.auxiliary.top_k;
    let mut records = Vec::new();
    for (arm, refs) in [
        ("ori", None),
        ("ragar", Some(&gen)),
        ("global", Some(&global)),
    ] {
        let params = match refs {
            None => setup.rm.clone(),
            Some(r) => {
                train_rank_model_with_references(
                    &setup.corpus,
                    &setup.captions,
                    &setup.cfg.ranker,
                    Some(r),
                )?
                .params
            }
        };
        let rows = recommendation_metrics(
            &setup.corpus,
            &setup.captions,
            &params,
            refs.map(Vec::as_slice),
            k,
        )?;
        for row in rows {
            for (metric, value) in [
                (format!("recall@{k}"), row.recall),
                (format!("ndcg@{k}"), row.ndcg),
            ] {
                records.push(Record {
                    seed,
                    user: row.user_id.clone(),
                    arm: arm.into(),
                    metric,
                    value,
                });
            }
        }
    }
    Ok(records)
}
