//! Evaluation: rank change ΔR over a candidate pool, the embedding-cosine
//! metric family and windowed SSIM over pixel grids.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PixelGrid};
use crate::error::{Error, Result};
use crate::generator::GeneratedImage;
use crate::numerics::cosine_similarity;
use crate::pipeline::{Pipeline, UserContext};
use crate::preference::{forward, CalibratorParams};
use crate::ranker::{RankModelParams, UserScorer};

/// `(rk_ori − rk_gen) / (1 + rk_ori)`.
pub fn delta_r(rk_ori: usize, rk_gen: usize) -> Result<f64> {
    if rk_ori == 0 || rk_gen == 0 {
        return Err(Error::domain("ranks start at 1"));
    }
    Ok((rk_ori as f64 - rk_gen as f64) / (1.0 + rk_ori as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 8,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

/// Mean SSIM over every `window × window` patch at stride 1, uniform
/// weights, population statistics.
pub fn ssim(x: &PixelGrid, y: &PixelGrid, p: &SsimParams) -> Result<f64> {
    let n = x.size();
    if y.size() != n {
        return Err(Error::DimensionMismatch {
            context: "ssim grid side",
            expected: n,
            actual: y.size(),
        });
    }
    let w = p.window;
    if w == 0 || w > n {
        return Err(Error::domain(format!(
            "ssim window {w} does not fit a {n}×{n} grid"
        )));
    }
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let count = (w * w) as f64;
    let mut total = 0.0;
    let positions = n - w + 1;
    for r0 in 0..positions {
        for c0 in 0..positions {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    let a = x.get(r, c);
                    let b = y.get(r, c);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let mx = sx / count;
            let my = sy / count;
            let vx = (sxx / count - mx * mx).max(0.0);
            let vy = (syy / count - my * my).max(0.0);
            let cov = sxy / count - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (positions * positions) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineFamily {
    pub cps: f64,
    pub cpis: f64,
    pub cs: f64,
    pub cis: f64,
}

pub fn cosine_metric_family(
    generated: &GeneratedImage,
    ctx: &UserContext,
    pipeline: &Pipeline,
) -> Result<CosineFamily> {
    let f = generated.feature.as_slice();
    let projected = pipeline.project_visual(f);
    Ok(CosineFamily {
        cps: cosine_similarity(&projected, ctx.e_txt.as_slice())?,
        cpis: cosine_similarity(f, ctx.p_ret())?,
        cs: cosine_similarity(&projected, ctx.e_sem_ref.as_slice())?,
        cis: cosine_similarity(f, ctx.reference_image.feature.as_slice())?,
    })
}

/// Where the "before" rank of ΔR comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DeltaROrigin {
    /// The reference image itself.
    Reference,
    /// The image generated by these (typically untrained) parameters.
    Baseline(CalibratorParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaRConfig {
    /// Distractor items ranked alongside the target.
    pub pool_size: usize,
}

impl Default for DeltaRConfig {
    fn default() -> Self {
        DeltaRConfig { pool_size: 9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user_id: String,
    pub rk_ori: usize,
    pub rk_gen: usize,
    pub delta_r: f64,
    pub cps: f64,
    pub cpis: f64,
    pub cs: f64,
    pub cis: f64,
    pub ssim_personal: f64,
    pub ssim_semantic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub delta_r: f64,
    pub cps: f64,
    pub cpis: f64,
    pub cs: f64,
    pub cis: f64,
    pub ssim_personal: f64,
    pub ssim_semantic: f64,
    pub users: Vec<UserMetrics>,
}

/// Distractor scores for the ΔR pool: items from the reference category
/// the user never touched, sampled per user.
pub fn distractor_scores(
    corpus: &Corpus,
    pipeline: &Pipeline,
    ctx: &UserContext,
    scorer: &UserScorer<'_>,
    pool_size: usize,
) -> Result<Vec<f64>> {
    let seen = ctx.user.interacted_ids();
    let mut candidates: Vec<&str> = corpus
        .items_in_category(&ctx.user.reference.category)
        .map(|it| it.item_id.as_str())
        .filter(|id| !seen.contains(id))
        .collect();
    if candidates.len() < pool_size {
        candidates = corpus
            .items
            .keys()
            .map(String::as_str)
            .filter(|id| !seen.contains(id))
            .collect();
    }
    let mut rng = pipeline.user_rng(&ctx.user.user_id, "delta-r-pool");
    let picks = rng.sample_distinct(candidates.len(), pool_size.min(candidates.len()));
    let rm = scorer.params();
    picks
        .into_iter()
        .map(|i| {
            let it = &corpus.items[candidates[i]];
            let sem = pipeline.encoder.encode_item(it)?;
            rm.score(
                scorer.user_embedding(),
                it.visual_feature.as_slice(),
                sem.as_slice(),
            )
        })
        .collect()
}

/// 1 plus the number of pool members scoring strictly higher, so tied
/// candidates share a rank.
pub fn pool_rank(target: f64, pool: &[f64]) -> usize {
    1 + pool.iter().filter(|&&d| d > target).count()
}

/// Ranks of the origin and generated images in one pool made of the
/// distractors and both targets.
pub fn joint_ranks(origin: f64, generated: f64, distractors: &[f64]) -> (usize, usize) {
    let beats = |a: f64, b: f64| usize::from(a > b);
    (
        pool_rank(origin, distractors) + beats(generated, origin),
        pool_rank(generated, distractors) + beats(origin, generated),
    )
}

pub fn evaluate_user(
    corpus: &Corpus,
    pipeline: &Pipeline,
    ctx: &UserContext,
    params: &CalibratorParams,
    rm: &RankModelParams,
    origin: &DeltaROrigin,
    protocol: &DeltaRConfig,
) -> Result<UserMetrics> {
    let eval = || -> Result<UserMetrics> {
        let generate = |p: &CalibratorParams| -> Result<GeneratedImage> {
            let cache = forward(ctx.e_txt.as_slice(), ctx.e_g.as_slice(), p)?;
            pipeline.generator.generate(&cache.p_gen)
        };
        let generated = generate(params)?;
        let scorer = UserScorer::new(rm, &ctx.user, ctx.e_sem_ref.as_slice())?;
        let mut pool = distractor_scores(corpus, pipeline, ctx, &scorer, protocol.pool_size)?;
        let s_ref = scorer.score(ctx.reference_image.feature.as_slice())?;
        let s_ori = match origin {
            DeltaROrigin::Reference => s_ref,
            DeltaROrigin::Baseline(p) => {
                pool.push(s_ref);
                scorer.score(generate(p)?.feature.as_slice())?
            }
        };
        let (rk_ori, rk_gen) =
            joint_ranks(s_ori, scorer.score(generated.feature.as_slice())?, &pool);
        let fam = cosine_metric_family(&generated, ctx, pipeline)?;
        let sp = SsimParams::default();
        let mut personal = 0.0;
        let mut count = 0usize;
        for (i, _) in &ctx.retrieval.selected {
            let item = &ctx.user.history[*i];
            let grid = match &item.pixel_grid {
                Some(g) => g.clone(),
                None => pipeline
                    .generator
                    .renderer()
                    .render(item.visual_feature.as_slice())?,
            };
            personal += ssim(&generated.pixels, &grid, &sp)?;
            count += 1;
        }
        Ok(UserMetrics {
            user_id: ctx.user.user_id.clone(),
            rk_ori,
            rk_gen,
            delta_r: delta_r(rk_ori, rk_gen)?,
            cps: fam.cps,
            cpis: fam.cpis,
            cs: fam.cs,
            cis: fam.cis,
            ssim_personal: personal / count.max(1) as f64,
            ssim_semantic: ssim(&generated.pixels, &ctx.reference_image.pixels, &sp)?,
        })
    };
    eval().map_err(|e| e.context(format!("evaluating user {}", ctx.user.user_id)))
}

impl MetricsReport {
    /// Aggregates per-user values. Users are sorted by id first so the
    /// result does not depend on input order.
    pub fn aggregate(mut users: Vec<UserMetrics>) -> Result<Self> {
        users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        if users.is_empty() {
            return Err(Error::domain("metrics report needs at least one user"));
        }
        let n = users.len() as f64;
        let mean = |f: fn(&UserMetrics) -> f64| users.iter().map(f).sum::<f64>() / n;
        Ok(MetricsReport {
            delta_r: mean(|u| u.delta_r),
            cps: mean(|u| u.cps),
            cpis: mean(|u| u.cpis),
            cs: mean(|u| u.cs),
            cis: mean(|u| u.cis),
            ssim_personal: mean(|u| u.ssim_personal),
            ssim_semantic: mean(|u| u.ssim_semantic),
            users,
        })
    }

    pub const CSV_HEADER: &'static str =
        "user_id,rk_ori,rk_gen,delta_r,cps_x100,cpis_x100,cs_x100,cis_x100,ssim_personal,ssim_semantic";

    /// One row per user and a final `ALL` summary row; cosine metrics ×100.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(Self::CSV_HEADER);
        s.push('\n');
        for u in &self.users {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                u.user_id,
                u.rk_ori,
                u.rk_gen,
                u.delta_r,
                100.0 * u.cps,
                100.0 * u.cpis,
                100.0 * u.cs,
                100.0 * u.cis,
                u.ssim_personal,
                u.ssim_semantic
            )
            .unwrap();
        }
        writeln!(
            s,
            "ALL,,,{},{},{},{},{},{},{}",
            self.delta_r,
            100.0 * self.cps,
            100.0 * self.cpis,
            100.0 * self.cs,
            100.0 * self.cis,
            self.ssim_personal,
            self.ssim_semantic
        )
        .unwrap();
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_r_examples() {
        assert_eq!(delta_r(3, 1).unwrap(), 0.5);
        assert_eq!(delta_r(4, 4).unwrap(), 0.0);
        assert_eq!(delta_r(1, 3).unwrap(), -1.0);
        assert!(delta_r(0, 1).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = PixelGrid::new(16, (0..256).map(|i| (i % 17) as f64 / 16.0).collect()).unwrap();
        assert_eq!(ssim(&a, &a, &SsimParams::default()).unwrap(), 1.0);
        let zero = PixelGrid::new(16, vec![0.0; 256]).unwrap();
        let one = PixelGrid::new(16, vec![1.0; 256]).unwrap();
        let c1: f64 = 0.01 * 0.01;
        let v = ssim(&zero, &one, &SsimParams::default()).unwrap();
        assert!((v - c1 / (1.0 + c1)).abs() < 1e-15);
        let small = PixelGrid::new(4, vec![0.0; 16]).unwrap();
        assert!(ssim(&small, &small, &SsimParams::default()).is_err());
        assert!(ssim(&zero, &small, &SsimParams::default()).is_err());
    }

    #[test]
    fn pool_ranks_share_ties() {
        assert_eq!(pool_rank(0.5, &[0.1, 0.2]), 1);
        assert_eq!(pool_rank(0.5, &[0.5, 0.9, 0.1]), 2);
        assert_eq!(joint_ranks(0.3, 0.3, &[0.5, 0.1]), (2, 2));
        assert_eq!(joint_ranks(0.3, 0.7, &[0.5, 0.1]), (3, 1));
        assert_eq!(joint_ranks(0.7, 0.3, &[0.5, 0.1]), (1, 3));
    }
}
