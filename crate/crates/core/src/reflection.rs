//! Ranking-guided reflection: rank penalty with margin, the score-function
//! rank loss over Gaussian perturbations of `p_gen`, calibrator and semantic
//! losses, and the training loop over [`CalibratorParams`].
//!
//! The generator is only ever called, never differentiated: the rank loss
//! reaches `p_gen` through `∂/∂p log N(p + ε; p, σ²I) = ε / σ²` with the
//! penalties held constant.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::generator::Provenance;
use crate::numerics::{gaussian_log_density, squared_distance, SeededRng};
use crate::pipeline::{Pipeline, UserContext};
use crate::preference::{backward, forward, CalibratorParams};
use crate::ranker::{RankModelParams, RankOutcome, UserScorer};

pub const BASE_LEARNING_RATE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Minimizing the loss lowers the expected penalty.
    #[default]
    PenaltyDescent,
    /// The rank loss exactly as the equation is written, sign included.
    PaperLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflectionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub sigma: f64,
    pub r: usize,
    pub steps: usize,
    /// Base rate; the applied rate is `lr · lr_scale`.
    pub lr: f64,
    pub lr_scale: f64,
    pub reward_mode: RewardMode,
    /// Subtract the mean penalty of each step's samples.
    pub baseline: bool,
    pub seed: u64,
}

impl Default for ReflectionConfig {
    fn default() -> Self {
        ReflectionConfig {
            alpha: 0.2,
            beta: 0.5,
            gamma: 0.3,
            delta: 0.1,
            sigma: 0.1,
            r: 3,
            steps: 200,
            lr: BASE_LEARNING_RATE,
            lr_scale: 1000.0,
            reward_mode: RewardMode::PenaltyDescent,
            baseline: false,
            seed: 0x4ef1_0001,
        }
    }
}

impl ReflectionConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(
                "reflection weights must be finite and non-negative",
            ));
        }
        if w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config(
                "at least one of alpha, beta, gamma must be positive",
            ));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::config(
                "reflection.delta must be finite and non-negative",
            ));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::config("reflection.sigma must be positive"));
        }
        if self.r == 0 {
            return Err(Error::config("reflection.r must be at least 1"));
        }
        if !(self.lr.is_finite()
            && self.lr >= 0.0
            && self.lr_scale.is_finite()
            && self.lr_scale >= 0.0)
        {
            return Err(Error::config(
                "reflection.lr and lr_scale must be finite and non-negative",
            ));
        }
        Ok(())
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr * self.lr_scale
    }
}

/// `Σ_c max(0, ρ_c − ρ_gen) + δ` over the reference and global scores.
pub fn rank_penalty(rho_ref: f64, rho_glob: f64, rho_gen: f64, delta: f64) -> f64 {
    (rho_ref - rho_gen).max(0.0) + (rho_glob - rho_gen).max(0.0) + delta
}

/// Score-function rank loss and its gradient with respect to `p_gen`.
pub fn rank_loss(
    p_gen: &[f64],
    perturbations: &[Vec<f64>],
    penalties: &[f64],
    sigma: f64,
    mode: RewardMode,
) -> Result<(f64, Vec<f64>)> {
    rank_loss_with_baseline(p_gen, perturbations, penalties, sigma, mode, false)
}

pub fn rank_loss_with_baseline(
    p_gen: &[f64],
    perturbations: &[Vec<f64>],
    penalties: &[f64],
    sigma: f64,
    mode: RewardMode,
    baseline: bool,
) -> Result<(f64, Vec<f64>)> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if perturbations.is_empty() {
        return Err(Error::domain("rank loss needs at least one perturbation"));
    }
    ensure_dim(
        "penalties per perturbation",
        perturbations.len(),
        penalties.len(),
    )?;
    let r = perturbations.len() as f64;
    let sign = match mode {
        RewardMode::PenaltyDescent => 1.0,
        RewardMode::PaperLiteral => -1.0,
    };
    let shift = if baseline {
        penalties.iter().sum::<f64>() / r
    } else {
        0.0
    };
    let var = sigma * sigma;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p_gen.len()];
    for (eps, &pen) in perturbations.iter().zip(penalties) {
        ensure_dim("perturbation", p_gen.len(), eps.len())?;
        let x: Vec<f64> = p_gen.iter().zip(eps).map(|(p, e)| p + e).collect();
        let weight = pen - shift;
        loss += gaussian_log_density(&x, p_gen, sigma)? * weight;
        for (g, e) in grad.iter_mut().zip(eps) {
            *g += weight * e / var;
        }
    }
    loss *= sign / r;
    grad.iter_mut().for_each(|g| *g *= sign / r);
    Ok((loss, grad))
}

/// `‖p_gen − p_ret‖²`.
pub fn calibrator_loss(p_gen: &[f64], p_ret: &[f64]) -> Result<f64> {
    ensure_dim("calibrator loss", p_ret.len(), p_gen.len())?;
    Ok(squared_distance(p_gen, p_ret))
}

/// `‖projected e_d − e_sem_ref‖²`, with the projection applied by the caller.
pub fn semantic_loss(projected_e_d: &[f64], e_sem_ref: &[f64]) -> Result<f64> {
    ensure_dim("semantic loss", e_sem_ref.len(), projected_e_d.len())?;
    Ok(squared_distance(projected_e_d, e_sem_ref))
}

pub fn joint_loss(l_rank: f64, l_cal: f64, l_sem: f64, cfg: &ReflectionConfig) -> f64 {
    cfg.alpha * l_rank + cfg.beta * l_cal + cfg.gamma * l_sem
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionStepLog {
    pub step: usize,
    pub mean_penalty: f64,
    pub penalties: Vec<f64>,
    pub l_rank: f64,
    pub l_cal: f64,
    pub l_sem: f64,
    pub l_total: f64,
    pub rho_ref: f64,
    pub rho_glob: f64,
    pub rho_gen: f64,
    pub ranks: [usize; 3],
    /// ΔR of the generated image against the reference within the three
    /// candidates.
    pub delta_r: f64,
}

#[derive(Debug, Clone)]
pub struct ReflectionRun {
    pub params: CalibratorParams,
    pub logs: Vec<ReflectionStepLog>,
}

impl ReflectionRun {
    pub fn write_logs<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for l in &self.logs {
            serde_json::to_writer(&mut *w, l)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Evaluation of one calibrator state for one user, without updating it.
#[derive(Debug, Clone)]
pub struct StepState {
    pub p_gen: Vec<f64>,
    pub outcome: RankOutcome,
}

/// Runs `cfg.steps` single-episode updates of the calibrator for one user.
pub fn reflect(
    ctx: &UserContext,
    pipeline: &Pipeline,
    params: &CalibratorParams,
    rm: &RankModelParams,
    cfg: &ReflectionConfig,
) -> Result<ReflectionRun> {
    cfg.validate()?;
    let scorer = UserScorer::new(rm, &ctx.user, ctx.e_sem_ref.as_slice())?;
    let rho_ref = scorer.score(ctx.reference_image.feature.as_slice())?;
    let rho_glob = scorer.score(ctx.global_image.feature.as_slice())?;
    let mut rng = SeededRng::new(cfg.seed).fork_named(&ctx.user.user_id);
    let lr = cfg.effective_lr();
    let mut params = params.clone();
    let mut logs = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let run_step = |params: &mut CalibratorParams,
                        rng: &mut SeededRng|
         -> Result<ReflectionStepLog> {
            let cache = forward(ctx.e_txt.as_slice(), ctx.e_g.as_slice(), params)?;
            let p_gen = &cache.p_gen;
            let rho_gen = scorer.score(pipeline.generator.generate(p_gen)?.feature.as_slice())?;
            let outcome = RankOutcome::from_scores([rho_ref, rho_glob, rho_gen])?;

            let mut perturbations = Vec::with_capacity(cfg.r);
            let mut penalties = Vec::with_capacity(cfg.r);
            for _ in 0..cfg.r {
                let eps = rng.normal_vec(p_gen.len(), cfg.sigma);
                let x: Vec<f64> = p_gen.iter().zip(&eps).map(|(p, e)| p + e).collect();
                let rho = scorer.score(pipeline.generator.generate(&x)?.feature.as_slice())?;
                penalties.push(rank_penalty(rho_ref, rho_glob, rho, cfg.delta));
                perturbations.push(eps);
            }
            let (l_rank, g_rank) = rank_loss_with_baseline(
                p_gen,
                &perturbations,
                &penalties,
                cfg.sigma,
                cfg.reward_mode,
                cfg.baseline,
            )?;
            let l_cal = calibrator_loss(p_gen, ctx.p_ret())?;
            let projected = pipeline.detailed_projection.matvec(&cache.e_d);
            let l_sem = semantic_loss(&projected, ctx.e_sem_ref.as_slice())?;

            let g_p: Vec<f64> = g_rank
                .iter()
                .zip(p_gen.iter().zip(ctx.p_ret()))
                .map(|(gr, (p, t))| cfg.alpha * gr + cfg.beta * 2.0 * (p - t))
                .collect();
            let diff: Vec<f64> = projected
                .iter()
                .zip(ctx.e_sem_ref.as_slice())
                .map(|(a, b)| cfg.gamma * 2.0 * (a - b))
                .collect();
            let g_ed = pipeline.detailed_projection.matvec_t(&diff);
            let grads = backward(&cache, params, &g_p, Some(&g_ed))?;
            if lr != 0.0 {
                params.add_scaled(-lr, &grads);
                if !params.is_finite() {
                    return Err(Error::domain("calibrator parameters diverged"));
                }
            }
            let mean_penalty = penalties.iter().sum::<f64>() / penalties.len() as f64;
            Ok(ReflectionStepLog {
                step,
                mean_penalty,
                penalties,
                l_rank,
                l_cal,
                l_sem,
                l_total: joint_loss(l_rank, l_cal, l_sem, cfg),
                rho_ref,
                rho_glob,
                rho_gen,
                ranks: outcome.ranks,
                delta_r: crate::metrics::delta_r(
                    outcome.rank(Provenance::Reference),
                    outcome.rank(Provenance::Generated),
                )?,
            })
        };
        let log = run_step(&mut params, &mut rng)
            .map_err(|e| e.context(format!("reflection step {step}")))?;
        logs.push(log);
    }
    Ok(ReflectionRun { params, logs })
}

/// Generated preference and candidate ranks for the current parameters.
pub fn evaluate_state(
    ctx: &UserContext,
    pipeline: &Pipeline,
    params: &CalibratorParams,
    rm: &RankModelParams,
) -> Result<StepState> {
    let scorer = UserScorer::new(rm, &ctx.user, ctx.e_sem_ref.as_slice())?;
    let cache = forward(ctx.e_txt.as_slice(), ctx.e_g.as_slice(), params)?;
    let rho_gen = scorer.score(
        pipeline
            .generator
            .generate(&cache.p_gen)?
            .feature
            .as_slice(),
    )?;
    let outcome = RankOutcome::from_scores([
        scorer.score(ctx.reference_image.feature.as_slice())?,
        scorer.score(ctx.global_image.feature.as_slice())?,
        rho_gen,
    ])?;
    Ok(StepState {
        p_gen: cache.p_gen,
        outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_examples() {
        assert!((rank_penalty(0.9, 0.5, 0.7, 0.1) - 0.3).abs() < 1e-12);
        assert_eq!(rank_penalty(0.1, 0.2, 0.9, 0.1), 0.1);
        assert_eq!(rank_penalty(0.4, 0.4, 0.4, 0.1), 0.1);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(calibrator_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(calibrator_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(semantic_loss(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 25.0);
        assert!(calibrator_loss(&[1.0], &[1.0, 2.0]).is_err());
        let cfg = ReflectionConfig::default();
        assert!((joint_loss(1.0, 1.0, 1.0, &cfg) - 1.0).abs() < 1e-12);
        let only_rank = ReflectionConfig {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            ..cfg
        };
        assert_eq!(joint_loss(0.7, 5.0, 9.0, &only_rank), 0.7);
        let none = ReflectionConfig {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..ReflectionConfig::default()
        };
        assert!(none.validate().is_err());
    }

    #[test]
    fn symmetric_pairs_cancel() {
        let eps = vec![vec![0.1, -0.2], vec![-0.1, 0.2]];
        let (_, g) = rank_loss(
            &[0.3, 0.3],
            &eps,
            &[0.1, 0.1],
            0.1,
            RewardMode::PenaltyDescent,
        )
        .unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_sample_sign() {
        let eps = vec![vec![0.05, -0.02]];
        let (_, g) = rank_loss(&[0.0, 0.0], &eps, &[0.4], 0.1, RewardMode::PenaltyDescent).unwrap();
        assert!((g[0] - 0.4 * 0.05 / 0.01).abs() < 1e-12);
        assert!((g[1] + 0.4 * 0.02 / 0.01).abs() < 1e-12);
        let (_, lit) = rank_loss(&[0.0, 0.0], &eps, &[0.4], 0.1, RewardMode::PaperLiteral).unwrap();
        assert_eq!(lit[0], -g[0]);
        assert!(rank_loss(
            &[0.0],
            &[vec![0.0]],
            &[0.1],
            0.0,
            RewardMode::PenaltyDescent
        )
        .is_err());
        assert!(rank_loss(
            &[0.0],
            &[vec![0.0]],
            &[0.1, 0.2],
            0.1,
            RewardMode::PenaltyDescent
        )
        .is_err());
    }
}
