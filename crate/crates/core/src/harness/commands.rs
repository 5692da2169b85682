//! Pipeline stages operating on `<out>/<experiment>/<seed>/`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::corpus::{generate_corpus, load_corpus, parse_corpus, Corpus, UserSequence};
use crate::error::{Error, Result};
use crate::harness::config::{OriginMode, RunConfig};
use crate::harness::experiments::{self, initial_calibrator, recommendation_metrics, run_in_pool};
use crate::harness::layout::{self, calibrator_name, Manifest};
use crate::harness::report::ExperimentReport;
use crate::metrics::{evaluate_user, DeltaROrigin, MetricsReport};
use crate::pipeline::Pipeline;
use crate::preference::CalibratorParams;
use crate::ranker::{caption_table, train_rank_model_with_captions, RankModelParams};

/// What a command did, printed by the CLI as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommandSummary {
    pub command: String,
    pub dir: PathBuf,
    pub status: String,
    pub detail: serde_json::Value,
}

impl CommandSummary {
    fn new(command: &str, dir: &Path, status: &str, detail: serde_json::Value) -> Self {
        CommandSummary {
            command: command.into(),
            dir: dir.to_path_buf(),
            status: status.into(),
            detail,
        }
    }
}

fn corpus_bytes(corpus: &Corpus) -> Vec<u8> {
    corpus.to_bytes()
}

/// Generates (or adopts) the corpus. Re-running with the same config is a
/// no-op when the stored checksum matches.
pub fn gen_data(cfg: &RunConfig) -> Result<CommandSummary> {
    cfg.validate()?;
    let dir = cfg.seed_dir();
    let corpus = match &cfg.corpus_path {
        Some(p) => load_corpus(p)?,
        None => generate_corpus(&cfg.corpus, cfg.seed)?,
    };
    let bytes = corpus_bytes(&corpus);
    let sum = layout::sha256_hex(&bytes);
    if let Some(existing) = Manifest::load(&dir)? {
        let on_disk = std::fs::read(dir.join(layout::CORPUS)).ok();
        if existing.artifacts.get(layout::CORPUS) == Some(&sum)
            && on_disk.as_deref().map(layout::sha256_hex).as_ref() == Some(&sum)
            && existing.config == cfg.to_json_value()
        {
            return Ok(CommandSummary::new(
                "gen-data",
                &dir,
                "unchanged",
                json!({ "corpus_sha256": sum }),
            ));
        }
    }
    let mut manifest = Manifest::new(&cfg.experiment, cfg.seed, cfg.to_json_value());
    manifest.save(&dir)?;
    manifest.write_artifact(&dir, layout::CORPUS, &bytes)?;
    manifest.save(&dir)?;
    Ok(CommandSummary::new(
        "gen-data",
        &dir,
        "written",
        json!({ "corpus_sha256": sum, "users": corpus.users.len(), "items": corpus.items.len() }),
    ))
}

fn read_corpus(dir: &Path, manifest: &Manifest) -> Result<Corpus> {
    let bytes = manifest.read_artifact(dir, layout::CORPUS, "corpus", "gen-data")?;
    parse_corpus(&bytes[..])
        .map_err(|e| e.context(format!("{}", dir.join(layout::CORPUS).display())))
}

fn read_rank_model(dir: &Path, manifest: &Manifest) -> Result<RankModelParams> {
    let bytes =
        manifest.read_artifact(dir, layout::RANK_MODEL, "rank model checkpoint", "train-rm")?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::config("rank model checkpoint is not UTF-8"))?;
    RankModelParams::from_checkpoint(Checkpoint::parse(&text)?)
}

fn selected_users<'a>(cfg: &RunConfig, corpus: &'a Corpus) -> &'a [UserSequence] {
    let n = cfg
        .users
        .unwrap_or(corpus.users.len())
        .min(corpus.users.len());
    &corpus.users[..n]
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, &r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn train_rm(cfg: &RunConfig) -> Result<CommandSummary> {
    cfg.validate()?;
    let dir = cfg.seed_dir();
    let mut manifest = Manifest::require(&dir)?;
    let corpus = read_corpus(&dir, &manifest)?;
    let pipeline = Pipeline::new(&cfg.pipeline, &corpus, cfg.seed)?;
    let seeded = cfg.for_seed(cfg.seed);
    let (trained, eval) = run_in_pool(cfg.jobs, || {
        let captions = caption_table(&corpus, &pipeline.encoder)?;
        let trained = train_rank_model_with_captions(&corpus, &captions, &seeded.ranker)?;
        let eval = recommendation_metrics(
            &corpus,
            &captions,
            &trained.params,
            None,
            cfg.auxiliary.top_k,
        )?;
        Ok((trained, eval))
    })?;
    let n = eval.len().max(1) as f64;
    let summary = json!({
        "k": cfg.auxiliary.top_k,
        "recall": eval.iter().map(|e| e.recall).sum::<f64>() / n,
        "ndcg": eval.iter().map(|e| e.ndcg).sum::<f64>() / n,
        "users": eval,
    });
    manifest.config = cfg.to_json_value();
    manifest.save(&dir)?;
    manifest.write_artifact(
        &dir,
        layout::RANK_MODEL,
        trained.params.to_checkpoint().to_text().as_bytes(),
    )?;
    manifest.write_artifact(&dir, layout::RANK_MODEL_LOG, &jsonl(&trained.log))?;
    let mut eval_text = serde_json::to_string_pretty(&summary).expect("eval serializes");
    eval_text.push('\n');
    manifest.write_artifact(&dir, layout::RANK_MODEL_EVAL, eval_text.as_bytes())?;
    manifest.save(&dir)?;
    let last = trained.log.last();
    Ok(CommandSummary::new(
        "train-rm",
        &dir,
        "written",
        json!({
            "epochs": trained.log.len(),
            "final_auc": last.map(|l| l.auc),
            "recall": summary["recall"],
            "ndcg": summary["ndcg"],
        }),
    ))
}

#[derive(Serialize)]
struct UserStepLog<'a> {
    user_id: &'a str,
    #[serde(flatten)]
    log: &'a crate::reflection::ReflectionStepLog,
}

pub fn reflect(cfg: &RunConfig) -> Result<CommandSummary> {
    cfg.validate()?;
    let dir = cfg.seed_dir();
    let mut manifest = Manifest::require(&dir)?;
    let corpus = read_corpus(&dir, &manifest)?;
    let rm = read_rank_model(&dir, &manifest)?;
    let pipeline = Pipeline::new(&cfg.pipeline, &corpus, cfg.seed)?;
    let users = selected_users(cfg, &corpus);
    let seeded = cfg.for_seed(cfg.seed);
    let runs = run_in_pool(cfg.jobs, || {
        users
            .par_iter()
            .map(|u| {
                experiments::reflect_user(&pipeline, &cfg.pipeline, &seeded.reflection, &rm, u)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    manifest.config = cfg.to_json_value();
    manifest
        .artifacts
        .retain(|name, _| !name.starts_with(layout::CALIBRATORS));
    manifest.save(&dir)?;
    let mut logs = Vec::new();
    for (u, r) in users.iter().zip(&runs) {
        manifest.write_artifact(
            &dir,
            &calibrator_name(&u.user_id),
            r.run.params.to_checkpoint().to_text().as_bytes(),
        )?;
        logs.extend(r.run.logs.iter().map(|log| UserStepLog {
            user_id: &u.user_id,
            log,
        }));
    }
    manifest.write_artifact(&dir, layout::REFLECT_LOG, &jsonl(&logs))?;
    manifest.save(&dir)?;
    let (first, last): (f64, f64) = runs.iter().fold((0.0, 0.0), |acc, r| {
        (
            acc.0 + r.run.logs.first().map_or(0.0, |l| l.mean_penalty),
            acc.1 + r.run.logs.last().map_or(0.0, |l| l.mean_penalty),
        )
    });
    let n = runs.len().max(1) as f64;
    Ok(CommandSummary::new(
        "reflect",
        &dir,
        "written",
        json!({
            "users": runs.len(),
            "steps": cfg.reflection.steps,
            "mean_first_penalty": first / n,
            "mean_last_penalty": last / n,
        }),
    ))
}

fn read_calibrator(dir: &Path, manifest: &Manifest, user_id: &str) -> Result<CalibratorParams> {
    let bytes = manifest.read_artifact(
        dir,
        &calibrator_name(user_id),
        "calibrator checkpoint",
        "reflect",
    )?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::config("calibrator checkpoint is not UTF-8"))?;
    CalibratorParams::from_checkpoint(Checkpoint::parse(&text)?)
        .map_err(|e| e.context(format!("user {user_id}")))
}

/// Evaluates the reflected calibrators and writes `metrics.json` and
/// `metrics.csv`.
pub fn eval(cfg: &RunConfig) -> Result<(CommandSummary, MetricsReport)> {
    cfg.validate()?;
    let dir = cfg.seed_dir();
    let mut manifest = Manifest::require(&dir)?;
    let corpus = read_corpus(&dir, &manifest)?;
    let rm = read_rank_model(&dir, &manifest)?;
    let pipeline = Pipeline::new(&cfg.pipeline, &corpus, cfg.seed)?;
    let users = selected_users(cfg, &corpus);
    let params: Vec<CalibratorParams> = users
        .iter()
        .map(|u| read_calibrator(&dir, &manifest, &u.user_id))
        .collect::<Result<_>>()?;
    let per_user = run_in_pool(cfg.jobs, || {
        users
            .par_iter()
            .zip(params.par_iter())
            .map(|(u, p)| {
                let ctx = pipeline.context(u)?;
                let origin = match cfg.eval.origin {
                    OriginMode::Reference => DeltaROrigin::Reference,
                    OriginMode::Baseline => DeltaROrigin::Baseline(initial_calibrator(
                        &pipeline,
                        &cfg.pipeline.preference,
                        &u.user_id,
                    )?),
                };
                evaluate_user(&corpus, &pipeline, &ctx, p, &rm, &origin, &cfg.eval.delta_r)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let report = MetricsReport::aggregate(per_user)?;
    let mut json_text = report.to_json();
    json_text.push('\n');
    manifest.write_artifact(&dir, layout::METRICS_JSON, json_text.as_bytes())?;
    manifest.write_artifact(&dir, layout::METRICS_CSV, report.to_csv().as_bytes())?;
    manifest.save(&dir)?;
    let summary = CommandSummary::new(
        "eval",
        &dir,
        "written",
        json!({
            "users": report.users.len(),
            "delta_r": report.delta_r,
            "cps": report.cps,
            "cpis": report.cpis,
            "cs": report.cs,
            "cis": report.cis,
            "ssim_personal": report.ssim_personal,
            "ssim_semantic": report.ssim_semantic,
        }),
    );
    Ok((summary, report))
}

/// Writes `experiment.json` under the experiment directory and one seed
/// directory per seed with that seed's records and a manifest.
pub fn write_experiment(cfg: &RunConfig, report: &ExperimentReport) -> Result<PathBuf> {
    let exp_dir = cfg.experiment_dir();
    for &seed in &report.seeds {
        let dir = exp_dir.join(seed.to_string());
        let records: Vec<_> = report
            .records
            .iter()
            .filter(|r| r.seed == seed)
            .cloned()
            .collect();
        let mut manifest = Manifest::new(&cfg.experiment, seed, cfg.for_seed(seed).to_json_value());
        manifest.write_artifact(
            &dir,
            layout::RECORDS,
            ExperimentReport::records_csv(&records).as_bytes(),
        )?;
        manifest.save(&dir)?;
    }
    let path = exp_dir.join(layout::EXPERIMENT_REPORT);
    layout::write_file(&path, report.to_json().as_bytes())?;
    Ok(path)
}

fn experiment_summary(
    command: &str,
    cfg: &RunConfig,
    report: &ExperimentReport,
    path: &Path,
) -> CommandSummary {
    let means: Vec<_> = report
        .summary
        .iter()
        .map(|s| json!({ "arm": s.arm, "metric": s.metric, "mean": s.mean }))
        .collect();
    let comparisons: Vec<_> = report
        .comparisons
        .iter()
        .map(|c| json!({ "metric": c.metric, "a": c.a, "b": c.b, "wins": c.wins, "ties": c.ties, "losses": c.losses }))
        .collect();
    CommandSummary::new(
        command,
        &cfg.experiment_dir(),
        "written",
        json!({ "report": path, "means": means, "comparisons": comparisons }),
    )
}

pub fn validate_retrieval(cfg: &RunConfig) -> Result<(CommandSummary, ExperimentReport)> {
    cfg.validate()?;
    let report = run_in_pool(cfg.jobs, || experiments::validate_retrieval(cfg))?;
    let path = write_experiment(cfg, &report)?;
    Ok((
        experiment_summary("validate-retrieval", cfg, &report, &path),
        report,
    ))
}

pub fn ablate(cfg: &RunConfig) -> Result<(CommandSummary, ExperimentReport)> {
    cfg.validate()?;
    let report = run_in_pool(cfg.jobs, || experiments::ablate(cfg))?;
    let path = write_experiment(cfg, &report)?;
    Ok((experiment_summary("ablate", cfg, &report, &path), report))
}

pub fn auxiliary(cfg: &RunConfig) -> Result<(CommandSummary, ExperimentReport)> {
    cfg.validate()?;
    let report = run_in_pool(cfg.jobs, || experiments::auxiliary(cfg))?;
    let path = write_experiment(cfg, &report)?;
    Ok((experiment_summary("auxiliary", cfg, &report, &path), report))
}
