use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::layout::{self, Manifest};
use crate::metrics::MetricsReport;

/// One measured number: `user` is empty for seed-level values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub seed: u64,
    pub user: String,
    pub arm: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedValue {
    pub seed: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub metric: String,
    pub mean: f64,
    pub per_seed: Vec<SeedValue>,
}

/// Seed-paired comparison of arm `a` against arm `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub a: String,
    pub b: String,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub win_rate: f64,
    pub mean_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub kind: String,
    pub arms: Vec<String>,
    pub metrics: Vec<String>,
    pub seeds: Vec<u64>,
    pub summary: Vec<ArmSummary>,
    pub comparisons: Vec<Comparison>,
    pub records: Vec<Record>,
}

impl ExperimentReport {
    /// Per-seed values are means over the records of that seed; arms and
    /// metrics keep the given order. Every pair of arms is compared.
    pub fn from_records(
        experiment: &str,
        kind: &str,
        arms: &[String],
        metrics: &[&str],
        seeds: &[u64],
        records: Vec<Record>,
    ) -> Result<Self> {
        let mut sums: BTreeMap<(&str, &str, u64), (f64, usize)> = BTreeMap::new();
        for r in &records {
            let e = sums
                .entry((r.arm.as_str(), r.metric.as_str(), r.seed))
                .or_insert((0.0, 0));
            e.0 += r.value;
            e.1 += 1;
        }
        let mut summary = Vec::new();
        for arm in arms {
            for metric in metrics {
                let per_seed: Vec<SeedValue> = seeds
                    .iter()
                    .filter_map(|&seed| {
                        sums.get(&(arm.as_str(), *metric, seed))
                            .map(|(s, n)| SeedValue {
                                seed,
                                value: s / *n as f64,
                            })
                    })
                    .collect();
                if per_seed.is_empty() {
                    continue;
                }
                let mean = per_seed.iter().map(|v| v.value).sum::<f64>() / per_seed.len() as f64;
                summary.push(ArmSummary {
                    arm: arm.clone(),
                    metric: metric.to_string(),
                    mean,
                    per_seed,
                });
            }
        }
        let mut report = ExperimentReport {
            experiment: experiment.to_string(),
            kind: kind.to_string(),
            arms: arms.to_vec(),
            metrics: metrics.iter().map(|m| m.to_string()).collect(),
            seeds: seeds.to_vec(),
            summary,
            comparisons: Vec::new(),
            records,
        };
        let mut comparisons = Vec::new();
        for metric in metrics {
            for (i, a) in arms.iter().enumerate() {
                for b in &arms[i + 1..] {
                    if let Some(c) = report.compare(metric, a, b) {
                        comparisons.push(c);
                    }
                }
            }
        }
        report.comparisons = comparisons;
        Ok(report)
    }

    pub fn arm(&self, arm: &str, metric: &str) -> Option<&ArmSummary> {
        self.summary
            .iter()
            .find(|s| s.arm == arm && s.metric == metric)
    }

    /// Seed-paired comparison; seeds missing from either arm are skipped.
    pub fn compare(&self, metric: &str, a: &str, b: &str) -> Option<Comparison> {
        let sa = self.arm(a, metric)?;
        let sb = self.arm(b, metric)?;
        let (mut wins, mut ties, mut losses, mut delta) = (0, 0, 0, 0.0);
        for va in &sa.per_seed {
            let Some(vb) = sb.per_seed.iter().find(|v| v.seed == va.seed) else {
                continue;
            };
            match va.value.partial_cmp(&vb.value) {
                Some(std::cmp::Ordering::Greater) => wins += 1,
                Some(std::cmp::Ordering::Equal) => ties += 1,
                _ => losses += 1,
            }
            delta += va.value - vb.value;
        }
        let n = wins + ties + losses;
        if n == 0 {
            return None;
        }
        Some(Comparison {
            metric: metric.to_string(),
            a: a.to_string(),
            b: b.to_string(),
            wins,
            ties,
            losses,
            win_rate: wins as f64 / n as f64,
            mean_delta: delta / n as f64,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn records_csv(records: &[Record]) -> String {
        let mut s = String::from("seed,user,arm,metric,value\n");
        for r in records {
            writeln!(
                s,
                "{},{},{},{},{}",
                r.seed, r.user, r.arm, r.metric, r.value
            )
            .unwrap();
        }
        s
    }
}

pub const REPORT_HEADER: &str = "experiment,kind,seed,arm,metric,value";

#[derive(Debug, Clone, PartialEq)]
struct Row {
    experiment: String,
    seed: u64,
    arm: String,
    metric: String,
    value: f64,
}

/// Rows for one run directory: an experiment directory with a report, or a
/// seed directory holding evaluation metrics.
fn collect_rows(dir: &Path) -> Result<Vec<Row>> {
    let exp_path = dir.join(layout::EXPERIMENT_REPORT);
    if exp_path.is_file() {
        let report: ExperimentReport = serde_json::from_str(&layout::read_text(&exp_path)?)
            .map_err(|e| {
                Error::config(format!(
                    "{}: malformed experiment report: {e}",
                    exp_path.display()
                ))
            })?;
        return Ok(report
            .summary
            .iter()
            .flat_map(|s| {
                s.per_seed.iter().map(|v| Row {
                    experiment: report.experiment.clone(),
                    seed: v.seed,
                    arm: s.arm.clone(),
                    metric: s.metric.clone(),
                    value: v.value,
                })
            })
            .collect());
    }
    let manifest = Manifest::require(dir)?;
    let bytes = manifest.read_artifact(dir, layout::METRICS_JSON, "metrics.json", "eval")?;
    let m: MetricsReport = serde_json::from_slice(&bytes)
        .map_err(|e| Error::config(format!("{}: malformed metrics: {e}", dir.display())))?;
    let values = [
        ("delta_r", m.delta_r),
        ("cps", m.cps),
        ("cpis", m.cpis),
        ("cs", m.cs),
        ("cis", m.cis),
        ("ssim_personal", m.ssim_personal),
        ("ssim_semantic", m.ssim_semantic),
    ];
    Ok(values
        .iter()
        .map(|(metric, value)| Row {
            experiment: manifest.experiment.clone(),
            seed: manifest.seed,
            arm: "pipeline".into(),
            metric: metric.to_string(),
            value: *value,
        })
        .collect())
}

/// Long-format CSV: per-seed rows sorted by experiment, seed, arm and
/// metric, each experiment followed by its summary block of means.
pub fn build_report(dirs: &[PathBuf]) -> Result<String> {
    let mut rows = Vec::new();
    for d in dirs {
        rows.extend(
            collect_rows(d).map_err(|e| e.context(format!("report input {}", d.display())))?,
        );
    }
    rows.sort_by(|a, b| {
        (&a.experiment, a.seed, &a.arm, &a.metric)
            .cmp(&(&b.experiment, b.seed, &b.arm, &b.metric))
            .then(a.value.total_cmp(&b.value))
    });
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    let mut i = 0;
    while i < rows.len() {
        let exp = rows[i].experiment.clone();
        let mut means: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
        let start = i;
        while i < rows.len() && rows[i].experiment == exp {
            let r = &rows[i];
            writeln!(
                out,
                "{},seed,{},{},{},{}",
                r.experiment, r.seed, r.arm, r.metric, r.value
            )
            .unwrap();
            i += 1;
        }
        for r in &rows[start..i] {
            let e = means
                .entry((r.arm.as_str(), r.metric.as_str()))
                .or_insert((0.0, 0));
            e.0 += r.value;
            e.1 += 1;
        }
        for ((arm, metric), (sum, n)) in means {
            writeln!(out, "{exp},summary,,{arm},{metric},{}", sum / n as f64).unwrap();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seed: u64, arm: &str, value: f64) -> Record {
        Record {
            seed,
            user: "u".into(),
            arm: arm.into(),
            metric: "m".into(),
            value,
        }
    }

    #[test]
    fn paired_comparison_counts() {
        let arms = vec!["a".to_string(), "b".to_string()];
        let records = vec![
            rec(0, "a", 1.0),
            rec(0, "b", 0.5),
            rec(1, "a", 0.2),
            rec(1, "b", 0.2),
            rec(2, "a", 0.0),
            rec(2, "b", 1.0),
        ];
        let r =
            ExperimentReport::from_records("e", "k", &arms, &["m"], &[0, 1, 2], records).unwrap();
        let c = r.compare("m", "a", "b").unwrap();
        assert_eq!((c.wins, c.ties, c.losses), (1, 1, 1));
        assert_eq!(r.comparisons.len(), 1);
        assert!((r.arm("a", "m").unwrap().mean - 0.4).abs() < 1e-15);
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(build_report(&[]).unwrap(), format!("{REPORT_HEADER}\n"));
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_report(&[dir.path().to_path_buf()]).is_err());
    }
}
