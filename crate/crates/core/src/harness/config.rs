use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::metrics::DeltaRConfig;
use crate::numerics::{fnv1a64, mix_seed};
use crate::pipeline::PipelineConfig;
use crate::ranker::RankerConfig;
use crate::reflection::ReflectionConfig;
use crate::retrieval::Strategy;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "PREFGEN_OUT";
pub const DEFAULT_OUT: &str = "out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub seed: u64,
    /// Worker threads; results never depend on it.
    pub jobs: usize,
    pub out_dir: Option<PathBuf>,
    /// Existing corpus file to adopt instead of generating one.
    pub corpus_path: Option<PathBuf>,
    /// Restrict reflect/eval to the first `users` users.
    pub users: Option<usize>,
    pub corpus: CorpusConfig,
    pub pipeline: PipelineConfig,
    pub ranker: RankerConfig,
    pub reflection: ReflectionConfig,
    pub eval: EvalConfig,
    pub validation: ValidationConfig,
    pub ablation: AblationConfig,
    pub auxiliary: AuxiliaryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: "default".into(),
            seed: 0,
            jobs: 1,
            out_dir: None,
            corpus_path: None,
            users: None,
            corpus: CorpusConfig::default(),
            pipeline: PipelineConfig::default(),
            ranker: RankerConfig::default(),
            reflection: ReflectionConfig::default(),
            eval: EvalConfig::default(),
            validation: ValidationConfig::default(),
            ablation: AblationConfig::default(),
            auxiliary: AuxiliaryConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OriginMode {
    /// The reference image's rank.
    #[default]
    Reference,
    /// The rank of the image produced by the untrained calibrator.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub delta_r: DeltaRConfig,
    pub origin: OriginMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            delta_r: DeltaRConfig::default(),
            origin: OriginMode::Reference,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub k: usize,
    pub strategies: Vec<Strategy>,
    pub num_seeds: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            k: 5,
            strategies: vec![Strategy::Ret, Strategy::ExpRet, Strategy::Random],
            num_seeds: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    RetrievalK,
    NoiseR,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::RetrievalK => "retrieval_k",
            AblationAxis::NoiseR => "noise_r",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub axis: AblationAxis,
    pub values: Vec<usize>,
    pub num_seeds: usize,
    /// Users reflected per seed and value.
    pub users: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            axis: AblationAxis::RetrievalK,
            values: vec![0, 5, 10, 20],
            num_seeds: 10,
            users: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxiliaryConfig {
    pub num_seeds: usize,
    pub top_k: usize,
}

impl Default for AuxiliaryConfig {
    fn default() -> Self {
        AuxiliaryConfig {
            num_seeds: 10,
            top_k: 10,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experiment.is_empty()
            || self.experiment.contains(['/', '\\'])
            || self.experiment.starts_with('.')
        {
            return Err(Error::config(format!(
                "experiment name {:?} is not a plain directory name",
                self.experiment
            )));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs must be at least 1"));
        }
        if self.users == Some(0) {
            return Err(Error::config("users must be at least 1 when set"));
        }
        self.corpus.validate()?;
        self.pipeline.validate()?;
        self.ranker.validate()?;
        self.reflection.validate()?;
        if self.pipeline.preference.pref_dim != self.corpus.visual_dim {
            return Err(Error::config(
                "pipeline.preference.pref_dim must equal corpus.visual_dim",
            ));
        }
        Ok(())
    }

    /// Output root: `out_dir`, else the environment variable, else `out`.
    pub fn out_root(&self) -> PathBuf {
        if let Some(p) = &self.out_dir {
            return p.clone();
        }
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(DEFAULT_OUT),
        }
    }

    pub fn seed_dir(&self) -> PathBuf {
        self.out_root()
            .join(&self.experiment)
            .join(self.seed.to_string())
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.out_root().join(&self.experiment)
    }

    /// Seeds for multi-seed experiments: `seed, seed+1, …`.
    pub fn seeds(&self, n: usize) -> Vec<u64> {
        (0..n as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    /// The same configuration with every component seed tied to `seed`.
    pub fn for_seed(&self, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.seed = seed;
        c.ranker.seed = mix_seed(self.ranker.seed, seed);
        c.reflection.seed = mix_seed(self.reflection.seed, seed);
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes to json")
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.to_json_value().to_string().as_bytes())
    }

    /// Parses TOML text, applies `key.path=value` overrides, then validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("config file: {}", e.message())))?;
        for (key, value) in overrides {
            set_dotted(&mut table, key, parse_value(value))?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or starts from defaults) and applies overrides; flags win.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides).map_err(|e| match path {
            Some(p) => e.context(format!("config {}", p.display())),
            None => e,
        })
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override key {key:?}")));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(Error::config(format!(
            "override {arg:?} must look like key.path=value"
        ))),
    }
}
