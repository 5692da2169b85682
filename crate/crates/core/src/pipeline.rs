//! The per-user forward chain shared by reflection, evaluation and the
//! experiments: retrieval, keyword extraction, text features and the fixed
//! reference/global candidates.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusConfig, Item, Renderer, UserSequence};
use crate::encoders::{
    extract_keywords, KeywordExtractorConfig, KeywordSet, KeywordsOver, SemanticEncoder, Stopwords,
    DEFAULT_TOKEN_SEED,
};
use crate::error::{Error, Result};
use crate::generator::{GeneratedImage, Generator, GeneratorConfig};
use crate::numerics::{fnv1a64, mix_seed, Matrix, SeededRng, Vector};
use crate::preference::{
    build_global, semantic_projection, PreferenceConfig, DEFAULT_PROJECTION_SEED,
};
use crate::retrieval::{fuse, score_history, select, RetrievalConfig, RetrievalResult, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub token_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 32,
            token_seed: DEFAULT_TOKEN_SEED,
        }
    }
}

/// Frozen components needed to turn a user into preference inputs.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub encoder: SemanticEncoder,
    pub keywords: KeywordExtractorConfig,
    pub retrieval: RetrievalConfig,
    pub generator: Generator,
    /// `text_dim × detailed_dim`, for the semantic loss.
    pub detailed_projection: Matrix,
    /// `text_dim × visual_dim`, for the semantic cosine metrics.
    pub visual_projection: Matrix,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub keywords: KeywordExtractorConfig,
    pub retrieval: RetrievalConfig,
    pub preference: PreferenceConfig,
    pub generator: GeneratorConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.keywords.validate()?;
        self.retrieval.validate()?;
        self.preference.validate()?;
        if self.encoder.dim != self.preference.text_dim {
            return Err(Error::config("encoder.dim must equal preference.text_dim"));
        }
        Ok(())
    }
}

impl Pipeline {
    /// Builds the frozen pipeline for a corpus; the renderer comes from the
    /// corpus generation record when present.
    pub fn new(cfg: &PipelineConfig, corpus: &Corpus, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let visual_dim = corpus.visual_dim();
        if cfg.preference.pref_dim != visual_dim {
            return Err(Error::config(format!(
                "preference.pref_dim ({}) must equal the corpus visual dimension ({visual_dim})",
                cfg.preference.pref_dim
            )));
        }
        let renderer = match &corpus.generation_config {
            Some(g) => Renderer::from_config(&g.config),
            None => {
                let d = CorpusConfig::default();
                let size = corpus
                    .items
                    .values()
                    .find_map(|it| it.pixel_grid.as_ref().map(|p| p.size()))
                    .unwrap_or(d.pixel_size);
                Renderer::new(size, visual_dim, d.render_scale, d.render_seed)
            }
        };
        let stopwords = cfg.keywords.stopwords()?;
        let encoder = SemanticEncoder::new(cfg.encoder.dim, cfg.encoder.token_seed, stopwords);
        let generator = Generator::new(
            &cfg.generator,
            cfg.preference.pref_dim,
            visual_dim,
            cfg.encoder.dim,
            renderer,
        )?;
        Ok(Pipeline {
            encoder,
            keywords: cfg.keywords.clone(),
            retrieval: cfg.retrieval.clone(),
            generator,
            detailed_projection: semantic_projection(
                cfg.preference.detailed_dim(),
                cfg.encoder.dim,
                DEFAULT_PROJECTION_SEED,
            ),
            visual_projection: semantic_projection(
                visual_dim,
                cfg.encoder.dim,
                DEFAULT_PROJECTION_SEED,
            ),
            seed,
        })
    }

    pub fn stopwords(&self) -> &Stopwords {
        self.encoder.stopwords()
    }

    /// Deterministic per-user RNG stream for a named purpose.
    pub fn user_rng(&self, user_id: &str, purpose: &str) -> SeededRng {
        SeededRng::new(mix_seed(self.seed, fnv1a64(user_id.as_bytes()))).fork_named(purpose)
    }

    pub fn context(&self, user: &UserSequence) -> Result<UserContext> {
        self.context_with(user, self.retrieval.strategy(), self.retrieval.k)
    }

    pub fn context_with(
        &self,
        user: &UserSequence,
        strategy: Strategy,
        k: usize,
    ) -> Result<UserContext> {
        let build = || -> Result<UserContext> {
            let scores = score_history(user, &self.encoder)?;
            let mut rng = self.user_rng(&user.user_id, "retrieval");
            let selected = select(&scores, k, strategy, &mut rng)?;
            let retrieval = fuse(
                user,
                &selected,
                &scores,
                strategy,
                self.retrieval.score_temperature,
            )?;
            let keyword_items: Vec<&Item> = match (self.keywords.keywords_over, strategy) {
                (KeywordsOver::Full, _) | (_, Strategy::All) => {
                    user.history.iter().map(|i| i.as_ref()).collect()
                }
                (KeywordsOver::Retrieved, _) => {
                    selected.iter().map(|&i| user.history[i].as_ref()).collect()
                }
            };
            let keywords = self.keywords_for(&keyword_items)?;
            let e_txt = self.encoder.encode(&keywords.filtered_tokens())?.vec;
            let e_g = build_global(&keywords, &self.encoder)?;
            let e_sem_ref = self.encoder.encode_item(&user.reference)?.vec;
            let reference_image = self.generator.make_reference_image(&user.reference)?;
            let global_image = self.generator.make_global_image(e_g.as_slice())?;
            Ok(UserContext {
                user: user.clone(),
                retrieval,
                keywords,
                e_txt,
                e_g,
                e_sem_ref,
                reference_image,
                global_image,
            })
        };
        build().map_err(|e| e.context(format!("user {}", user.user_id)))
    }

    /// Keyword extraction with `min_count` capped at the item count, then
    /// relaxed to 1 if nothing survives.
    pub fn keywords_for(&self, items: &[&Item]) -> Result<KeywordSet> {
        let mut cfg = self.keywords.clone();
        cfg.min_count = cfg.min_count.min(items.len()).max(1);
        let ks = extract_keywords(items, &cfg, self.stopwords())?;
        if ks.is_empty() && cfg.min_count > 1 {
            cfg.min_count = 1;
            return extract_keywords(items, &cfg, self.stopwords());
        }
        Ok(ks)
    }

    pub fn project_visual(&self, feature: &[f64]) -> Vec<f64> {
        self.visual_projection.matvec(feature)
    }
}

/// Everything about one user that stays fixed while the calibrator trains.
#[derive(Debug, Clone)]
pub struct UserContext {
    pub user: UserSequence,
    pub retrieval: RetrievalResult,
    pub keywords: KeywordSet,
    pub e_txt: Vector,
    pub e_g: Vector,
    pub e_sem_ref: Vector,
    pub reference_image: GeneratedImage,
    pub global_image: GeneratedImage,
}

impl UserContext {
    pub fn p_ret(&self) -> &[f64] {
        self.retrieval.p_ret.as_slice()
    }
}
