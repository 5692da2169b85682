//! Frozen stand-in for the image generator. Callers only ever see
//! [`Generator::generate`]; no parameter or gradient is exposed.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Item, PixelGrid, Renderer};
use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{Matrix, SeededRng, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Reference,
    Global,
    Generated,
}

impl Provenance {
    pub const ALL: [Provenance; 3] = [
        Provenance::Reference,
        Provenance::Global,
        Provenance::Generated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Reference => "reference",
            Provenance::Global => "global",
            Provenance::Generated => "generated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub feature: Vector,
    pub pixels: PixelGrid,
    pub provenance: Provenance,
    pub source_pref: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub gain: f64,
    /// Size of the random perturbation around the identity map.
    pub mix: f64,
    pub bias_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0x6e7e_0001,
            gain: 1.0,
            mix: 0.3,
            bias_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    w_gen: Matrix,
    b_gen: Vec<f64>,
    global_proj: Matrix,
    renderer: Renderer,
}

impl Generator {
    /// `pref_dim → visual_dim` generator plus a `text_dim → pref_dim`
    /// projection for global images.
    pub fn new(
        cfg: &GeneratorConfig,
        pref_dim: usize,
        visual_dim: usize,
        text_dim: usize,
        renderer: Renderer,
    ) -> Result<Self> {
        if pref_dim == 0 || visual_dim == 0 || text_dim == 0 {
            return Err(Error::config("generator dimensions must be positive"));
        }
        if !(cfg.gain.is_finite()
            && cfg.gain > 0.0
            && cfg.mix.is_finite()
            && cfg.bias_scale.is_finite())
        {
            return Err(Error::config(
                "generator gain must be positive and scales finite",
            ));
        }
        let root = SeededRng::new(cfg.seed);
        let mut rng = root.fork_named("w_gen");
        let noise = Matrix::random_normal(
            visual_dim,
            pref_dim,
            cfg.mix / (pref_dim as f64).sqrt(),
            &mut rng,
        );
        let w_gen = Matrix::from_fn(visual_dim, pref_dim, |r, c| {
            cfg.gain * (if r == c { 1.0 } else { 0.0 } + noise.get(r, c))
        });
        let b_gen = root
            .fork_named("b_gen")
            .normal_vec(visual_dim, cfg.bias_scale);
        let mut rng = root.fork_named("global_proj");
        let global_proj =
            Matrix::random_normal(pref_dim, text_dim, 1.0 / (text_dim as f64).sqrt(), &mut rng);
        Ok(Generator {
            w_gen,
            b_gen,
            global_proj,
            renderer,
        })
    }

    pub fn pref_dim(&self) -> usize {
        self.w_gen.cols()
    }

    pub fn visual_dim(&self) -> usize {
        self.w_gen.rows()
    }

    pub fn renderer(&self) -> &Renderer {
        &self.renderer
    }

    /// `normalize(tanh(W_gen·pref + b_gen))`, rendered to pixels.
    pub fn generate(&self, pref: &[f64]) -> Result<GeneratedImage> {
        self.generate_as(pref, Provenance::Generated)
    }

    fn generate_as(&self, pref: &[f64], provenance: Provenance) -> Result<GeneratedImage> {
        ensure_dim("generator preference", self.pref_dim(), pref.len())?;
        if pref.iter().all(|v| *v == 0.0) {
            return Err(Error::domain("zero preference has no generated image"));
        }
        let source_pref = Vector::new(pref.to_vec())?;
        let mut h = self.w_gen.matvec(pref);
        for (v, b) in h.iter_mut().zip(&self.b_gen) {
            *v = (*v + b).tanh();
        }
        let feature = Vector::new(h)?
            .normalized()
            .map_err(|_| Error::domain("generated feature collapsed to zero"))?;
        let pixels = self.renderer.render(feature.as_slice())?;
        Ok(GeneratedImage {
            feature,
            pixels,
            provenance,
            source_pref,
        })
    }

    /// Image generated from the keyword feature alone.
    pub fn make_global_image(&self, e_g: &[f64]) -> Result<GeneratedImage> {
        ensure_dim("global feature", self.global_proj.cols(), e_g.len())?;
        self.generate_as(&self.global_proj.matvec(e_g), Provenance::Global)
    }

    /// Wraps the reference item's own feature and pixels.
    pub fn make_reference_image(&self, item: &Item) -> Result<GeneratedImage> {
        let pixels = match &item.pixel_grid {
            Some(p) => p.clone(),
            None => self.renderer.render(item.visual_feature.as_slice())?,
        };
        Ok(GeneratedImage {
            feature: item.visual_feature.clone(),
            pixels,
            provenance: Provenance::Reference,
            source_pref: item.visual_feature.clone(),
        })
    }

    /// Hex SHA-256 of the frozen constants.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for m in [&self.w_gen, &self.global_proj] {
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        for v in &self.b_gen {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
