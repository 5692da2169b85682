//! Preference math of the generation stage: the detailed feature `e_d`
//! from keyword text plus a trainable modal mapper over image-slot tokens,
//! the global keyword feature `e_g`, and the balance calibrator that fuses
//! them into `p_gen` through cross-attention with a residual path.
//!
//! Everything trainable lives in [`CalibratorParams`]; gradients use the same
//! struct so optimizer code can walk both in lockstep.
//!
//! Mapper forward pass (row-vector convention):
//!
//! ```text
//! X₀ = img_tokens + 1·e_txtᵀ
//! encoder:  X ← X + tanh(X·E1)·E2
//! decoder:  H₀ = queries
//!           G  = H + softmax(H·Wq·(Z·Wk)ᵀ/√d_a)·(Z·Wv)
//!           H  ← G + tanh(G·F1)·F2
//! output:   mean_rows(H·O1·O2)
//! ```

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoders::{KeywordSet, SemanticEncoder};
use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{dot, softmax_unchecked, Matrix, SeededRng, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreferenceConfig {
    /// Width of text features; must equal the semantic encoder dimension.
    pub text_dim: usize,
    pub img_tokens: usize,
    pub queries: usize,
    pub depth: usize,
    pub ff_dim: usize,
    pub mapper_hidden: usize,
    pub mapper_out: usize,
    pub attn_dim: usize,
    pub value_dim: usize,
    /// Key/value rows lifted from `e_g`; 1 is the single-row literal form.
    pub kv_rows: usize,
    /// Output width; must equal the visual feature dimension.
    pub pref_dim: usize,
    pub init_scale: f64,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        PreferenceConfig {
            text_dim: 32,
            img_tokens: 4,
            queries: 4,
            depth: 4,
            ff_dim: 32,
            mapper_hidden: 32,
            mapper_out: 32,
            attn_dim: 16,
            value_dim: 32,
            kv_rows: 4,
            pref_dim: 32,
            init_scale: 1.0,
        }
    }
}

impl PreferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.text_dim,
            self.img_tokens,
            self.queries,
            self.depth,
            self.ff_dim,
            self.mapper_hidden,
            self.mapper_out,
            self.attn_dim,
            self.value_dim,
            self.kv_rows,
            self.pref_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::config(
                "preference dimensions and depth must be positive",
            ));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::config(
                "preference.init_scale must be finite and non-negative",
            ));
        }
        Ok(())
    }

    pub fn detailed_dim(&self) -> usize {
        self.text_dim + self.mapper_out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ff_in: Matrix,
    pub ff_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub ff_in: Matrix,
    pub ff_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperParams {
    pub queries: Matrix,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub out1: Matrix,
    pub out2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratorParams {
    pub mapper: MapperParams,
    pub img_tokens: Matrix,
    /// `attn_dim × detailed_dim`.
    pub attn_q: Matrix,
    /// `(kv_rows·attn_dim) × text_dim`, row block `j` produces key `j`.
    pub attn_k: Matrix,
    /// `(kv_rows·value_dim) × text_dim`.
    pub attn_v: Matrix,
    /// `pref_dim × (value_dim + text_dim)`.
    pub out_proj: Matrix,
    pub kv_rows: usize,
}

impl CalibratorParams {
    pub fn init(cfg: &PreferenceConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.init_scale;
        let d = cfg.text_dim;
        let mut w = |rows: usize, cols: usize, gain: f64| {
            Matrix::random_normal(rows, cols, s * gain / (rows as f64).sqrt(), rng)
        };
        let queries = w(
            cfg.queries,
            d,
            (cfg.queries as f64).sqrt() / (d as f64).sqrt(),
        );
        let encoder = (0..cfg.depth)
            .map(|_| EncoderLayer {
                ff_in: w(d, cfg.ff_dim, 1.0),
                ff_out: w(cfg.ff_dim, d, 0.5),
            })
            .collect();
        let decoder = (0..cfg.depth)
            .map(|_| DecoderLayer {
                w_q: w(d, cfg.attn_dim, 1.0),
                w_k: w(d, cfg.attn_dim, 1.0),
                w_v: w(d, d, 0.5),
                ff_in: w(d, cfg.ff_dim, 1.0),
                ff_out: w(cfg.ff_dim, d, 0.5),
            })
            .collect();
        let mapper = MapperParams {
            queries,
            encoder,
            decoder,
            out1: w(d, cfg.mapper_hidden, 1.0),
            out2: w(cfg.mapper_hidden, cfg.mapper_out, 1.0),
        };
        let img_tokens = w(
            cfg.img_tokens,
            d,
            (cfg.img_tokens as f64).sqrt() / (d as f64).sqrt(),
        );
        let dd = cfg.detailed_dim();
        let fan = |n: usize| s / (n as f64).sqrt();
        let attn_q = Matrix::random_normal(cfg.attn_dim, dd, fan(dd), rng);
        let attn_k = Matrix::random_normal(cfg.kv_rows * cfg.attn_dim, d, fan(d), rng);
        let attn_v = Matrix::random_normal(cfg.kv_rows * cfg.value_dim, d, fan(d), rng);
        let out_proj =
            Matrix::random_normal(cfg.pref_dim, cfg.value_dim + d, fan(cfg.value_dim + d), rng);
        let p = CalibratorParams {
            mapper,
            img_tokens,
            attn_q,
            attn_k,
            attn_v,
            out_proj,
            kv_rows: cfg.kv_rows,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn text_dim(&self) -> usize {
        self.img_tokens.cols()
    }

    pub fn attn_dim(&self) -> usize {
        self.attn_q.rows()
    }

    pub fn value_dim(&self) -> usize {
        self.attn_v.rows() / self.kv_rows
    }

    pub fn detailed_dim(&self) -> usize {
        self.attn_q.cols()
    }

    pub fn pref_dim(&self) -> usize {
        self.out_proj.rows()
    }

    pub fn depth(&self) -> usize {
        self.mapper.encoder.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.text_dim();
        let m = &self.mapper;
        let shape = |ctx: &'static str, mat: &Matrix, rows: usize, cols: usize| -> Result<()> {
            ensure_dim(ctx, rows, mat.rows())?;
            ensure_dim(ctx, cols, mat.cols())?;
            if !mat.is_finite() {
                return Err(Error::domain(format!("{ctx} has non-finite entries")));
            }
            Ok(())
        };
        if self.kv_rows == 0 || m.encoder.is_empty() || m.encoder.len() != m.decoder.len() {
            return Err(Error::domain(
                "calibrator needs kv_rows ≥ 1 and equal, non-zero encoder/decoder depth",
            ));
        }
        shape("img_tokens", &self.img_tokens, self.img_tokens.rows(), d)?;
        shape("mapper queries", &m.queries, m.queries.rows(), d)?;
        let ff = m.encoder[0].ff_in.cols();
        for l in &m.encoder {
            shape("encoder ff_in", &l.ff_in, d, ff)?;
            shape("encoder ff_out", &l.ff_out, ff, d)?;
        }
        let da = m.decoder[0].w_q.cols();
        for l in &m.decoder {
            shape("decoder w_q", &l.w_q, d, da)?;
            shape("decoder w_k", &l.w_k, d, da)?;
            shape("decoder w_v", &l.w_v, d, d)?;
            shape("decoder ff_in", &l.ff_in, d, l.ff_in.cols())?;
            shape("decoder ff_out", &l.ff_out, l.ff_in.cols(), d)?;
        }
        shape("mapper out1", &m.out1, d, m.out1.cols())?;
        shape("mapper out2", &m.out2, m.out1.cols(), m.out2.cols())?;
        let dd = d + m.out2.cols();
        shape("attn_q", &self.attn_q, self.attn_q.rows(), dd)?;
        if !self.attn_k.rows().is_multiple_of(self.kv_rows)
            || !self.attn_v.rows().is_multiple_of(self.kv_rows)
        {
            return Err(Error::domain(
                "attn_k/attn_v rows must be multiples of kv_rows",
            ));
        }
        shape("attn_k", &self.attn_k, self.kv_rows * self.attn_dim(), d)?;
        shape("attn_v", &self.attn_v, self.attn_v.rows(), d)?;
        shape(
            "out_proj",
            &self.out_proj,
            self.out_proj.rows(),
            self.value_dim() + d,
        )?;
        Ok(())
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let m = &self.mapper;
        let mut out: Vec<(String, &Matrix)> = vec![
            ("img_tokens".into(), &self.img_tokens),
            ("queries".into(), &m.queries),
        ];
        for (i, l) in m.encoder.iter().enumerate() {
            out.push((format!("enc{i}.ff_in"), &l.ff_in));
            out.push((format!("enc{i}.ff_out"), &l.ff_out));
        }
        for (i, l) in m.decoder.iter().enumerate() {
            out.push((format!("dec{i}.w_q"), &l.w_q));
            out.push((format!("dec{i}.w_k"), &l.w_k));
            out.push((format!("dec{i}.w_v"), &l.w_v));
            out.push((format!("dec{i}.ff_in"), &l.ff_in));
            out.push((format!("dec{i}.ff_out"), &l.ff_out));
        }
        out.push(("out1".into(), &m.out1));
        out.push(("out2".into(), &m.out2));
        out.push(("attn_q".into(), &self.attn_q));
        out.push(("attn_k".into(), &self.attn_k));
        out.push(("attn_v".into(), &self.attn_v));
        out.push(("out_proj".into(), &self.out_proj));
        out
    }

    /// Mutable tensors in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let m = &mut self.mapper;
        let mut out: Vec<&mut Matrix> = vec![&mut self.img_tokens, &mut m.queries];
        for l in &mut m.encoder {
            out.push(&mut l.ff_in);
            out.push(&mut l.ff_out);
        }
        for l in &mut m.decoder {
            out.push(&mut l.w_q);
            out.push(&mut l.w_k);
            out.push(&mut l.w_v);
            out.push(&mut l.ff_in);
            out.push(&mut l.ff_out);
        }
        out.push(&mut m.out1);
        out.push(&mut m.out2);
        out.push(&mut self.attn_q);
        out.push(&mut self.attn_k);
        out.push(&mut self.attn_v);
        out.push(&mut self.out_proj);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.as_slice().len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.as_slice().iter().copied())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        ensure_dim("calibrator parameter vector", self.num_params(), flat.len())?;
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.as_slice().len();
            t.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// In-place `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &CalibratorParams) {
        for (a, (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(alpha, b);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| dot(t.as_slice(), t.as_slice()))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("calibrator")
            .with_meta("depth", self.depth())
            .with_meta("kv_rows", self.kv_rows);
        for (name, t) in self.tensors() {
            ck.push(name, t);
        }
        ck
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        ck.expect_kind("calibrator")?;
        let depth: usize = ck.meta_parse("depth")?;
        let kv_rows: usize = ck.meta_parse("kv_rows")?;
        let img_tokens = ck.take("img_tokens")?;
        let queries = ck.take("queries")?;
        let mut encoder = Vec::with_capacity(depth);
        for i in 0..depth {
            encoder.push(EncoderLayer {
                ff_in: ck.take(&format!("enc{i}.ff_in"))?,
                ff_out: ck.take(&format!("enc{i}.ff_out"))?,
            });
        }
        let mut decoder = Vec::with_capacity(depth);
        for i in 0..depth {
            decoder.push(DecoderLayer {
                w_q: ck.take(&format!("dec{i}.w_q"))?,
                w_k: ck.take(&format!("dec{i}.w_k"))?,
                w_v: ck.take(&format!("dec{i}.w_v"))?,
                ff_in: ck.take(&format!("dec{i}.ff_in"))?,
                ff_out: ck.take(&format!("dec{i}.ff_out"))?,
            });
        }
        let p = CalibratorParams {
            mapper: MapperParams {
                queries,
                encoder,
                decoder,
                out1: ck.take("out1")?,
                out2: ck.take("out2")?,
            },
            img_tokens,
            attn_q: ck.take("attn_q")?,
            attn_k: ck.take("attn_k")?,
            attn_v: ck.take("attn_v")?,
            out_proj: ck.take("out_proj")?,
            kv_rows,
        };
        p.validate()?;
        Ok(p)
    }
}

/// All intermediate preference representations for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceBundle {
    pub e_txt: Vector,
    pub e_img: Matrix,
    pub e_d: Vector,
    pub e_g: Vector,
    pub p_gen: Vector,
    pub p_ret: Vector,
}

/// Text feature of the keyword list, encoded as one caption.
pub fn build_global(keywords: &KeywordSet, encoder: &SemanticEncoder) -> Result<Vector> {
    if keywords.is_empty() {
        return Err(Error::domain(
            "global feature needs at least one filtered keyword",
        ));
    }
    Ok(encoder.encode(&keywords.filtered_tokens())?.vec)
}

#[derive(Debug, Clone)]
struct DecoderCache {
    h_in: Matrix,
    qh: Matrix,
    kz: Matrix,
    vz: Matrix,
    probs: Matrix,
    g: Matrix,
    b: Matrix,
}

#[derive(Debug, Clone)]
pub struct MapperCache {
    enc_x: Vec<Matrix>,
    enc_a: Vec<Matrix>,
    dec: Vec<DecoderCache>,
    h_out: Matrix,
    y1: Matrix,
    pub pooled: Vec<f64>,
}

/// Intermediate values of one calibrator forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub e_txt: Vec<f64>,
    pub e_img: Matrix,
    pub e_d: Vec<f64>,
    pub e_g: Vec<f64>,
    pub mapper: MapperCache,
    q: Vec<f64>,
    keys: Matrix,
    values: Matrix,
    pub attn_weights: Vec<f64>,
    pub attn_out: Vec<f64>,
    concat: Vec<f64>,
    pub p_gen: Vec<f64>,
}

fn tanh_of(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
    out
}

/// `grad ⊙ (1 − act²)` for `act = tanh(·)`.
fn tanh_backward(grad: &Matrix, act: &Matrix) -> Matrix {
    let mut out = grad.clone();
    for (g, a) in out.as_mut_slice().iter_mut().zip(act.as_slice()) {
        *g *= 1.0 - a * a;
    }
    out
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    out.add_scaled(1.0, b);
    out
}

/// Row-wise softmax of `scale · A·Bᵀ`.
fn attention_probs(a: &Matrix, b: &Matrix, scale: f64) -> Matrix {
    let mut s = a.matmul_t(b);
    for r in 0..s.rows() {
        let row = s.row_mut(r);
        row.iter_mut().for_each(|v| *v *= scale);
        let sm = softmax_unchecked(row);
        row.copy_from_slice(&sm);
    }
    s
}

/// Backward of a row-wise softmax given its output `p`.
fn softmax_backward(grad: &Matrix, p: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let inner = dot(grad.row(r), p.row(r));
        for c in 0..p.cols() {
            out.set(r, c, p.get(r, c) * (grad.get(r, c) - inner));
        }
    }
    out
}

/// Image-slot features: each token row shifted by `e_txt`.
pub fn image_slots(e_txt: &[f64], params: &CalibratorParams) -> Result<Matrix> {
    ensure_dim("image slot text feature", params.text_dim(), e_txt.len())?;
    let mut x = params.img_tokens.clone();
    for r in 0..x.rows() {
        crate::numerics::axpy(1.0, e_txt, x.row_mut(r));
    }
    Ok(x)
}

pub fn modal_map_forward(e_img: &Matrix, m: &MapperParams) -> MapperCache {
    let mut enc_x = vec![e_img.clone()];
    let mut enc_a = Vec::with_capacity(m.encoder.len());
    for l in &m.encoder {
        let x = enc_x.last().unwrap();
        let a = tanh_of(&x.matmul(&l.ff_in));
        let next = add(x, &a.matmul(&l.ff_out));
        enc_a.push(a);
        enc_x.push(next);
    }
    let z = enc_x.last().unwrap();
    let mut h = m.queries.clone();
    let mut dec = Vec::with_capacity(m.decoder.len());
    for l in &m.decoder {
        let qh = h.matmul(&l.w_q);
        let kz = z.matmul(&l.w_k);
        let vz = z.matmul(&l.w_v);
        let probs = attention_probs(&qh, &kz, 1.0 / (l.w_q.cols() as f64).sqrt());
        let g = add(&h, &probs.matmul(&vz));
        let b = tanh_of(&g.matmul(&l.ff_in));
        let next = add(&g, &b.matmul(&l.ff_out));
        dec.push(DecoderCache {
            h_in: h,
            qh,
            kz,
            vz,
            probs,
            g,
            b,
        });
        h = next;
    }
    let y1 = h.matmul(&m.out1);
    let pooled = y1.matmul(&m.out2).mean_rows();
    MapperCache {
        enc_x,
        enc_a,
        dec,
        h_out: h,
        y1,
        pooled,
    }
}

/// Mean-pooled mapper output for the given image-slot features.
pub fn modal_map(e_img: &Matrix, m: &MapperParams) -> Vec<f64> {
    modal_map_forward(e_img, m).pooled
}

/// `(e_txt, e_img, e_d)` from the filtered keywords.
pub fn build_detailed(
    keywords: &KeywordSet,
    encoder: &SemanticEncoder,
    params: &CalibratorParams,
) -> Result<(Vector, Matrix, Vector)> {
    if keywords.is_empty() {
        return Err(Error::domain(
            "detailed feature needs at least one filtered keyword",
        ));
    }
    let e_txt = encoder.encode(&keywords.filtered_tokens())?.vec;
    let e_img = image_slots(e_txt.as_slice(), params)?;
    let mut e_d = e_txt.as_slice().to_vec();
    e_d.extend(modal_map(&e_img, &params.mapper));
    Ok((e_txt, e_img, Vector::new(e_d)?))
}

struct CalibratorForward {
    q: Vec<f64>,
    keys: Matrix,
    values: Matrix,
    weights: Vec<f64>,
    attn_out: Vec<f64>,
    concat: Vec<f64>,
    p_gen: Vec<f64>,
}

fn calibrate_inner(
    e_d: &[f64],
    e_g: &[f64],
    params: &CalibratorParams,
) -> Result<CalibratorForward> {
    ensure_dim("calibrate e_d", params.detailed_dim(), e_d.len())?;
    ensure_dim("calibrate e_g", params.text_dim(), e_g.len())?;
    let m = params.kv_rows;
    let q = params.attn_q.matvec(e_d);
    let keys = Matrix::new(m, params.attn_dim(), params.attn_k.matvec(e_g))?;
    let values = Matrix::new(m, params.value_dim(), params.attn_v.matvec(e_g))?;
    let scale = 1.0 / (params.attn_dim() as f64).sqrt();
    let scores: Vec<f64> = (0..m).map(|j| scale * dot(&q, keys.row(j))).collect();
    let weights = softmax_unchecked(&scores);
    let attn_out = values.matvec_t(&weights);
    let mut concat = attn_out.clone();
    concat.extend_from_slice(e_g);
    let p_gen = params.out_proj.matvec(&concat);
    Ok(CalibratorForward {
        q,
        keys,
        values,
        weights,
        attn_out,
        concat,
        p_gen,
    })
}

/// `p_gen = out_proj · [attention(attn_q·e_d, K(e_g), V(e_g)); e_g]`.
pub fn calibrate(e_d: &[f64], e_g: &[f64], params: &CalibratorParams) -> Result<Vector> {
    Vector::new(calibrate_inner(e_d, e_g, params)?.p_gen)
}

/// Full forward pass from keyword features to `p_gen`.
pub fn forward(e_txt: &[f64], e_g: &[f64], params: &CalibratorParams) -> Result<ForwardCache> {
    let e_img = image_slots(e_txt, params)?;
    let mapper = modal_map_forward(&e_img, &params.mapper);
    let mut e_d = e_txt.to_vec();
    e_d.extend_from_slice(&mapper.pooled);
    let c = calibrate_inner(&e_d, e_g, params)?;
    if c.p_gen.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("calibrator produced a non-finite preference"));
    }
    Ok(ForwardCache {
        e_txt: e_txt.to_vec(),
        e_img,
        e_d,
        e_g: e_g.to_vec(),
        mapper,
        q: c.q,
        keys: c.keys,
        values: c.values,
        attn_weights: c.weights,
        attn_out: c.attn_out,
        concat: c.concat,
        p_gen: c.p_gen,
    })
}

/// Gradients of a loss with respect to every calibrator tensor, given the
/// loss gradient at `p_gen` and any direct gradient at `e_d`.
pub fn backward(
    cache: &ForwardCache,
    params: &CalibratorParams,
    grad_p_gen: &[f64],
    grad_e_d: Option<&[f64]>,
) -> Result<CalibratorParams> {
    ensure_dim(
        "backward p_gen gradient",
        params.pref_dim(),
        grad_p_gen.len(),
    )?;
    let mut g = params.zeros_like();
    let d = params.text_dim();
    let da = params.attn_dim();
    let dv = params.value_dim();
    let m = params.kv_rows;
    let scale = 1.0 / (da as f64).sqrt();

    g.out_proj.add_outer(1.0, grad_p_gen, &cache.concat);
    let g_concat = params.out_proj.matvec_t(grad_p_gen);
    let g_a = &g_concat[..dv];

    let g_w: Vec<f64> = (0..m).map(|j| dot(g_a, cache.values.row(j))).collect();
    let inner = dot(&g_w, &cache.attn_weights);
    let g_s: Vec<f64> = (0..m)
        .map(|j| cache.attn_weights[j] * (g_w[j] - inner))
        .collect();
    let mut g_q = vec![0.0; da];
    let mut g_kflat = vec![0.0; m * da];
    let mut g_vflat = vec![0.0; m * dv];
    for j in 0..m {
        crate::numerics::axpy(g_s[j] * scale, cache.keys.row(j), &mut g_q);
        crate::numerics::axpy(g_s[j] * scale, &cache.q, &mut g_kflat[j * da..(j + 1) * da]);
        crate::numerics::axpy(
            cache.attn_weights[j],
            g_a,
            &mut g_vflat[j * dv..(j + 1) * dv],
        );
    }
    g.attn_k.add_outer(1.0, &g_kflat, &cache.e_g);
    g.attn_v.add_outer(1.0, &g_vflat, &cache.e_g);
    g.attn_q.add_outer(1.0, &g_q, &cache.e_d);

    let mut g_ed = params.attn_q.matvec_t(&g_q);
    if let Some(extra) = grad_e_d {
        ensure_dim("backward e_d gradient", g_ed.len(), extra.len())?;
        crate::numerics::axpy(1.0, extra, &mut g_ed);
    }
    let g_pooled = &g_ed[d..];

    let mp = &params.mapper;
    let mc = &cache.mapper;
    let lq = mp.queries.rows();
    let g_y = Matrix::from_fn(lq, g_pooled.len(), |_, c| g_pooled[c] / lq as f64);
    g.mapper.out2 = mc.y1.t_matmul(&g_y);
    let g_y1 = g_y.matmul_t(&mp.out2);
    g.mapper.out1 = mc.h_out.t_matmul(&g_y1);
    let mut g_h = g_y1.matmul_t(&mp.out1);

    let z = mc.enc_x.last().unwrap();
    let mut g_z = Matrix::zeros(z.rows(), z.cols());
    for (l, (layer, dc)) in mp.decoder.iter().zip(&mc.dec).enumerate().rev() {
        let gl = &mut g.mapper.decoder[l];
        gl.ff_out = dc.b.t_matmul(&g_h);
        let g_u = tanh_backward(&g_h.matmul_t(&layer.ff_out), &dc.b);
        gl.ff_in = dc.g.t_matmul(&g_u);
        let g_g = add(&g_h, &g_u.matmul_t(&layer.ff_in));

        let g_probs = g_g.matmul_t(&dc.vz);
        let g_vz = dc.probs.t_matmul(&g_g);
        let mut g_scores = softmax_backward(&g_probs, &dc.probs);
        g_scores
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v *= 1.0 / (layer.w_q.cols() as f64).sqrt());
        let g_qh = g_scores.matmul(&dc.kz);
        let g_kz = g_scores.t_matmul(&dc.qh);

        gl.w_q = dc.h_in.t_matmul(&g_qh);
        gl.w_k = z.t_matmul(&g_kz);
        gl.w_v = z.t_matmul(&g_vz);
        g_z.add_scaled(1.0, &g_kz.matmul_t(&layer.w_k));
        g_z.add_scaled(1.0, &g_vz.matmul_t(&layer.w_v));
        g_h = add(&g_g, &g_qh.matmul_t(&layer.w_q));
    }
    g.mapper.queries = g_h;

    let mut g_x = g_z;
    for (l, layer) in mp.encoder.iter().enumerate().rev() {
        let a = &mc.enc_a[l];
        let gl = &mut g.mapper.encoder[l];
        gl.ff_out = a.t_matmul(&g_x);
        let g_u = tanh_backward(&g_x.matmul_t(&layer.ff_out), a);
        gl.ff_in = mc.enc_x[l].t_matmul(&g_u);
        g_x = add(&g_x, &g_u.matmul_t(&layer.ff_in));
    }
    g.img_tokens = g_x;
    Ok(g)
}

/// Fixed seeded `out_dim × in_dim` map from visual or detailed features into
/// the semantic space. One definition serves every such projection.
pub fn semantic_projection(in_dim: usize, out_dim: usize, seed: u64) -> Matrix {
    let mut rng = SeededRng::new(seed)
        .fork_named("semantic-projection")
        .fork(in_dim as u64);
    Matrix::random_normal(out_dim, in_dim, 1.0 / (in_dim as f64).sqrt(), &mut rng)
}

pub const DEFAULT_PROJECTION_SEED: u64 = 0x5e3a_0001;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradient, squared_distance};

    fn tiny() -> PreferenceConfig {
        PreferenceConfig {
            text_dim: 5,
            img_tokens: 3,
            queries: 2,
            depth: 2,
            ff_dim: 4,
            mapper_hidden: 4,
            mapper_out: 3,
            attn_dim: 3,
            value_dim: 4,
            kv_rows: 2,
            pref_dim: 4,
            init_scale: 1.0,
        }
    }

    fn unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
        crate::numerics::normalize(&rng.normal_vec(d, 1.0)).unwrap()
    }

    #[test]
    fn shapes_close_for_default_config() {
        let mut rng = SeededRng::new(1);
        let p = CalibratorParams::init(&PreferenceConfig::default(), &mut rng).unwrap();
        let c = forward(&unit(&mut rng, 32), &unit(&mut rng, 32), &p).unwrap();
        assert_eq!(c.e_d.len(), 64);
        assert_eq!(c.p_gen.len(), 32);
    }

    #[test]
    fn out_proj_zero_gives_zero() {
        let mut rng = SeededRng::new(2);
        let mut p = CalibratorParams::init(&tiny(), &mut rng).unwrap();
        p.out_proj.fill(0.0);
        let c = forward(&unit(&mut rng, 5), &unit(&mut rng, 5), &p).unwrap();
        assert!(c.p_gen.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_kv_row_returns_value_row() {
        let mut rng = SeededRng::new(3);
        let cfg = PreferenceConfig {
            kv_rows: 1,
            ..tiny()
        };
        let p = CalibratorParams::init(&cfg, &mut rng).unwrap();
        let e_g = unit(&mut rng, 5);
        let e_d = rng.normal_vec(8, 1.0);
        let v = p.attn_v.matvec(&e_g);
        let mut concat = v.clone();
        concat.extend_from_slice(&e_g);
        let expected = p.out_proj.matvec(&concat);
        let got = calibrate(&e_d, &e_g, &p).unwrap();
        for (a, b) in got.as_slice().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_tokens_and_output_give_zero_mapper_part() {
        let mut rng = SeededRng::new(4);
        let mut p = CalibratorParams::init(&tiny(), &mut rng).unwrap();
        p.img_tokens.fill(0.0);
        p.mapper.out2.fill(0.0);
        let e_txt = unit(&mut rng, 5);
        let c = forward(&e_txt, &unit(&mut rng, 5), &p).unwrap();
        assert_eq!(&c.e_d[..5], e_txt.as_slice());
        assert!(c.e_d[5..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..3 {
            let mut rng = SeededRng::new(100 + seed);
            let p = CalibratorParams::init(&tiny(), &mut rng).unwrap();
            let e_txt = unit(&mut rng, 5);
            let e_g = unit(&mut rng, 5);
            let target = rng.normal_vec(4, 1.0);
            let proj = Matrix::random_normal(5, 8, 0.5, &mut rng);
            let sem_ref = unit(&mut rng, 5);
            let loss = |params: &CalibratorParams| -> Result<f64> {
                let c = forward(&e_txt, &e_g, params)?;
                let sem = proj.matvec(&c.e_d);
                Ok(0.5 * squared_distance(&c.p_gen, &target)
                    + 0.3 * squared_distance(&sem, &sem_ref))
            };
            let c = forward(&e_txt, &e_g, &p).unwrap();
            let g_p: Vec<f64> = c.p_gen.iter().zip(&target).map(|(a, b)| a - b).collect();
            let sem = proj.matvec(&c.e_d);
            let diff: Vec<f64> = sem
                .iter()
                .zip(&sem_ref)
                .map(|(a, b)| 0.6 * (a - b))
                .collect();
            let g_ed = proj.matvec_t(&diff);
            let grads = backward(&c, &p, &g_p, Some(&g_ed)).unwrap();
            let mut probe = p.clone();
            let report = check_gradient(
                |flat| {
                    probe.unflatten(flat)?;
                    loss(&probe)
                },
                &p.flatten(),
                &grads.flatten(),
                1e-5,
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_relative_error < 1e-4,
                "seed {seed}: {}",
                report.max_relative_error
            );
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = SeededRng::new(9);
        let p = CalibratorParams::init(&tiny(), &mut rng).unwrap();
        let ck = Checkpoint::parse(&p.to_checkpoint().to_text()).unwrap();
        assert_eq!(CalibratorParams::from_checkpoint(ck).unwrap(), p);
    }
}
