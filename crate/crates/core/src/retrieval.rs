//! Semantic retrieval over a user's history and similarity-weighted fusion
//! of the selected visual features into `p_ret`.

use serde::{Deserialize, Serialize};

use crate::corpus::UserSequence;
use crate::encoders::SemanticEncoder;
use crate::error::{Error, Result};
use crate::numerics::{axpy, cosine_similarity, softmax_weights, SeededRng, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// The k highest-scoring history items.
    Ret,
    /// Items ranked k+1 through 2k.
    ExpRet,
    /// k uniform draws without replacement.
    Random,
    /// Every history item with uniform weight (no retrieval).
    All,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Ret => "ret",
            Strategy::ExpRet => "exp_ret",
            Strategy::Random => "random",
            Strategy::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Number of retrieved items; 0 disables retrieval.
    pub k: usize,
    /// Scores are divided by this before the softmax.
    pub score_temperature: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 5,
            score_temperature: 1.0,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_temperature.is_finite() && self.score_temperature > 0.0) {
            return Err(Error::config(
                "retrieval.score_temperature must be positive",
            ));
        }
        Ok(())
    }

    pub fn strategy(&self) -> Strategy {
        if self.k == 0 {
            Strategy::All
        } else {
            Strategy::Ret
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// `(history index, raw score)` in selection order.
    pub selected: Vec<(usize, f64)>,
    pub weights: Vec<f64>,
    pub p_ret: Vector,
    pub strategy: Strategy,
}

impl RetrievalResult {
    pub fn indices(&self) -> Vec<usize> {
        self.selected.iter().map(|&(i, _)| i).collect()
    }
}

/// Cosine between each history caption and the reference caption, in
/// history order.
pub fn score_history(user: &UserSequence, encoder: &SemanticEncoder) -> Result<Vec<f64>> {
    let reference = encoder
        .encode_item(&user.reference)
        .map_err(|e| e.context("reference item"))?;
    user.history
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let e = encoder
                .encode_item(item)
                .map_err(|e| e.context(format!("history index {i}")))?;
            cosine_similarity(e.as_slice(), reference.as_slice())
        })
        .collect()
}

/// History indices sorted by score desc, then index asc.
pub fn rank_indices(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn select(
    scores: &[f64],
    k: usize,
    strategy: Strategy,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::domain("cannot select from an empty history"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::domain("retrieval scores must be finite"));
    }
    if strategy == Strategy::All {
        return Ok((0..n).collect());
    }
    if k == 0 {
        return Err(Error::domain(format!(
            "k must be at least 1 for {strategy}, got 0"
        )));
    }
    match strategy {
        Strategy::Ret => {
            if k > n {
                return Err(Error::domain(format!("k={k} exceeds history length {n}")));
            }
            let mut order = rank_indices(scores);
            order.truncate(k);
            Ok(order)
        }
        Strategy::ExpRet => {
            if 2 * k > n {
                return Err(Error::domain(format!(
                    "2k={} exceeds history length {n}",
                    2 * k
                )));
            }
            Ok(rank_indices(scores)[k..2 * k].to_vec())
        }
        Strategy::Random => {
            if k > n {
                return Err(Error::domain(format!("k={k} exceeds history length {n}")));
            }
            let mut picked = rng.sample_distinct(n, k);
            picked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            Ok(picked)
        }
        Strategy::All => unreachable!(),
    }
}

/// Softmax-weighted sum of the selected items' visual features. For
/// [`Strategy::All`] the weights are uniform.
pub fn fuse(
    user: &UserSequence,
    selected: &[usize],
    scores: &[f64],
    strategy: Strategy,
    temperature: f64,
) -> Result<RetrievalResult> {
    if selected.is_empty() {
        return Err(Error::domain("fusion needs at least one selected item"));
    }
    crate::error::ensure_dim("retrieval scores", user.history.len(), scores.len())?;
    if let Some(&bad) = selected.iter().find(|&&i| i >= user.history.len()) {
        return Err(Error::domain(format!("selected index {bad} out of range")));
    }
    let picked: Vec<(usize, f64)> = selected.iter().map(|&i| (i, scores[i])).collect();
    let weights = if strategy == Strategy::All {
        vec![1.0 / picked.len() as f64; picked.len()]
    } else {
        let scaled: Vec<f64> = picked.iter().map(|&(_, s)| s / temperature).collect();
        softmax_weights(&scaled)?
    };
    let dim = user.history[selected[0]].visual_feature.dim();
    let mut p = vec![0.0; dim];
    for (&(i, _), &w) in picked.iter().zip(&weights) {
        let f = user.history[i].visual_feature.as_slice();
        crate::error::ensure_dim("history visual feature", dim, f.len())?;
        axpy(w, f, &mut p);
    }
    Ok(RetrievalResult {
        selected: picked,
        weights,
        p_ret: Vector::new(p)?,
        strategy,
    })
}

/// Score, select and fuse in one call.
pub fn retrieve(
    user: &UserSequence,
    encoder: &SemanticEncoder,
    k: usize,
    strategy: Strategy,
    temperature: f64,
    rng: &mut SeededRng,
) -> Result<RetrievalResult> {
    let scores = score_history(user, encoder)?;
    let selected = select(&scores, k, strategy, rng)?;
    fuse(user, &selected, &scores, strategy, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Item;
    use crate::encoders::tokenize;
    use std::sync::Arc;

    fn item(id: &str, caption: &str, f: Vec<f64>) -> Arc<Item> {
        Arc::new(Item {
            item_id: id.into(),
            caption: tokenize(caption),
            text: vec![],
            visual_feature: Vector::new(f).unwrap(),
            pixel_grid: None,
            category: "c".into(),
        })
    }

    fn user(hist: Vec<Arc<Item>>, reference: Arc<Item>) -> UserSequence {
        UserSequence {
            user_id: "u".into(),
            history: hist,
            reference,
            planted_preference: None,
            held_out_positives: vec![],
        }
    }

    #[test]
    fn select_examples() {
        let mut rng = SeededRng::new(0);
        let s = [0.9, 0.1, 0.5, 0.7];
        assert_eq!(select(&s, 2, Strategy::Ret, &mut rng).unwrap(), vec![0, 3]);
        assert_eq!(
            select(&s, 2, Strategy::ExpRet, &mut rng).unwrap(),
            vec![2, 1]
        );
        assert_eq!(
            select(&[0.5, 0.5, 0.1], 1, Strategy::Ret, &mut rng).unwrap(),
            vec![0]
        );
    }

    #[test]
    fn select_bounds() {
        let mut rng = SeededRng::new(0);
        let s = [0.1, 0.2, 0.3];
        assert!(select(&s, 0, Strategy::Ret, &mut rng).is_err());
        assert!(select(&s, 4, Strategy::Ret, &mut rng).is_err());
        assert!(select(&s, 2, Strategy::ExpRet, &mut rng).is_err());
        assert!(select(&s, 4, Strategy::Random, &mut rng).is_err());
        assert_eq!(
            select(&s, 0, Strategy::All, &mut rng).unwrap(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn random_is_seeded() {
        let s: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        let a = select(&s, 5, Strategy::Random, &mut SeededRng::new(3)).unwrap();
        let b = select(&s, 5, Strategy::Random, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
    }

    #[test]
    fn fuse_examples() {
        let u = user(
            vec![
                item("a", "x", vec![1.0, 0.0]),
                item("b", "y", vec![0.0, 1.0]),
            ],
            item("r", "x", vec![1.0, 0.0]),
        );
        let one = fuse(&u, &[1], &[0.3, 0.2], Strategy::Ret, 1.0).unwrap();
        assert_eq!(one.p_ret.as_slice(), &[0.0, 1.0]);
        let eq = fuse(&u, &[0, 1], &[0.4, 0.4], Strategy::Ret, 1.0).unwrap();
        assert_eq!(eq.p_ret.as_slice(), &[0.5, 0.5]);
        let ln2 = fuse(
            &u,
            &[0, 1],
            &[std::f64::consts::LN_2, 0.0],
            Strategy::Ret,
            1.0,
        )
        .unwrap();
        assert!((ln2.p_ret.as_slice()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((ln2.p_ret.as_slice()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_caption_scores_one() {
        let enc = SemanticEncoder::with_dim(32);
        let u = user(
            vec![
                item("a", "red shoe", vec![1.0]),
                item("b", "blue hat", vec![1.0]),
            ],
            item("r", "red shoe", vec![1.0]),
        );
        let s = score_history(&u, &enc).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1] < 1.0);
    }
}
