//! Soft-target construction.
//!
//! For a correct label `j*`, the smoothing mass `s` is spread over the
//! other vocabulary entries in proportion to their cosine similarity with
//! `j*`, after two masks: a threshold mask (similarity must exceed `t`, the
//! word itself and exact duplicates are dropped) and an optional synonym
//! mask (only lexicon synonyms survive). The correct label keeps `1 - s`.
//! When nothing survives the masks the target collapses to one-hot.

mod lexicon;
mod policy;
mod table;

use serde::{Deserialize, Serialize};

pub use lexicon::{load_synonyms, SynonymLexicon};
pub use policy::{
    HardTargets, PolicyInputs, PolicyRegistry, SemanticSmoothing, SmoothingSpec, TargetPolicy,
    UniformSmoothing,
};
pub use table::{
    inspect_distribution, precompute_target_table, InspectionRecord, SupportEntry, TableConfig,
    TableFile, TargetTable,
};

use crate::embeddings::SimilarityRow;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// Similarities at or above this are treated as exact duplicates of the
/// target word.
pub const DUPLICATE_SIMILARITY: f64 = 1.0 - 1e-6;

/// Parameters of similarity-weighted smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub s: f64,
    pub t: Option<f64>,
    pub use_synonym_mask: bool,
}

impl SmoothingConfig {
    pub fn semantic(s: f64, t: f64, use_synonym_mask: bool) -> Self {
        Self {
            s,
            t: Some(t),
            use_synonym_mask,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_mass(self.s)?;
        if let Some(t) = self.t {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("threshold t = {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_mass(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Config(format!("smoothing mass s = {s} outside [0, 1)")));
    }
    Ok(())
}

/// A sparse probability vector over the vocabulary for one correct label.
///
/// `support` holds the strictly positive incorrect-label probabilities in
/// ascending index order; every index not listed (other than the correct
/// one) has probability 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    pub correct_index: usize,
    pub correct_probability: f64,
    pub support: Vec<(usize, f64)>,
    pub vocab_size: usize,
}

impl TargetDistribution {
    pub fn probability(&self, index: usize) -> f64 {
        if index == self.correct_index {
            return self.correct_probability;
        }
        self.support
            .binary_search_by_key(&index, |&(m, _)| m)
            .map(|pos| self.support[pos].1)
            .unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        self.correct_probability + self.support.iter().map(|&(_, p)| p).sum::<f64>()
    }

    /// Iterates over every `(index, probability)` with probability > 0.
    pub fn nonzero(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        std::iter::once((self.correct_index, self.correct_probability))
            .chain(self.support.iter().copied())
            .filter(|&(_, p)| p > 0.0)
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab_size];
        for (m, p) in self.nonzero() {
            out[m] = p;
        }
        out
    }

    /// Shannon entropy in nats, with 0·log 0 = 0.
    pub fn entropy(&self) -> f64 {
        -self.nonzero().map(|(_, p)| p * p.ln()).sum::<f64>()
    }

    pub fn is_one_hot(&self) -> bool {
        self.support.is_empty() && self.correct_probability == 1.0
    }
}

pub fn one_hot(j_star: usize, k: usize) -> Result<TargetDistribution> {
    if j_star >= k {
        return Err(Error::Bounds { index: j_star, len: k });
    }
    Ok(TargetDistribution {
        correct_index: j_star,
        correct_probability: 1.0,
        support: Vec::new(),
        vocab_size: k,
    })
}

/// Standard label smoothing: `1 - s` on `j*`, `s / (k - 1)` elsewhere.
pub fn uniform_smoothed_distribution(j_star: usize, k: usize, s: f64) -> Result<TargetDistribution> {
    if k < 2 {
        return Err(Error::Contract(format!("uniform smoothing needs k >= 2, got {k}")));
    }
    validate_mass(s)?;
    if s == 0.0 {
        return one_hot(j_star, k);
    }
    if j_star >= k {
        return Err(Error::Bounds { index: j_star, len: k });
    }
    let share = s / (k - 1) as f64;
    Ok(TargetDistribution {
        correct_index: j_star,
        correct_probability: 1.0 - s,
        support: (0..k).filter(|&m| m != j_star).map(|m| (m, share)).collect(),
        vocab_size: k,
    })
}

/// Entry m is true when `sims[m] > t`, `m` is not the target and
/// `sims[m]` is below [`DUPLICATE_SIMILARITY`].
pub fn threshold_mask(simrow: &SimilarityRow, t: f64) -> Vec<bool> {
    simrow
        .sims
        .iter()
        .enumerate()
        .map(|(m, &sim)| m != simrow.target_index && sim > t && sim < DUPLICATE_SIMILARITY)
        .collect()
}

/// Entry m is true iff vocabulary token m is a lexicon synonym of
/// `target_token`. Special tokens are always false.
pub fn synonym_mask(
    target_token: &str,
    vocab: &Vocabulary,
    lexicon: &SynonymLexicon,
) -> Result<Vec<bool>> {
    if vocab.id(target_token).is_none() {
        return Err(Error::Lookup(target_token.to_string()));
    }
    let mut mask = vec![false; vocab.len()];
    for synonym in lexicon.synonyms(target_token) {
        if let Some(m) = vocab.id(synonym) {
            if !Vocabulary::is_special(m) {
                mask[m] = true;
            }
        }
    }
    Ok(mask)
}

/// Similarity-weighted soft target for `j_star`.
pub fn build_target_distribution(
    j_star: usize,
    simrow: &SimilarityRow,
    config: &SmoothingConfig,
    vocab: &Vocabulary,
    lexicon: Option<&SynonymLexicon>,
) -> Result<TargetDistribution> {
    config.validate()?;
    let t = config.t.ok_or_else(|| {
        Error::Contract(
            "similarity-weighted smoothing needs a threshold; use uniform or one-hot targets".into(),
        )
    })?;
    let k = vocab.len();
    if simrow.target_index != j_star || simrow.sims.len() != k {
        return Err(Error::Contract(format!(
            "similarity row for index {} (length {}) does not match target {j_star} in vocabulary of size {k}",
            simrow.target_index,
            simrow.sims.len()
        )));
    }
    let target_token = vocab
        .token(j_star)
        .ok_or(Error::Bounds { index: j_star, len: k })?;

    let mut keep = threshold_mask(simrow, t);
    if config.use_synonym_mask {
        let lexicon = lexicon.ok_or_else(|| {
            Error::Config("synonym mask requested but no lexicon was supplied".into())
        })?;
        let synonyms = synonym_mask(target_token, vocab, lexicon)?;
        keep.iter_mut().zip(synonyms).for_each(|(k, syn)| *k &= syn);
    }

    let weights: Vec<(usize, f64)> = keep
        .iter()
        .enumerate()
        .filter(|&(m, &kept)| kept && !Vocabulary::is_special(m))
        .map(|(m, _)| (m, simrow.sims[m]))
        .collect();
    let total: f64 = weights.iter().map(|&(_, w)| w).sum();

    if config.s == 0.0 || total <= 0.0 {
        return one_hot(j_star, k);
    }
    Ok(TargetDistribution {
        correct_index: j_star,
        correct_probability: 1.0 - config.s,
        support: weights
            .into_iter()
            .map(|(m, w)| (m, config.s * (w / total)))
            .collect(),
        vocab_size: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(sims: Vec<f64>, target: usize) -> SimilarityRow {
        SimilarityRow {
            target_index: target,
            sims,
        }
    }

    /// Specials followed by `words`, with a similarity row whose first six
    /// entries are zero.
    fn setup(words: &[&str], sims: &[f64], target: usize) -> (Vocabulary, SimilarityRow) {
        let vocab = Vocabulary::from_tokens(words.iter().copied()).unwrap();
        let mut full = vec![0.0; 6];
        full.extend_from_slice(sims);
        (vocab, row(full, target + 6))
    }

    #[test]
    fn threshold_mask_cases() {
        let mask = threshold_mask(&row(vec![1.0, 0.6, 0.3, -0.2], 0), 0.5);
        assert_eq!(mask, vec![false, true, false, false]);
        let mask = threshold_mask(&row(vec![1.0, 0.99, 0.3, 1.0], 0), 1.0);
        assert!(mask.iter().all(|&m| !m));
        let mask = threshold_mask(&row(vec![0.2, 1.0, 0.7], 0), 0.0);
        assert_eq!(mask, vec![false, false, true]);
    }

    #[test]
    fn synonym_mask_cases() {
        let vocab = Vocabulary::from_tokens(["fun", "play", "box"]).unwrap();
        let lex = SynonymLexicon::from_pairs([("fun", "play"), ("fun", "frolic")]);
        let mask = synonym_mask("fun", &vocab, &lex).unwrap();
        let on: Vec<_> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        assert_eq!(on, vec![vocab.id("play").unwrap()]);
        assert!(synonym_mask("box", &vocab, &lex).unwrap().iter().all(|&m| !m));
        assert!(matches!(synonym_mask("zzz", &vocab, &lex), Err(Error::Lookup(_))));
    }

    #[test]
    fn fun_play_scenario() {
        let (vocab, sims) = setup(&["fun", "play", "box", "game"], &[1.0, 0.4, 0.1, 0.7], 0);
        let lex = SynonymLexicon::from_pairs([("fun", "play"), ("fun", "frolic")]);
        let cfg = SmoothingConfig::semantic(0.1, 0.0, true);
        let dist = build_target_distribution(6, &sims, &cfg, &vocab, Some(&lex)).unwrap();
        assert_eq!(dist.correct_probability, 0.9);
        assert_eq!(dist.support, vec![(7, 0.1)]);
        assert!((dist.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn everything_filtered_collapses_to_one_hot() {
        let (vocab, sims) = setup(&["a", "b", "c"], &[1.0, 0.9, 0.99], 0);
        let cfg = SmoothingConfig::semantic(0.2, 1.0, false);
        let dist = build_target_distribution(6, &sims, &cfg, &vocab, None).unwrap();
        assert_eq!(dist, one_hot(6, 9).unwrap());
    }

    #[test]
    fn equal_pair_splits_evenly() {
        let (vocab, sims) = setup(&["a", "b", "c", "d"], &[1.0, 0.8, 0.8, 0.1], 0);
        let cfg = SmoothingConfig::semantic(0.2, 0.5, false);
        let dist = build_target_distribution(6, &sims, &cfg, &vocab, None).unwrap();
        assert!((dist.correct_probability - 0.8).abs() < 1e-15);
        assert_eq!(dist.support.len(), 2);
        for &(_, p) in &dist.support {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_normalization() {
        let (vocab, sims) = setup(&["a", "b", "c", "d"], &[1.0, 0.9, 0.6, 0.2], 0);
        let cfg = SmoothingConfig::semantic(0.1, 0.5, false);
        let dist = build_target_distribution(6, &sims, &cfg, &vocab, None).unwrap();
        assert_eq!(dist.correct_probability, 0.9);
        assert_eq!(dist.support.len(), 2);
        assert!((dist.probability(7) - 0.06).abs() < 1e-12);
        assert!((dist.probability(8) - 0.04).abs() < 1e-12);
        assert_eq!(dist.probability(9), 0.0);
    }

    #[test]
    fn specials_never_in_support() {
        let vocab = Vocabulary::from_tokens(["a", "b"]).unwrap();
        let sims = row(vec![0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 1.0, 0.7], 6);
        let cfg = SmoothingConfig::semantic(0.1, 0.0, false);
        let dist = build_target_distribution(6, &sims, &cfg, &vocab, None).unwrap();
        assert_eq!(dist.support, vec![(7, 0.1)]);
    }

    #[test]
    fn config_errors() {
        let (vocab, sims) = setup(&["a", "b"], &[1.0, 0.7], 0);
        let no_t = SmoothingConfig { s: 0.1, t: None, use_synonym_mask: false };
        assert!(matches!(
            build_target_distribution(6, &sims, &no_t, &vocab, None),
            Err(Error::Contract(_))
        ));
        let bad_s = SmoothingConfig::semantic(1.0, 0.5, false);
        assert!(matches!(
            build_target_distribution(6, &sims, &bad_s, &vocab, None),
            Err(Error::Config(_))
        ));
        let needs_lex = SmoothingConfig::semantic(0.1, 0.5, true);
        assert!(matches!(
            build_target_distribution(6, &sims, &needs_lex, &vocab, None),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_target_distribution(7, &sims, &SmoothingConfig::semantic(0.1, 0.5, false), &vocab, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn uniform_cases() {
        let d = uniform_smoothed_distribution(3, 5, 0.2).unwrap();
        let dense = d.dense();
        for (m, p) in dense.iter().enumerate() {
            let want = if m == 3 { 0.8 } else { 0.05 };
            assert!((p - want).abs() < 1e-15);
        }
        assert!(uniform_smoothed_distribution(1, 5, 0.0).unwrap().is_one_hot());
        let d = uniform_smoothed_distribution(0, 2, 0.1).unwrap();
        assert_eq!(d.dense(), vec![0.9, 0.1]);
        assert!(matches!(uniform_smoothed_distribution(0, 1, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn one_hot_cases() {
        let d = one_hot(2, 4).unwrap();
        assert_eq!(d.dense(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(d.total_mass(), 1.0);
        assert!(d.support.is_empty());
        assert_eq!(d.entropy(), 0.0);
        assert!(matches!(one_hot(4, 4), Err(Error::Bounds { .. })));
    }

    #[test]
    fn s_is_linear() {
        let (vocab, sims) = setup(&["a", "b", "c", "d"], &[1.0, 0.9, 0.6, 0.55], 0);
        let d1 = build_target_distribution(6, &sims, &SmoothingConfig::semantic(0.1, 0.5, false), &vocab, None).unwrap();
        let d2 = build_target_distribution(6, &sims, &SmoothingConfig::semantic(0.2, 0.5, false), &vocab, None).unwrap();
        for (&(m1, p1), &(m2, p2)) in d1.support.iter().zip(&d2.support) {
            assert_eq!(m1, m2);
            assert!((2.0 * p1 - p2).abs() < 1e-12);
        }
    }
}
