//! Question search: find the question word most related to the detected
//! objects, substitute it with its embedding neighbors, and measure how far
//! the rewritten questions drift from the original.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::embeddings::{cosine_sim, nearest_neighbors, normalize_token, EmbeddingTable};
use crate::error::{Error, Result};
use crate::llm::ngram::NgramLm;

/// Smoothing for the unigram distributions compared by [`sample_diversity_loss`].
pub const UNIGRAM_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QsConfig {
    /// Relevance gate: substitution happens only when relevance > `mu`.
    pub mu: f64,
    /// Neighbor floor: a neighbor is used only when its similarity > `delta_word`.
    pub delta_word: f64,
    pub k_neighbors: usize,
    /// Variants whose log-probability falls more than this many nats below
    /// the original question are dropped.
    pub fluency_margin: f64,
}

impl Default for QsConfig {
    fn default() -> Self {
        QsConfig {
            mu: 0.7,
            delta_word: 0.5,
            k_neighbors: 3,
            fluency_margin: 2.0,
        }
    }
}

impl QsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!("qs.mu must be in [0, 1], got {}", self.mu)));
        }
        if !(0.0..=1.0).contains(&self.delta_word) {
            return Err(Error::Config(format!(
                "qs.delta_word must be in [0, 1], got {}",
                self.delta_word
            )));
        }
        if self.k_neighbors == 0 {
            return Err(Error::Config("qs.k_neighbors must be at least 1".into()));
        }
        if !(self.fluency_margin >= 0.0) {
            return Err(Error::Config("qs.fluency_margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// The original question plus its single-word substitutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSet {
    pub original: Vec<String>,
    pub variants: Vec<Vec<String>>,
    /// Position of the selected (most object-relevant) word, if any word
    /// of the question could be scored.
    pub replaced_index: Option<usize>,
    /// Relevance of the selected word.
    pub relevance: Option<f64>,
    /// Replacement probability per variant.
    pub replace_probs: Vec<f64>,
}

impl QuestionSet {
    /// Original first, then variants.
    pub fn all_questions(&self) -> impl Iterator<Item = &[String]> {
        std::iter::once(self.original.as_slice()).chain(self.variants.iter().map(Vec::as_slice))
    }
}

/// Best cosine between `word` and any detected object, with the arg-max
/// object (lexicographically smallest on ties).
pub fn word_relevance<S: AsRef<str>>(word: &str, objects: &[S], table: &EmbeddingTable) -> Result<(f64, String)> {
    let wv = table
        .get(word)
        .ok_or_else(|| Error::NotComputable(format!("word {word:?} is out of vocabulary")))?;
    let mut best: Option<(f64, String)> = None;
    for obj in objects {
        let key = normalize_token(obj.as_ref());
        let Some(ov) = table.get(&key) else { continue };
        let s = cosine_sim(wv, ov);
        let better = match &best {
            None => true,
            Some((bs, bo)) => s > *bs || (s == *bs && key < *bo),
        };
        if better {
            best = Some((s, key));
        }
    }
    best.ok_or_else(|| Error::NotComputable("no detected object is in the vocabulary".into()))
}

/// Build the question set: pick the most object-relevant word (earliest on
/// ties) and, if its relevance exceeds `mu`, substitute it with each of its
/// top-k neighbors whose similarity exceeds `delta_word`.
pub fn expand_question<S, O>(question: &[S], objects: &[O], cfg: &QsConfig, table: &EmbeddingTable) -> Result<QuestionSet>
where
    S: AsRef<str>,
    O: AsRef<str>,
{
    if question.is_empty() {
        return Err(Error::Contract("cannot expand an empty question".into()));
    }
    let original: Vec<String> = question.iter().map(|w| normalize_token(w.as_ref())).collect();

    let mut selected: Option<(usize, f64)> = None;
    for (pos, word) in original.iter().enumerate() {
        let Ok((score, _)) = word_relevance(word, objects, table) else {
            continue;
        };
        if selected.is_none_or(|(_, best)| score > best) {
            selected = Some((pos, score));
        }
    }

    let mut set = QuestionSet {
        original,
        variants: Vec::new(),
        replaced_index: selected.map(|(p, _)| p),
        relevance: selected.map(|(_, s)| s),
        replace_probs: Vec::new(),
    };
    let Some((pos, relevance)) = selected else {
        return Ok(set);
    };
    if !(relevance > cfg.mu) {
        return Ok(set);
    }
    for (neighbor, sim) in nearest_neighbors(&set.original[pos], cfg.k_neighbors, table)? {
        if sim > cfg.delta_word && neighbor != set.original[pos] {
            let mut variant = set.original.clone();
            variant[pos] = neighbor;
            set.variants.push(variant);
            set.replace_probs.push(relevance);
        }
    }
    Ok(set)
}

/// Drop variants whose log-probability is more than `margin` nats below the
/// original question's.
pub fn filter_by_fluency(set: &QuestionSet, lm: &NgramLm, margin: f64) -> Result<QuestionSet> {
    let floor = lm.log_prob(&set.original)? - margin;
    let mut out = QuestionSet {
        variants: Vec::new(),
        replace_probs: Vec::new(),
        ..set.clone()
    };
    for (variant, &p) in set.variants.iter().zip(&set.replace_probs) {
        if lm.log_prob(variant)? >= floor {
            out.variants.push(variant.clone());
            out.replace_probs.push(p);
        }
    }
    Ok(out)
}

/// `−Σ_j P(q_j) · Σ_x p(x) ln(p(x)/q(x))`, i.e. the negated KL divergence of
/// `q_gen` from `p_orig`, weighted by the total replacement probability.
pub fn diversity_loss(p_orig: &[f64], q_gen: &[f64], replace_probs: &[f64]) -> Result<f64> {
    if p_orig.len() != q_gen.len() {
        return Err(Error::Contract(format!(
            "distributions over different supports ({} vs {})",
            p_orig.len(),
            q_gen.len()
        )));
    }
    for (name, dist) in [("p", p_orig), ("q", q_gen)] {
        if dist.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Contract(format!("{name} has a non-positive probability")));
        }
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("{name} sums to {total}, not 1")));
        }
    }
    let kl: f64 = p_orig.iter().zip(q_gen).map(|(p, q)| p * (p / q).ln()).sum();
    let weight: f64 = replace_probs.iter().sum();
    Ok(-weight * kl)
}

/// Add-α unigram distributions of two token sequences over their union
/// support (sorted token order).
pub fn unigram_distributions<S: AsRef<str>>(original: &[S], variant: &[S], alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let support: BTreeSet<&str> = original.iter().chain(variant).map(AsRef::as_ref).collect();
    let dist = |tokens: &[S]| {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
        let denom = tokens.len() as f64 + alpha * support.len() as f64;
        support
            .iter()
            .map(|t| (counts.get(t).copied().unwrap_or(0) as f64 + alpha) / denom)
            .collect::<Vec<f64>>()
    };
    (dist(original), dist(variant))
}

/// Diversity loss of one sample: the sum over its variants, each compared
/// with the original through smoothed unigram distributions.
pub fn sample_diversity_loss(set: &QuestionSet) -> Result<f64> {
    let mut total = 0.0;
    for (variant, &p) in set.variants.iter().zip(&set.replace_probs) {
        let (orig, gen) = unigram_distributions(&set.original, variant, UNIGRAM_ALPHA);
        total += diversity_loss(&orig, &gen, &[p])?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pets() -> EmbeddingTable {
        let s = 0.5f64.sqrt();
        EmbeddingTable::from_entries(
            3,
            [
                ("what", vec![0.0, 0.0, 1.0]),
                ("is", vec![0.0, 0.1, 1.0]),
                ("the", vec![0.1, 0.0, 1.0]),
                ("cat", vec![1.0, 0.0, 0.0]),
                ("kitten", vec![0.95, 0.05, 0.0]),
                ("pet", vec![s, s, 0.0]),
                ("tree", vec![0.0, 1.0, 0.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn relevance_examples() {
        let t = pets();
        let (s, o) = word_relevance("cat", &["cat", "tree"], &t).unwrap();
        assert_eq!((s, o.as_str()), (1.0, "cat"));
        let (s, o) = word_relevance("pet", &["cat"], &t).unwrap();
        assert!((s - 0.5f64.sqrt()).abs() < 1e-9);
        assert_eq!(o, "cat");
        assert!(matches!(word_relevance("cat", &["zzz", "qqq"], &t), Err(Error::NotComputable(_))));
    }

    #[test]
    fn relevance_ties_pick_smaller_object() {
        let t = EmbeddingTable::from_entries(
            2,
            [("w", vec![1.0, 0.0]), ("zed", vec![2.0, 0.0]), ("abe", vec![3.0, 0.0])],
        )
        .unwrap();
        assert_eq!(word_relevance("w", &["zed", "abe"], &t).unwrap().1, "abe");
    }

    #[test]
    fn closed_gate_emits_nothing() {
        let t = pets();
        let cfg = QsConfig {
            mu: 0.99,
            ..QsConfig::default()
        };
        let set = expand_question(&["what", "is", "the", "pet"], &["cat"], &cfg, &t).unwrap();
        assert!(set.variants.is_empty());
    }

    #[test]
    fn open_gate_substitutes_neighbor() {
        let t = pets();
        let cfg = QsConfig {
            mu: 0.7,
            delta_word: 0.9,
            k_neighbors: 3,
            ..QsConfig::default()
        };
        let set = expand_question(&["what", "is", "the", "cat"], &["cat"], &cfg, &t).unwrap();
        // brute-force neighbor filter
        let cat = t.get("cat").unwrap();
        let above: Vec<&str> = t
            .tokens()
            .filter(|&w| w != "cat" && cosine_sim(cat, t.get(w).unwrap()) > 0.9)
            .collect();
        assert_eq!(above, vec!["kitten"]);
        assert_eq!(set.variants, vec![vec!["what", "is", "the", "kitten"]]);
        assert_eq!(set.replaced_index, Some(3));
        assert_eq!(set.replace_probs, vec![1.0]);
    }

    #[test]
    fn equal_relevance_picks_earlier_word() {
        let t = pets();
        let set = expand_question(&["cat", "cat"], &["cat"], &QsConfig::default(), &t).unwrap();
        assert_eq!(set.replaced_index, Some(0));
    }

    #[test]
    fn empty_question_is_rejected() {
        let empty: [&str; 0] = [];
        assert!(expand_question(&empty, &["cat"], &QsConfig::default(), &pets()).is_err());
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity_loss(&[0.3, 0.7], &[0.3, 0.7], &[0.4, 0.9]).unwrap(), 0.0);
        let v = diversity_loss(&[0.5, 0.5], &[0.9, 0.1], &[1.0]).unwrap();
        let by_hand = -(0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln());
        assert!((v - by_hand).abs() < 1e-12);
        assert!((v + 0.5108).abs() < 1e-4);
        assert_eq!(diversity_loss(&[0.5, 0.5], &[0.9, 0.1], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn diversity_contract_errors() {
        assert!(diversity_loss(&[0.5, 0.5], &[1.0], &[1.0]).is_err());
        assert!(diversity_loss(&[1.0, 0.0], &[0.5, 0.5], &[1.0]).is_err());
        assert!(diversity_loss(&[0.6, 0.6], &[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn unigram_distributions_share_support() {
        let (p, q) = unigram_distributions(&["a", "b"], &["a", "c"], 0.01);
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(sample_diversity_loss(&QuestionSet {
            original: vec!["a".into(), "b".into()],
            variants: vec![vec!["a".into(), "c".into()]],
            replaced_index: Some(1),
            relevance: Some(0.8),
            replace_probs: vec![0.8],
        })
        .unwrap()
            < 0.0);
    }

    #[test]
    fn fluency_filter_drops_implausible_variants() {
        let lm = NgramLm::train(["what is the cat", "what is the kitten"], 0.01).unwrap();
        let set = QuestionSet {
            original: vec!["what".into(), "is".into(), "the".into(), "cat".into()],
            variants: vec![
                vec!["what".into(), "is".into(), "the".into(), "kitten".into()],
                vec!["what".into(), "is".into(), "the".into(), "zebra".into()],
            ],
            replaced_index: Some(3),
            relevance: Some(0.9),
            replace_probs: vec![0.9, 0.9],
        };
        let kept = filter_by_fluency(&set, &lm, 2.0).unwrap();
        assert_eq!(kept.variants.len(), 1);
        assert_eq!(kept.variants[0][3], "kitten");
        assert_eq!(kept.replace_probs, vec![0.9]);
    }
}
