//! Add-α bigram language model used for answer and question fluency.

use std::collections::HashMap;

use crate::embeddings::tokenize;
use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";

/// Bigram model with add-α smoothing and a begin-of-sequence context.
///
/// The vocabulary always contains `<unk>`; unseen words are scored as it.
/// `P(w | c) = (n(c, w) + α) / (n(c, ·) + α·V)` where `n(c, ·)` counts the
/// bigrams that start in context `c`, so every conditional sums to one over
/// the vocabulary.
#[derive(Debug, Clone)]
pub struct NgramLm {
    alpha: f64,
    vocab: HashMap<String, usize>,
    bigrams: HashMap<(usize, usize), u64>,
    context_totals: HashMap<usize, u64>,
}

impl NgramLm {
    /// Context id of the begin-of-sequence marker. Never a word id.
    const BOS: usize = usize::MAX;

    fn empty(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Contract(format!("smoothing alpha must be positive, got {alpha}")));
        }
        let mut vocab = HashMap::new();
        vocab.insert(UNK.to_string(), 0);
        Ok(NgramLm {
            alpha,
            vocab,
            bigrams: HashMap::new(),
            context_totals: HashMap::new(),
        })
    }

    /// Train on a corpus of sentences (tokenized with [`tokenize`]).
    pub fn train<I, S>(sentences: I, alpha: f64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut lm = Self::empty(alpha)?;
        for sentence in sentences {
            let tokens = tokenize(sentence.as_ref());
            let mut prev = Self::BOS;
            for tok in tokens {
                let next_id = lm.vocab.len();
                let id = *lm.vocab.entry(tok).or_insert(next_id);
                *lm.bigrams.entry((prev, id)).or_default() += 1;
                *lm.context_totals.entry(prev).or_default() += 1;
                prev = id;
            }
        }
        Ok(lm)
    }

    /// A model with the given words (plus `<unk>`) and no observed counts.
    pub fn with_vocabulary<I, S>(words: I, alpha: f64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut lm = Self::empty(alpha)?;
        for w in words {
            for tok in tokenize(w.as_ref()) {
                let next_id = lm.vocab.len();
                lm.vocab.entry(tok).or_insert(next_id);
            }
        }
        Ok(lm)
    }

    /// Number of word types, `<unk>` included.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn word_id(&self, word: &str) -> usize {
        self.vocab.get(word).copied().unwrap_or(0)
    }

    fn prob_ids(&self, context: usize, word: usize) -> f64 {
        let n_cw = self.bigrams.get(&(context, word)).copied().unwrap_or(0) as f64;
        let n_c = self.context_totals.get(&context).copied().unwrap_or(0) as f64;
        (n_cw + self.alpha) / (n_c + self.alpha * self.vocab.len() as f64)
    }

    /// `P(word | previous)`; `previous = None` is the begin-of-sequence context.
    pub fn prob(&self, previous: Option<&str>, word: &str) -> f64 {
        let ctx = previous.map_or(Self::BOS, |p| self.word_id(p));
        self.prob_ids(ctx, self.word_id(word))
    }

    /// `Σ ln P(w_i | w_{i-1})` over already-normalized tokens.
    pub fn log_prob<S: AsRef<str>>(&self, tokens: &[S]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::Contract("cannot score an empty token sequence".into()));
        }
        let mut prev = Self::BOS;
        let mut total = 0.0;
        for tok in tokens {
            let id = self.word_id(tok.as_ref());
            total += self.prob_ids(prev, id).ln();
            prev = id;
        }
        Ok(total)
    }

    /// Every word-type string, `<unk>` included. Test support.
    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.vocab.keys().map(String::as_str)
    }
}

/// Fluency of an answer string: its bigram log-probability (always ≤ 0).
pub fn fluency_score(answer: &str, lm: &NgramLm) -> Result<f64> {
    let tokens = tokenize(answer);
    if tokens.is_empty() {
        return Err(Error::Contract(format!("answer {answer:?} has no tokens")));
    }
    lm.log_prob(&tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_corpus_scores_zero() {
        let lm = NgramLm::train(["the cat"], 1e-12).unwrap();
        let f = fluency_score("the cat", &lm).unwrap();
        assert!(f.abs() < 1e-9, "{f}");
    }

    #[test]
    fn uniform_model_single_token() {
        // three words + <unk> = 4 types, no counts: P = α / (4α) = 1/4
        let lm = NgramLm::with_vocabulary(["red", "green", "blue"], 1.0).unwrap();
        assert_eq!(lm.vocab_size(), 4);
        let f = fluency_score("green", &lm).unwrap();
        assert!((f - (0.25f64).ln()).abs() < 1e-6);
        assert!((f + 1.3863).abs() < 1e-4);
    }

    #[test]
    fn longer_answers_never_score_higher() {
        let lm = NgramLm::train(["a cat sat on the mat", "the cat ate"], 0.1).unwrap();
        let words = ["the", "cat", "sat", "on", "zebra", "mat"];
        for t in 1..words.len() {
            let shorter = lm.log_prob(&words[..t]).unwrap();
            let longer = lm.log_prob(&words[..t + 1]).unwrap();
            assert!(longer <= shorter);
        }
    }

    #[test]
    fn conditionals_sum_to_one() {
        let lm = NgramLm::train(["a cat sat", "the cat ate the fish", "a dog"], 0.5).unwrap();
        let vocab: Vec<String> = lm.vocabulary().map(str::to_string).collect();
        let mut contexts: Vec<Option<&str>> = vec![None];
        contexts.extend(vocab.iter().map(|w| Some(w.as_str())));
        for ctx in contexts {
            let total: f64 = vocab.iter().map(|w| lm.prob(ctx, w)).sum();
            assert!((total - 1.0).abs() < 1e-9, "{ctx:?}: {total}");
        }
    }

    #[test]
    fn empty_answer_is_rejected() {
        let lm = NgramLm::train(["a b"], 1.0).unwrap();
        assert!(fluency_score(" ?! ", &lm).is_err());
        assert!(NgramLm::train(["a"], 0.0).is_err());
    }
}
