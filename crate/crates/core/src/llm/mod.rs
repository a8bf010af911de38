//! LLM side of the candidate generation: caption curation, prompt
//! construction, candidate collection from a provider, fluency and the
//! LLM loss / score terms.

pub mod ngram;
pub mod provider;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embeddings::tokenize;
use crate::error::{Error, Result};
use crate::qsearch::QuestionSet;
use ngram::{fluency_score, NgramLm};
use provider::{AnswerProvider, RawCandidate};

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize_answer(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Captions compare equal after tokenization: `"A cat."` ≡ `"a cat"`.
pub fn normalize_caption(raw: &str) -> String {
    tokenize(raw).join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub image_id: String,
    pub captions: Vec<String>,
}

/// Normalize, drop duplicates (first occurrence wins) and keep at most
/// `k_captions`.
pub fn curate_captions<S: AsRef<str>>(image_id: &str, raw: &[S], k_captions: usize) -> Result<CaptionSet> {
    if k_captions == 0 {
        return Err(Error::Contract("k_captions must be at least 1".into()));
    }
    let mut captions: Vec<String> = Vec::new();
    for c in raw {
        let norm = normalize_caption(c.as_ref());
        if !norm.is_empty() && !captions.contains(&norm) {
            captions.push(norm);
        }
    }
    if captions.is_empty() {
        return Err(Error::Validation(format!("image {image_id:?} has no usable caption")));
    }
    captions.truncate(k_captions);
    Ok(CaptionSet {
        image_id: image_id.to_string(),
        captions,
    })
}

pub fn render_prompt(caption: &str, question: &str) -> String {
    format!("Context: {caption}\nQuestion: {question}\nAnswer:")
}

/// Caption-major product of captions and questions (original first).
pub fn build_prompts(captions: &CaptionSet, questions: &QuestionSet) -> Vec<String> {
    let rendered: Vec<String> = questions.all_questions().map(|q| q.join(" ")).collect();
    captions
        .captions
        .iter()
        .flat_map(|c| rendered.iter().map(move |q| render_prompt(c, q)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmCandidate {
    pub answer: String,
    /// P(Â) in [0, 1].
    pub confidence: f64,
    /// F_LM(Â) ≤ 0.
    pub fluency: f64,
    pub source_prompt_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationOptions {
    pub max_candidates: usize,
    pub max_in_flight: usize,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            max_candidates: 5,
            max_in_flight: 4,
        }
    }
}

fn clean_answer(text: &str) -> String {
    let first_line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    normalize_answer(first_line.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace()))
}

/// Query the provider once per prompt (at most `max_in_flight` at a time),
/// then merge in prompt order keeping each answer's highest confidence.
pub fn generate_candidates(
    provider: &dyn AnswerProvider,
    prompts: &[String],
    opts: &GenerationOptions,
    lm: &NgramLm,
) -> Result<Vec<LlmCandidate>> {
    if prompts.is_empty() {
        return Err(Error::Contract("no prompts to send".into()));
    }
    let in_flight = opts.max_in_flight.max(1);
    let mut responses: Vec<Result<Vec<RawCandidate>>> = Vec::with_capacity(prompts.len());
    for (chunk_idx, chunk) in prompts.chunks(in_flight).enumerate() {
        let base = chunk_idx * in_flight;
        let chunk_out: Vec<Result<Vec<RawCandidate>>> = if chunk.len() == 1 {
            vec![provider.complete(base, &chunk[0], opts.max_candidates)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .enumerate()
                    .map(|(i, p)| s.spawn(move || provider.complete(base + i, p, opts.max_candidates)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("provider thread panicked"))
                    .collect()
            })
        };
        responses.extend(chunk_out);
    }

    let mut merged: Vec<LlmCandidate> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (prompt_index, response) in responses.into_iter().enumerate() {
        let raw: Vec<RawCandidate> = response?.into_iter().take(opts.max_candidates).collect();
        let uniform = 1.0 / raw.len().max(1) as f64;
        for cand in raw {
            let confidence = cand.confidence.unwrap_or(uniform);
            if !confidence.is_finite() {
                return Err(Error::Provider {
                    prompt_index,
                    message: format!("non-finite confidence for {:?}", cand.text),
                });
            }
            let confidence = confidence.clamp(0.0, 1.0);
            let answer = clean_answer(&cand.text);
            if answer.is_empty() {
                continue;
            }
            match slot.get(&answer) {
                Some(&i) => {
                    if confidence > merged[i].confidence {
                        merged[i].confidence = confidence;
                        merged[i].source_prompt_index = prompt_index;
                    }
                }
                None => {
                    let fluency = fluency_score(&answer, lm)?;
                    slot.insert(answer.clone(), merged.len());
                    merged.push(LlmCandidate {
                        answer,
                        confidence,
                        fluency,
                        source_prompt_index: prompt_index,
                    });
                }
            }
        }
    }
    Ok(merged)
}

/// `Σ P(Â_i) · F_LM(Â_i)`.
pub fn llm_loss(candidates: &[LlmCandidate]) -> f64 {
    candidates.iter().map(|c| c.confidence * c.fluency).sum()
}

/// LLM branch score `λ · P(a) · F_LM(a)`.
pub fn s_llm(candidate: &LlmCandidate, lambda: f64) -> f64 {
    lambda * candidate.confidence * candidate.fluency
}
