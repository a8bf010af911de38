//! Candidate fusion `A+ = A* ∪ Â` and the piecewise answer score.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::kg::{answer_affinity, FusedFeature, Heads, KgCandidate};
use crate::llm::{normalize_answer, s_llm, LlmCandidate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub beta: f64,
    pub penalty_b: f64,
    /// Which loss weight scales `S_LLM` (1-based).
    pub lambda_index: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            beta: 0.5,
            penalty_b: 1.0,
            lambda_index: 1,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("score.beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.penalty_b.is_finite() && self.penalty_b >= 0.0) {
            return Err(Error::Config(format!(
                "score.penalty_b must be finite and >= 0, got {}",
                self.penalty_b
            )));
        }
        if !(1..=crate::weights::NUM_WEIGHTS).contains(&self.lambda_index) {
            return Err(Error::Config(format!(
                "score.lambda_index must be in 1..=5, got {}",
                self.lambda_index
            )));
        }
        Ok(())
    }
}

/// One member of `A+` before scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSkeleton {
    pub answer: String,
    pub llm: Option<LlmCandidate>,
    pub kg: Option<KgCandidate>,
}

impl CandidateSkeleton {
    pub fn other(answer: impl Into<String>) -> Self {
        CandidateSkeleton {
            answer: answer.into(),
            llm: None,
            kg: None,
        }
    }

    pub fn in_llm(&self) -> bool {
        self.llm.is_some()
    }

    pub fn in_kg(&self) -> bool {
        self.kg.is_some()
    }

    pub fn branch(&self) -> Branch {
        match (self.in_llm(), self.in_kg()) {
            (true, false) => Branch::LlmOnly,
            (false, true) => Branch::KgOnly,
            (true, true) => Branch::Both,
            (false, false) => Branch::Other,
        }
    }
}

/// The four cases of the piecewise score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    LlmOnly,
    KgOnly,
    Both,
    Other,
}

/// Union of the LLM and KG candidate sets keyed by normalized answer,
/// sorted by answer.
pub fn fuse_candidates(llm: &[LlmCandidate], kg: &[KgCandidate]) -> Vec<CandidateSkeleton> {
    let mut union: BTreeMap<String, CandidateSkeleton> = BTreeMap::new();
    for c in llm {
        let key = normalize_answer(&c.answer);
        let slot = union.entry(key.clone()).or_insert_with(|| CandidateSkeleton::other(key));
        if slot.llm.as_ref().is_none_or(|prev| c.confidence > prev.confidence) {
            slot.llm = Some(c.clone());
        }
    }
    for c in kg {
        let key = normalize_answer(&c.answer);
        let slot = union.entry(key.clone()).or_insert_with(|| CandidateSkeleton::other(key));
        if slot.kg.as_ref().is_none_or(|prev| c.sim_sum() > prev.sim_sum()) {
            slot.kg = Some(c.clone());
        }
    }
    union.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub answer: String,
    pub in_llm: bool,
    pub in_kg: bool,
    pub s_llm: Option<f64>,
    pub s_g: Option<f64>,
    #[serde(rename = "final")]
    pub final_score: f64,
}

impl ScoredCandidate {
    pub fn branch(&self) -> Branch {
        match (self.in_llm, self.in_kg) {
            (true, false) => Branch::LlmOnly,
            (false, true) => Branch::KgOnly,
            (true, true) => Branch::Both,
            (false, false) => Branch::Other,
        }
    }
}

/// Everything the score needs besides the candidate itself.
#[derive(Debug, Clone, Copy)]
pub struct ScoringContext<'a> {
    pub fused: &'a FusedFeature,
    pub heads: &'a Heads,
    pub table: &'a EmbeddingTable,
    /// Weight applied to `S_LLM`.
    pub lambda: f64,
    pub cfg: &'a ScoreConfig,
}

/// `S_G = R(a)ᵀ F_iq + β (sim_e + sim_r)`.
pub fn s_g(dot: f64, sim_entity: f64, sim_relation: f64, beta: f64) -> f64 {
    dot + beta * (sim_entity + sim_relation)
}

pub fn score_answer(c: &CandidateSkeleton, ctx: &ScoringContext<'_>) -> Result<ScoredCandidate> {
    let dot = answer_affinity(ctx.fused, &c.answer, ctx.heads, ctx.table)?;
    let llm = c.llm.as_ref().map(|l| s_llm(l, ctx.lambda));
    let g = c.kg.as_ref().map(|k| s_g(dot, k.sim_entity, k.sim_relation, ctx.cfg.beta));
    let final_score = match (llm, g) {
        (Some(l), None) => l,
        (None, Some(g)) => g,
        (Some(l), Some(g)) => l + g,
        (None, None) => dot - ctx.cfg.penalty_b,
    };
    if !final_score.is_finite() {
        return Err(Error::NonFinite(format!("score of answer {:?}", c.answer)));
    }
    Ok(ScoredCandidate {
        answer: c.answer.clone(),
        in_llm: llm.is_some(),
        in_kg: g.is_some(),
        s_llm: llm,
        s_g: g,
        final_score,
    })
}

fn by_final_desc(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.final_score
        .total_cmp(&a.final_score)
        .then_with(|| a.answer.cmp(&b.answer))
}

/// Score every pool answer (those outside `A+` fall to the last branch) and
/// sort best first, ties lexicographic.
pub fn rank_candidate_pool<S: AsRef<str>>(
    pool: &[S],
    candidates: &[CandidateSkeleton],
    ctx: &ScoringContext<'_>,
) -> Result<Vec<ScoredCandidate>> {
    if pool.is_empty() {
        return Err(Error::Contract("answer pool is empty".into()));
    }
    let index: BTreeMap<&str, &CandidateSkeleton> = candidates.iter().map(|c| (c.answer.as_str(), c)).collect();
    let mut scored = pool
        .iter()
        .map(|a| {
            let a = a.as_ref();
            match index.get(a) {
                Some(c) => score_answer(c, ctx),
                None => score_answer(&CandidateSkeleton::other(a), ctx),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(by_final_desc);
    Ok(scored)
}

/// Score of a single answer against `A+`, as [`rank_candidate_pool`] would.
pub fn score_in_pool(answer: &str, candidates: &[CandidateSkeleton], ctx: &ScoringContext<'_>) -> Result<f64> {
    let found = candidates.iter().find(|c| c.answer == answer);
    match found {
        Some(c) => Ok(score_answer(c, ctx)?.final_score),
        None => Ok(score_answer(&CandidateSkeleton::other(answer), ctx)?.final_score),
    }
}

pub fn update_best(current: f64, best: f64) -> f64 {
    current.max(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn llm(answer: &str, confidence: f64, fluency: f64) -> LlmCandidate {
        LlmCandidate {
            answer: answer.into(),
            confidence,
            fluency,
            source_prompt_index: 0,
        }
    }

    fn kg(answer: &str, e: f64, r: f64) -> KgCandidate {
        KgCandidate {
            answer: answer.into(),
            sim_entity: e,
            sim_relation: r,
        }
    }

    fn table() -> EmbeddingTable {
        EmbeddingTable::from_entries(
            2,
            [
                ("cat", vec![1.0, 0.0]),
                ("dog", vec![0.0, 1.0]),
                ("fox", vec![0.6, 0.8]),
                ("owl", vec![-0.8, 0.6]),
                ("bee", vec![0.8, -0.6]),
                ("elk", vec![-1.0, 0.0]),
                ("ant", vec![0.28, 0.96]),
                ("yak", vec![0.96, 0.28]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn s_g_arithmetic() {
        assert!((s_g(0.5, 0.8, 0.6, 0.5) - 1.2).abs() < 1e-12);
        assert_eq!(s_g(0.37, 0.8, 0.6, 0.0), 0.37);
        let shift = s_g(0.5, 0.8, 0.6, 1.0) - s_g(0.5, 0.8, 0.6, 0.5);
        assert!((shift - 0.5 * 1.4).abs() < 1e-12);
    }

    #[test]
    fn fusion_union() {
        let u = fuse_candidates(&[llm("cat", 0.5, -1.0)], &[kg("dog", 0.5, 0.5)]);
        assert_eq!(u.len(), 2);
        assert_eq!((u[0].in_llm(), u[0].in_kg()), (true, false));
        assert_eq!((u[1].in_llm(), u[1].in_kg()), (false, true));
        let both = fuse_candidates(&[llm("Cat", 0.5, -1.0)], &[kg("cat", 0.5, 0.5)]);
        assert_eq!(both.len(), 1);
        assert_eq!(both[0].branch(), Branch::Both);
        assert!(fuse_candidates(&[], &[]).is_empty());
    }

    #[test]
    fn branch_examples() {
        let (t, h) = (table(), Heads::identity(2, 1));
        let fused = FusedFeature { vector: vec![0.3, 0.0] };
        let cfg = ScoreConfig::default();
        let ctx = ScoringContext {
            fused: &fused,
            heads: &h,
            table: &t,
            lambda: 1.0,
            cfg: &cfg,
        };
        // S_LLM = 1 · 0.4 · (−1) = −0.4
        let only = CandidateSkeleton {
            answer: "dog".into(),
            llm: Some(llm("dog", 0.4, -1.0)),
            kg: None,
        };
        assert!((score_answer(&only, &ctx).unwrap().final_score + 0.4).abs() < 1e-12);
        // dot(cat, fused) = 0.3; S_G = 0.3 + 0.5·1.4 = 1.0; sum with −0.4 → 0.6
        let both = CandidateSkeleton {
            answer: "cat".into(),
            llm: Some(llm("cat", 0.4, -1.0)),
            kg: Some(kg("cat", 0.8, 0.6)),
        };
        let s = score_answer(&both, &ctx).unwrap();
        assert!((s.final_score - 0.6).abs() < 1e-12);
        assert_eq!(s.branch(), Branch::Both);
        // neither: 0.3 − 1.0
        let other = score_answer(&CandidateSkeleton::other("cat"), &ctx).unwrap();
        assert!((other.final_score + 0.7).abs() < 1e-12);
        assert_eq!(other.branch(), Branch::Other);
    }

    #[test]
    fn ties_are_lexicographic_and_single_pool_ranks_first() {
        let (t, h) = (table(), Heads::identity(2, 1));
        let fused = FusedFeature { vector: vec![0.0, 0.0] };
        let cfg = ScoreConfig::default();
        let ctx = ScoringContext {
            fused: &fused,
            heads: &h,
            table: &t,
            lambda: 1.0,
            cfg: &cfg,
        };
        let r = rank_candidate_pool(&["dog", "cat"], &[], &ctx).unwrap();
        assert_eq!(r[0].answer, "cat");
        assert_eq!(r[1].answer, "dog");
        assert_eq!(rank_candidate_pool(&["owl"], &[], &ctx).unwrap()[0].answer, "owl");
        assert!(rank_candidate_pool::<&str>(&[], &[], &ctx).is_err());
    }

    #[test]
    fn update_best_is_max() {
        assert_eq!(update_best(1.0, 2.0), 2.0);
        assert_eq!(update_best(2.0, 1.0), 2.0);
        assert_eq!(update_best(1.5, 1.5), 1.5);
    }
}
