//! Full-batch gradient descent on the contrastive part of the combined loss.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::head::{project, Heads, HeadsGrad, ProjectionHead, HeadGrad};
use super::loss::{infonce_with_grad, DEFAULT_TAU};
use crate::embeddings::{EmbeddingTable, Vector};
use crate::error::{Error, Result};
use crate::weights::{combined_loss, LossParts, LossWeights};

/// A positive item and the negatives it is contrasted with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveTarget {
    pub positive: String,
    pub negatives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// Pooled question embedding.
    pub question: Vector,
    pub image_feature: Vector,
    pub entity: Option<ContrastiveTarget>,
    pub relation: Option<ContrastiveTarget>,
    pub answer: Option<ContrastiveTarget>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20,
            lr: 0.05,
            tau: DEFAULT_TAU,
        }
    }
}

/// `L_se` and `L_LLM`: computed from frozen components, constant with
/// respect to the head parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FrozenLosses {
    pub se: f64,
    pub llm: f64,
}

/// Draw up to `count` items uniformly without replacement from `pool`,
/// excluding `positive`.
pub fn sample_negatives(pool: &[String], positive: &str, count: usize, rng: &mut impl Rng) -> Vec<String> {
    let candidates: Vec<&String> = pool.iter().filter(|p| p.as_str() != positive).collect();
    candidates
        .choose_multiple(rng, count.min(candidates.len()))
        .map(|s| (*s).clone())
        .collect()
}

#[derive(Debug, Clone)]
struct ResolvedTarget {
    positive: Vec<f64>,
    negatives: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct PreparedSample {
    question: Vec<f64>,
    fusion_input: Vec<f64>,
    entity: Option<ResolvedTarget>,
    relation: Option<ResolvedTarget>,
    answer: Option<ResolvedTarget>,
}

/// Training samples with every item already resolved to its embedding.
/// Targets whose positive has no embedding are dropped; negatives without
/// one are skipped.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    samples: Vec<PreparedSample>,
}

fn resolve(target: &Option<ContrastiveTarget>, table: &EmbeddingTable) -> Option<ResolvedTarget> {
    let target = target.as_ref()?;
    let Some(positive) = table.embed_text(&target.positive) else {
        log::debug!("dropping contrastive target {:?}: no embedding", target.positive);
        return None;
    };
    let negatives = target
        .negatives
        .iter()
        .filter_map(|n| table.embed_text(n))
        .map(Vector::into_inner)
        .collect();
    Some(ResolvedTarget {
        positive: positive.into_inner(),
        negatives,
    })
}

/// Loss of one contrastive term and its gradient pushed into the query and
/// key heads, scaled by `weight`.
fn term_grad(
    query_head: &ProjectionHead,
    query_input: &[f64],
    key_head: &ProjectionHead,
    target: &ResolvedTarget,
    tau: f64,
    weight: f64,
    query_grad: &mut HeadGrad,
    key_grad: &mut HeadGrad,
) -> Result<f64> {
    let q = project(query_head, query_input)?;
    let pos = project(key_head, &target.positive)?;
    let negs = target
        .negatives
        .iter()
        .map(|n| project(key_head, n))
        .collect::<Result<Vec<Vector>>>()?;
    let g = infonce_with_grad(&q, &pos, &negs, tau)?;
    if weight != 0.0 {
        let scaled = |v: &[f64]| v.iter().map(|x| x * weight).collect::<Vec<f64>>();
        query_head.accumulate_grad(query_input, &scaled(&g.d_query), query_grad)?;
        let inputs = std::iter::once(&target.positive).chain(&target.negatives);
        for (input, dk) in inputs.zip(&g.d_keys) {
            key_head.accumulate_grad(input, &scaled(dk), key_grad)?;
        }
    }
    Ok(g.loss)
}

impl ContrastiveBatch {
    pub fn new(samples: &[TrainingSample], table: &EmbeddingTable) -> Self {
        let samples = samples
            .iter()
            .map(|s| PreparedSample {
                question: s.question.to_vec(),
                fusion_input: s.question.concat(&s.image_feature).into_inner(),
                entity: resolve(&s.entity, table),
                relation: resolve(&s.relation, table),
                answer: resolve(&s.answer, table),
            })
            .collect();
        ContrastiveBatch { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Batch-mean `L_e`, `L_r`, `L_a` (the other parts left at 0) and the
    /// gradient of `λ3 L_e + λ4 L_r + λ5 L_a` w.r.t. every head.
    pub fn loss_and_grad(&self, heads: &Heads, w: &LossWeights, tau: f64) -> Result<(LossParts, HeadsGrad)> {
        let mut grad = heads.zero_grad();
        let mut parts = LossParts::default();
        if self.samples.is_empty() {
            return Ok((parts, grad));
        }
        let n = self.samples.len() as f64;
        let HeadsGrad {
            question: gq,
            entity: ge,
            relation: gr,
            answer: ga,
            fusion: gf,
        } = &mut grad;
        for s in &self.samples {
            if let Some(t) = &s.entity {
                parts.entity += term_grad(&heads.question, &s.question, &heads.entity, t, tau, w.entity() / n, gq, ge)?;
            }
            if let Some(t) = &s.relation {
                parts.relation +=
                    term_grad(&heads.question, &s.question, &heads.relation, t, tau, w.relation() / n, gq, gr)?;
            }
            if let Some(t) = &s.answer {
                parts.answer += term_grad(&heads.fusion, &s.fusion_input, &heads.answer, t, tau, w.answer() / n, gf, ga)?;
            }
        }
        parts.entity /= n;
        parts.relation /= n;
        parts.answer /= n;
        Ok((parts, grad))
    }

    /// Batch-mean contrastive parts without gradients.
    pub fn loss(&self, heads: &Heads, tau: f64) -> Result<LossParts> {
        let zero = LossWeights::vertex(1);
        Ok(self.loss_and_grad(heads, &zero, tau)?.0)
    }
}

/// Result of [`train_projections`]: updated heads and the combined loss
/// before each step.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub heads: Heads,
    pub trace: Vec<f64>,
}

/// Run `cfg.steps` full-batch gradient-descent steps on the combined loss.
/// Only `L_e`, `L_r` and `L_a` depend on the heads; `frozen` supplies the
/// other two terms so the trace reports the full objective.
pub fn train_projections(
    batch: &ContrastiveBatch,
    heads: &Heads,
    w: &LossWeights,
    cfg: &TrainConfig,
    frozen: FrozenLosses,
) -> Result<TrainOutcome> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Contract(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let mut heads = heads.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    if cfg.steps > 0 && batch.is_empty() {
        return Err(Error::Contract("training batch is empty".into()));
    }
    for step in 0..cfg.steps {
        let (mut parts, grad) = batch.loss_and_grad(&heads, w, cfg.tau)?;
        parts.se = frozen.se;
        parts.llm = frozen.llm;
        let loss = combined_loss(&parts, w);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}: {parts:?}")));
        }
        trace.push(loss);
        heads.apply(&grad, cfg.lr);
    }
    Ok(TrainOutcome { heads, trace })
}
