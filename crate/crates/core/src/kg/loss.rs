//! InfoNCE and the entity / relation / answer contrastive losses.

use serde::{Deserialize, Serialize};

use super::head::{project, Heads, ProjectionHead};
use crate::embeddings::{dot, EmbeddingTable, Vector};
use crate::error::{Error, Result};

/// Temperature used throughout unless configured otherwise.
pub const DEFAULT_TAU: f64 = 0.01;

/// The shared image–question feature (unit norm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedFeature {
    pub vector: Vec<f64>,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn scores<V: AsRef<[f64]>>(query: &[f64], positive: &[f64], negatives: &[V], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let dim = query.len();
    if positive.len() != dim || negatives.iter().any(|n| n.as_ref().len() != dim) {
        return Err(Error::Contract("InfoNCE vectors have different lengths".into()));
    }
    let mut s = Vec::with_capacity(negatives.len() + 1);
    s.push(dot(query, positive) / tau);
    s.extend(negatives.iter().map(|n| dot(query, n.as_ref()) / tau));
    Ok(s)
}

/// `−ln( e^{s₀} / Σᵢ e^{sᵢ} )` for logits `s`, positive at index 0, with the
/// max logit subtracted before exponentiating.
fn nce_from_logits(s: &[f64]) -> f64 {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if s[0] >= m {
        let rest: f64 = s[1..].iter().map(|x| (x - m).exp()).sum();
        rest.ln_1p()
    } else {
        let total: f64 = s.iter().map(|x| (x - m).exp()).sum();
        (m - s[0]) + total.ln()
    }
}

/// InfoNCE with dot-product logits `q·k / τ`; the denominator runs over the
/// positive and all negatives. No negatives gives exactly 0.
pub fn infonce<V: AsRef<[f64]>>(query: &[f64], positive: &[f64], negatives: &[V], tau: f64) -> Result<f64> {
    Ok(nce_from_logits(&scores(query, positive, negatives, tau)?))
}

/// Loss plus its gradient w.r.t. the query and each key (positive first).
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub d_query: Vec<f64>,
    pub d_keys: Vec<Vec<f64>>,
}

pub fn infonce_with_grad<V: AsRef<[f64]>>(
    query: &[f64],
    positive: &[f64],
    negatives: &[V],
    tau: f64,
) -> Result<InfoNceGrad> {
    let s = scores(query, positive, negatives, tau)?;
    let loss = nce_from_logits(&s);
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    // dL/ds_i = softmax_i − [i = 0]
    let ds: Vec<f64> = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / z - if i == 0 { 1.0 } else { 0.0 })
        .collect();

    let keys = std::iter::once(positive).chain(negatives.iter().map(AsRef::as_ref));
    let mut d_query = vec![0.0; query.len()];
    let mut d_keys = Vec::with_capacity(s.len());
    for (g, key) in ds.iter().zip(keys) {
        for (dq, k) in d_query.iter_mut().zip(key) {
            *dq += g * k / tau;
        }
        d_keys.push(query.iter().map(|q| g * q / tau).collect());
    }
    Ok(InfoNceGrad { loss, d_query, d_keys })
}

fn embed_projected(head: &ProjectionHead, item: &str, table: &EmbeddingTable) -> Result<Vector> {
    let v = table
        .embed_text(item)
        .ok_or_else(|| Error::NotFound(format!("{item:?} has no embedding")))?;
    project(head, &v)
}

fn keyed_loss<S: AsRef<str>>(
    query: &[f64],
    key_head: &ProjectionHead,
    positive: &str,
    negatives: &[S],
    table: &EmbeddingTable,
    tau: f64,
) -> Result<f64> {
    let pos = embed_projected(key_head, positive, table)?;
    let negs = negatives
        .iter()
        .map(|n| embed_projected(key_head, n.as_ref(), table))
        .collect::<Result<Vec<Vector>>>()?;
    infonce(query, &pos, &negs, tau)
}

/// Entity contrastive loss: projected question against projected entities.
pub fn entity_loss<S: AsRef<str>>(
    question_vec: &[f64],
    positive_entity: &str,
    negative_entities: &[S],
    heads: &Heads,
    table: &EmbeddingTable,
    tau: f64,
) -> Result<f64> {
    let q = project(&heads.question, question_vec)?;
    keyed_loss(&q, &heads.entity, positive_entity, negative_entities, table, tau)
}

/// Relation contrastive loss: projected question against projected relations.
pub fn relation_loss<S: AsRef<str>>(
    question_vec: &[f64],
    positive_relation: &str,
    negative_relations: &[S],
    heads: &Heads,
    table: &EmbeddingTable,
    tau: f64,
) -> Result<f64> {
    let q = project(&heads.question, question_vec)?;
    keyed_loss(&q, &heads.relation, positive_relation, negative_relations, table, tau)
}

/// Answer contrastive loss: the fused feature against projected answers.
pub fn answer_loss<S: AsRef<str>>(
    fused: &FusedFeature,
    positive_answer: &str,
    negative_answers: &[S],
    heads: &Heads,
    table: &EmbeddingTable,
    tau: f64,
) -> Result<f64> {
    keyed_loss(&fused.vector, &heads.answer, positive_answer, negative_answers, table, tau)
}

/// `project(fusion_head, [question ; image])`.
pub fn fuse_features(question_vec: &[f64], image_feature: &[f64], fusion_head: &ProjectionHead) -> Result<FusedFeature> {
    if question_vec.len() + image_feature.len() != fusion_head.in_dim() {
        return Err(Error::Contract(format!(
            "fusion head expects {} inputs, got {} + {}",
            fusion_head.in_dim(),
            question_vec.len(),
            image_feature.len()
        )));
    }
    let mut joined = question_vec.to_vec();
    joined.extend_from_slice(image_feature);
    Ok(FusedFeature {
        vector: project(fusion_head, &joined)?.into_inner(),
    })
}
