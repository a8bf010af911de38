//! Question–KG similarity, the thresholded KG candidate set and the initial
//! answer scores.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::head::{project, Heads, ProjectionHead};
use super::loss::FusedFeature;
use super::store::TripleStore;
use crate::embeddings::{by_score_desc, cosine_checked, dot, EmbeddingTable, Vector};
use crate::error::{Error, Result};

/// Cosine between the projected item and a question vector already in the
/// shared space. Out-of-vocabulary items score 0.
pub fn kg_similarity(question_shared: &[f64], item: &str, head: &ProjectionHead, table: &EmbeddingTable) -> Result<f64> {
    let Some(v) = table.embed_text(item) else {
        return Ok(0.0);
    };
    let projected = project(head, &v)?;
    Ok(cosine_checked(&projected, question_shared).unwrap_or(0.0))
}

/// An answer admitted to the KG candidate set, with the entity/relation
/// similarities of its best supporting triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgCandidate {
    pub answer: String,
    pub sim_entity: f64,
    pub sim_relation: f64,
}

impl KgCandidate {
    pub fn sim_sum(&self) -> f64 {
        self.sim_entity + self.sim_relation
    }
}

fn similarity_table<'a>(
    items: &'a [String],
    question_shared: &[f64],
    head: &ProjectionHead,
    table: &EmbeddingTable,
) -> Result<HashMap<&'a str, f64>> {
    items
        .iter()
        .map(|item| Ok((item.as_str(), kg_similarity(question_shared, item, head, table)?)))
        .collect()
}

/// Answers of every triple whose `sim(entity) + sim(relation)` strictly
/// exceeds `delta_kg`, deduplicated and sorted by answer. Each answer keeps
/// the similarity pair of its highest-scoring admitting triple (the first
/// one in load order on ties).
pub fn kg_candidates(
    question_vec: &[f64],
    store: &TripleStore,
    heads: &Heads,
    table: &EmbeddingTable,
    delta_kg: f64,
) -> Result<Vec<KgCandidate>> {
    let q = project(&heads.question, question_vec)?;
    let ent = similarity_table(store.entities(), &q, &heads.entity, table)?;
    let rel = similarity_table(store.relations(), &q, &heads.relation, table)?;

    let mut best: BTreeMap<&str, KgCandidate> = BTreeMap::new();
    for t in store.triples() {
        let se = ent[t.entity.as_str()];
        let sr = rel[t.relation.as_str()];
        if !(se + sr > delta_kg) {
            continue;
        }
        let replace = best.get(t.answer.as_str()).is_none_or(|c| se + sr > c.sim_sum());
        if replace {
            best.insert(
                &t.answer,
                KgCandidate {
                    answer: t.answer.clone(),
                    sim_entity: se,
                    sim_relation: sr,
                },
            );
        }
    }
    Ok(best.into_values().collect())
}

/// `R(a)ᵀ F_iq` for a single answer; 0 when the answer has no embedding.
pub fn answer_affinity(fused: &FusedFeature, answer: &str, heads: &Heads, table: &EmbeddingTable) -> Result<f64> {
    match table.embed_text(answer) {
        Some(v) => Ok(dot(&project(&heads.answer, &v)?, &fused.vector)),
        None => Ok(0.0),
    }
}

/// Score every in-vocabulary answer by `R(a)ᵀ F_iq`, best first, ties in
/// lexicographic order.
pub fn initial_answer_scores<S: AsRef<str>>(
    fused: &FusedFeature,
    answers: &[S],
    heads: &Heads,
    table: &EmbeddingTable,
) -> Result<Vec<(String, f64)>> {
    let mut scored = Vec::new();
    for a in answers {
        let a = a.as_ref();
        if let Some(v) = table.embed_text(a) {
            let r: Vector = project(&heads.answer, &v)?;
            scored.push((a.to_string(), dot(&r, &fused.vector)));
        }
    }
    if scored.is_empty() {
        return Err(Error::NotComputable("no answer has an embedding".into()));
    }
    scored.sort_by(by_score_desc);
    Ok(scored)
}
