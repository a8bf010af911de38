use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::normalize_answer;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub entity: String,
    pub relation: String,
    pub answer: String,
}

impl Triple {
    /// Normalizes all three fields; `None` if any is empty afterwards.
    pub fn new(entity: &str, relation: &str, answer: &str) -> Option<Self> {
        let t = Triple {
            entity: normalize_answer(entity),
            relation: normalize_answer(relation),
            answer: normalize_answer(answer),
        };
        (!t.entity.is_empty() && !t.relation.is_empty() && !t.answer.is_empty()).then_some(t)
    }
}

/// Deduplicated triples with entity and relation adjacency.
#[derive(Debug, Clone, Default)]
pub struct TripleStore {
    triples: Vec<Triple>,
    seen: HashSet<Triple>,
    entities: Vec<String>,
    relations: Vec<String>,
    answers: Vec<String>,
    by_entity: HashMap<String, Vec<usize>>,
    by_relation: HashMap<String, Vec<usize>>,
    answer_set: HashSet<String>,
}

impl TripleStore {
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut store = TripleStore::default();
        for t in triples {
            store.insert(t);
        }
        store
    }

    /// Returns `false` for an exact duplicate.
    pub fn insert(&mut self, t: Triple) -> bool {
        if self.seen.contains(&t) {
            return false;
        }
        let idx = self.triples.len();
        let ent = self.by_entity.entry(t.entity.clone()).or_default();
        if ent.is_empty() {
            self.entities.push(t.entity.clone());
        }
        ent.push(idx);
        let rel = self.by_relation.entry(t.relation.clone()).or_default();
        if rel.is_empty() {
            self.relations.push(t.relation.clone());
        }
        rel.push(idx);
        if self.answer_set.insert(t.answer.clone()) {
            self.answers.push(t.answer.clone());
        }
        self.seen.insert(t.clone());
        self.triples.push(t);
        true
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Distinct entities in first-seen order.
    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn triples_with_entity(&self, entity: &str) -> impl Iterator<Item = &Triple> {
        self.by_entity
            .get(entity)
            .into_iter()
            .flatten()
            .map(|&i| &self.triples[i])
    }

    pub fn triples_with_relation(&self, relation: &str) -> impl Iterator<Item = &Triple> {
        self.by_relation
            .get(relation)
            .into_iter()
            .flatten()
            .map(|&i| &self.triples[i])
    }

    /// First triple (in load order) whose answer is `answer`.
    pub fn supporting_fact(&self, answer: &str) -> Option<&Triple> {
        let answer = normalize_answer(answer);
        self.triples.iter().find(|t| t.answer == answer)
    }
}

/// Load `entity<TAB>relation<TAB>answer` lines; `#` lines are comments.
pub fn load_triples(path: impl AsRef<Path>) -> Result<TripleStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut store = TripleStore::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let triple = Triple::new(fields[0], fields[1], fields[2])
            .ok_or_else(|| Error::parse(path, lineno, "empty field"))?;
        store.insert(triple);
    }
    Ok(store)
}
