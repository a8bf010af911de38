//! Frozen word vectors: loading, cosine similarity, k-NN and pooled
//! question encodings.
//!
//! The text format is the one used by the public GloVe releases: one entry
//! per line, `token f1 f2 ... fd`, separated by single spaces.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::ops::Deref;
use std::path::Path;

use crate::error::{Error, Result};

/// Lowercase, trim, and strip ASCII punctuation at both edges.
///
/// A token made only of punctuation (`","`, `"?"`) keeps its lowercased
/// form so that such entries in a vector file stay addressable.
pub fn normalize_token(raw: &str) -> String {
    let lowered = raw.trim().to_lowercase();
    let stripped = lowered.trim_matches(|c: char| c.is_ascii_punctuation());
    if stripped.is_empty() {
        lowered
    } else {
        stripped.to_string()
    }
}

/// Split free text into normalized tokens, dropping pure punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

/// A dense real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if let Some(i) = components.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("vector component {i}")));
        }
        Ok(Vector(components))
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0.0)
    }

    /// Concatenation `[self, other]`.
    pub fn concat(&self, other: &[f64]) -> Vector {
        let mut out = Vec::with_capacity(self.0.len() + other.len());
        out.extend_from_slice(&self.0);
        out.extend_from_slice(other);
        Vector(out)
    }
}

impl From<Vec<f64>> for Vector {
    fn from(components: Vec<f64>) -> Self {
        debug_assert!(components.iter().all(|c| c.is_finite()));
        Vector(components)
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, or `None` when either side is the zero vector.
pub(crate) fn cosine_checked(u: &[f64], v: &[f64]) -> Option<f64> {
    assert_eq!(u.len(), v.len(), "cosine of vectors with different lengths");
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return None;
    }
    Some((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `u·v / (‖u‖‖v‖)`. A zero vector on either side yields 0 and logs a warning.
///
/// Panics if the lengths differ.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> f64 {
    cosine_checked(u, v).unwrap_or_else(|| {
        log::warn!("cosine similarity with a zero vector; using 0");
        0.0
    })
}

/// Orders `(token, score)` pairs by descending score, then ascending token.
pub(crate) fn by_score_desc(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Immutable token -> vector map.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl EmbeddingTable {
    /// Build from in-memory entries. Keys are normalized; later duplicates
    /// overwrite earlier ones.
    pub fn from_entries<I, S>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: AsRef<str>,
    {
        if dim == 0 {
            return Err(Error::Contract("embedding dimension must be positive".into()));
        }
        let mut table = EmbeddingTable {
            dim,
            tokens: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        };
        for (token, vector) in entries {
            if vector.len() != dim {
                return Err(Error::Contract(format!(
                    "vector for {:?} has {} components, expected {dim}",
                    token.as_ref(),
                    vector.len()
                )));
            }
            if vector.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite(format!("vector for {:?}", token.as_ref())));
            }
            table.insert(normalize_token(token.as_ref()), &vector);
        }
        Ok(table)
    }

    fn insert(&mut self, key: String, vector: &[f64]) {
        match self.index.get(&key) {
            Some(&row) => self.data[row * self.dim..(row + 1) * self.dim].copy_from_slice(vector),
            None => {
                self.index.insert(key.clone(), self.tokens.len());
                self.tokens.push(key);
                self.data.extend_from_slice(vector);
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(&normalize_token(token))
    }

    /// Case-insensitive lookup.
    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index
            .get(&normalize_token(token))
            .map(|&row| self.row(row))
    }

    fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    /// Vector for a token or a short phrase. A phrase missing as a whole is
    /// mean-pooled over its in-vocabulary words (`"hot dog"`, `"is_a"`).
    pub fn embed_text(&self, text: &str) -> Option<Vector> {
        if let Some(v) = self.get(text) {
            return Some(Vector(v.to_vec()));
        }
        let words: Vec<String> = text
            .split(|c: char| c.is_whitespace() || c == '_')
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect();
        if words.len() < 2 {
            return None;
        }
        pool_question(&words, self).ok()
    }

    /// Embedding of `text`, or the zero vector when it is out of vocabulary.
    pub fn embed_or_zero(&self, text: &str) -> Vector {
        self.embed_text(text).unwrap_or_else(|| Vector::zeros(self.dim))
    }
}

/// Load a whitespace-separated word-vector file.
pub fn load_embeddings(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut dim = expected_dim;
    let mut table: Option<EmbeddingTable> = None;

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_ascii_whitespace();
        let token = fields.next().expect("non-empty line has a first field");
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(path, lineno, format!("non-numeric component {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let d = *dim.get_or_insert(values.len());
        if d == 0 || values.len() != d {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {d} components, found {}", values.len()),
            ));
        }
        let table = table.get_or_insert_with(|| EmbeddingTable {
            dim: d,
            tokens: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        });
        table.insert(normalize_token(token), &values);
    }

    table.ok_or_else(|| Error::EmptyTable(path.to_path_buf()))
}

/// The `k` tokens most similar to `token` (itself excluded), by descending
/// cosine with lexicographic tie-break.
pub fn nearest_neighbors(token: &str, k: usize, table: &EmbeddingTable) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    let key = normalize_token(token);
    let &query_row = table
        .index
        .get(&key)
        .ok_or_else(|| Error::NotFound(format!("token {key:?}")))?;
    let query = table.row(query_row);

    let mut scored: Vec<(String, f64)> = table
        .tokens
        .iter()
        .enumerate()
        .filter(|&(row, _)| row != query_row)
        .map(|(row, t)| (t.clone(), cosine_checked(query, table.row(row)).unwrap_or(0.0)))
        .collect();

    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_score_desc);
        scored.truncate(k);
    }
    scored.sort_by(by_score_desc);
    Ok(scored)
}

/// Mean of the in-vocabulary token vectors; out-of-vocabulary tokens are
/// skipped. Summation runs in sorted token order so the result does not
/// depend on the order of `tokens`.
pub fn pool_question<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable) -> Result<Vector> {
    let mut found: Vec<(String, &[f64])> = tokens
        .iter()
        .filter_map(|t| {
            let key = normalize_token(t.as_ref());
            table.index.get(&key).map(|&row| (key, table.row(row)))
        })
        .collect();
    if found.is_empty() {
        return Err(Error::EmptyEncoding(
            tokens.iter().map(|t| t.as_ref().to_string()).collect(),
        ));
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));

    let mut sum = vec![0.0; table.dim];
    for (_, v) in &found {
        for (s, x) in sum.iter_mut().zip(v.iter()) {
            *s += x;
        }
    }
    let n = found.len() as f64;
    Ok(Vector(sum.into_iter().map(|s| s / n).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn abc() -> EmbeddingTable {
        EmbeddingTable::from_entries(
            2,
            [("a", vec![1.0, 0.0]), ("b", vec![0.9, 0.1]), ("c", vec![0.0, 1.0])],
        )
        .unwrap()
    }

    #[test]
    fn loads_two_entries() {
        let f = write_tmp("cat 1 0\ndog 0 1\n");
        let table = load_embeddings(f.path(), None).unwrap();
        assert_eq!(table.dim(), 2);
        assert_eq!(table.vocab_size(), 2);
        assert_eq!(table.get("CAT "), Some(&[1.0, 0.0][..]));
    }

    #[test]
    fn expected_dim_mismatch_names_line() {
        let f = write_tmp("cat 1 0 0\n");
        match load_embeddings(f.path(), Some(2)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_and_ragged_lines_fail() {
        let f = write_tmp("cat 1 0\ndog 0 x\n");
        assert!(matches!(load_embeddings(f.path(), None), Err(Error::Parse { line: 2, .. })));
        let f = write_tmp("cat 1 0\ndog 0\n");
        assert!(matches!(load_embeddings(f.path(), None), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_tmp("");
        assert!(matches!(load_embeddings(f.path(), None), Err(Error::EmptyTable(_))));
    }

    #[test]
    fn duplicate_token_last_write_wins() {
        let lines = [
            ("cat", [1.0, 0.0]),
            ("dog", [0.0, 1.0]),
            ("cat", [0.5, 0.5]),
            ("eel", [2.0, 2.0]),
            ("fox", [3.0, 1.0]),
        ];
        let text: String = lines
            .iter()
            .map(|(t, v)| format!("{t} {} {}\n", v[0], v[1]))
            .collect();
        let f = write_tmp(&text);
        let table = load_embeddings(f.path(), None).unwrap();

        // oracle: linear scan keeping the last write per token
        let mut expected: Vec<(&str, [f64; 2])> = Vec::new();
        for (t, v) in lines {
            match expected.iter_mut().find(|(k, _)| *k == t) {
                Some(slot) => slot.1 = v,
                None => expected.push((t, v)),
            }
        }
        assert_eq!(table.vocab_size(), expected.len());
        assert_eq!(table.vocab_size(), 4);
        for (t, v) in expected {
            assert_eq!(table.get(t).unwrap(), &v[..]);
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]) - 0.5f64.sqrt()).abs() < 1e-9);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn nearest_neighbor_examples() {
        let table = abc();
        let nn = nearest_neighbors("a", 1, &table).unwrap();
        assert_eq!(nn.len(), 1);
        assert_eq!(nn[0].0, "b");
        // brute force: 0.9 / sqrt(0.81 + 0.01)
        let expected = 0.9 / (0.82f64).sqrt();
        assert!((nn[0].1 - expected).abs() < 1e-12);
        assert!((nn[0].1 - 0.9939).abs() < 1e-3);

        assert_eq!(nearest_neighbors("a", 5, &table).unwrap().len(), 2);
        assert!(matches!(nearest_neighbors("zzz", 1, &table), Err(Error::NotFound(_))));
    }

    #[test]
    fn neighbor_ties_are_lexicographic() {
        let table = EmbeddingTable::from_entries(
            2,
            [("q", vec![1.0, 0.0]), ("zeta", vec![0.0, 1.0]), ("alpha", vec![0.0, 1.0])],
        )
        .unwrap();
        let nn = nearest_neighbors("q", 2, &table).unwrap();
        assert_eq!(nn[0].0, "alpha");
        assert_eq!(nn[1].0, "zeta");
    }

    #[test]
    fn pooling_examples() {
        let table =
            EmbeddingTable::from_entries(2, [("cat", vec![1.0, 0.0]), ("dog", vec![0.0, 1.0])]).unwrap();
        assert_eq!(pool_question(&["cat"], &table).unwrap().as_slice(), &[1.0, 0.0]);
        assert_eq!(pool_question(&["cat", "dog"], &table).unwrap().as_slice(), &[0.5, 0.5]);
        let with_oov = pool_question(&["cat", "zzz-oov", "dog"], &table).unwrap();
        // oracle: mean over the in-vocab subset
        let subset = [table.get("cat").unwrap(), table.get("dog").unwrap()];
        let mean: Vec<f64> = (0..2).map(|i| (subset[0][i] + subset[1][i]) / 2.0).collect();
        assert_eq!(with_oov.as_slice(), mean.as_slice());
        assert!(matches!(pool_question(&["zzz"], &table), Err(Error::EmptyEncoding(_))));
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_token("  Cat! "), "cat");
        assert_eq!(normalize_token("is-a"), "is-a");
        assert_eq!(normalize_token(","), ",");
        assert_eq!(tokenize("What is the pet?"), vec!["what", "is", "the", "pet"]);
    }

    #[test]
    fn phrase_embedding_falls_back_to_pooling() {
        let table =
            EmbeddingTable::from_entries(2, [("hot", vec![1.0, 0.0]), ("dog", vec![0.0, 1.0])]).unwrap();
        assert_eq!(table.embed_text("hot dog").unwrap().as_slice(), &[0.5, 0.5]);
        assert!(table.embed_text("bagel").is_none());
        assert!(table.embed_or_zero("bagel").is_zero());
    }
}
