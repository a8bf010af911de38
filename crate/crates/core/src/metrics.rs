//! Hit@k, MRR and MR over ranked answer lists, and the ZSL / GZSL answer
//! pools.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::normalize_answer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Zsl,
    Gzsl,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zsl" => Ok(EvalMode::Zsl),
            "gzsl" => Ok(EvalMode::Gzsl),
            other => Err(Error::Config(format!("unknown eval mode {other:?} (expected zsl or gzsl)"))),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Zsl => "zsl",
            EvalMode::Gzsl => "gzsl",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub mode: EvalMode,
    pub seen: BTreeSet<String>,
    pub unseen: BTreeSet<String>,
}

impl SplitSpec {
    /// Fails when the seen and unseen answer sets overlap.
    pub fn new(mode: EvalMode, seen: BTreeSet<String>, unseen: BTreeSet<String>) -> Result<Self> {
        let overlap: Vec<&String> = seen.intersection(&unseen).collect();
        if !overlap.is_empty() {
            return Err(Error::Validation(format!("answers are both seen and unseen: {overlap:?}")));
        }
        Ok(SplitSpec { mode, seen, unseen })
    }
}

/// ZSL: the unseen answers. GZSL: seen ∪ unseen. Sorted.
pub fn candidate_pool(split: &SplitSpec) -> Vec<String> {
    match split.mode {
        EvalMode::Zsl => split.unseen.iter().cloned().collect(),
        EvalMode::Gzsl => split.seen.union(&split.unseen).cloned().collect(),
    }
}

/// Seen/unseen answer sets per split id, from CSV rows
/// `split_id,set,answer` with `set` one of `seen`/`unseen`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitTable {
    splits: BTreeMap<String, (BTreeSet<String>, BTreeSet<String>)>,
    order: Vec<String>,
}

impl SplitTable {
    pub fn ids(&self) -> &[String] {
        &self.order
    }

    /// The named split, or the first one listed.
    pub fn spec(&self, id: Option<&str>, mode: EvalMode) -> Result<SplitSpec> {
        let id = match id {
            Some(id) => id,
            None => self
                .order
                .first()
                .ok_or_else(|| Error::Validation("splits file lists no splits".into()))?,
        };
        let (seen, unseen) = self
            .splits
            .get(id)
            .ok_or_else(|| Error::Validation(format!("split {id:?} not found; available: {:?}", self.order)))?;
        SplitSpec::new(mode, seen.clone(), unseen.clone())
    }
}

pub fn load_splits(path: impl AsRef<Path>) -> Result<SplitTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut table = SplitTable::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (line_no == 1 && line.starts_with("split_id")) {
            continue;
        }
        let fields: Vec<&str> = line.splitn(3, ',').map(str::trim).collect();
        let [id, set, answer] = fields[..] else {
            return Err(Error::parse(path, line_no, "expected split_id,set,answer"));
        };
        let answer = normalize_answer(answer);
        if id.is_empty() || answer.is_empty() {
            return Err(Error::parse(path, line_no, "empty split id or answer"));
        }
        if !table.splits.contains_key(id) {
            table.order.push(id.to_string());
        }
        let entry = table.splits.entry(id.to_string()).or_default();
        match set {
            "seen" => entry.0.insert(answer),
            "unseen" => entry.1.insert(answer),
            other => return Err(Error::parse(path, line_no, format!("set must be seen or unseen, got {other:?}"))),
        };
    }
    for id in &table.order {
        let (seen, unseen) = &table.splits[id];
        SplitSpec::new(EvalMode::Gzsl, seen.clone(), unseen.clone())
            .map_err(|e| Error::Validation(format!("split {id:?}: {e}")))?;
    }
    Ok(table)
}

/// 1-based position of `truth`, if present.
pub fn rank_of_truth<S: AsRef<str>>(ranking: &[S], truth: &str) -> Option<usize> {
    ranking.iter().position(|a| a.as_ref() == truth).map(|i| i + 1)
}

/// [`rank_of_truth`], falling back to `ranking.len() + 1` with a warning.
pub fn rank_or_fallback<S: AsRef<str>>(ranking: &[S], truth: &str) -> (usize, bool) {
    match rank_of_truth(ranking, truth) {
        Some(r) => (r, false),
        None => {
            log::warn!("ground truth {truth:?} is not in the ranked pool; counted at rank {}", ranking.len() + 1);
            (ranking.len() + 1, true)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hit1: f64,
    pub hit3: f64,
    pub hit10: f64,
    pub mrr: f64,
    pub mr: f64,
    pub n_samples: usize,
}

pub fn hit_at(ranks: &[usize], k: usize) -> f64 {
    100.0 * ranks.iter().filter(|r| **r <= k).count() as f64 / ranks.len() as f64
}

pub fn aggregate(ranks: &[usize]) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::NotComputable("no ranks to aggregate".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Contract("ranks are 1-based".into()));
    }
    let n = ranks.len() as f64;
    Ok(Metrics {
        hit1: hit_at(ranks, 1),
        hit3: hit_at(ranks, 3),
        hit10: hit_at(ranks, 10),
        mrr: ranks.iter().map(|r| 1.0 / *r as f64).sum::<f64>() / n,
        mr: ranks.iter().map(|r| *r as f64).sum::<f64>() / n,
        n_samples: ranks.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRank {
    pub sample_id: String,
    pub rank: usize,
    pub truth_absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample: Vec<SampleRank>,
    #[serde(flatten)]
    pub metrics: Metrics,
}

impl EvalReport {
    pub fn from_ranks(per_sample: Vec<SampleRank>) -> Result<Self> {
        let ranks: Vec<usize> = per_sample.iter().map(|s| s.rank).collect();
        Ok(EvalReport {
            metrics: aggregate(&ranks)?,
            per_sample,
        })
    }
}

pub const METRICS_HEADER: &str = "hit1,hit3,hit10,mrr,mr,n_samples";

pub fn metrics_csv(m: &Metrics) -> String {
    format!(
        "{METRICS_HEADER}\n{},{},{},{},{},{}\n",
        m.hit1, m.hit3, m.hit10, m.mrr, m.mr, m.n_samples
    )
}

pub fn ranks_csv(per_sample: &[SampleRank]) -> String {
    let mut out = String::from("sample_id,rank,truth_absent\n");
    for s in per_sample {
        out.push_str(&format!("{},{},{}\n", s.sample_id, s.rank, s.truth_absent));
    }
    out
}

/// Reads the file written from [`ranks_csv`]; the `truth_absent` column is
/// optional.
pub fn load_ranks(path: impl AsRef<Path>) -> Result<Vec<SampleRank>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || (line_no == 1 && line.starts_with("sample_id")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::parse(path, line_no, "expected sample_id,rank"));
        }
        let rank: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad rank {:?}", fields[1])))?;
        if rank == 0 {
            return Err(Error::parse(path, line_no, "ranks are 1-based"));
        }
        let truth_absent = match fields.get(2) {
            None => false,
            Some(v) => v
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad truth_absent {v:?}")))?,
        };
        out.push(SampleRank {
            sample_id: fields[0].to_string(),
            rank,
            truth_absent,
        });
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("{} has no rank rows", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn pools() {
        let z = SplitSpec::new(EvalMode::Zsl, set(&["a"]), set(&["x", "y"])).unwrap();
        assert_eq!(candidate_pool(&z), vec!["x", "y"]);
        let g = SplitSpec::new(EvalMode::Gzsl, set(&["a"]), set(&["x"])).unwrap();
        assert_eq!(candidate_pool(&g), vec!["a", "x"]);
        assert!(SplitSpec::new(EvalMode::Zsl, set(&["a"]), set(&["a"])).is_err());
    }

    #[test]
    fn ranks() {
        let r = ["b", "a", "c"];
        assert_eq!(rank_of_truth(&r, "a"), Some(2));
        assert_eq!(rank_of_truth(&r, "b"), Some(1));
        assert_eq!(rank_or_fallback(&r, "z"), (4, true));
    }

    #[test]
    fn aggregate_examples() {
        let m = aggregate(&[1, 3]).unwrap();
        assert_eq!((m.hit1, m.hit3, m.hit10, m.mr), (50.0, 100.0, 100.0, 2.0));
        assert_abs_diff_eq!(m.mrr, 0.6667, epsilon = 1e-4);
        let perfect = aggregate(&[1]).unwrap();
        assert_eq!((perfect.hit1, perfect.mrr, perfect.mr), (100.0, 1.0, 1.0));
        assert_eq!(aggregate(&[11]).unwrap().hit10, 0.0);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn permutation_invariant() {
        assert_eq!(aggregate(&[4, 1, 2]).unwrap(), aggregate(&[2, 4, 1]).unwrap());
    }

    #[test]
    fn splits_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("splits.csv");
        std::fs::write(&p, "split_id,set,answer\n0,seen,Cat\n0,unseen,dog\n1,seen,dog\n1,unseen,cat\n").unwrap();
        let t = load_splits(&p).unwrap();
        assert_eq!(t.ids(), ["0", "1"]);
        let s = t.spec(None, EvalMode::Zsl).unwrap();
        assert_eq!(s.seen, set(&["cat"]));
        assert!(t.spec(Some("9"), EvalMode::Zsl).is_err());
        std::fs::write(&p, "0,seen,cat\n0,unseen,cat\n").unwrap();
        assert!(load_splits(&p).is_err());
        std::fs::write(&p, "0,maybe,cat\n").unwrap();
        assert!(matches!(load_splits(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ranks_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ranks.csv");
        let rows = vec![
            SampleRank {
                sample_id: "s1".into(),
                rank: 1,
                truth_absent: false,
            },
            SampleRank {
                sample_id: "s2".into(),
                rank: 5,
                truth_absent: true,
            },
        ];
        std::fs::write(&p, ranks_csv(&rows)).unwrap();
        assert_eq!(load_ranks(&p).unwrap(), rows);
    }
}
