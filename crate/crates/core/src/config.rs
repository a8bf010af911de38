//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::ScoreConfig;
use crate::kg::TrainConfig;
use crate::llm::provider::{ProviderConfig, ProviderKind};
use crate::metrics::EvalMode;
use crate::pso::SwarmConfig;
use crate::qsearch::QsConfig;

pub const VALID_KEYS: &[&str] = &[
    "seed",
    "embeddings",
    "triples",
    "dataset",
    "splits",
    "mock_fixture",
    "output",
    "image_dim",
    "tau",
    "k_captions",
    "answer_vocab_size",
    "epochs",
    "lm.alpha",
    "qs.mu",
    "qs.delta_word",
    "qs.k_neighbors",
    "qs.fluency_margin",
    "delta_kg",
    "score.beta",
    "score.penalty_b",
    "score.lambda_index",
    "training.steps",
    "training.lr",
    "training.negatives",
    "pso.particle_num",
    "pso.iterations",
    "pso.w",
    "pso.c1",
    "pso.c2",
    "pso.K",
    "pso.inner_steps",
    "pso.seed",
    "provider.kind",
    "provider.endpoint",
    "provider.model",
    "provider.timeout",
    "provider.max_candidates",
    "provider.max_in_flight",
    "eval.mode",
    "eval.split",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub embeddings: PathBuf,
    pub triples: PathBuf,
    pub dataset: PathBuf,
    pub splits: PathBuf,
    pub mock_fixture: Option<PathBuf>,
    pub output: PathBuf,
    pub image_dim: usize,
    pub tau: f64,
    pub k_captions: usize,
    pub answer_vocab_size: usize,
    pub epochs: usize,
    pub lm_alpha: f64,
    pub qs: QsConfig,
    pub kg_delta: f64,
    pub score: ScoreConfig,
    pub training: TrainConfig,
    pub negatives: usize,
    pub pso: SwarmConfig,
    pub pso_inner_steps: usize,
    /// Whether `pso.seed` was set explicitly rather than inherited from `seed`.
    pub pso_seed_explicit: bool,
    pub provider: ProviderConfig,
    pub eval_mode: EvalMode,
    pub eval_split: Option<String>,
}

impl PipelineConfig {
    /// Defaults around the four required input files.
    pub fn with_paths(embeddings: PathBuf, triples: PathBuf, dataset: PathBuf, splits: PathBuf, image_dim: usize) -> Self {
        PipelineConfig {
            seed: 0,
            embeddings,
            triples,
            dataset,
            splits,
            mock_fixture: None,
            output: PathBuf::from("out"),
            image_dim,
            tau: crate::kg::DEFAULT_TAU,
            k_captions: 3,
            answer_vocab_size: 500,
            epochs: 10,
            lm_alpha: 0.1,
            qs: QsConfig::default(),
            kg_delta: 1.0,
            score: ScoreConfig::default(),
            training: TrainConfig::default(),
            negatives: 16,
            pso: SwarmConfig::default(),
            pso_inner_steps: 10,
            pso_seed_explicit: false,
            provider: ProviderConfig::default(),
            eval_mode: EvalMode::Zsl,
            eval_split: None,
        }
    }

    /// Apply the run seed to every component that has not been given its own.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.provider.seed = seed;
        if !self.pso_seed_explicit {
            self.pso.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lm_alpha > 0.0 && self.lm_alpha.is_finite()) {
            return Err(Error::Config(format!("lm.alpha must be positive, got {}", self.lm_alpha)));
        }
        if !self.kg_delta.is_finite() {
            return Err(Error::Config("delta_kg must be finite".into()));
        }
        if self.image_dim == 0 {
            return Err(Error::Config("image_dim must be positive".into()));
        }
        if self.k_captions == 0 || self.answer_vocab_size == 0 {
            return Err(Error::Config("k_captions and answer_vocab_size must be positive".into()));
        }
        if !(self.training.lr > 0.0 && self.training.lr.is_finite()) {
            return Err(Error::Config(format!("training.lr must be positive, got {}", self.training.lr)));
        }
        self.qs.validate()?;
        self.score.validate()?;
        self.pso.validate()?;
        self.provider.validate()?;
        for (key, path) in [
            ("embeddings", Some(&self.embeddings)),
            ("triples", Some(&self.triples)),
            ("dataset", Some(&self.dataset)),
            ("splits", Some(&self.splits)),
            ("mock_fixture", self.mock_fixture.as_ref()),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::Validation(format!("{key}: file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
}

/// Parse `key = value` lines (`#` starts a comment). Relative paths are
/// resolved against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<PipelineConfig> {
    let mut entries: BTreeMap<String, String> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, raw)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value", i + 1)));
        };
        let key = key.trim();
        if !VALID_KEYS.contains(&key) {
            return Err(Error::Config(format!(
                "line {}: unknown key {key:?}; valid keys: {}",
                i + 1,
                VALID_KEYS.join(", ")
            )));
        }
        if entries.insert(key.to_string(), raw.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
        }
    }

    let path = |key: &str| -> Option<PathBuf> { entries.get(key).map(|v| base_dir.join(v)) };
    let required = |key: &str| -> Result<PathBuf> {
        path(key).ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    };
    let image_dim = match entries.get("image_dim") {
        Some(v) => value("image_dim", v)?,
        None => return Err(Error::Config("missing required key \"image_dim\"".into())),
    };
    let mut cfg = PipelineConfig::with_paths(
        required("embeddings")?,
        required("triples")?,
        required("dataset")?,
        required("splits")?,
        image_dim,
    );
    cfg.mock_fixture = path("mock_fixture");
    if let Some(out) = path("output") {
        cfg.output = out;
    } else {
        cfg.output = base_dir.join("out");
    }

    for (key, raw) in &entries {
        let raw = raw.as_str();
        let k = key.as_str();
        match k {
            "seed" => cfg.seed = value(k, raw)?,
            "tau" => cfg.tau = value(k, raw)?,
            "k_captions" => cfg.k_captions = value(k, raw)?,
            "answer_vocab_size" => cfg.answer_vocab_size = value(k, raw)?,
            "epochs" => cfg.epochs = value(k, raw)?,
            "lm.alpha" => cfg.lm_alpha = value(k, raw)?,
            "qs.mu" => cfg.qs.mu = value(k, raw)?,
            "qs.delta_word" => cfg.qs.delta_word = value(k, raw)?,
            "qs.k_neighbors" => cfg.qs.k_neighbors = value(k, raw)?,
            "qs.fluency_margin" => cfg.qs.fluency_margin = value(k, raw)?,
            "delta_kg" => cfg.kg_delta = value(k, raw)?,
            "score.beta" => cfg.score.beta = value(k, raw)?,
            "score.penalty_b" => cfg.score.penalty_b = value(k, raw)?,
            "score.lambda_index" => cfg.score.lambda_index = value(k, raw)?,
            "training.steps" => cfg.training.steps = value(k, raw)?,
            "training.lr" => cfg.training.lr = value(k, raw)?,
            "training.negatives" => cfg.negatives = value(k, raw)?,
            "pso.particle_num" => cfg.pso.particle_num = value(k, raw)?,
            "pso.iterations" => cfg.pso.iterations = value(k, raw)?,
            "pso.w" => cfg.pso.w = value(k, raw)?,
            "pso.c1" => cfg.pso.c1 = value(k, raw)?,
            "pso.c2" => cfg.pso.c2 = value(k, raw)?,
            "pso.K" => cfg.pso.stagnation_k = value(k, raw)?,
            "pso.inner_steps" => cfg.pso_inner_steps = value(k, raw)?,
            "pso.seed" => cfg.pso.seed = value(k, raw)?,
            "provider.kind" => {
                cfg.provider.kind = match raw {
                    "mock" => ProviderKind::Mock,
                    "http" => ProviderKind::Http,
                    other => return Err(Error::Config(format!("provider.kind: expected mock or http, got {other:?}"))),
                }
            }
            "provider.endpoint" => cfg.provider.endpoint = Some(raw.to_string()),
            "provider.model" => cfg.provider.model_name = raw.to_string(),
            "provider.timeout" => cfg.provider.timeout_secs = value(k, raw)?,
            "provider.max_candidates" => cfg.provider.max_candidates = value(k, raw)?,
            "provider.max_in_flight" => cfg.provider.max_in_flight = value(k, raw)?,
            "eval.mode" => cfg.eval_mode = raw.parse()?,
            "eval.split" => cfg.eval_split = Some(raw.to_string()),
            _ => {}
        }
    }
    cfg.training.tau = cfg.tau;
    cfg.pso_seed_explicit = entries.contains_key("pso.seed");
    let seed = cfg.seed;
    cfg.set_seed(seed);
    Ok(cfg)
}

/// Read, parse and validate a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let cfg = parse_config(&text, base)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(dir: &Path) -> String {
        for f in ["emb.txt", "kg.tsv", "data.jsonl", "splits.csv"] {
            std::fs::write(dir.join(f), "").unwrap();
        }
        "embeddings = emb.txt\ntriples = kg.tsv\ndataset = data.jsonl\nsplits = splits.csv\nimage_dim = 4\n".into()
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        std::fs::write(&p, minimal(dir.path())).unwrap();
        let cfg = load_config(&p).unwrap();
        assert_eq!(cfg.qs.mu, 0.7);
        assert_eq!(cfg.pso.stagnation_k, 3);
        assert_eq!(cfg.tau, 0.01);
        assert_eq!(cfg.answer_vocab_size, 500);
        assert_eq!(cfg.embeddings, dir.path().join("emb.txt"));
    }

    #[test]
    fn unknown_key_lists_valid_ones() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        std::fs::write(&p, minimal(dir.path()) + "qs.muu = 0.5\n").unwrap();
        let msg = load_config(&p).unwrap_err().to_string();
        assert!(msg.contains("qs.muu") && msg.contains("qs.mu,"), "{msg}");
    }

    #[test]
    fn bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        std::fs::write(&p, minimal(dir.path()) + "tau = 0\n").unwrap();
        assert!(matches!(load_config(&p), Err(Error::Config(_))));
        let no_emb = minimal(dir.path()).replace("embeddings = emb.txt\n", "");
        std::fs::write(&p, no_emb).unwrap();
        assert!(matches!(load_config(&p), Err(Error::Config(_))));
        std::fs::write(&p, minimal(dir.path()).replace("emb.txt", "missing.txt")).unwrap();
        assert!(matches!(load_config(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn pso_seed_follows_run_seed_unless_set() {
        let dir = tempfile::tempdir().unwrap();
        let base = minimal(dir.path());
        let cfg = parse_config(&(base.clone() + "seed = 7\n"), dir.path()).unwrap();
        assert_eq!((cfg.pso.seed, cfg.provider.seed), (7, 7));
        let cfg = parse_config(&(base + "seed = 7\npso.seed = 3\n"), dir.path()).unwrap();
        assert_eq!(cfg.pso.seed, 3);
    }
}
