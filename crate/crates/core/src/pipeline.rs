//! End-to-end run: data loading, candidate generation, head training,
//! the stagnation-triggered weight search and evaluation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::embeddings::{load_embeddings, pool_question, tokenize, EmbeddingTable, Vector};
use crate::error::{Error, Result};
use crate::fusion::{fuse_candidates, rank_candidate_pool, score_in_pool, update_best, CandidateSkeleton, ScoringContext};
use crate::kg::{
    fuse_features, kg_candidates, load_triples, sample_negatives, train_projections, ContrastiveBatch,
    ContrastiveTarget, FrozenLosses, Heads, TrainConfig, TrainingSample, TripleStore,
};
use crate::llm::ngram::NgramLm;
use crate::llm::provider::{AnswerProvider, MockFixture};
use crate::llm::{build_prompts, curate_captions, generate_candidates, llm_loss, normalize_answer, GenerationOptions, LlmCandidate};
use crate::metrics::{candidate_pool, load_splits, rank_or_fallback, EvalMode, EvalReport, SampleRank, SplitSpec};
use crate::pso::{optimize_weights, stagnation_gate, write_history_csv, PsoResult};
use crate::qsearch::{expand_question, filter_by_fluency, sample_diversity_loss, QuestionSet};
use crate::weights::LossWeights;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum QuestionField {
    Text(String),
    Tokens(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct RawSample {
    sample_id: String,
    question: QuestionField,
    answer: String,
    captions: Vec<String>,
    objects: Vec<String>,
    image_feature: Vec<f64>,
    #[serde(default)]
    entity: Option<String>,
    #[serde(default)]
    relation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub sample_id: String,
    pub question: Vec<String>,
    pub answer: String,
    pub captions: Vec<String>,
    pub objects: Vec<String>,
    pub image_feature: Vec<f64>,
    /// Supporting-fact entity; looked up in the KG when absent.
    pub entity: Option<String>,
    pub relation: Option<String>,
}

/// One JSON object per line. `question` may be a string or a token list.
pub fn load_dataset(path: impl AsRef<Path>, image_dim: Option<usize>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(line).map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        let question = match raw.question {
            QuestionField::Text(t) => tokenize(&t),
            QuestionField::Tokens(t) => t.iter().flat_map(|w| tokenize(w)).collect(),
        };
        if question.is_empty() {
            return Err(Error::parse(path, line_no, "empty question"));
        }
        let answer = normalize_answer(&raw.answer);
        if answer.is_empty() {
            return Err(Error::parse(path, line_no, "empty answer"));
        }
        if let Some(dim) = image_dim {
            if raw.image_feature.len() != dim {
                return Err(Error::Validation(format!(
                    "{}:{line_no}: image_feature has {} components, expected {dim}",
                    path.display(),
                    raw.image_feature.len()
                )));
            }
        }
        if !ids.insert(raw.sample_id.clone()) {
            return Err(Error::parse(path, line_no, format!("duplicate sample_id {:?}", raw.sample_id)));
        }
        samples.push(Sample {
            sample_id: raw.sample_id,
            question,
            answer,
            captions: raw.captions,
            objects: raw.objects,
            image_feature: raw.image_feature,
            entity: raw.entity.map(|e| normalize_answer(&e)),
            relation: raw.relation.map(|r| normalize_answer(&r)),
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyTable(path.to_path_buf()));
    }
    Ok(samples)
}

/// The `answer_vocab_size` pool answers most frequent among `samples`
/// (ties lexicographic).
pub fn answer_vocabulary(pool: &[String], samples: &[Sample], size: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = pool.iter().map(|a| (a.as_str(), 0)).collect();
    for s in samples {
        if let Some(c) = counts.get_mut(s.answer.as_str()) {
            *c += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(size).map(|(a, _)| a.to_string()).collect()
}

/// A sample with everything that does not depend on the heads computed.
#[derive(Debug, Clone, Serialize)]
pub struct PreparedSample {
    pub sample_id: String,
    pub answer: String,
    pub question_vec: Vec<f64>,
    pub image_feature: Vec<f64>,
    pub questions: QuestionSet,
    pub llm_candidates: Vec<LlmCandidate>,
    pub se_loss: f64,
    pub llm_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TriggerRecord {
    pub epoch: usize,
    pub s_best: f64,
    pub weights_before: LossWeights,
    pub weights_after: LossWeights,
    pub best_fitness: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunLog {
    pub stagnation_k: usize,
    pub score_trace: Vec<f64>,
    pub s_best_trace: Vec<f64>,
    /// Weights in force after each epoch.
    pub weight_trace: Vec<LossWeights>,
    pub triggers: Vec<TriggerRecord>,
}

/// Epoch-level hooks used by [`drive_epochs`].
pub trait EpochDriver {
    /// Train and score one epoch (1-based), returning the epoch score.
    fn run_epoch(&mut self, epoch: usize) -> Result<f64>;
    /// Search new weights; the driver adopts them.
    fn optimize(&mut self, epoch: usize, s_best: f64) -> Result<PsoResult>;
    fn weights(&self) -> LossWeights;
}

/// Run `epochs` epochs, updating `S_best` after each and triggering the
/// weight search whenever the last `k` scores since the previous trigger
/// are all strictly below it. Returns the log and each trigger's history.
pub fn drive_epochs(driver: &mut dyn EpochDriver, epochs: usize, k: usize) -> Result<(RunLog, Vec<(usize, Vec<f64>)>)> {
    let mut log = RunLog {
        stagnation_k: k,
        score_trace: Vec::with_capacity(epochs),
        s_best_trace: Vec::with_capacity(epochs),
        weight_trace: Vec::with_capacity(epochs),
        triggers: Vec::new(),
    };
    let mut histories = Vec::new();
    let mut s_best = f64::NEG_INFINITY;
    let mut window_start = 0;
    for epoch in 1..=epochs {
        let score = driver.run_epoch(epoch)?;
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch} score")));
        }
        s_best = update_best(score, s_best);
        log.score_trace.push(score);
        log.s_best_trace.push(s_best);
        if stagnation_gate(&log.score_trace[window_start..], s_best, k) {
            log::info!("epoch {epoch}: score stagnated below {s_best} for {k} epochs, searching weights");
            let before = driver.weights();
            let result = driver.optimize(epoch, s_best)?;
            log.triggers.push(TriggerRecord {
                epoch,
                s_best,
                weights_before: before,
                weights_after: driver.weights(),
                best_fitness: result.best_fitness,
            });
            histories.push((epoch, result.history));
            window_start = epoch;
        }
        log.weight_trace.push(driver.weights());
    }
    Ok((log, histories))
}

/// Inputs shared by every epoch.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub table: EmbeddingTable,
    pub store: TripleStore,
    pub split: SplitSpec,
    pub split_id: String,
    pub vocabulary: Vec<String>,
    pub train: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
    pub batch: ContrastiveBatch,
    pub frozen: FrozenLosses,
    pub heads: Heads,
    pub weights: LossWeights,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn prepare_sample(
    s: &Sample,
    cfg: &PipelineConfig,
    table: &EmbeddingTable,
    lm: &NgramLm,
    provider: &dyn AnswerProvider,
) -> Result<PreparedSample> {
    let question_vec = match pool_question(&s.question, table) {
        Ok(v) => v,
        Err(Error::EmptyEncoding(_)) => {
            log::warn!("sample {}: no question word has an embedding", s.sample_id);
            Vector::zeros(table.dim())
        }
        Err(e) => return Err(e),
    };
    let expanded = expand_question(&s.question, &s.objects, &cfg.qs, table)?;
    let questions = filter_by_fluency(&expanded, lm, cfg.qs.fluency_margin)?;
    let se_loss = sample_diversity_loss(&questions)?;
    let captions = curate_captions(&s.sample_id, &s.captions, cfg.k_captions)?;
    let prompts = build_prompts(&captions, &questions);
    let opts = GenerationOptions {
        max_candidates: cfg.provider.max_candidates,
        max_in_flight: cfg.provider.max_in_flight,
    };
    let llm_candidates = generate_candidates(provider, &prompts, &opts, lm)?;
    Ok(PreparedSample {
        sample_id: s.sample_id.clone(),
        answer: s.answer.clone(),
        question_vec: question_vec.into_inner(),
        image_feature: s.image_feature.clone(),
        se_loss,
        llm_loss: llm_loss(&llm_candidates),
        questions,
        llm_candidates,
    })
}

impl Pipeline {
    pub fn prepare(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let table = load_embeddings(&cfg.embeddings, None)?;
        let store = load_triples(&cfg.triples)?;
        let samples = load_dataset(&cfg.dataset, Some(cfg.image_dim))?;
        let splits = load_splits(&cfg.splits)?;
        let split = splits.spec(cfg.eval_split.as_deref(), cfg.eval_mode)?;
        let split_id = cfg.eval_split.clone().unwrap_or_else(|| splits.ids()[0].clone());

        let corpus = samples
            .iter()
            .flat_map(|s| s.captions.iter().cloned().chain(std::iter::once(s.question.join(" "))));
        let lm = NgramLm::train(corpus, cfg.lm_alpha)?;
        let fixture = match &cfg.mock_fixture {
            Some(p) => Some(MockFixture::load(p)?),
            None => None,
        };
        let provider = cfg.provider.build(fixture)?;

        let pool = candidate_pool(&split);
        let vocabulary = answer_vocabulary(&pool, &samples, cfg.answer_vocab_size);
        if vocabulary.is_empty() {
            return Err(Error::Validation("the evaluation answer pool is empty".into()));
        }

        let (train_raw, test_raw): (Vec<&Sample>, Vec<&Sample>) = samples
            .iter()
            .filter(|s| split.seen.contains(&s.answer) || split.unseen.contains(&s.answer))
            .partition(|s| split.seen.contains(&s.answer));
        if train_raw.is_empty() {
            return Err(Error::Validation(format!("split {split_id:?} leaves no training sample")));
        }
        if test_raw.is_empty() {
            return Err(Error::Validation(format!("split {split_id:?} leaves no test sample")));
        }

        let prepare_all = |list: &[&Sample]| -> Result<Vec<PreparedSample>> {
            list.iter()
                .map(|s| prepare_sample(s, &cfg, &table, &lm, provider.as_ref()))
                .collect()
        };
        let train = prepare_all(&train_raw)?;
        let test = prepare_all(&test_raw)?;

        let answer_negatives: Vec<String> = split
            .seen
            .iter()
            .chain(store.answers())
            .filter(|a| !split.unseen.contains(*a))
            .cloned()
            .collect::<BTreeSet<String>>()
            .into_iter()
            .collect();
        let training_samples: Vec<TrainingSample> = train_raw
            .iter()
            .zip(&train)
            .enumerate()
            .map(|(i, (raw, prep))| {
                let mut rng = stream_rng(cfg.seed, i as u64 + 1);
                let fact = store.supporting_fact(&raw.answer);
                let entity = raw.entity.clone().or_else(|| fact.map(|t| t.entity.clone()));
                let relation = raw.relation.clone().or_else(|| fact.map(|t| t.relation.clone()));
                let mut target = |positive: Option<String>, pool: &[String]| {
                    positive.map(|p| ContrastiveTarget {
                        negatives: sample_negatives(pool, &p, cfg.negatives, &mut rng),
                        positive: p,
                    })
                };
                TrainingSample {
                    question: Vector::from(prep.question_vec.clone()),
                    image_feature: Vector::from(prep.image_feature.clone()),
                    entity: target(entity, store.entities()),
                    relation: target(relation, store.relations()),
                    answer: target(Some(raw.answer.clone()), &answer_negatives),
                }
            })
            .collect();
        let batch = ContrastiveBatch::new(&training_samples, &table);
        let n = train.len() as f64;
        let frozen = FrozenLosses {
            se: train.iter().map(|s| s.se_loss).sum::<f64>() / n,
            llm: train.iter().map(|s| s.llm_loss).sum::<f64>() / n,
        };
        let heads = Heads::seeded(table.dim(), cfg.image_dim, table.dim(), cfg.seed);
        log::info!(
            "prepared {} training and {} test samples, {} answers in the {} pool",
            train.len(),
            test.len(),
            vocabulary.len(),
            cfg.eval_mode
        );
        Ok(Pipeline {
            cfg,
            table,
            store,
            split,
            split_id,
            vocabulary,
            train,
            test,
            batch,
            frozen,
            heads,
            weights: LossWeights::uniform(),
        })
    }

    /// `A+` of one sample under the given heads.
    pub fn candidates(&self, s: &PreparedSample, heads: &Heads) -> Result<Vec<CandidateSkeleton>> {
        let kg = kg_candidates(&s.question_vec, &self.store, heads, &self.table, self.cfg.kg_delta)?;
        Ok(fuse_candidates(&s.llm_candidates, &kg))
    }

    fn with_context<T>(
        &self,
        s: &PreparedSample,
        heads: &Heads,
        weights: &LossWeights,
        f: impl FnOnce(&[CandidateSkeleton], &ScoringContext<'_>) -> Result<T>,
    ) -> Result<T> {
        let fused = fuse_features(&s.question_vec, &s.image_feature, &heads.fusion)?;
        let candidates = self.candidates(s, heads)?;
        let ctx = ScoringContext {
            fused: &fused,
            heads,
            table: &self.table,
            lambda: weights.lambda(self.cfg.score.lambda_index),
            cfg: &self.cfg.score,
        };
        f(&candidates, &ctx)
    }

    /// Sum over the training samples of the ground truth's score.
    pub fn validation_score(&self, heads: &Heads, weights: &LossWeights) -> Result<f64> {
        self.train
            .iter()
            .map(|s| self.with_context(s, heads, weights, |c, ctx| score_in_pool(&s.answer, c, ctx)))
            .sum()
    }

    fn train_config(&self, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            ..self.cfg.training
        }
    }

    /// Heads after a short retraining under `w`, and their validation score.
    pub fn fitness(&self, w: &LossWeights) -> Result<(Heads, f64)> {
        let out = train_projections(&self.batch, &self.heads, w, &self.train_config(self.cfg.pso_inner_steps), self.frozen)?;
        let score = self.validation_score(&out.heads, w)?;
        Ok((out.heads, score))
    }

    /// Rank the answer vocabulary for every test sample.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let per_sample = self
            .test
            .iter()
            .map(|s| {
                let ranking = self.with_context(s, &self.heads, &self.weights, |c, ctx| {
                    rank_candidate_pool(&self.vocabulary, c, ctx)
                })?;
                let answers: Vec<&str> = ranking.iter().map(|r| r.answer.as_str()).collect();
                let (rank, truth_absent) = rank_or_fallback(&answers, &s.answer);
                Ok(SampleRank {
                    sample_id: s.sample_id.clone(),
                    rank,
                    truth_absent,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        EvalReport::from_ranks(per_sample)
    }
}

impl EpochDriver for Pipeline {
    fn run_epoch(&mut self, epoch: usize) -> Result<f64> {
        let out = train_projections(&self.batch, &self.heads, &self.weights, &self.cfg.training, self.frozen)?;
        self.heads = out.heads;
        let score = self.validation_score(&self.heads, &self.weights)?;
        log::info!("epoch {epoch}: score {score}");
        Ok(score)
    }

    fn optimize(&mut self, epoch: usize, _s_best: f64) -> Result<PsoResult> {
        let mut cfg = self.cfg.pso;
        cfg.seed = self.cfg.pso.seed.wrapping_add(epoch as u64);
        let this = &*self;
        let fitness = |w: &LossWeights| -> Result<f64> { Ok(this.fitness(w)?.1) };
        let result = optimize_weights(&fitness, &cfg, Some(self.weights))?;
        let (heads, _) = self.fitness(&result.best)?;
        self.heads = heads;
        self.weights = result.best;
        Ok(result)
    }

    fn weights(&self) -> LossWeights {
        self.weights
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub mode: EvalMode,
    pub seed: u64,
    pub split: String,
    pub vocabulary_size: usize,
    pub final_weights: LossWeights,
    pub frozen_losses: FrozenLosses,
    #[serde(flatten)]
    pub eval: EvalReport,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub log: RunLog,
    pub pso_histories: Vec<(usize, Vec<f64>)>,
}

pub fn run_pipeline(cfg: PipelineConfig) -> Result<RunOutcome> {
    let epochs = cfg.epochs;
    let k = cfg.pso.stagnation_k;
    let mut pipeline = Pipeline::prepare(cfg)?;
    let (log, pso_histories) = drive_epochs(&mut pipeline, epochs, k)?;
    let eval = pipeline.evaluate()?;
    let report = RunReport {
        mode: pipeline.cfg.eval_mode,
        seed: pipeline.cfg.seed,
        split: pipeline.split_id.clone(),
        vocabulary_size: pipeline.vocabulary.len(),
        final_weights: pipeline.weights,
        frozen_losses: pipeline.frozen,
        eval,
    };
    Ok(RunOutcome {
        report,
        log,
        pso_histories,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `report.json`, `metrics.csv`, `ranks.csv`, `run_log.json` and
/// `pso/epoch_<E>.csv`. Returns the paths written.
pub fn write_outputs(out_dir: &Path, outcome: &RunOutcome) -> Result<Vec<PathBuf>> {
    let pso_dir = out_dir.join("pso");
    std::fs::create_dir_all(&pso_dir).map_err(|e| Error::io(format!("creating {}", pso_dir.display()), e))?;
    let stale = std::fs::read_dir(&pso_dir).map_err(|e| Error::io(format!("listing {}", pso_dir.display()), e))?;
    for entry in stale.flatten() {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("epoch_") && name.ends_with(".csv") {
            std::fs::remove_file(entry.path()).map_err(|e| Error::io(format!("removing {name}"), e))?;
        }
    }
    let mut written = Vec::new();
    let files = [
        ("report.json", serde_json::to_string_pretty(&outcome.report)? + "\n"),
        ("metrics.csv", crate::metrics::metrics_csv(&outcome.report.eval.metrics)),
        ("ranks.csv", crate::metrics::ranks_csv(&outcome.report.eval.per_sample)),
        ("run_log.json", serde_json::to_string_pretty(&outcome.log)? + "\n"),
    ];
    for (name, contents) in files {
        let p = out_dir.join(name);
        write_file(&p, &contents)?;
        written.push(p);
    }
    for (epoch, history) in &outcome.pso_histories {
        let p = pso_dir.join(format!("epoch_{epoch}.csv"));
        write_history_csv(&p, history)?;
        written.push(p);
    }
    Ok(written)
}
