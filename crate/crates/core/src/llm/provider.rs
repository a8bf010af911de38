//! Answer providers: a seeded offline mock and a generic JSON-over-HTTP client.

use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::tokenize;
use crate::error::{Error, Result};

/// One answer as returned by a provider, before normalization and merging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCandidate {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl RawCandidate {
    pub fn new(text: impl Into<String>, confidence: f64) -> Self {
        RawCandidate {
            text: text.into(),
            confidence: Some(confidence),
        }
    }
}

/// Something that answers a prompt with scored candidates.
pub trait AnswerProvider: Sync {
    fn complete(&self, prompt_index: usize, prompt: &str, max_candidates: usize) -> Result<Vec<RawCandidate>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub model_name: String,
    pub timeout_secs: f64,
    pub max_candidates: usize,
    pub max_in_flight: usize,
    pub seed: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            endpoint: None,
            model_name: "mock".into(),
            timeout_secs: 30.0,
            max_candidates: 5,
            max_in_flight: 4,
            seed: 0,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == ProviderKind::Http && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(Error::Config("provider.kind = http requires provider.endpoint".into()));
        }
        if self.max_candidates == 0 || self.max_in_flight == 0 {
            return Err(Error::Config(
                "provider.max_candidates and provider.max_in_flight must be positive".into(),
            ));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config("provider.timeout must be positive".into()));
        }
        Ok(())
    }

    /// Instantiate the configured provider. `fixture` is only used by the mock.
    pub fn build(&self, fixture: Option<MockFixture>) -> Result<Box<dyn AnswerProvider>> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::Mock => Box::new(MockProvider::new(self.seed, fixture.unwrap_or_default())),
            ProviderKind::Http => Box::new(HttpProvider::new(
                self.endpoint.clone().unwrap_or_default(),
                self.model_name.clone(),
                Duration::from_secs_f64(self.timeout_secs),
            )?),
        })
    }
}

/// One fixture rule: prompts containing `pattern` get `candidates`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub pattern: String,
    pub candidates: Vec<RawCandidate>,
}

/// Ordered rules, matched first-wins on substring.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MockFixture(pub Vec<MockRule>);

impl MockFixture {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }
}

/// Offline provider: fixture rules first, otherwise a pure function of
/// `(seed, prompt)` that proposes content words from the prompt's context.
#[derive(Debug, Clone)]
pub struct MockProvider {
    seed: u64,
    fixture: MockFixture,
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "was", "of", "on", "in", "at", "to", "and", "with", "for", "by",
    "its", "it", "this", "that", "there", "some", "next", "near", "from", "his", "her", "their",
];

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl MockProvider {
    pub fn new(seed: u64, fixture: MockFixture) -> Self {
        MockProvider { seed, fixture }
    }

    fn fallback(&self, prompt: &str, max_candidates: usize) -> Vec<RawCandidate> {
        let context = prompt
            .lines()
            .find_map(|l| l.strip_prefix("Context:"))
            .unwrap_or(prompt);
        let mut words: Vec<String> = Vec::new();
        for w in tokenize(context) {
            if !STOPWORDS.contains(&w.as_str()) && !words.contains(&w) {
                words.push(w);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(prompt.as_bytes()));
        words.shuffle(&mut rng);
        words.truncate(max_candidates);
        let weights: Vec<f64> = words.iter().map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        words
            .into_iter()
            .zip(weights)
            .map(|(w, r)| RawCandidate::new(w, r / total))
            .collect()
    }
}

impl AnswerProvider for MockProvider {
    fn complete(&self, _prompt_index: usize, prompt: &str, max_candidates: usize) -> Result<Vec<RawCandidate>> {
        if let Some(rule) = self.fixture.0.iter().find(|r| prompt.contains(&r.pattern)) {
            return Ok(rule.candidates.iter().take(max_candidates).cloned().collect());
        }
        Ok(self.fallback(prompt, max_candidates))
    }
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_candidates: usize,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    candidates: Vec<RawCandidate>,
}

/// `POST {endpoint}` with `{"model", "prompt", "max_candidates"}`; expects
/// `{"candidates": [{"text", "confidence"}]}` back.
pub struct HttpProvider {
    endpoint: String,
    model: String,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(endpoint: String, model: String, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("building HTTP client: {e}")))?;
        Ok(HttpProvider {
            endpoint,
            model,
            client,
        })
    }
}

impl AnswerProvider for HttpProvider {
    fn complete(&self, prompt_index: usize, prompt: &str, max_candidates: usize) -> Result<Vec<RawCandidate>> {
        let provider_err = |message: String| Error::Provider {
            prompt_index,
            message,
        };
        let body = CompletionRequest {
            model: &self.model,
            prompt,
            max_candidates,
        };
        let response = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    provider_err(format!("request timed out: {e}"))
                } else {
                    provider_err(format!("request failed: {e}"))
                }
            })?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| provider_err(format!("reading response body: {e}")))?;
        if !status.is_success() {
            return Err(provider_err(format!("HTTP {status}: {text}")));
        }
        let parsed: CompletionResponse = serde_json::from_str(&text).map_err(|e| {
            Error::parse(
                format!("<response to prompt {prompt_index}>"),
                e.line(),
                format!("unparseable body: {e}"),
            )
        })?;
        Ok(parsed.candidates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_rules_match_first_wins() {
        let fixture: MockFixture = serde_json::from_str(
            r#"[{"pattern": "what animal", "candidates": [{"text": "cat", "confidence": 0.8}, {"text": "dog", "confidence": 0.2}]},
                {"pattern": "what", "candidates": [{"text": "thing"}]}]"#,
        )
        .unwrap();
        let mock = MockProvider::new(1, fixture);
        let out = mock.complete(0, "Context: x\nQuestion: what animal is it\nAnswer:", 5).unwrap();
        assert_eq!(out, vec![RawCandidate::new("cat", 0.8), RawCandidate::new("dog", 0.2)]);
        let out = mock.complete(0, "Question: what colour", 5).unwrap();
        assert_eq!(out[0].confidence, None);
    }

    #[test]
    fn fallback_is_pure_and_bounded() {
        let mock = MockProvider::new(9, MockFixture::default());
        let prompt = "Context: a cat sitting on a red sofa near a lamp\nQuestion: what is it\nAnswer:";
        let a = mock.complete(0, prompt, 3).unwrap();
        let b = mock.complete(5, prompt, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        let total: f64 = a.iter().map(|c| c.confidence.unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for c in &a {
            assert!(!STOPWORDS.contains(&c.text.as_str()));
        }
        let other_seed = MockProvider::new(10, MockFixture::default()).complete(0, prompt, 3).unwrap();
        assert_ne!(a, other_seed);
    }

    #[test]
    fn http_kind_requires_endpoint() {
        let cfg = ProviderConfig {
            kind: ProviderKind::Http,
            ..ProviderConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
