//! The five loss weights (λ1..λ5), a point on the probability simplex.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_WEIGHTS: usize = 5;

/// Tolerance on `Σλ = 1`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Weights of `L_se, L_LLM, L_e, L_r, L_a`, in that order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; NUM_WEIGHTS]", into = "[f64; NUM_WEIGHTS]")]
pub struct LossWeights([f64; NUM_WEIGHTS]);

impl LossWeights {
    pub fn new(lambdas: [f64; NUM_WEIGHTS]) -> Result<Self> {
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Contract(format!("loss weights must be finite and non-negative: {lambdas:?}")));
        }
        let sum: f64 = lambdas.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Contract(format!("loss weights sum to {sum}, not 1")));
        }
        Ok(LossWeights(lambdas))
    }

    pub fn uniform() -> Self {
        LossWeights([1.0 / NUM_WEIGHTS as f64; NUM_WEIGHTS])
    }

    /// All mass on λ_index (1-based).
    pub fn vertex(index: usize) -> Self {
        assert!((1..=NUM_WEIGHTS).contains(&index), "λ index out of range: {index}");
        let mut l = [0.0; NUM_WEIGHTS];
        l[index - 1] = 1.0;
        LossWeights(l)
    }

    pub fn as_array(&self) -> &[f64; NUM_WEIGHTS] {
        &self.0
    }

    /// λ_index, 1-based as in `L = λ1 L_se + ... + λ5 L_a`.
    pub fn lambda(&self, index: usize) -> f64 {
        assert!((1..=NUM_WEIGHTS).contains(&index), "λ index out of range: {index}");
        self.0[index - 1]
    }

    pub fn se(&self) -> f64 {
        self.0[0]
    }
    pub fn llm(&self) -> f64 {
        self.0[1]
    }
    pub fn entity(&self) -> f64 {
        self.0[2]
    }
    pub fn relation(&self) -> f64 {
        self.0[3]
    }
    pub fn answer(&self) -> f64 {
        self.0[4]
    }
}

impl TryFrom<[f64; NUM_WEIGHTS]> for LossWeights {
    type Error = Error;

    fn try_from(value: [f64; NUM_WEIGHTS]) -> Result<Self> {
        LossWeights::new(value)
    }
}

impl From<LossWeights> for [f64; NUM_WEIGHTS] {
    fn from(w: LossWeights) -> Self {
        w.0
    }
}

/// Values of the five loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub se: f64,
    pub llm: f64,
    pub entity: f64,
    pub relation: f64,
    pub answer: f64,
}

impl LossParts {
    pub fn as_array(&self) -> [f64; NUM_WEIGHTS] {
        [self.se, self.llm, self.entity, self.relation, self.answer]
    }
}

/// `λ1 L_se + λ2 L_LLM + λ3 L_e + λ4 L_r + λ5 L_a`.
pub fn combined_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.as_array().iter().zip(w.as_array()).map(|(p, l)| p * l).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_loss_examples() {
        let parts = LossParts {
            se: 1.0,
            llm: 2.0,
            entity: 3.0,
            relation: 4.0,
            answer: 5.0,
        };
        assert_eq!(combined_loss(&parts, &LossWeights::vertex(1)), 1.0);
        assert!((combined_loss(&parts, &LossWeights::uniform()) - 3.0).abs() < 1e-12);

        let c = -0.37;
        let flat = LossParts {
            se: c,
            llm: c,
            entity: c,
            relation: c,
            answer: c,
        };
        let w = LossWeights::new([0.1, 0.2, 0.3, 0.15, 0.25]).unwrap();
        assert!((combined_loss(&flat, &w) - c).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_is_linear_in_each_part() {
        let w = LossWeights::new([0.1, 0.2, 0.3, 0.15, 0.25]).unwrap();
        let base = LossParts {
            se: 0.5,
            llm: -1.0,
            entity: 2.0,
            relation: 0.1,
            answer: 3.0,
        };
        let l0 = combined_loss(&base, &w);
        for i in 0..NUM_WEIGHTS {
            let mut arr = base.as_array();
            arr[i] += 0.75;
            let bumped = LossParts {
                se: arr[0],
                llm: arr[1],
                entity: arr[2],
                relation: arr[3],
                answer: arr[4],
            };
            let delta = combined_loss(&bumped, &w) - l0;
            assert!((delta - 0.75 * w.as_array()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn validation() {
        assert!(LossWeights::new([0.5, 0.5, 0.0, 0.0, 0.0]).is_ok());
        assert!(LossWeights::new([0.5, 0.6, 0.0, 0.0, 0.0]).is_err());
        assert!(LossWeights::new([1.1, -0.1, 0.0, 0.0, 0.0]).is_err());
        let json = serde_json::to_string(&LossWeights::uniform()).unwrap();
        let back: LossWeights = serde_json::from_str(&json).unwrap();
        assert_eq!(back, LossWeights::uniform());
        assert!(serde_json::from_str::<LossWeights>("[1,1,0,0,0]").is_err());
    }
}
