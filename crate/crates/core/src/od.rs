//! Width distributions and nested submodel machinery.
//!
//! A dropout distribution is a discrete set of candidate width fractions
//! `0 < s_1 < ... < s_n <= 1` with positive probabilities summing to one.
//! Training samples a width `p` per step; the `p`-submodel keeps the first
//! `ceil(p * K)` units of every eligible layer, so smaller widths are always
//! nested inside larger ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutDistribution {
    values: Vec<f64>,
    probabilities: Vec<f64>,
}

impl DropoutDistribution {
    pub fn new(values: Vec<f64>, probabilities: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidDistribution("empty candidate set".into()));
        }
        if values.len() != probabilities.len() {
            return Err(Error::InvalidDistribution(
                "values and probabilities differ in length".into(),
            ));
        }
        for w in values.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidDistribution(
                    "candidate widths must be strictly increasing".into(),
                ));
            }
        }
        let first = values[0];
        let last = *values.last().unwrap();
        if first <= 0.0 || last > 1.0 {
            return Err(Error::InvalidDistribution(
                "candidate widths must lie in (0, 1]".into(),
            ));
        }
        if probabilities.iter().any(|&p| p <= 0.0) {
            return Err(Error::InvalidDistribution(
                "every probability must be positive".into(),
            ));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(DropoutDistribution {
            values,
            probabilities,
        })
    }

    /// Uniform distribution over `{1/k, 2/k, ..., 1}`.
    pub fn uniform_k(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidDistribution("k must be at least 1".into()));
        }
        let values: Vec<f64> = (1..=k).map(|i| i as f64 / k as f64).collect();
        let probabilities = vec![1.0 / k as f64; k];
        DropoutDistribution::new(values, probabilities)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min_width(&self) -> f64 {
        self.values[0]
    }

    pub fn max_width(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Exact membership test; widths are compared bitwise since atoms are
    /// constructed once and carried around unmodified.
    pub fn contains(&self, p: f64) -> bool {
        self.values.iter().any(|&v| v == p)
    }

    pub fn index_of(&self, p: f64) -> Option<usize> {
        self.values.iter().position(|&v| v == p)
    }

    /// Draw a width from the unconditional distribution.
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        self.sample_conditional(self.max_width(), rng)
            .expect("max width always admits at least one atom")
    }

    /// Draw from `D | D <= cap`, renormalizing over the admissible atoms.
    pub fn sample_conditional(&self, cap: f64, rng: &mut Rng) -> Result<f64> {
        let admissible = self.admissible_count(cap)?;
        let total: f64 = self.probabilities[..admissible].iter().sum();
        let u = rng.next_f64() * total;
        let mut acc = 0.0;
        for i in 0..admissible {
            acc += self.probabilities[i];
            if u < acc {
                return Ok(self.values[i]);
            }
        }
        // Guard against accumulated rounding at u ~= total.
        Ok(self.values[admissible - 1])
    }

    /// Renormalized probabilities of `D | D <= cap`, zero beyond the cap.
    pub fn conditional_probabilities(&self, cap: f64) -> Result<Vec<f64>> {
        let admissible = self.admissible_count(cap)?;
        let total: f64 = self.probabilities[..admissible].iter().sum();
        let mut out = vec![0.0; self.values.len()];
        for i in 0..admissible {
            out[i] = self.probabilities[i] / total;
        }
        Ok(out)
    }

    /// Largest atom `<= cap`.
    pub fn widest_at_most(&self, cap: f64) -> Result<f64> {
        let admissible = self.admissible_count(cap)?;
        Ok(self.values[admissible - 1])
    }

    fn admissible_count(&self, cap: f64) -> Result<usize> {
        let count = self.values.iter().take_while(|&&v| v <= cap).count();
        if count == 0 {
            return Err(Error::CapBelowMinimum {
                cap,
                min: self.values[0],
            });
        }
        Ok(count)
    }
}
