use serde::{Deserialize, Serialize};

use crate::design::InputRange;
use crate::error::SensaError;
use crate::model::EvaluatorSpec;
use crate::regional::{DEFAULT_ALPHA, DEFAULT_EPSILON};
use crate::Result;

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

/// Campaign settings, as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub m: usize,
    pub n: usize,
    /// Rows per batch (`M`).
    pub batch_size: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Physical range per input; empty means `[0, 1]` everywhere.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input_ranges: Vec<InputRange>,
    pub evaluator: EvaluatorSpec,
    /// 1-based outputs averaged into the sampling density; all if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_subset: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_batches: Option<u64>,
}

impl CampaignConfig {
    pub fn new(m: usize, n: usize, batch_size: usize, evaluator: EvaluatorSpec) -> Self {
        Self {
            m,
            n,
            batch_size,
            alpha: DEFAULT_ALPHA,
            epsilon: DEFAULT_EPSILON,
            input_ranges: Vec::new(),
            evaluator,
            output_subset: None,
            max_batches: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(SensaError::Config(msg));
        if self.m == 0 || self.n == 0 {
            return fail("m and n must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !self.alpha.is_finite() {
            return fail(format!("alpha must be finite, got {}", self.alpha));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !self.input_ranges.is_empty() {
            if self.input_ranges.len() != self.m {
                return fail(format!(
                    "{} input ranges given for m = {}",
                    self.input_ranges.len(),
                    self.m
                ));
            }
            if let Some((i, r)) = self
                .input_ranges
                .iter()
                .enumerate()
                .find(|(_, r)| !(r.lo < r.hi && r.lo.is_finite() && r.hi.is_finite()))
            {
                return fail(format!("input {} has range [{}, {}]", i + 1, r.lo, r.hi));
            }
        }
        if let Some(subset) = &self.output_subset {
            if subset.is_empty() || subset.iter().any(|&j| j == 0 || j > self.n) {
                return fail(format!("output subset {subset:?} is not within 1..={}", self.n));
            }
        }
        let (m, n) = self.evaluator.dims(self.m);
        if (m, n) != (self.m, self.n) {
            return fail(format!(
                "evaluator has m = {m}, n = {n} but the campaign declares m = {}, n = {}",
                self.m, self.n
            ));
        }
        if let EvaluatorSpec::External(spec) = &self.evaluator {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn range(&self, i: usize) -> InputRange {
        self.input_ranges.get(i).copied().unwrap_or_default()
    }

    /// 0-based outputs used for the averaged density.
    pub fn outputs(&self) -> Vec<usize> {
        match &self.output_subset {
            Some(s) => s.iter().map(|j| j - 1).collect(),
            None => (0..self.n).collect(),
        }
    }

    pub fn to_physical(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, &v)| self.range(i).to_physical(v))
            .collect()
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| self.range(i).to_unit(v))
            .collect()
    }
}
