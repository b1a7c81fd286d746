//! Jansen-form estimators of variance, first-order and total indices.
//!
//! With `D_j = Σ_k (yA_j − yB_j)²`:
//!
//! ```text
//! V_j    = D_j / 2N
//! T_ij   = Σ_k (yA_j − yAB(i)_j)² / D_j
//! S_ij   = 1 − Σ_k (yB_j − yAB(i)_j)² / D_j
//! ```
//!
//! Sums are compensated and taken in ascending row-index order, so the
//! result does not depend on the order blocks are supplied in. When
//! `D_j = 0` column `j` is undefined rather than an error.

use serde::{Deserialize, Serialize};

use crate::error::SensaError;
use crate::Result;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// All observations for one design row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationBlock {
    /// Global 1-based row index.
    pub k: u64,
    /// Batch that produced the row; 0 for ingested rows.
    #[serde(default)]
    pub batch: u64,
    pub xa: Vec<f64>,
    pub xb: Vec<f64>,
    pub y_a: Vec<f64>,
    pub y_b: Vec<f64>,
    /// `y_ab[i]` is the output at `A` with coordinate `i` taken from `B`.
    pub y_ab: Vec<Vec<f64>>,
}

impl EvaluationBlock {
    pub fn m(&self) -> usize {
        self.xa.len()
    }

    pub fn n(&self) -> usize {
        self.y_a.len()
    }

    pub fn validate(&self, m: usize, n: usize) -> Result<()> {
        let shape_ok = self.xa.len() == m
            && self.xb.len() == m
            && self.y_a.len() == n
            && self.y_b.len() == n
            && self.y_ab.len() == m
            && self.y_ab.iter().all(|y| y.len() == n);
        if !shape_ok {
            return Err(SensaError::Validation(format!(
                "block {} does not have shape m={m}, n={n}",
                self.k
            )));
        }
        let in_unit = self.xa.iter().chain(&self.xb).all(|x| (0.0..=1.0).contains(x));
        if !in_unit {
            return Err(SensaError::Validation(format!(
                "block {} has inputs outside [0, 1]",
                self.k
            )));
        }
        let finite = self
            .y_a
            .iter()
            .chain(&self.y_b)
            .chain(self.y_ab.iter().flatten())
            .all(|y| y.is_finite());
        if !finite {
            return Err(SensaError::Validation(format!(
                "block {} has non-finite outputs",
                self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityIndices {
    pub m: usize,
    pub n: usize,
    /// Number of blocks the estimate is based on.
    pub samples: usize,
    /// `first_order[i][j]`; NaN where column `j` is undefined.
    pub first_order: Vec<Vec<f64>>,
    /// `total[i][j]`; NaN where column `j` is undefined.
    pub total: Vec<Vec<f64>>,
    pub variance: Vec<f64>,
    /// `defined[j]` is false when the estimated variance of output `j` is 0.
    pub defined: Vec<bool>,
    /// Set when some contributing blocks were sampled non-uniformly.
    pub biased_by_adaptive_sampling: bool,
}

impl SensitivityIndices {
    pub fn first_order(&self, i: usize, j: usize) -> Option<f64> {
        self.defined[j].then(|| self.first_order[i][j])
    }

    pub fn total(&self, i: usize, j: usize) -> Option<f64> {
        self.defined[j].then(|| self.total[i][j])
    }
}

/// Running sums behind the estimators; blocks can be added one at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexAccumulator {
    m: usize,
    n: usize,
    count: usize,
    a_b: Vec<CompensatedSum>,
    /// `[i * n + j]`
    a_ab: Vec<CompensatedSum>,
    b_ab: Vec<CompensatedSum>,
}

impl IndexAccumulator {
    pub fn new(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            count: 0,
            a_b: vec![CompensatedSum::default(); n],
            a_ab: vec![CompensatedSum::default(); m * n],
            b_ab: vec![CompensatedSum::default(); m * n],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add(&mut self, block: &EvaluationBlock) {
        let n = self.n;
        for j in 0..n {
            let d = block.y_a[j] - block.y_b[j];
            self.a_b[j].add(d * d);
        }
        for (i, y_ab) in block.y_ab.iter().enumerate() {
            for j in 0..n {
                let da = block.y_a[j] - y_ab[j];
                let db = block.y_b[j] - y_ab[j];
                self.a_ab[i * n + j].add(da * da);
                self.b_ab[i * n + j].add(db * db);
            }
        }
        self.count += 1;
    }

    /// `Σ_k (yA_j − yB_j)²` per output.
    pub fn denominators(&self) -> Vec<f64> {
        self.a_b.iter().map(CompensatedSum::value).collect()
    }

    pub fn variance(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(SensaError::InsufficientData(
                "no evaluation blocks".into(),
            ));
        }
        let two_n = 2.0 * self.count as f64;
        Ok(self.a_b.iter().map(|s| s.value() / two_n).collect())
    }

    pub fn indices(&self) -> Result<SensitivityIndices> {
        let variance = self.variance()?;
        let denom = self.denominators();
        let defined: Vec<bool> = denom.iter().map(|&d| d > 0.0).collect();
        let ratio = |sums: &[CompensatedSum], i: usize, j: usize| {
            if defined[j] {
                sums[i * self.n + j].value() / denom[j]
            } else {
                f64::NAN
            }
        };
        let total = (0..self.m)
            .map(|i| (0..self.n).map(|j| ratio(&self.a_ab, i, j)).collect())
            .collect();
        let first_order = (0..self.m)
            .map(|i| (0..self.n).map(|j| 1.0 - ratio(&self.b_ab, i, j)).collect())
            .collect();
        Ok(SensitivityIndices {
            m: self.m,
            n: self.n,
            samples: self.count,
            first_order,
            total,
            variance,
            defined,
            biased_by_adaptive_sampling: false,
        })
    }
}

fn accumulate(blocks: &[EvaluationBlock]) -> Result<IndexAccumulator> {
    let first = blocks
        .first()
        .ok_or_else(|| SensaError::InsufficientData("no evaluation blocks".into()))?;
    let mut order: Vec<&EvaluationBlock> = blocks.iter().collect();
    order.sort_by_key(|b| b.k);
    let mut acc = IndexAccumulator::new(first.m(), first.n());
    for b in order {
        acc.add(b);
    }
    Ok(acc)
}

pub fn estimate_variance(blocks: &[EvaluationBlock]) -> Result<Vec<f64>> {
    accumulate(blocks)?.variance()
}

/// `[i][j]`, `None` for outputs with zero estimated variance.
pub fn estimate_total(blocks: &[EvaluationBlock]) -> Result<Vec<Vec<Option<f64>>>> {
    let idx = accumulate(blocks)?.indices()?;
    Ok(table(&idx, SensitivityIndices::total))
}

/// `[i][j]`, `None` for outputs with zero estimated variance. Not clamped.
pub fn estimate_first_order(blocks: &[EvaluationBlock]) -> Result<Vec<Vec<Option<f64>>>> {
    let idx = accumulate(blocks)?.indices()?;
    Ok(table(&idx, SensitivityIndices::first_order))
}

pub fn estimate_indices(blocks: &[EvaluationBlock]) -> Result<SensitivityIndices> {
    accumulate(blocks)?.indices()
}

fn table(
    idx: &SensitivityIndices,
    get: fn(&SensitivityIndices, usize, usize) -> Option<f64>,
) -> Vec<Vec<Option<f64>>> {
    (0..idx.m)
        .map(|i| (0..idx.n).map(|j| get(idx, i, j)).collect())
        .collect()
}
