//! Bootstrap envelopes for cumulative curves and global indices.
//!
//! The resampling unit is a whole [`EvaluationBlock`], so the paired
//! `A`/`B`/`A_Bi` structure of every row is kept intact. Replicate `r` draws
//! from a ChaCha8 stream seeded with `seed + r`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SensaError;
use crate::estimators::{estimate_indices, EvaluationBlock, SensitivityIndices};
use crate::regional::{boxcar_contributions, cumulative_local, AlphaEpsilon, CumulativeCurve};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapSpec {
    pub replicates: usize,
    pub seed: u64,
}

/// Blocks drawn with replacement for replicate `r`, renumbered so that
/// repeated draws stay distinct rows.
pub fn resample(blocks: &[EvaluationBlock], seed: u64, r: usize) -> Vec<EvaluationBlock> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
    (1..=blocks.len() as u64)
        .map(|k| {
            let mut b = blocks[rng.random_range(0..blocks.len())].clone();
            b.k = k;
            b
        })
        .collect()
}

fn require_blocks(blocks: &[EvaluationBlock]) -> Result<()> {
    if blocks.is_empty() {
        Err(SensaError::InsufficientData("no evaluation blocks".into()))
    } else {
        Ok(())
    }
}

/// Replicates of `T^(α,ε)_ij`, each normalized by its own variance
/// estimate. Replicates whose resampled variance is zero yield `None`.
pub fn bootstrap_curves(
    blocks: &[EvaluationBlock],
    i: usize,
    j: usize,
    params: AlphaEpsilon,
    spec: BootstrapSpec,
) -> Result<Vec<Option<CumulativeCurve>>> {
    if spec.replicates == 0 {
        return Ok(Vec::new());
    }
    require_blocks(blocks)?;
    (0..spec.replicates)
        .map(|r| {
            let sample = resample(blocks, spec.seed, r);
            let variance = crate::estimators::estimate_variance(&sample)?[j];
            let (t, _) = boxcar_contributions(&sample, i, j, params)?;
            Ok(cumulative_local(&t, variance, sample.len()))
        })
        .collect()
}

pub fn bootstrap_indices(blocks: &[EvaluationBlock], spec: BootstrapSpec) -> Result<Vec<SensitivityIndices>> {
    if spec.replicates == 0 {
        return Ok(Vec::new());
    }
    require_blocks(blocks)?;
    (0..spec.replicates)
        .map(|r| estimate_indices(&resample(blocks, spec.seed, r)))
        .collect()
}

/// Linear-interpolation quantile (type 7) of unsorted data; `None` when
/// `values` is empty.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Pointwise percentile band of the curves on `grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileBand {
    pub grid: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl PercentileBand {
    pub fn new(curves: &[CumulativeCurve], grid: &[f64], level: f64) -> Result<Self> {
        if curves.is_empty() {
            return Err(SensaError::InsufficientData("no replicate curves".into()));
        }
        let tail = 0.5 * (1.0 - level);
        let (mut lower, mut upper) = (Vec::with_capacity(grid.len()), Vec::with_capacity(grid.len()));
        for &x in grid {
            let values: Vec<f64> = curves.iter().map(|c| c.evaluate(x)).collect();
            lower.push(quantile(&values, tail).expect("nonempty"));
            upper.push(quantile(&values, 1.0 - tail).expect("nonempty"));
        }
        Ok(Self {
            grid: grid.to_vec(),
            lower,
            upper,
        })
    }

    /// Fraction of grid points where `curve` lies inside the band.
    pub fn coverage(&self, curve: &CumulativeCurve) -> f64 {
        let inside = self
            .grid
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .filter(|(&x, (&lo, &hi))| {
                let v = curve.evaluate(x);
                v >= lo && v <= hi
            })
            .count();
        inside as f64 / self.grid.len() as f64
    }
}

/// Evenly spaced grid of `points` values over `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..points)
            .map(|q| lo + (hi - lo) * q as f64 / (points - 1) as f64)
            .collect(),
    }
}
