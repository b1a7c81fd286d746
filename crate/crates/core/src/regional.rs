//! Regional (local) decomposition of total sensitivity.
//!
//! Each design row spreads its contribution `|yA_j − yAB(i)_j|^α` uniformly
//! over the ε-widened interval between its `A` and `B` coordinates:
//!
//! ```text
//! t_ij(x) = Σ_k |Δy_k|^α · 1[lo_k ≤ x ≤ hi_k] / (|xa_k − xb_k| + ε)
//! lo_k = min(xa_k, xb_k) − ε/2,   hi_k = max(xa_k, xb_k) + ε/2
//! ```
//!
//! so every boxcar integrates to exactly its numerator. Densities are kept
//! exact as piecewise-constant functions on the sorted union of interval
//! endpoints; no binning is involved. The sampling density `τ` divides out
//! the `α = 0` density (which measures how densely `x_i` was sampled) and
//! normalizes; `τ̄` averages `τ` over outputs, and its CDF `T̄` drives the
//! inverse-transform sampling of the next batch.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::SensaError;
use crate::estimators::{CompensatedSum, EvaluationBlock};
use crate::Result;

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_ALPHA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaEpsilon {
    pub alpha: f64,
    pub epsilon: f64,
}

impl AlphaEpsilon {
    pub fn new(alpha: f64, epsilon: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(SensaError::Validation(format!("alpha must be finite, got {alpha}")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(SensaError::Validation(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self { alpha, epsilon })
    }
}

impl Default for AlphaEpsilon {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Nonnegative step function, zero outside `[breakpoints[0], last]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DensityParts")]
pub struct PiecewiseConstantDensity {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct DensityParts {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl TryFrom<DensityParts> for PiecewiseConstantDensity {
    type Error = SensaError;

    fn try_from(p: DensityParts) -> Result<Self> {
        Self::new(p.breakpoints, p.values)
    }
}

impl PiecewiseConstantDensity {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(SensaError::InvalidDensity(
                "at least two breakpoints are required".into(),
            ));
        }
        if values.len() != breakpoints.len() - 1 {
            return Err(SensaError::InvalidDensity(format!(
                "{} breakpoints need {} values, got {}",
                breakpoints.len(),
                breakpoints.len() - 1,
                values.len()
            )));
        }
        if !breakpoints.iter().all(|b| b.is_finite())
            || breakpoints.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(SensaError::InvalidDensity(
                "breakpoints must be finite and strictly ascending".into(),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(SensaError::InvalidDensity(format!(
                "values must be finite and nonnegative, got {v}"
            )));
        }
        Ok(Self { breakpoints, values })
    }

    /// Constant density `1 / (hi − lo)` on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64) -> Self {
        Self {
            breakpoints: vec![lo, hi],
            values: vec![1.0 / (hi - lo)],
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn integral(&self) -> f64 {
        let mut s = CompensatedSum::default();
        for (w, v) in self.breakpoints.windows(2).zip(&self.values) {
            s.add(v * (w[1] - w[0]));
        }
        s.value()
    }

    /// Value at `x`; right-continuous, 0 outside the support.
    pub fn value_at(&self, x: f64) -> f64 {
        let bp = &self.breakpoints;
        if x < bp[0] || x >= bp[bp.len() - 1] {
            return 0.0;
        }
        let seg = bp.partition_point(|&b| b <= x) - 1;
        self.values[seg]
    }

    /// Rescaled to unit integral.
    pub fn normalized(&self) -> Result<Self> {
        let mass = self.integral();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(SensaError::DegenerateDensity(format!(
                "total mass is {mass}"
            )));
        }
        Ok(Self {
            breakpoints: self.breakpoints.clone(),
            values: self.values.iter().map(|v| v / mass).collect(),
        })
    }

    /// The part of the density inside `[lo, hi]`, not renormalized.
    pub fn clipped(&self, lo: f64, hi: f64) -> Result<Self> {
        let mut bps = vec![lo];
        bps.extend(self.breakpoints.iter().copied().filter(|&b| b > lo && b < hi));
        bps.push(hi);
        let values = bps
            .windows(2)
            .map(|w| self.value_at(0.5 * (w[0] + w[1])))
            .collect();
        Self::new(bps, values)
    }
}

/// Piecewise-linear nondecreasing curve through `(breakpoints, cumulative)`,
/// 0 before the first breakpoint and constant after the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveParts")]
pub struct CumulativeCurve {
    breakpoints: Vec<f64>,
    cumulative: Vec<f64>,
}

#[derive(Deserialize)]
struct CurveParts {
    breakpoints: Vec<f64>,
    cumulative: Vec<f64>,
}

impl TryFrom<CurveParts> for CumulativeCurve {
    type Error = SensaError;

    fn try_from(p: CurveParts) -> Result<Self> {
        Self::new(p.breakpoints, p.cumulative)
    }
}

impl CumulativeCurve {
    pub fn new(breakpoints: Vec<f64>, cumulative: Vec<f64>) -> Result<Self> {
        let ok = breakpoints.len() >= 2
            && breakpoints.len() == cumulative.len()
            && breakpoints.windows(2).all(|w| w[0] < w[1])
            && cumulative.first() == Some(&0.0)
            && cumulative.iter().all(|c| c.is_finite())
            && cumulative.windows(2).all(|w| w[0] <= w[1]);
        if !ok {
            return Err(SensaError::InvalidDensity(
                "cumulative curve must start at 0 and be nondecreasing on ascending breakpoints"
                    .into(),
            ));
        }
        Ok(Self {
            breakpoints,
            cumulative,
        })
    }

    /// CDF of the uniform distribution on `[0, 1]`.
    pub fn identity() -> Self {
        Self {
            breakpoints: vec![0.0, 1.0],
            cumulative: vec![0.0, 1.0],
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// Value at `+∞`.
    pub fn terminal(&self) -> f64 {
        self.cumulative[self.cumulative.len() - 1]
    }

    pub fn evaluate(&self, x: f64) -> f64 {
        let bp = &self.breakpoints;
        if x <= bp[0] {
            return 0.0;
        }
        if x >= bp[bp.len() - 1] {
            return self.terminal();
        }
        let q = bp.partition_point(|&b| b <= x);
        let (x0, x1) = (bp[q - 1], bp[q]);
        let (c0, c1) = (self.cumulative[q - 1], self.cumulative[q]);
        c0 + (c1 - c0) * (x - x0) / (x1 - x0)
    }

    /// Smallest `x` with `curve(x) ≥ u`, clamped to `[0, 1]`. On a flat
    /// stretch at level `u` this is the stretch's left end.
    pub fn inverse(&self, u: f64) -> f64 {
        let bp = &self.breakpoints;
        let cum = &self.cumulative;
        let q = cum.partition_point(|&c| c < u);
        let x = if q == 0 {
            bp[0]
        } else if q == cum.len() {
            bp[bp.len() - 1]
        } else if cum[q] == u {
            bp[q]
        } else {
            let (x0, x1) = (bp[q - 1], bp[q]);
            let (c0, c1) = (cum[q - 1], cum[q]);
            (x0 + (u - c0) * (x1 - x0) / (c1 - c0)).clamp(x0, x1)
        };
        x.clamp(0.0, 1.0)
    }
}

pub fn inverse_cdf(curve: &CumulativeCurve, u: f64) -> f64 {
    curve.inverse(u)
}

#[derive(Debug, Clone, Copy)]
struct Event {
    position: f64,
    /// Row index of the contributing block; orders ties deterministically.
    row: u64,
    slot: usize,
    start: bool,
}

impl Event {
    fn order(&self, other: &Self) -> Ordering {
        self.position
            .total_cmp(&other.position)
            .then(other.start.cmp(&self.start))
            .then(self.row.cmp(&other.row))
    }
}

/// Interval data of all blocks along one input dimension, with the sorted
/// endpoint list maintained as blocks are added.
///
/// Intervals depend only on `x`, so all outputs share one breakpoint set.
#[derive(Debug, Clone)]
pub struct BoxcarSet {
    dim: usize,
    n: usize,
    epsilon: f64,
    rows: Vec<u64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// `|xa − xb| + ε`
    width: Vec<f64>,
    /// `[slot * n + j] = |yA_j − yAB(i)_j|`
    dy: Vec<f64>,
    events: Vec<Event>,
}

/// Local densities of several outputs over one shared breakpoint set.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDensities {
    pub breakpoints: Vec<f64>,
    /// Per requested output, one value per segment.
    pub values: Vec<Vec<f64>>,
    /// Per requested output, terms dropped because `α < 0` and `Δy = 0`.
    pub dropped: Vec<usize>,
}

impl LocalDensities {
    pub fn density(&self, index: usize) -> Result<PiecewiseConstantDensity> {
        PiecewiseConstantDensity::new(self.breakpoints.clone(), self.values[index].clone())
    }
}

impl BoxcarSet {
    pub fn new(dim: usize, n: usize, epsilon: f64) -> Self {
        Self {
            dim,
            n,
            epsilon,
            rows: Vec::new(),
            lo: Vec::new(),
            hi: Vec::new(),
            width: Vec::new(),
            dy: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn from_blocks(blocks: &[EvaluationBlock], dim: usize, epsilon: f64) -> Result<Self> {
        let n = blocks.first().map_or(0, EvaluationBlock::n);
        let mut set = Self::new(dim, n, epsilon);
        set.extend(blocks)?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Adds blocks, merging their endpoints into the sorted event list.
    pub fn extend(&mut self, blocks: &[EvaluationBlock]) -> Result<()> {
        let mut fresh = Vec::with_capacity(2 * blocks.len());
        for block in blocks {
            if self.dim >= block.m() {
                return Err(SensaError::IndexOutOfRange {
                    index: self.dim,
                    m: block.m(),
                });
            }
            if block.n() != self.n {
                return Err(SensaError::Validation(format!(
                    "block {} has {} outputs, expected {}",
                    block.k,
                    block.n(),
                    self.n
                )));
            }
            let (xa, xb) = (block.xa[self.dim], block.xb[self.dim]);
            let half = 0.5 * self.epsilon;
            let slot = self.rows.len();
            let lo = xa.min(xb) - half;
            let hi = xa.max(xb) + half;
            self.rows.push(block.k);
            self.lo.push(lo);
            self.hi.push(hi);
            self.width.push((xa - xb).abs() + self.epsilon);
            let y_ab = &block.y_ab[self.dim];
            self.dy
                .extend(block.y_a.iter().zip(y_ab).map(|(a, b)| (a - b).abs()));
            fresh.push(Event { position: lo, row: block.k, slot, start: true });
            fresh.push(Event { position: hi, row: block.k, slot, start: false });
        }
        fresh.sort_by(Event::order);
        let old = std::mem::take(&mut self.events);
        let mut merged = Vec::with_capacity(old.len() + fresh.len());
        let (mut a, mut b) = (old.into_iter().peekable(), fresh.into_iter().peekable());
        loop {
            let take_old = match (a.peek(), b.peek()) {
                (Some(x), Some(y)) => x.order(y) != Ordering::Greater,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            merged.push(if take_old { a.next() } else { b.next() }.unwrap());
        }
        self.events = merged;
        Ok(())
    }

    /// Sorted distinct endpoints.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut bps: Vec<f64> = self.events.iter().map(|e| e.position).collect();
        bps.dedup();
        bps
    }

    /// Boxcar heights of output `j` at exponent `alpha`; `None` marks a
    /// dropped term.
    fn height(&self, slot: usize, j: usize, alpha: f64) -> Option<f64> {
        let dy = self.dy[slot * self.n + j];
        if alpha == 0.0 {
            Some(1.0 / self.width[slot])
        } else if alpha < 0.0 && dy == 0.0 {
            None
        } else {
            Some(dy.powf(alpha) / self.width[slot])
        }
    }

    /// Exact `t(x)` for the requested outputs by an endpoint sweep.
    pub fn local_densities(&self, alpha: f64, outputs: &[usize]) -> Result<LocalDensities> {
        if self.is_empty() {
            return Err(SensaError::InsufficientData("no evaluation blocks".into()));
        }
        if let Some(&j) = outputs.iter().find(|&&j| j >= self.n) {
            return Err(SensaError::IndexOutOfRange { index: j, m: self.n });
        }
        let heights: Vec<Vec<Option<f64>>> = outputs
            .iter()
            .map(|&j| (0..self.len()).map(|s| self.height(s, j, alpha)).collect())
            .collect();
        let dropped = heights
            .iter()
            .map(|h| h.iter().filter(|v| v.is_none()).count())
            .collect();

        let mut sums = vec![CompensatedSum::default(); outputs.len()];
        let mut active = vec![0usize; outputs.len()];
        let mut breakpoints = Vec::new();
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); outputs.len()];
        let mut e = 0;
        while e < self.events.len() {
            let position = self.events[e].position;
            while e < self.events.len() && self.events[e].position == position {
                let ev = self.events[e];
                for (o, h) in heights.iter().enumerate() {
                    if let Some(h) = h[ev.slot] {
                        if ev.start {
                            sums[o].add(h);
                            active[o] += 1;
                        } else {
                            sums[o].add(-h);
                            active[o] -= 1;
                            if active[o] == 0 {
                                sums[o] = CompensatedSum::default();
                            }
                        }
                    }
                }
                e += 1;
            }
            breakpoints.push(position);
            if e < self.events.len() {
                for (o, vals) in values.iter_mut().enumerate() {
                    vals.push(if active[o] == 0 { 0.0 } else { sums[o].value().max(0.0) });
                }
            }
        }
        Ok(LocalDensities {
            breakpoints,
            values,
            dropped,
        })
    }

    /// `τ̄` over `outputs`. Outputs whose `τ` is degenerate (no variation
    /// along this input) are left out of the average; if every output is
    /// degenerate the result is uniform on `[0, 1]`.
    pub fn average_density(&self, alpha: f64, outputs: &[usize]) -> Result<AveragedDensity> {
        let weighted = self.local_densities(alpha, outputs)?;
        let sampling = self.local_densities(0.0, &[0])?;
        let t_zero = sampling.density(0)?;
        let mut taus = Vec::with_capacity(outputs.len());
        let mut degenerate = Vec::new();
        for (o, &j) in outputs.iter().enumerate() {
            match sensitivity_density(&weighted.density(o)?, &t_zero) {
                Ok(tau) => taus.push(tau),
                Err(SensaError::DegenerateDensity(_)) => degenerate.push(j),
                Err(e) => return Err(e),
            }
        }
        let density = if taus.is_empty() {
            PiecewiseConstantDensity::uniform(0.0, 1.0)
        } else {
            average_density(&taus)?
        };
        Ok(AveragedDensity {
            density,
            degenerate_outputs: degenerate,
            dropped_terms: weighted.dropped.iter().sum(),
        })
    }

    /// Density the next batch samples from: `τ̄` with every part of
    /// `[0, 1]` that no boxcar covers filled at the mean level of `τ̄` over
    /// the covered part, then renormalized. At `α = 0` this is uniform on
    /// the whole unit interval.
    pub fn sampling_density(&self, alpha: f64, outputs: &[usize]) -> Result<AveragedDensity> {
        let mut averaged = self.average_density(alpha, outputs)?;
        if averaged.degenerate_outputs.len() == outputs.len() {
            return Ok(averaged);
        }
        let coverage = self.local_densities(0.0, &[0])?;
        averaged.density = fill_unit_gaps(&averaged.density, &coverage.breakpoints, &coverage.values[0])?;
        Ok(averaged)
    }
}

fn fill_unit_gaps(
    taubar: &PiecewiseConstantDensity,
    breakpoints: &[f64],
    t_zero: &[f64],
) -> Result<PiecewiseConstantDensity> {
    let mut covered = CompensatedSum::default();
    for (w, &z) in breakpoints.windows(2).zip(t_zero) {
        if z > 0.0 {
            covered.add(w[1] - w[0]);
        }
    }
    let fill = 1.0 / covered.value();
    let mut bps: Vec<f64> = breakpoints.iter().copied().chain([0.0, 1.0]).collect();
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    let values = bps
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            let seg = breakpoints.partition_point(|&b| b <= mid);
            let is_covered = seg > 0 && seg < breakpoints.len() && t_zero[seg - 1] > 0.0;
            if is_covered {
                taubar.value_at(mid)
            } else if (0.0..=1.0).contains(&mid) {
                fill
            } else {
                0.0
            }
        })
        .collect();
    PiecewiseConstantDensity::new(bps, values)?.normalized()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedDensity {
    pub density: PiecewiseConstantDensity,
    /// Outputs (0-based) excluded because their `τ` had no mass.
    pub degenerate_outputs: Vec<usize>,
    pub dropped_terms: usize,
}

/// `t_ij` for one input/output pair, with the number of dropped terms.
pub fn boxcar_contributions(
    blocks: &[EvaluationBlock],
    i: usize,
    j: usize,
    params: AlphaEpsilon,
) -> Result<(PiecewiseConstantDensity, usize)> {
    let set = BoxcarSet::from_blocks(blocks, i, params.epsilon)?;
    let local = set.local_densities(params.alpha, &[j])?;
    Ok((local.density(0)?, local.dropped[0]))
}

/// `T_ij(x) = ∫_{−∞}^x t / (2N·V̂_j)`; `None` when `V̂_j = 0`.
pub fn cumulative_local(
    t: &PiecewiseConstantDensity,
    variance: f64,
    samples: usize,
) -> Option<CumulativeCurve> {
    if !(variance > 0.0) || samples == 0 {
        return None;
    }
    let scale = 1.0 / (2.0 * samples as f64 * variance);
    Some(integrate(t, scale))
}

fn integrate(t: &PiecewiseConstantDensity, scale: f64) -> CumulativeCurve {
    let mut acc = CompensatedSum::default();
    let mut cumulative = Vec::with_capacity(t.breakpoints.len());
    cumulative.push(0.0);
    for (w, v) in t.breakpoints.windows(2).zip(&t.values) {
        acc.add(v * (w[1] - w[0]));
        cumulative.push(acc.value() * scale);
    }
    // Compensation can in principle make adjacent values disagree in the
    // last bit; keep the curve monotone.
    for q in 1..cumulative.len() {
        if cumulative[q] < cumulative[q - 1] {
            cumulative[q] = cumulative[q - 1];
        }
    }
    CumulativeCurve {
        breakpoints: t.breakpoints.clone(),
        cumulative,
    }
}

/// `τ = (t_α / t_0)` normalized to unit integral, 0 where `t_0 = 0`.
pub fn sensitivity_density(
    t_alpha: &PiecewiseConstantDensity,
    t_zero: &PiecewiseConstantDensity,
) -> Result<PiecewiseConstantDensity> {
    if t_alpha.breakpoints != t_zero.breakpoints {
        return Err(SensaError::Validation(
            "densities must share breakpoints".into(),
        ));
    }
    let ratio = t_alpha
        .values
        .iter()
        .zip(&t_zero.values)
        .map(|(&a, &z)| if z > 0.0 { a / z } else { 0.0 })
        .collect();
    PiecewiseConstantDensity {
        breakpoints: t_alpha.breakpoints.clone(),
        values: ratio,
    }
    .normalized()
}

/// Pointwise mean on the merged breakpoint set.
pub fn average_density(taus: &[PiecewiseConstantDensity]) -> Result<PiecewiseConstantDensity> {
    if taus.is_empty() {
        return Err(SensaError::InsufficientData("no densities to average".into()));
    }
    if taus.len() == 1 {
        return Ok(taus[0].clone());
    }
    let mut bps: Vec<f64> = taus.iter().flat_map(|t| t.breakpoints.iter().copied()).collect();
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    let scale = 1.0 / taus.len() as f64;
    let mut cursors = vec![0usize; taus.len()];
    let values = bps
        .windows(2)
        .map(|w| {
            let mut s = CompensatedSum::default();
            for (tau, c) in taus.iter().zip(cursors.iter_mut()) {
                let tb = &tau.breakpoints;
                while *c + 1 < tb.len() && tb[*c + 1] <= w[0] {
                    *c += 1;
                }
                if tb[*c] <= w[0] && *c + 1 < tb.len() {
                    s.add(tau.values[*c]);
                }
            }
            s.value() * scale
        })
        .collect();
    PiecewiseConstantDensity::new(bps, values)
}

/// `T̄(x) = ∫_{−∞}^x τ̄`, rescaled so the terminal value is exactly 1.
pub fn cumulative_density(taubar: &PiecewiseConstantDensity) -> CumulativeCurve {
    let mut curve = integrate(taubar, 1.0);
    let total = curve.terminal();
    if total > 0.0 {
        for c in &mut curve.cumulative {
            *c /= total;
        }
        let last = curve.cumulative.len() - 1;
        curve.cumulative[last] = 1.0;
    }
    curve
}

/// JSON payload for a density along one input (1-based `dimension`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityExport {
    pub dimension: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl DensityExport {
    pub fn new(dim: usize, params: AlphaEpsilon, density: &PiecewiseConstantDensity) -> Self {
        Self {
            dimension: dim + 1,
            alpha: params.alpha,
            epsilon: params.epsilon,
            breakpoints: density.breakpoints.clone(),
            values: density.values.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn one_block(xa: f64, xb: f64, ya: f64, yab: f64) -> EvaluationBlock {
        EvaluationBlock {
            k: 1,
            batch: 1,
            xa: vec![xa],
            xb: vec![xb],
            y_a: vec![ya],
            y_b: vec![0.0],
            y_ab: vec![vec![yab]],
        }
    }

    #[test]
    fn single_boxcar_height() {
        let params = AlphaEpsilon::new(2.0, 1e-12).unwrap();
        let (t, dropped) = boxcar_contributions(&[one_block(0.2, 0.6, 2.0, 0.0)], 0, 0, params).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(t.values().len(), 1);
        assert_relative_eq!(t.values()[0], 10.0, max_relative = 1e-9);
        assert_relative_eq!(t.breakpoints()[0], 0.2, epsilon = 1e-12);
        assert_relative_eq!(t.breakpoints()[1], 0.6, epsilon = 1e-12);
        assert_eq!(t.value_at(0.1), 0.0);
        assert_eq!(t.value_at(0.7), 0.0);
    }

    #[test]
    fn zero_alpha_heights_ignore_outputs() {
        let blocks: Vec<EvaluationBlock> = (0..5)
            .map(|k| {
                let mut b = one_block(0.1 * k as f64, 0.9 - 0.05 * k as f64, k as f64, 0.0);
                b.k = k + 1;
                b
            })
            .collect();
        let params = AlphaEpsilon::new(0.0, 1e-4).unwrap();
        let (t, _) = boxcar_contributions(&blocks, 0, 0, params).unwrap();
        assert_relative_eq!(t.integral(), 5.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_difference_contributes_nothing() {
        let (t, dropped) =
            boxcar_contributions(&[one_block(0.2, 0.6, 1.0, 1.0)], 0, 0, AlphaEpsilon::default())
                .unwrap();
        assert_eq!(dropped, 0);
        assert!(t.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_alpha_drops_zero_differences() {
        let mut b2 = one_block(0.3, 0.5, 2.0, 0.0);
        b2.k = 2;
        let blocks = [one_block(0.2, 0.6, 1.0, 1.0), b2];
        let params = AlphaEpsilon::new(-1.0, 1e-4).unwrap();
        let (t, dropped) = boxcar_contributions(&blocks, 0, 0, params).unwrap();
        assert_eq!(dropped, 1);
        assert_relative_eq!(t.integral(), 0.5, max_relative = 1e-12);
        // Breakpoints still include the dropped interval.
        assert_eq!(t.breakpoints().len(), 4);
    }

    #[test]
    fn cumulative_of_single_boxcar() {
        let params = AlphaEpsilon::new(2.0, 1e-12).unwrap();
        let (t, _) = boxcar_contributions(&[one_block(0.2, 0.6, 2.0, 0.0)], 0, 0, params).unwrap();
        let curve = cumulative_local(&t, 2.0, 1).unwrap();
        assert_eq!(curve.evaluate(0.0), 0.0);
        assert_relative_eq!(curve.evaluate(0.6), 1.0, max_relative = 1e-9);
        assert_relative_eq!(curve.evaluate(0.4), 0.5, max_relative = 1e-9);
        assert!(cumulative_local(&t, 0.0, 1).is_none());
    }

    #[test]
    fn single_observation_density_is_uniform_on_its_interval() {
        let params = AlphaEpsilon::new(2.0, 1e-4).unwrap();
        let blocks = [one_block(0.2, 0.6, 3.0, 0.5)];
        let (ta, _) = boxcar_contributions(&blocks, 0, 0, params).unwrap();
        let (t0, _) = boxcar_contributions(&blocks, 0, 0, AlphaEpsilon { alpha: 0.0, ..params }).unwrap();
        let tau = sensitivity_density(&ta, &t0).unwrap();
        assert_eq!(tau.values().len(), 1);
        assert_relative_eq!(tau.values()[0], 1.0 / (0.4 + 1e-4), max_relative = 1e-12);
        assert_relative_eq!(tau.integral(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_alpha_density_is_uniform_on_support() {
        let blocks: Vec<EvaluationBlock> = [(0.1, 0.3), (0.2, 0.5), (0.7, 0.9)]
            .iter()
            .zip(1..)
            .map(|(&(a, b), k)| {
                let mut bl = one_block(a, b, k as f64, 0.0);
                bl.k = k;
                bl
            })
            .collect();
        let set = BoxcarSet::from_blocks(&blocks, 0, 1e-4).unwrap();
        let t0 = set.local_densities(0.0, &[0]).unwrap().density(0).unwrap();
        let tau = sensitivity_density(&t0, &t0).unwrap();
        let support = (0.4 + 1e-4) + (0.2 + 1e-4);
        for (w, v) in tau.breakpoints().windows(2).zip(tau.values()) {
            let mid = 0.5 * (w[0] + w[1]);
            if (0.5 + 5e-5..0.7 - 5e-5).contains(&mid) {
                assert_eq!(*v, 0.0);
            } else {
                assert_relative_eq!(*v, 1.0 / support, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn sampling_density_fills_unobserved_range() {
        let blocks = vec![one_block(0.4, 0.5, 1.0, 0.0), one_block(0.45, 0.6, 2.0, 2.0)];
        let set = BoxcarSet::from_blocks(&blocks, 0, 1e-4).unwrap();

        let flat = set.sampling_density(0.0, &[0]).unwrap().density;
        assert_relative_eq!(flat.integral(), 1.0, epsilon = 1e-12);
        for x in [0.05, 0.3, 0.42, 0.55, 0.95] {
            assert_relative_eq!(flat.value_at(x), flat.value_at(0.05), max_relative = 1e-12);
        }

        // Where the second row has Δy = 0 but the first row is absent, the
        // observed density is zero and stays zero.
        let weighted = set.sampling_density(2.0, &[0]).unwrap().density;
        assert_eq!(weighted.value_at(0.55), 0.0);
        assert!(weighted.value_at(0.45) > weighted.value_at(0.2));
        assert!(weighted.value_at(0.2) > 0.0);
        assert_relative_eq!(weighted.integral(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_density() {
        let z = PiecewiseConstantDensity::new(vec![0.0, 1.0], vec![0.0]).unwrap();
        assert!(matches!(
            sensitivity_density(&z, &z),
            Err(SensaError::DegenerateDensity(_))
        ));
    }

    #[test]
    fn average_of_complementary_halves() {
        let a = PiecewiseConstantDensity::uniform(0.0, 0.5);
        let b = PiecewiseConstantDensity::uniform(0.5, 1.0);
        let avg = average_density(&[a.clone(), b]).unwrap();
        assert_eq!(avg.breakpoints(), &[0.0, 0.5, 1.0]);
        assert_eq!(avg.values(), &[1.0, 1.0]);
        assert_eq!(average_density(&[a.clone()]).unwrap(), a);
        assert_eq!(average_density(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        assert!(average_density(&[]).is_err());
    }

    #[test]
    fn cumulative_density_examples() {
        let id = cumulative_density(&PiecewiseConstantDensity::uniform(0.0, 1.0));
        assert_eq!(id, CumulativeCurve::identity());
        let upper = cumulative_density(&PiecewiseConstantDensity::new(vec![0.5, 1.0], vec![2.0]).unwrap());
        assert_eq!(upper.evaluate(0.5), 0.0);
        assert_eq!(upper.evaluate(0.75), 0.5);
        assert_eq!(upper.evaluate(1.0), 1.0);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(inverse_cdf(&CumulativeCurve::identity(), 0.3), 0.3);
        let upper = CumulativeCurve::new(vec![0.5, 1.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(inverse_cdf(&upper, 0.5), 0.75);
        // Zero density on (0.4, 0.6).
        let d = PiecewiseConstantDensity::new(vec![0.0, 0.4, 0.6, 1.0], vec![1.25, 0.0, 1.25]).unwrap();
        let curve = cumulative_density(&d);
        let c = curve.evaluate(0.5);
        assert_relative_eq!(c, 0.5, max_relative = 1e-12);
        assert_eq!(inverse_cdf(&curve, c), 0.4);
    }

    #[test]
    fn inverse_clamps_to_unit_interval() {
        let d = PiecewiseConstantDensity::new(vec![-0.1, 1.1], vec![1.0 / 1.2]).unwrap();
        let curve = cumulative_density(&d);
        assert_eq!(curve.inverse(0.0), 0.0);
        assert_eq!(curve.inverse(1.0), 1.0);
    }

    #[test]
    fn invalid_densities_rejected() {
        assert!(PiecewiseConstantDensity::new(vec![0.0, 1.0], vec![-1.0]).is_err());
        assert!(PiecewiseConstantDensity::new(vec![0.0, 0.0], vec![1.0]).is_err());
        assert!(PiecewiseConstantDensity::new(vec![0.0, 1.0, 2.0], vec![1.0]).is_err());
        assert!(serde_json::from_str::<PiecewiseConstantDensity>(
            r#"{"breakpoints":[0,1],"values":[-2]}"#
        )
        .is_err());
    }

    #[test]
    fn clipping() {
        let d = PiecewiseConstantDensity::new(vec![-0.5, 0.5, 1.5], vec![1.0, 3.0]).unwrap();
        let c = d.clipped(0.0, 1.0).unwrap();
        assert_eq!(c.breakpoints(), &[0.0, 0.5, 1.0]);
        assert_eq!(c.values(), &[1.0, 3.0]);
    }

    fn random_blocks(raw: &[(f64, f64, f64, f64)]) -> Vec<EvaluationBlock> {
        raw.iter()
            .zip(1..)
            .map(|(&(xa, xb, ya, yab), k)| EvaluationBlock {
                k,
                batch: 1,
                xa: vec![xa, 0.5],
                xb: vec![xb, 0.5],
                y_a: vec![ya, 1.0],
                y_b: vec![0.3, 1.0],
                y_ab: vec![vec![yab, 1.0], vec![ya, 1.0]],
            })
            .collect()
    }

    fn block_strategy() -> impl Strategy<Value = Vec<(f64, f64, f64, f64)>> {
        prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64, -3.0..3.0f64, -3.0..3.0f64), 1..60)
    }

    proptest! {
        #[test]
        fn boxcars_integrate_to_numerators(raw in block_strategy(), alpha in -2.0..4.0f64) {
            let blocks = random_blocks(&raw);
            let (t, _) = boxcar_contributions(&blocks, 0, 0, AlphaEpsilon::new(alpha, 1e-4).unwrap()).unwrap();
            let expected: f64 = raw.iter()
                .map(|&(_, _, ya, yab)| (ya - yab).abs())
                .filter(|&d| !(alpha < 0.0 && d == 0.0))
                .map(|d| if alpha == 0.0 { 1.0 } else { d.powf(alpha) })
                .sum();
            prop_assert!((t.integral() - expected).abs() <= 1e-9 * expected.abs().max(1e-300));
            prop_assert!(t.breakpoints().len() <= 2 * raw.len() + 2);
        }

        #[test]
        fn densities_normalize_and_curves_are_monotone(raw in block_strategy(), alpha in -1.0..3.0f64) {
            let blocks = random_blocks(&raw);
            let set = BoxcarSet::from_blocks(&blocks, 0, 1e-4).unwrap();
            let avg = set.average_density(alpha, &[0, 1]).unwrap();
            prop_assert!((avg.density.integral() - 1.0).abs() < 1e-9);
            let curve = cumulative_density(&avg.density);
            prop_assert!(curve.cumulative().windows(2).all(|w| w[0] <= w[1]));
            prop_assert!((curve.terminal() - 1.0).abs() <= 1e-12);
            // Output 1 is constant, so it is excluded from the average.
            prop_assert_eq!(avg.degenerate_outputs, vec![1]);
        }

        #[test]
        fn inverse_round_trip(raw in block_strategy()) {
            let blocks = random_blocks(&raw);
            let set = BoxcarSet::from_blocks(&blocks, 0, 1e-4).unwrap();
            let avg = set.average_density(2.0, &[0]).unwrap();
            let curve = cumulative_density(&avg.density);
            let lo = curve.breakpoints()[0];
            let hi = *curve.breakpoints().last().unwrap();
            for q in 1..100 {
                let u = q as f64 / 100.0;
                let x = curve.inverse(u);
                // Clamping to [0, 1] only moves points off the ε-margins.
                if x > 0.0 && x < 1.0 && x > lo && x < hi {
                    prop_assert!((curve.evaluate(x) - u).abs() < 1e-9, "u={} x={} T(x)={}", u, x, curve.evaluate(x));
                }
            }
        }

        #[test]
        fn insertion_grouping_does_not_matter(raw in block_strategy(), split in 0usize..60) {
            let blocks = random_blocks(&raw);
            let split = split.min(blocks.len());
            let whole = BoxcarSet::from_blocks(&blocks, 0, 1e-4).unwrap();
            let mut parts = BoxcarSet::new(0, 2, 1e-4);
            parts.extend(&blocks[split..]).unwrap();
            parts.extend(&blocks[..split]).unwrap();
            prop_assert_eq!(
                whole.local_densities(2.0, &[0]).unwrap(),
                parts.local_densities(2.0, &[0]).unwrap()
            );
        }

        #[test]
        fn terminal_value_recovers_total(raw in block_strategy()) {
            let blocks = random_blocks(&raw);
            let idx = crate::estimators::estimate_indices(&blocks).unwrap();
            prop_assume!(idx.variance[0] > 0.0);
            let (t, _) = boxcar_contributions(&blocks, 0, 0, AlphaEpsilon::new(2.0, 1e-4).unwrap()).unwrap();
            let curve = cumulative_local(&t, idx.variance[0], blocks.len()).unwrap();
            let total = idx.total[0][0];
            prop_assert!((curve.terminal() - total).abs() <= 1e-9 * total.abs().max(1e-300));
        }
    }
}
