//! File formats written by the CLI.

use std::io::Write;

use serde::{Deserialize, Serialize};

use sensa_core::regional::{AlphaEpsilon, CumulativeCurve, PiecewiseConstantDensity};
use sensa_core::uncertainty::PercentileBand;
use sensa_core::SensitivityIndices;

/// `output,input,S,T,V,biased`, one row per `(j, i)`, 1-based, with
/// 17 significant digits so values re-parse exactly.
pub fn write_indices_csv<W: Write>(indices: &SensitivityIndices, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["output", "input", "S", "T", "V", "biased"])?;
    for j in 0..indices.n {
        for i in 0..indices.m {
            w.write_record([
                (j + 1).to_string(),
                (i + 1).to_string(),
                format!("{:.16e}", indices.first_order[i][j]),
                format!("{:.16e}", indices.total[i][j]),
                format!("{:.16e}", indices.variance[j]),
                indices.biased_by_adaptive_sampling.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub output: usize,
    pub input: usize,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "V")]
    pub v: f64,
    pub biased: bool,
}

pub fn read_indices_csv<R: std::io::Read>(input: R) -> csv::Result<Vec<IndexRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Density of one input (1-based `dimension` and `output`; no `output`
/// means the averaged sampling density).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityPayload {
    pub dimension: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<usize>,
    pub alpha: f64,
    pub epsilon: f64,
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl DensityPayload {
    pub fn new(i: usize, output: Option<usize>, params: AlphaEpsilon, d: &PiecewiseConstantDensity) -> Self {
        Self {
            dimension: i + 1,
            output: output.map(|j| j + 1),
            alpha: params.alpha,
            epsilon: params.epsilon,
            breakpoints: d.breakpoints().to_vec(),
            values: d.values().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePayload {
    pub dimension: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<usize>,
    pub breakpoints: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl CurvePayload {
    pub fn new(i: usize, output: Option<usize>, c: &CumulativeCurve) -> Self {
        Self {
            dimension: i + 1,
            output: output.map(|j| j + 1),
            breakpoints: c.breakpoints().to_vec(),
            cumulative: c.cumulative().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityExport {
    pub density: DensityPayload,
    pub cumulative: CurvePayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapExport {
    pub dimension: usize,
    pub output: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub replicates: usize,
    pub seed: u64,
    pub point: CurvePayload,
    /// One entry per replicate; `null` when the replicate has zero variance.
    pub curves: Vec<Option<CurvePayload>>,
    pub band: Option<PercentileBand>,
    /// Fraction of the band grid where the point estimate lies in the band.
    pub coverage: Option<f64>,
}
