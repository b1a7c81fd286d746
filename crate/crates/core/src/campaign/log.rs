//! JSON Lines evaluation log: one record per evaluation request.
//!
//! ```text
//! {"k":12,"tag":"AB:2","x":[0.4,13.5],"y":[1.25],"batch":3}
//! ```
//!
//! `x` is in physical units; `batch` is 0 for rows that were ingested rather
//! than produced by a batch of this campaign.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CampaignConfig;
use crate::design::MatrixTag;
use crate::error::SensaError;
use crate::estimators::EvaluationBlock;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub k: u64,
    pub tag: MatrixTag,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub batch: u64,
}

/// Records of `block` in canonical order `A, B, AB:1..AB:m`.
pub fn block_records(block: &EvaluationBlock, config: &CampaignConfig) -> Vec<LogRecord> {
    let m = block.m();
    let mut out = Vec::with_capacity(m + 2);
    let rec = |tag, u: &[f64], y: &[f64]| LogRecord {
        k: block.k,
        tag,
        x: config.to_physical(u),
        y: y.to_vec(),
        batch: block.batch,
    };
    out.push(rec(MatrixTag::A, &block.xa, &block.y_a));
    out.push(rec(MatrixTag::B, &block.xb, &block.y_b));
    for i in 0..m {
        let mut x = block.xa.clone();
        x[i] = block.xb[i];
        out.push(rec(MatrixTag::AB(i), &x, &block.y_ab[i]));
    }
    out
}

pub fn write_jsonl(blocks: &[EvaluationBlock], config: &CampaignConfig) -> String {
    let mut s = String::new();
    for b in blocks {
        for r in block_records(b, config) {
            s.push_str(&serde_json::to_string(&r).expect("serializable"));
            s.push('\n');
        }
    }
    s
}

pub fn parse_jsonl(text: &str) -> Result<Vec<LogRecord>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for (lineno, line) in text.split_inclusive('\n').enumerate() {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let rec = serde_json::from_str(trimmed).map_err(|e| SensaError::Parse {
                line: lineno + 1,
                column: e.column(),
                offset: offset + e.column().saturating_sub(1),
                message: e.to_string(),
            })?;
            out.push(rec);
        }
        offset += line.len();
    }
    Ok(out)
}

const HYBRID_TOLERANCE: f64 = 1e-9;

/// Groups records into complete blocks (inputs mapped back to `[0, 1]`).
pub fn records_to_blocks(records: &[LogRecord], config: &CampaignConfig) -> Result<Vec<EvaluationBlock>> {
    let (m, n) = (config.m, config.n);
    let mut rows: BTreeMap<u64, BTreeMap<MatrixTag, &LogRecord>> = BTreeMap::new();
    for r in records {
        if r.x.len() != m || r.y.len() != n {
            return Err(SensaError::Ingest(format!(
                "record k={} {} has |x|={}, |y|={}; expected m={m}, n={n}",
                r.k,
                r.tag,
                r.x.len(),
                r.y.len()
            )));
        }
        if matches!(r.tag, MatrixTag::AB(i) if i >= m) {
            return Err(SensaError::Ingest(format!("record k={} has tag {} but m={m}", r.k, r.tag)));
        }
        if rows.entry(r.k).or_default().insert(r.tag, r).is_some() {
            return Err(SensaError::Ingest(format!("duplicate record k={} {}", r.k, r.tag)));
        }
    }
    rows.into_iter()
        .map(|(k, tags)| {
            if tags.len() != m + 2 {
                return Err(SensaError::Ingest(format!(
                    "row k={k} has {} of {} records",
                    tags.len(),
                    m + 2
                )));
            }
            let a = tags[&MatrixTag::A];
            let b = tags[&MatrixTag::B];
            let xa = config.to_unit(&a.x);
            let xb = config.to_unit(&b.x);
            let mut y_ab = Vec::with_capacity(m);
            for i in 0..m {
                let r = tags[&MatrixTag::AB(i)];
                let u = config.to_unit(&r.x);
                let consistent = u.iter().enumerate().all(|(q, &v)| {
                    let expected = if q == i { xb[q] } else { xa[q] };
                    (v - expected).abs() <= HYBRID_TOLERANCE
                });
                if !consistent {
                    return Err(SensaError::Ingest(format!(
                        "row k={k}: AB:{} inputs are not A with coordinate {} from B",
                        i + 1,
                        i + 1
                    )));
                }
                y_ab.push(r.y.clone());
            }
            let block = EvaluationBlock {
                k,
                batch: a.batch,
                xa,
                xb,
                y_a: a.y.clone(),
                y_b: b.y.clone(),
                y_ab,
            };
            block
                .validate(m, n)
                .map_err(|e| SensaError::Ingest(e.to_string()))?;
            Ok(block)
        })
        .collect()
}
