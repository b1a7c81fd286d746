//! Adaptive campaign state machine.
//!
//! A campaign alternates between `Idle` and `RunningBatch`. Each batch draws
//! the next `M` points of the `2m`-dimensional Sobol' stream, maps every
//! coordinate through the current sampling CDF of its input, evaluates the
//! `M(m + 2)` design requests and appends the resulting blocks. Accumulators
//! for the indices and the per-input boxcar data are updated incrementally.
//!
//! Steering commands are queued and take effect when the next batch starts.
//! A batch is split into [`CampaignState::begin_batch`] and
//! [`CampaignState::commit_batch`] so the evaluation can run without holding
//! the state.

mod config;
pub mod log;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use config::CampaignConfig;

use crate::design::{build_design_rows, evaluation_plan, transform_points, DesignRow, EvaluationRequest};
use crate::error::SensaError;
use crate::estimators::{EvaluationBlock, IndexAccumulator, SensitivityIndices};
use crate::model::Evaluator;
use crate::regional::{
    cumulative_density, cumulative_local, sensitivity_density, AlphaEpsilon, BoxcarSet, CumulativeCurve,
    PiecewiseConstantDensity,
};
use crate::sobol::SobolStream;
use crate::Result;

pub const STATE_SCHEMA: &str = "sensa-state/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CampaignStatus {
    Idle,
    RunningBatch,
    Paused,
    Done,
}

/// Queued operator command; `dim` is 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum SteeringCommand {
    SetAlpha { value: f64 },
    Override { dim: usize, density: PiecewiseConstantDensity },
    ClearOverride { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    /// 1-based batch number.
    pub number: u64,
    pub alpha: f64,
    /// True when every input was sampled through the identity transform.
    pub uniform: bool,
    pub first_k: u64,
    pub rows: usize,
}

/// A batch that has been drawn but not yet committed.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub number: u64,
    pub alpha: f64,
    pub uniform: bool,
    pub rows: Vec<DesignRow>,
    /// Requests in canonical order, with `x` in physical units.
    pub requests: Vec<EvaluationRequest>,
    stream: SobolStream,
    overrides: BTreeMap<usize, PiecewiseConstantDensity>,
    consumed: usize,
}

impl BatchPlan {
    /// Names the failing request of an `EvaluationFailed` error.
    pub fn attribute(&self, error: SensaError) -> SensaError {
        match error {
            SensaError::EvaluationFailed { index, source } if index < self.requests.len() => {
                let r = &self.requests[index];
                SensaError::BatchFailed {
                    k: r.k,
                    tag: r.tag.to_string(),
                    source,
                }
            }
            other => other,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Snapshot {
    schema: String,
    config: CampaignConfig,
    sobol: SobolStream,
    alpha: f64,
    status: CampaignStatus,
    version: u64,
    #[serde(default)]
    pause_requested: bool,
    updated_unix_ms: u64,
    batches: Vec<BatchRecord>,
    overrides: BTreeMap<usize, PiecewiseConstantDensity>,
    pending: VecDeque<SteeringCommand>,
    blocks: Vec<EvaluationBlock>,
}

#[derive(Debug, Clone)]
pub struct CampaignState {
    config: CampaignConfig,
    sobol: SobolStream,
    alpha: f64,
    status: CampaignStatus,
    version: u64,
    pause_requested: bool,
    updated_unix_ms: u64,
    batches: Vec<BatchRecord>,
    overrides: BTreeMap<usize, PiecewiseConstantDensity>,
    pending: VecDeque<SteeringCommand>,
    blocks: Vec<EvaluationBlock>,
    row_ids: BTreeSet<u64>,
    accumulator: IndexAccumulator,
    boxcars: Vec<BoxcarSet>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn validate_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() {
        Ok(())
    } else {
        Err(SensaError::Validation(format!("alpha must be finite, got {alpha}")))
    }
}

impl CampaignState {
    /// Validates the config (probing an external evaluator) and returns an
    /// idle campaign with no observations.
    pub fn new(config: CampaignConfig) -> Result<Self> {
        config.validate()?;
        if let crate::model::EvaluatorSpec::External(spec) = &config.evaluator {
            crate::model::ExternalEvaluator::probe(spec)?;
        }
        Self::from_parts(config, None)
    }

    fn from_parts(config: CampaignConfig, snapshot: Option<Snapshot>) -> Result<Self> {
        let (m, n) = (config.m, config.n);
        let mut state = Self {
            sobol: SobolStream::new(2 * m)?,
            alpha: config.alpha,
            status: CampaignStatus::Idle,
            version: 1,
            pause_requested: false,
            updated_unix_ms: now_ms(),
            batches: Vec::new(),
            overrides: BTreeMap::new(),
            pending: VecDeque::new(),
            blocks: Vec::new(),
            row_ids: BTreeSet::new(),
            accumulator: IndexAccumulator::new(m, n),
            boxcars: (0..m).map(|i| BoxcarSet::new(i, n, config.epsilon)).collect(),
            config,
        };
        if let Some(s) = snapshot {
            if s.sobol.dimension() != 2 * m {
                return Err(SensaError::Validation(format!(
                    "Sobol' cursor has dimension {}, expected {}",
                    s.sobol.dimension(),
                    2 * m
                )));
            }
            state.sobol = s.sobol;
            state.alpha = s.alpha;
            state.status = match s.status {
                // The in-flight batch of a crashed run is lost.
                CampaignStatus::RunningBatch => CampaignStatus::Idle,
                other => other,
            };
            state.version = s.version;
            state.pause_requested = s.pause_requested;
            state.updated_unix_ms = s.updated_unix_ms;
            state.batches = s.batches;
            state.overrides = s.overrides;
            state.pending = s.pending;
            state.append_blocks(s.blocks)?;
        }
        Ok(state)
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.config
    }

    pub fn status(&self) -> CampaignStatus {
        self.status
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn params(&self) -> AlphaEpsilon {
        AlphaEpsilon {
            alpha: self.alpha,
            epsilon: self.config.epsilon,
        }
    }

    pub fn updated_unix_ms(&self) -> u64 {
        self.updated_unix_ms
    }

    pub fn batches(&self) -> &[BatchRecord] {
        &self.batches
    }

    /// `α` of every completed batch, in order.
    pub fn alpha_history(&self) -> Vec<f64> {
        self.batches.iter().map(|b| b.alpha).collect()
    }

    pub fn blocks(&self) -> &[EvaluationBlock] {
        &self.blocks
    }

    pub fn pending(&self) -> &VecDeque<SteeringCommand> {
        &self.pending
    }

    pub fn overrides(&self) -> &BTreeMap<usize, PiecewiseConstantDensity> {
        &self.overrides
    }

    pub fn sobol(&self) -> &SobolStream {
        &self.sobol
    }

    pub fn ingested_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.batch == 0).count()
    }

    /// Model evaluations represented by the log.
    pub fn evaluation_count(&self) -> usize {
        self.blocks.len() * (self.config.m + 2)
    }

    pub fn is_pause_requested(&self) -> bool {
        self.pause_requested
    }

    fn bump(&mut self) {
        self.version += 1;
        self.updated_unix_ms = now_ms();
    }

    /// Refreshes the timestamp without changing anything else.
    pub fn touch(&mut self) {
        self.updated_unix_ms = now_ms();
    }

    fn check_dim(&self, i: usize) -> Result<()> {
        if i < self.config.m {
            Ok(())
        } else {
            Err(SensaError::IndexOutOfRange {
                index: i,
                m: self.config.m,
            })
        }
    }

    fn check_output(&self, j: usize) -> Result<()> {
        if j < self.config.n {
            Ok(())
        } else {
            Err(SensaError::IndexOutOfRange {
                index: j,
                m: self.config.n,
            })
        }
    }

    fn enqueue(&mut self, command: SteeringCommand) -> usize {
        self.pending.push_back(command);
        self.bump();
        self.pending.len()
    }

    /// Queues a new `α`; returns the 1-based queue position.
    pub fn set_alpha(&mut self, alpha: f64) -> Result<usize> {
        validate_alpha(alpha)?;
        Ok(self.enqueue(SteeringCommand::SetAlpha { value: alpha }))
    }

    /// Queues a sampling density for input `i`. The density is restricted
    /// to `[0, 1]` and normalized.
    pub fn override_density(&mut self, i: usize, density: PiecewiseConstantDensity) -> Result<usize> {
        self.check_dim(i)?;
        let density = density
            .clipped(0.0, 1.0)
            .and_then(|d| d.normalized())
            .map_err(|e| SensaError::Validation(e.to_string()))?;
        Ok(self.enqueue(SteeringCommand::Override { dim: i, density }))
    }

    pub fn clear_override(&mut self, i: usize) -> Result<usize> {
        self.check_dim(i)?;
        Ok(self.enqueue(SteeringCommand::ClearOverride { dim: i }))
    }

    /// Pauses now, or after the running batch commits.
    pub fn pause(&mut self) {
        match self.status {
            CampaignStatus::Idle => self.status = CampaignStatus::Paused,
            CampaignStatus::RunningBatch => self.pause_requested = true,
            CampaignStatus::Paused | CampaignStatus::Done => {}
        }
        self.bump();
    }

    pub fn resume(&mut self) {
        self.pause_requested = false;
        if self.status == CampaignStatus::Paused {
            self.status = CampaignStatus::Idle;
        }
        self.bump();
    }

    /// Sampling curve of input `i` given `α` and the override table.
    fn sampling_curve(
        &self,
        i: usize,
        alpha: f64,
        overrides: &BTreeMap<usize, PiecewiseConstantDensity>,
    ) -> Result<CumulativeCurve> {
        if let Some(d) = overrides.get(&i) {
            return Ok(cumulative_density(d));
        }
        if self.blocks.is_empty() {
            return Ok(CumulativeCurve::identity());
        }
        let averaged = self.boxcars[i].sampling_density(alpha, &self.config.outputs())?;
        Ok(cumulative_density(&averaged.density))
    }

    /// Applies the queued commands (without committing them), freezes the
    /// sampling curves and draws the next batch.
    pub fn begin_batch(&mut self) -> Result<BatchPlan> {
        match self.status {
            CampaignStatus::RunningBatch => return Err(SensaError::ConcurrentRun),
            CampaignStatus::Done => return Err(SensaError::CampaignDone),
            CampaignStatus::Idle | CampaignStatus::Paused => {}
        }
        let mut alpha = self.alpha;
        let mut overrides = self.overrides.clone();
        for command in &self.pending {
            match command {
                SteeringCommand::SetAlpha { value } => alpha = *value,
                SteeringCommand::Override { dim, density } => {
                    overrides.insert(*dim, density.clone());
                }
                SteeringCommand::ClearOverride { dim } => {
                    overrides.remove(dim);
                }
            }
        }
        let m = self.config.m;
        let uniform = self.blocks.is_empty() && overrides.is_empty();
        let curves = (0..m)
            .map(|i| self.sampling_curve(i, alpha, &overrides))
            .collect::<Result<Vec<_>>>()?;

        let mut stream = self.sobol.clone();
        let raw = stream.next_points(self.config.batch_size);
        let points = if uniform { raw } else { transform_points(&raw, &curves) };
        let number = self.batches.len() as u64 + 1;
        let first_k = self.row_ids.last().map_or(1, |k| k + 1);
        let rows = build_design_rows(&points, m, first_k, number)?;
        let requests = evaluation_plan(&rows)
            .into_iter()
            .map(|mut r| {
                r.x = self.config.to_physical(&r.x);
                r
            })
            .collect();

        let plan = BatchPlan {
            number,
            alpha,
            uniform,
            rows,
            requests,
            stream,
            overrides,
            consumed: self.pending.len(),
        };
        self.status = CampaignStatus::RunningBatch;
        self.bump();
        Ok(plan)
    }

    /// Commits a batch given one output per request of `plan`, in order.
    pub fn commit_batch(&mut self, plan: BatchPlan, outputs: Vec<Vec<f64>>) -> Result<()> {
        if self.status != CampaignStatus::RunningBatch || plan.number != self.batches.len() as u64 + 1 {
            return Err(SensaError::Validation("batch plan does not match the campaign".into()));
        }
        let (m, n) = (self.config.m, self.config.n);
        if outputs.len() != plan.requests.len() {
            return Err(SensaError::Validation(format!(
                "{} outputs for {} requests",
                outputs.len(),
                plan.requests.len()
            )));
        }
        if let Some((q, _)) = outputs
            .iter()
            .enumerate()
            .find(|(_, y)| y.len() != n || !y.iter().all(|v| v.is_finite()))
        {
            let r = &plan.requests[q];
            return Err(SensaError::BatchFailed {
                k: r.k,
                tag: r.tag.to_string(),
                source: Box::new(SensaError::Validation(format!(
                    "output {:?} is not a finite {n}-vector",
                    outputs[q]
                ))),
            });
        }
        let mut outputs = outputs.into_iter();
        let blocks: Vec<EvaluationBlock> = plan
            .rows
            .iter()
            .map(|row| {
                let y_a = outputs.next().expect("length checked");
                let y_b = outputs.next().expect("length checked");
                let y_ab = (0..m).map(|_| outputs.next().expect("length checked")).collect();
                EvaluationBlock {
                    k: row.k,
                    batch: row.batch,
                    xa: row.a.clone(),
                    xb: row.b.clone(),
                    y_a,
                    y_b,
                    y_ab,
                }
            })
            .collect();
        let first_k = plan.rows.first().map_or(0, |r| r.k);
        self.append_blocks(blocks)?;
        self.sobol = plan.stream;
        self.alpha = plan.alpha;
        self.overrides = plan.overrides;
        self.pending.drain(..plan.consumed);
        self.batches.push(BatchRecord {
            number: plan.number,
            alpha: plan.alpha,
            uniform: plan.uniform,
            first_k,
            rows: plan.rows.len(),
        });
        let done = self
            .config
            .max_batches
            .is_some_and(|max| self.batches.len() as u64 >= max);
        self.status = if done {
            CampaignStatus::Done
        } else if self.pause_requested {
            CampaignStatus::Paused
        } else {
            CampaignStatus::Idle
        };
        self.pause_requested = false;
        self.bump();
        Ok(())
    }

    /// Discards a drawn batch; nothing but status and version change.
    pub fn abort_batch(&mut self) {
        if self.status == CampaignStatus::RunningBatch {
            self.status = if self.pause_requested {
                CampaignStatus::Paused
            } else {
                CampaignStatus::Idle
            };
            self.pause_requested = false;
            self.bump();
        }
    }

    /// Runs one batch to completion. On evaluator failure the batch is
    /// aborted and the error names the failing request.
    pub fn run_batch(&mut self, evaluator: &mut dyn Evaluator) -> Result<()> {
        let plan = self.begin_batch()?;
        let xs: Vec<Vec<f64>> = plan.requests.iter().map(|r| r.x.clone()).collect();
        let outputs = match evaluator.evaluate(&xs) {
            Ok(outputs) => outputs,
            Err(e) => {
                self.abort_batch();
                return Err(plan.attribute(e));
            }
        };
        self.commit_batch(plan, outputs).inspect_err(|_| self.abort_batch())
    }

    fn append_blocks(&mut self, blocks: Vec<EvaluationBlock>) -> Result<()> {
        for b in &blocks {
            self.accumulator.add(b);
            self.row_ids.insert(b.k);
        }
        for set in &mut self.boxcars {
            set.extend(&blocks)?;
        }
        self.blocks.extend(blocks);
        Ok(())
    }

    /// Adds externally computed blocks (inputs in `[0, 1]`). They are
    /// marked as batch 0 and enter every estimate like native blocks.
    pub fn ingest_external(&mut self, mut blocks: Vec<EvaluationBlock>) -> Result<()> {
        if self.status == CampaignStatus::RunningBatch {
            return Err(SensaError::ConcurrentRun);
        }
        let (m, n) = (self.config.m, self.config.n);
        let mut seen = BTreeSet::new();
        for b in &mut blocks {
            b.validate(m, n).map_err(|e| SensaError::Ingest(e.to_string()))?;
            if self.row_ids.contains(&b.k) || !seen.insert(b.k) {
                return Err(SensaError::Ingest(format!("duplicate row index k={}", b.k)));
            }
            b.batch = 0;
        }
        self.append_blocks(blocks)?;
        self.bump();
        Ok(())
    }

    /// Parses JSON Lines log records and ingests the blocks they form.
    pub fn ingest_log(&mut self, text: &str) -> Result<usize> {
        let records = log::parse_jsonl(text)?;
        let blocks = log::records_to_blocks(&records, &self.config)?;
        let count = blocks.len();
        self.ingest_external(blocks)?;
        Ok(count)
    }

    /// Indices from the incrementally maintained sums.
    pub fn indices(&self) -> Result<SensitivityIndices> {
        let mut indices = self.accumulator.indices()?;
        indices.biased_by_adaptive_sampling = self.batches.iter().any(|b| !b.uniform);
        Ok(indices)
    }

    /// Indices over ingested blocks and uniformly sampled batches only.
    pub fn indices_uniform_only(&self) -> Result<SensitivityIndices> {
        let uniform: BTreeSet<u64> = self
            .batches
            .iter()
            .filter(|b| b.uniform)
            .map(|b| b.number)
            .collect();
        let blocks: Vec<EvaluationBlock> = self
            .blocks
            .iter()
            .filter(|b| b.batch == 0 || uniform.contains(&b.batch))
            .cloned()
            .collect();
        crate::estimators::estimate_indices(&blocks)
    }

    /// `τ_ij` at the current `α`, or the sampling density of input `i`
    /// (an override if one is active) when `output` is `None`.
    pub fn density(&self, i: usize, output: Option<usize>) -> Result<PiecewiseConstantDensity> {
        self.check_dim(i)?;
        match output {
            Some(j) => {
                self.check_output(j)?;
                let set = &self.boxcars[i];
                let weighted = set.local_densities(self.alpha, &[j])?;
                let sampling = set.local_densities(0.0, &[0])?;
                sensitivity_density(&weighted.density(0)?, &sampling.density(0)?)
            }
            None => {
                if let Some(d) = self.overrides.get(&i) {
                    return Ok(d.clone());
                }
                if self.blocks.is_empty() {
                    return Ok(PiecewiseConstantDensity::uniform(0.0, 1.0));
                }
                Ok(self.boxcars[i]
                    .sampling_density(self.alpha, &self.config.outputs())?
                    .density)
            }
        }
    }

    /// `T^(2,ε)_ij` for an output, whose terminal value is `T̂_ij`; the
    /// current sampling CDF of input `i` otherwise.
    pub fn cumulative(&self, i: usize, output: Option<usize>) -> Result<CumulativeCurve> {
        self.check_dim(i)?;
        match output {
            Some(j) => {
                self.check_output(j)?;
                let local = self.boxcars[i].local_densities(2.0, &[j])?;
                let variance = self.accumulator.variance()?[j];
                cumulative_local(&local.density(0)?, variance, self.blocks.len()).ok_or_else(|| {
                    SensaError::DegenerateDensity(format!("output {} has zero variance", j + 1))
                })
            }
            None => self.sampling_curve(i, self.alpha, &self.overrides),
        }
    }

    /// All sampled points (`A` and `B` rows) in physical units, oldest first.
    pub fn sample_points(&self) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .flat_map(|b| [self.config.to_physical(&b.xa), self.config.to_physical(&b.xb)])
            .collect()
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            schema: STATE_SCHEMA.into(),
            config: self.config.clone(),
            sobol: self.sobol.clone(),
            alpha: self.alpha,
            status: self.status,
            version: self.version,
            pause_requested: self.pause_requested,
            updated_unix_ms: self.updated_unix_ms,
            batches: self.batches.clone(),
            overrides: self.overrides.clone(),
            pending: self.pending.clone(),
            blocks: self.blocks.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.snapshot()).expect("state is serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snapshot: Snapshot = serde_json::from_str(text).map_err(|e| SensaError::parse(text, &e))?;
        if snapshot.schema != STATE_SCHEMA {
            return Err(SensaError::Validation(format!(
                "unsupported state schema {:?}, expected {STATE_SCHEMA:?}",
                snapshot.schema
            )));
        }
        snapshot.config.validate()?;
        let (m, n) = (snapshot.config.m, snapshot.config.n);
        for b in &snapshot.blocks {
            b.validate(m, n)?;
        }
        Self::from_parts(snapshot.config.clone(), Some(snapshot))
    }

    /// Writes the snapshot atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Log records of the blocks of batch `number` (0 selects ingested
    /// blocks).
    pub fn batch_log(&self, number: u64) -> String {
        let blocks: Vec<EvaluationBlock> = self
            .blocks
            .iter()
            .filter(|b| b.batch == number)
            .cloned()
            .collect();
        log::write_jsonl(&blocks, &self.config)
    }
}
