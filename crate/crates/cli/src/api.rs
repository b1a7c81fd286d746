//! JSON payloads of the HTTP API. Dimensions and outputs are 1-based.

use serde::{Deserialize, Serialize};

use sensa_core::campaign::SteeringCommand;
use sensa_core::{CampaignState, CampaignStatus};

/// Progress of the background batch runner.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunnerStatus {
    pub active: bool,
    /// Batches requested but not yet started.
    pub remaining: u64,
    pub last_error: Option<String>,
}

/// A queued steering command as shown to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum PendingCommand {
    SetAlpha { value: f64 },
    Override { dim: usize },
    ClearOverride { dim: usize },
}

impl From<&SteeringCommand> for PendingCommand {
    fn from(c: &SteeringCommand) -> Self {
        match c {
            SteeringCommand::SetAlpha { value } => PendingCommand::SetAlpha { value: *value },
            SteeringCommand::Override { dim, .. } => PendingCommand::Override { dim: dim + 1 },
            SteeringCommand::ClearOverride { dim } => PendingCommand::ClearOverride { dim: dim + 1 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiStateSummary {
    pub version: u64,
    pub status: CampaignStatus,
    pub m: usize,
    pub n: usize,
    pub batch_size: usize,
    pub batches_completed: usize,
    pub total_evaluations: usize,
    pub ingested_blocks: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub alpha_history: Vec<f64>,
    /// Per output; absent before the first observation.
    pub variance: Option<Vec<f64>>,
    /// `first_order[i][j]`; `null` where output `j` has zero variance.
    pub first_order: Option<Vec<Vec<Option<f64>>>>,
    pub total: Option<Vec<Vec<Option<f64>>>>,
    pub biased_by_adaptive_sampling: bool,
    pub pending: Vec<PendingCommand>,
    pub overrides: Vec<usize>,
    pub pause_requested: bool,
    pub updated_unix_ms: u64,
    pub runner: RunnerStatus,
}

impl ApiStateSummary {
    pub fn new(state: &CampaignState, runner: RunnerStatus) -> Self {
        let config = state.config();
        let indices = state.indices().ok();
        let table = |pick: fn(&sensa_core::SensitivityIndices, usize, usize) -> Option<f64>| {
            indices.as_ref().map(|idx| {
                (0..idx.m)
                    .map(|i| (0..idx.n).map(|j| pick(idx, i, j)).collect())
                    .collect()
            })
        };
        Self {
            version: state.version(),
            status: state.status(),
            m: config.m,
            n: config.n,
            batch_size: config.batch_size,
            batches_completed: state.batches().len(),
            total_evaluations: state.evaluation_count(),
            ingested_blocks: state.ingested_blocks(),
            alpha: state.alpha(),
            epsilon: config.epsilon,
            alpha_history: state.alpha_history(),
            variance: indices.as_ref().map(|idx| idx.variance.clone()),
            first_order: table(|idx, i, j| idx.first_order(i, j)),
            total: table(|idx, i, j| idx.total(i, j)),
            biased_by_adaptive_sampling: indices.as_ref().is_some_and(|idx| idx.biased_by_adaptive_sampling),
            pending: state.pending().iter().map(PendingCommand::from).collect(),
            overrides: state.overrides().keys().map(|i| i + 1).collect(),
            pause_requested: state.is_pause_requested(),
            updated_unix_ms: state.updated_unix_ms(),
            runner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRequest {
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub batches: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideRequest {
    pub dim: usize,
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

/// Acknowledgement of a queued command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Queued {
    pub queue_position: usize,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAccepted {
    pub remaining: u64,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ingested {
    pub blocks: usize,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesPayload {
    pub dims: Vec<usize>,
    pub points: Vec<Vec<f64>>,
    /// Batch of each point; 0 for ingested rows.
    pub batches: Vec<u64>,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<usize>,
}
