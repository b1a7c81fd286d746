use thiserror::Error;

#[derive(Debug, Error)]
pub enum SensaError {
    #[error("unsupported Sobol' dimension {requested} (supported: 1..={max})")]
    UnsupportedDimension { requested: usize, max: usize },

    #[error("malformed point: expected dimension {expected}, got {actual}")]
    MalformedPoint { expected: usize, actual: usize },

    #[error("dimension index {index} out of range for m = {m}")]
    IndexOutOfRange { index: usize, m: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("a batch is already running")]
    ConcurrentRun,

    #[error("campaign is done (max batches reached)")]
    CampaignDone,

    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("parse error at line {line}, column {column} (byte offset {offset}): {message}")]
    Parse {
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },

    #[error("integration diverged at t = {time}")]
    Divergence { time: f64 },

    #[error("evaluation of request {id} timed out")]
    EvaluationTimeout { id: u64 },

    #[error("evaluator protocol error: {reason}: {line:?}")]
    Protocol { reason: String, line: String },

    #[error("evaluator crashed: {0}")]
    EvaluatorCrashed(String),

    /// Failure of the `index`-th point of an `Evaluator::evaluate` call.
    #[error("evaluation of point {index} failed: {source}")]
    EvaluationFailed {
        index: usize,
        #[source]
        source: Box<SensaError>,
    },

    #[error("batch aborted at row {k}, {tag}: {source}")]
    BatchFailed {
        k: u64,
        tag: String,
        #[source]
        source: Box<SensaError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SensaError {
    pub(crate) fn parse(text: &str, err: &serde_json::Error) -> Self {
        let (line, column) = (err.line(), err.column());
        let offset = text
            .split_inclusive('\n')
            .take(line.saturating_sub(1))
            .map(str::len)
            .sum::<usize>()
            + column.saturating_sub(1);
        SensaError::Parse {
            line,
            column,
            offset,
            message: err.to_string(),
        }
    }
}
