//! HTTP campaign API.
//!
//! Handlers lock the campaign only long enough to read or enqueue; batches
//! run on a blocking worker that holds the lock while drawing and while
//! committing, but not while the model evaluates.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, RawQuery, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;

use sensa_core::campaign::log::write_jsonl;
use sensa_core::estimators::EvaluationBlock;
use sensa_core::model::Evaluator;
use sensa_core::regional::PiecewiseConstantDensity;
use sensa_core::{CampaignState, CampaignStatus, SensaError};

use crate::api::{
    AlphaRequest, ApiError, ApiStateSummary, Ingested, OverrideRequest, Queued, RunAccepted, RunRequest,
    RunnerStatus, SamplesPayload,
};
use crate::export::{CurvePayload, DensityPayload};

/// Where a served campaign is persisted.
#[derive(Debug, Clone)]
pub struct Persistence {
    pub state: PathBuf,
    /// Evaluation log (JSON Lines); each committed batch is appended.
    pub log: PathBuf,
}

pub struct AppState {
    campaign: Mutex<CampaignState>,
    runner: Mutex<RunnerStatus>,
    evaluator: Mutex<Option<Box<dyn Evaluator>>>,
    persistence: Option<Persistence>,
}

pub type Shared = Arc<AppState>;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl AppState {
    pub fn new(campaign: CampaignState, persistence: Option<Persistence>) -> Shared {
        Arc::new(Self {
            campaign: Mutex::new(campaign),
            runner: Mutex::new(RunnerStatus::default()),
            evaluator: Mutex::new(None),
            persistence,
        })
    }

    /// Copy of the campaign as it is now.
    pub fn snapshot(&self) -> CampaignState {
        lock(&self.campaign).clone()
    }

    pub fn runner(&self) -> RunnerStatus {
        lock(&self.runner).clone()
    }

    fn save(&self, campaign: &CampaignState) -> Result<(), SensaError> {
        match &self.persistence {
            Some(p) => campaign.save(&p.state),
            None => Ok(()),
        }
    }

    /// Appends the log records of `blocks` (the newest part of the log).
    fn append_log(&self, campaign: &CampaignState, blocks: &[EvaluationBlock]) -> Result<(), SensaError> {
        use std::io::Write;
        if let Some(p) = &self.persistence {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&p.log)?;
            f.write_all(write_jsonl(blocks, campaign.config()).as_bytes())?;
        }
        Ok(())
    }
}

/// Requests `batches` more batches and starts the worker if it is idle.
pub fn request_batches(app: &Shared, batches: u64) -> u64 {
    let start = {
        let mut runner = lock(&app.runner);
        runner.remaining += batches;
        let start = !runner.active && runner.remaining > 0;
        if start {
            runner.active = true;
            runner.last_error = None;
        }
        (start, runner.remaining)
    };
    if start.0 {
        let app = Arc::clone(app);
        std::thread::spawn(move || run_loop(&app));
    }
    start.1
}

fn evaluate(app: &AppState, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, SensaError> {
    let mut slot = lock(&app.evaluator);
    if slot.is_none() {
        let c = lock(&app.campaign);
        *slot = Some(c.config().evaluator.instantiate(c.config().m)?);
    }
    let result = slot.as_mut().expect("instantiated").evaluate(xs);
    if result.is_err() {
        *slot = None;
    }
    result
}

fn run_loop(app: &Shared) {
    let stop = |error: Option<String>, clear: bool| {
        let mut runner = lock(&app.runner);
        runner.active = false;
        if clear {
            runner.remaining = 0;
        }
        if error.is_some() {
            runner.last_error = error;
        }
    };
    loop {
        let plan = {
            let mut runner = lock(&app.runner);
            let mut campaign = lock(&app.campaign);
            if runner.remaining == 0 {
                runner.active = false;
                return;
            }
            match campaign.status() {
                CampaignStatus::Paused => {
                    runner.active = false;
                    return;
                }
                CampaignStatus::Done => {
                    runner.active = false;
                    runner.remaining = 0;
                    return;
                }
                _ => {}
            }
            match campaign.begin_batch() {
                Ok(plan) => {
                    runner.remaining -= 1;
                    plan
                }
                Err(e) => {
                    drop(campaign);
                    drop(runner);
                    stop(Some(e.to_string()), true);
                    return;
                }
            }
        };
        let rows = plan.rows.len();
        let xs: Vec<Vec<f64>> = plan.requests.iter().map(|r| r.x.clone()).collect();
        let outputs = evaluate(app, &xs);
        let mut campaign = lock(&app.campaign);
        let committed = match outputs {
            Ok(ys) => {
                let requests = plan.clone();
                campaign.commit_batch(plan, ys).map_err(|e| requests.attribute(e))
            }
            Err(e) => Err(plan.attribute(e)),
        };
        let result = committed
            .and_then(|_| {
                let blocks = campaign.blocks();
                app.append_log(&campaign, &blocks[blocks.len() - rows..])
            })
            .and_then(|_| app.save(&campaign));
        if let Err(e) = result {
            campaign.abort_batch();
            let _ = app.save(&campaign);
            drop(campaign);
            stop(Some(e.to_string()), true);
            return;
        }
    }
}

struct ApiFailure(StatusCode, ApiError);

impl IntoResponse for ApiFailure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl ApiFailure {
    fn bad_request(error: impl Into<String>, field: Option<&str>) -> Self {
        ApiFailure(
            StatusCode::BAD_REQUEST,
            ApiError {
                error: error.into(),
                field: field.map(str::to_string),
                line: None,
                column: None,
            },
        )
    }
}

impl From<SensaError> for ApiFailure {
    fn from(e: SensaError) -> Self {
        let status = match &e {
            SensaError::InsufficientData(_) | SensaError::DegenerateDensity(_) => StatusCode::NOT_FOUND,
            SensaError::ConcurrentRun | SensaError::CampaignDone => StatusCode::CONFLICT,
            SensaError::Validation(_)
            | SensaError::InvalidDensity(_)
            | SensaError::IndexOutOfRange { .. }
            | SensaError::Ingest(_)
            | SensaError::MalformedPoint { .. } => StatusCode::BAD_REQUEST,
            SensaError::Parse { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let (line, column) = match &e {
            SensaError::Parse { line, column, .. } => (Some(*line), Some(*column)),
            _ => (None, None),
        };
        ApiFailure(
            status,
            ApiError {
                error: e.to_string(),
                field: None,
                line,
                column,
            },
        )
    }
}

type ApiResult<T> = Result<T, ApiFailure>;

/// Parses a JSON body, reporting the offending field where serde names it.
fn parse_body<T: DeserializeOwned>(body: &str) -> ApiResult<T> {
    serde_json::from_str(body).map_err(|e| {
        let message = e.to_string();
        let field = message.split('`').nth(1).map(str::to_string);
        ApiFailure(
            StatusCode::BAD_REQUEST,
            ApiError {
                error: message,
                field,
                line: Some(e.line()),
                column: Some(e.column()),
            },
        )
    })
}

fn query_param(raw: &Option<String>, name: &str) -> Option<String> {
    raw.as_deref()?
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == name)
        .map(|(_, v)| v.replace("%2C", ",").replace("%2c", ","))
}

/// 1-based index from a path or query value, converted to 0-based.
fn one_based(value: &str, field: &str, limit: usize) -> ApiResult<usize> {
    match value.parse::<usize>() {
        Ok(i) if (1..=limit).contains(&i) => Ok(i - 1),
        _ => Err(ApiFailure::bad_request(
            format!("{field} must be an integer in 1..={limit}, got {value:?}"),
            Some(field),
        )),
    }
}

fn output_param(raw: &Option<String>, n: usize) -> ApiResult<Option<usize>> {
    query_param(raw, "output")
        .map(|v| one_based(&v, "output", n))
        .transpose()
}

async fn get_state(State(app): State<Shared>) -> Json<ApiStateSummary> {
    let runner = app.runner();
    let campaign = lock(&app.campaign);
    Json(ApiStateSummary::new(&campaign, runner))
}

async fn get_density(
    State(app): State<Shared>,
    Path(dim): Path<String>,
    RawQuery(query): RawQuery,
) -> ApiResult<Json<DensityPayload>> {
    let campaign = lock(&app.campaign);
    let i = one_based(&dim, "dim", campaign.config().m)?;
    let output = output_param(&query, campaign.config().n)?;
    let density = campaign.density(i, output)?;
    Ok(Json(DensityPayload::new(i, output, campaign.params(), &density)))
}

async fn get_cumulative(
    State(app): State<Shared>,
    Path(dim): Path<String>,
    RawQuery(query): RawQuery,
) -> ApiResult<Json<CurvePayload>> {
    let campaign = lock(&app.campaign);
    let i = one_based(&dim, "dim", campaign.config().m)?;
    let output = output_param(&query, campaign.config().n)?;
    let curve = campaign.cumulative(i, output)?;
    Ok(Json(CurvePayload::new(i, output, &curve)))
}

async fn get_samples(State(app): State<Shared>, RawQuery(query): RawQuery) -> ApiResult<Json<SamplesPayload>> {
    let campaign = lock(&app.campaign);
    let m = campaign.config().m;
    let dims = match query_param(&query, "dims") {
        Some(list) => list
            .split(',')
            .map(|d| one_based(d, "dims", m))
            .collect::<ApiResult<Vec<_>>>()?,
        None => (0..m).collect(),
    };
    let limit = match query_param(&query, "limit") {
        Some(v) => Some(
            v.parse::<usize>()
                .map_err(|_| ApiFailure::bad_request(format!("limit must be a count, got {v:?}"), Some("limit")))?,
        ),
        None => None,
    };
    let points = campaign.sample_points();
    let batches: Vec<u64> = campaign.blocks().iter().flat_map(|b| [b.batch, b.batch]).collect();
    let skip = limit.map_or(0, |l| points.len().saturating_sub(l));
    Ok(Json(SamplesPayload {
        dims: dims.iter().map(|i| i + 1).collect(),
        points: points[skip..]
            .iter()
            .map(|p| dims.iter().map(|&i| p[i]).collect())
            .collect(),
        batches: batches[skip..].to_vec(),
        version: campaign.version(),
    }))
}

fn persist_after(app: &AppState, campaign: &CampaignState) -> ApiResult<()> {
    app.save(campaign).map_err(ApiFailure::from)
}

async fn post_alpha(State(app): State<Shared>, body: String) -> ApiResult<(StatusCode, Json<Queued>)> {
    let req: AlphaRequest = parse_body(&body)?;
    if !req.value.is_finite() {
        return Err(ApiFailure::bad_request("alpha must be finite", Some("value")));
    }
    let mut campaign = lock(&app.campaign);
    let queue_position = campaign.set_alpha(req.value)?;
    persist_after(&app, &campaign)?;
    Ok((
        StatusCode::ACCEPTED,
        Json(Queued {
            queue_position,
            version: campaign.version(),
        }),
    ))
}

async fn post_run(State(app): State<Shared>, body: String) -> ApiResult<(StatusCode, Json<RunAccepted>)> {
    let req: RunRequest = parse_body(&body)?;
    {
        let campaign = lock(&app.campaign);
        if campaign.status() == CampaignStatus::Done && req.batches > 0 {
            return Err(SensaError::CampaignDone.into());
        }
    }
    let remaining = request_batches(&app, req.batches);
    let version = lock(&app.campaign).version();
    Ok((StatusCode::ACCEPTED, Json(RunAccepted { remaining, version })))
}

async fn post_pause(State(app): State<Shared>) -> ApiResult<Json<ApiStateSummary>> {
    let runner = app.runner();
    let mut campaign = lock(&app.campaign);
    campaign.pause();
    persist_after(&app, &campaign)?;
    Ok(Json(ApiStateSummary::new(&campaign, runner)))
}

async fn post_resume(State(app): State<Shared>) -> ApiResult<Json<ApiStateSummary>> {
    {
        let mut campaign = lock(&app.campaign);
        campaign.resume();
        persist_after(&app, &campaign)?;
    }
    // Batches left over from before the pause continue.
    request_batches(&app, 0);
    let runner = app.runner();
    let campaign = lock(&app.campaign);
    Ok(Json(ApiStateSummary::new(&campaign, runner)))
}

async fn post_override(State(app): State<Shared>, body: String) -> ApiResult<(StatusCode, Json<Queued>)> {
    let req: OverrideRequest = parse_body(&body)?;
    let mut campaign = lock(&app.campaign);
    let i = one_based(&req.dim.to_string(), "dim", campaign.config().m)?;
    if let Some(v) = req.values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(ApiFailure::bad_request(
            format!("density values must be finite and nonnegative, got {v}"),
            Some("values"),
        ));
    }
    let density = PiecewiseConstantDensity::new(req.breakpoints, req.values)
        .map_err(|e| ApiFailure::bad_request(e.to_string(), Some("breakpoints")))?;
    let queue_position = campaign
        .override_density(i, density)
        .map_err(|e| ApiFailure::bad_request(e.to_string(), Some("values")))?;
    persist_after(&app, &campaign)?;
    Ok((
        StatusCode::ACCEPTED,
        Json(Queued {
            queue_position,
            version: campaign.version(),
        }),
    ))
}

async fn delete_override(State(app): State<Shared>, Path(dim): Path<String>) -> ApiResult<(StatusCode, Json<Queued>)> {
    let mut campaign = lock(&app.campaign);
    let i = one_based(&dim, "dim", campaign.config().m)?;
    let queue_position = campaign.clear_override(i)?;
    persist_after(&app, &campaign)?;
    Ok((
        StatusCode::ACCEPTED,
        Json(Queued {
            queue_position,
            version: campaign.version(),
        }),
    ))
}

async fn post_ingest(State(app): State<Shared>, body: String) -> ApiResult<Json<Ingested>> {
    let mut campaign = lock(&app.campaign);
    let before = campaign.blocks().len();
    let blocks = campaign.ingest_log(&body)?;
    app.append_log(&campaign, &campaign.blocks()[before..])?;
    app.save(&campaign)?;
    Ok(Json(Ingested {
        blocks,
        version: campaign.version(),
    }))
}

pub fn router(app: Shared) -> Router {
    Router::new()
        .route("/api/state", get(get_state))
        .route("/api/density/{dim}", get(get_density))
        .route("/api/cumulative/{dim}", get(get_cumulative))
        .route("/api/samples", get(get_samples))
        .route("/api/control/alpha", post(post_alpha))
        .route("/api/control/run", post(post_run))
        .route("/api/control/pause", post(post_pause))
        .route("/api/control/resume", post(post_resume))
        .route("/api/control/override", post(post_override))
        .route("/api/control/override/{dim}", delete(delete_override))
        .route("/api/ingest", post(post_ingest))
        .with_state(app)
}

pub async fn serve(listener: tokio::net::TcpListener, app: Shared) -> std::io::Result<()> {
    axum::serve(listener, router(app)).await
}
