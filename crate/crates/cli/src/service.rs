//! Local HTTP service over a [`Workspace`].
//!
//! Reads never change anything. Writes only add files: an edited code
//! yields a new codebook version and a re-test yields a derived run.

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use coda_core::codebook::{diff_codebooks, Code, Codebook, CodebookDiff, CodebookError, Issue};
use coda_core::corpus::{CorpusRecord, GoldLabels, Passage};
use coda_core::experiment::{
    disagreements, execute, score_run, AgreementReport, Disagreement, ExperimentError, RunPlan, RunRecord, ScoreError,
    StoreError,
};
use coda_core::llm_client::LlmClient;
use coda_core::prompting::PromptConfig;
use coda_core::reliability::AgreementBand;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::workspace::{VersionEntry, Workspace, WorkspaceError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status: status.as_u16(),
            code: code.to_string(),
            message: message.into(),
        }
    }

    fn not_found(code: &str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, code, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn unprocessable(code: &str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<WorkspaceError> for ApiError {
    fn from(e: WorkspaceError) -> Self {
        match &e {
            WorkspaceError::UnknownCodebook(_) | WorkspaceError::InvalidId(_) => {
                ApiError::not_found("unknown_codebook", e.to_string())
            }
            WorkspaceError::UnknownVersion { .. } => ApiError::not_found("unknown_version", e.to_string()),
            WorkspaceError::Codebook(_) | WorkspaceError::Gold(_) | WorkspaceError::Corpus(_) => {
                ApiError::unprocessable("invalid_workspace_file", e.to_string())
            }
            WorkspaceError::Store(inner) => store_error(inner),
            WorkspaceError::Io { .. } | WorkspaceError::Corrupt { .. } => {
                ApiError::new(StatusCode::BAD_GATEWAY, "storage_error", e.to_string())
            }
        }
    }
}

fn store_error(e: &StoreError) -> ApiError {
    match e {
        StoreError::NotFound(_) | StoreError::InvalidId(_) => ApiError::not_found("unknown_run", e.to_string()),
        _ => ApiError::new(StatusCode::BAD_GATEWAY, "storage_error", e.to_string()),
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        store_error(&e)
    }
}

impl From<ScoreError> for ApiError {
    fn from(e: ScoreError) -> Self {
        ApiError::unprocessable("gold_coverage", e.to_string())
    }
}

impl From<ExperimentError> for ApiError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Store(inner) => store_error(&inner),
            ExperimentError::UnknownCode(_) => ApiError::not_found("unknown_code", e.to_string()),
            other => ApiError::unprocessable("invalid_run", other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    workspace: Workspace,
    client: LlmClient,
    /// Serializes run creation within the workspace.
    executor: Mutex<()>,
}

impl AppState {
    pub fn new(workspace: Workspace, client: LlmClient) -> Self {
        AppState {
            workspace,
            client,
            executor: Mutex::new(()),
        }
    }
}

type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/codebooks", get(list_codebooks))
        .route("/codebooks/{id}/versions", get(list_versions))
        .route("/codebooks/{id}/diff", get(diff_versions))
        .route("/codebooks/{id}/{version}", get(get_codebook))
        .route("/codebooks/{id}/codes/{code_id}", put(update_code))
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/report", get(get_report))
        .route("/runs/{id}/disagreements", get(get_disagreements))
        .route("/runs/{id}/retest", post(retest))
        .route("/codes/{code_id}/kappa-trend", get(kappa_trend))
        .with_state(state)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CodebookView {
    pub id: String,
    pub version: String,
    pub name: String,
    pub preamble: String,
    pub codes: Vec<Code>,
}

async fn list_codebooks(State(s): Shared) -> ApiResult<Json<Vec<String>>> {
    Ok(Json(s.workspace.codebook_ids()?))
}

async fn list_versions(State(s): Shared, Path(id): Path<String>) -> ApiResult<Json<Vec<VersionEntry>>> {
    Ok(Json(s.workspace.versions(&id)?))
}

fn resolve_version(ws: &Workspace, id: &str, version: &str) -> ApiResult<Codebook> {
    if version == "latest" {
        Ok(ws.latest(id)?)
    } else {
        Ok(ws.codebook(id, version)?)
    }
}

async fn get_codebook(State(s): Shared, Path((id, version)): Path<(String, String)>) -> ApiResult<Json<CodebookView>> {
    let cb = resolve_version(&s.workspace, &id, &version)?;
    Ok(Json(CodebookView {
        id,
        version: cb.version,
        name: cb.name,
        preamble: cb.preamble,
        codes: cb.codes,
    }))
}

#[derive(Debug, Deserialize)]
struct DiffQuery {
    from: String,
    to: String,
}

async fn diff_versions(
    State(s): Shared,
    Path(id): Path<String>,
    Query(q): Query<DiffQuery>,
) -> ApiResult<Json<CodebookDiff>> {
    let a = resolve_version(&s.workspace, &id, &q.from)?;
    let b = resolve_version(&s.workspace, &id, &q.to)?;
    Ok(Json(diff_codebooks(&a, &b)))
}

/// Fields to change; absent fields keep their current value. For the
/// optional fields an empty string clears the value.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct UpdateCode {
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub definition: Option<String>,
    #[serde(default)]
    pub category: Option<String>,
    #[serde(default)]
    pub notes: Option<String>,
    /// Version to edit; the latest when absent.
    #[serde(default)]
    pub base_version: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VersionChange {
    pub old_version: String,
    pub new_version: String,
}

fn issue_message(issue: &Issue) -> String {
    match issue {
        Issue::DuplicateTitle { title, other_id, .. } => {
            format!("title {title:?} conflicts with code {other_id:?}")
        }
        other => other.to_string(),
    }
}

async fn update_code(
    State(s): Shared,
    Path((id, code_id)): Path<(String, String)>,
    Json(body): Json<UpdateCode>,
) -> ApiResult<Json<VersionChange>> {
    if body.title.is_none() && body.definition.is_none() && body.category.is_none() && body.notes.is_none() {
        return Err(ApiError::bad_request("no field to update"));
    }
    let _guard = s.executor.lock().await;
    let base = match &body.base_version {
        Some(v) => s.workspace.codebook(&id, v)?,
        None => s.workspace.latest(&id)?,
    };
    let current = base
        .code(&code_id)
        .ok_or_else(|| ApiError::not_found("unknown_code", format!("codebook {id:?} has no code {code_id:?}")))?;
    let clearable = |new: &Option<String>, old: &Option<String>| match new {
        Some(v) if v.trim().is_empty() => None,
        Some(v) => Some(v.clone()),
        None => old.clone(),
    };
    let edited = Code {
        id: code_id.clone(),
        title: body.title.clone().unwrap_or_else(|| current.title.clone()),
        definition: body.definition.clone().unwrap_or_else(|| current.definition.clone()),
        category: clearable(&body.category, &current.category),
        notes: clearable(&body.notes, &current.notes),
    };
    let next = match base.with_code(edited) {
        Ok(cb) => cb,
        Err(CodebookError::Invalid(issue)) => {
            let code = match issue {
                Issue::DuplicateTitle { .. } => "duplicate_title",
                _ => "invalid_code",
            };
            return Err(ApiError::unprocessable(code, issue_message(&issue)));
        }
        Err(e) => return Err(ApiError::unprocessable("invalid_code", e.to_string())),
    };
    if next.version == base.version {
        return Err(ApiError::new(StatusCode::CONFLICT, "no_change", "no change"));
    }
    s.workspace.store_version(&id, &next, Some(&base.version))?;
    Ok(Json(VersionChange {
        old_version: base.version,
        new_version: next.version,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateRun {
    pub codebook_id: String,
    /// Latest when absent.
    #[serde(default)]
    pub codebook_version: Option<String>,
    pub config: PromptConfig,
    /// Defaults to the workspace corpus.
    #[serde(default)]
    pub passages: Option<Vec<CorpusRecord>>,
    /// Defaults to every code.
    #[serde(default)]
    pub code_ids: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunCreated {
    pub run_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RetestRequest {
    /// Must match the run in the path when given.
    #[serde(default)]
    pub parent_run_id: Option<String>,
    pub passage_ids: Vec<String>,
    pub code_ids: Vec<String>,
    pub codebook_version: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RetestCreated {
    pub derived_run_id: String,
}

/// Runs a plan under the executor lock and stores the record. A complete
/// run that already exists is returned as stored.
async fn execute_and_store(s: &AppState, plan: RunPlan<'_>) -> ApiResult<RunRecord> {
    let _guard = s.executor.lock().await;
    let record = execute(&plan, &s.client).await?;
    if let Ok(existing) = s.workspace.runs().load(&record.run_id) {
        if existing.is_complete() {
            return Ok(existing);
        }
    }
    s.workspace.runs().save(&record)?;
    if !record.is_complete() {
        return Err(ApiError::new(
            StatusCode::BAD_GATEWAY,
            "provider_failure",
            format!(
                "run {} is incomplete: {}",
                record.run_id,
                record.meta.error.as_deref().unwrap_or("provider failure")
            ),
        ));
    }
    Ok(record)
}

async fn create_run(State(s): Shared, Json(body): Json<CreateRun>) -> ApiResult<(StatusCode, Json<RunCreated>)> {
    let cb = match &body.codebook_version {
        Some(v) => s.workspace.codebook(&body.codebook_id, v)?,
        None => s.workspace.latest(&body.codebook_id)?,
    };
    let passages: Vec<Passage> = match body.passages {
        Some(records) => records.into_iter().map(passage_from).collect(),
        None => s
            .workspace
            .passages()?
            .ok_or_else(|| ApiError::unprocessable("no_corpus", "no passages given and the workspace has no corpus"))?,
    };
    let mut plan = RunPlan::new(&cb, &passages, &body.config);
    plan.code_ids = body.code_ids;
    plan.codebook_id = Some(body.codebook_id.clone());
    let record = execute_and_store(&s, plan).await?;
    Ok((StatusCode::CREATED, Json(RunCreated { run_id: record.run_id })))
}

fn passage_from(r: CorpusRecord) -> Passage {
    let mut p = Passage::new(r.id, r.text);
    p.source = r.source;
    p.date = r.date;
    p
}

async fn list_runs(State(s): Shared) -> ApiResult<Json<Vec<String>>> {
    Ok(Json(s.workspace.runs().list()?))
}

async fn get_run(State(s): Shared, Path(id): Path<String>) -> ApiResult<Json<RunRecord>> {
    Ok(Json(s.workspace.runs().load(&id)?))
}

fn gold(s: &AppState) -> ApiResult<GoldLabels> {
    s.workspace
        .gold()?
        .ok_or_else(|| ApiError::not_found("no_gold", "the workspace has no gold.csv"))
}

async fn get_report(State(s): Shared, Path(id): Path<String>) -> ApiResult<Json<AgreementReport>> {
    let run = s.workspace.runs().load(&id)?;
    Ok(Json(score_run(&run, &gold(&s)?)?))
}

async fn get_disagreements(State(s): Shared, Path(id): Path<String>) -> ApiResult<Json<Vec<Disagreement>>> {
    let run = s.workspace.runs().load(&id)?;
    Ok(Json(disagreements(&run, &gold(&s)?)?))
}

async fn retest(
    State(s): Shared,
    Path(id): Path<String>,
    Json(req): Json<RetestRequest>,
) -> ApiResult<(StatusCode, Json<RetestCreated>)> {
    if let Some(parent) = &req.parent_run_id {
        if parent != &id {
            return Err(ApiError::bad_request(format!(
                "parent_run_id {parent:?} does not match run {id:?}"
            )));
        }
    }
    if req.passage_ids.is_empty() || req.code_ids.is_empty() {
        return Err(ApiError::bad_request("passage_ids and code_ids must be non-empty"));
    }
    let parent = s.workspace.runs().load(&id)?;
    let (codebook_id, cb) = s
        .workspace
        .find_version(parent.meta.codebook_id.as_deref(), &req.codebook_version)?;

    let known: HashSet<&str> = parent.meta.passages.iter().map(|p| p.id.as_str()).collect();
    let missing: Vec<&str> = req
        .passage_ids
        .iter()
        .map(String::as_str)
        .filter(|p| !known.contains(p))
        .collect();
    if !missing.is_empty() {
        return Err(ApiError::not_found(
            "unknown_passage",
            format!("passages not in run {id}: {}", missing.join(", ")),
        ));
    }
    let unknown_codes: Vec<&str> = req
        .code_ids
        .iter()
        .map(String::as_str)
        .filter(|c| cb.code(c).is_none())
        .collect();
    if !unknown_codes.is_empty() {
        return Err(ApiError::not_found(
            "unknown_code",
            format!("codes not in version {}: {}", cb.version, unknown_codes.join(", ")),
        ));
    }

    let wanted: BTreeSet<&str> = req.passage_ids.iter().map(String::as_str).collect();
    let passages: Vec<Passage> = parent
        .meta
        .passages
        .iter()
        .filter(|p| wanted.contains(p.id.as_str()))
        .cloned()
        .map(passage_from)
        .collect();
    let mut plan = RunPlan::new(&cb, &passages, &parent.config);
    plan.code_ids = Some(req.code_ids.clone());
    plan.parent_run_id = Some(parent.run_id.clone());
    plan.codebook_id = Some(codebook_id);
    let record = execute_and_store(&s, plan).await?;
    Ok((
        StatusCode::CREATED,
        Json(RetestCreated {
            derived_run_id: record.run_id,
        }),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub codebook_version: String,
    pub run_id: String,
    /// `None` when undefined.
    pub kappa: Option<f64>,
    pub band: Option<AgreementBand>,
}

/// Kappa of one code across every stored run that scores it, in run
/// creation order. Runs whose cells are not all covered by the gold labels
/// are skipped.
async fn kappa_trend(State(s): Shared, Path(code_id): Path<String>) -> ApiResult<Json<Vec<TrendPoint>>> {
    let gold = gold(&s)?;
    let mut points = Vec::new();
    for run_id in s.workspace.runs().list()? {
        let run = s.workspace.runs().load(&run_id)?;
        if !run.meta.code_ids.contains(&code_id) {
            continue;
        }
        let Ok(report) = score_run(&run, &gold) else {
            continue;
        };
        if let Some(row) = report.row(&code_id) {
            points.push(TrendPoint {
                codebook_version: run.codebook_version.clone(),
                run_id: run.run_id.clone(),
                kappa: row.stats.kappa,
                band: row.band,
            });
        }
    }
    Ok(Json(points))
}

/// Serves the workspace on `addr` until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
