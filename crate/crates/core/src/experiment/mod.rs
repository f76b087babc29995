//! Coding runs: fan a corpus out to the model under one prompt
//! configuration, parse every reply, and keep the result as an immutable
//! [`RunRecord`].

mod report;
mod store;

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codebook::{validate_codebook, Codebook, Issue};
use crate::corpus::{CorpusRecord, Passage};
use crate::llm_client::{CellRef, ClientError, LlmClient};
use crate::parser::{parse_decision, CodingDecision};
use crate::prompting::{full_codebook_messages, per_code_messages, ChatRequest, ConfigError, PromptConfig, Scope};

pub use report::{
    compare_runs, disagreements, report_csv, report_markdown, score_run, AgreementReport, CodeAgreement, CompareError,
    Disagreement, KappaDelta, RunComparison, ScoreError,
};
pub use store::{read_run_file, write_atomic, write_run_file, RunStore, StoreError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid codebook: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidCodebook(Vec<Issue>),
    #[error("invalid prompt configuration: {0}")]
    InvalidConfig(#[from] ConfigError),
    #[error("no passages to code")]
    EmptyCorpus,
    #[error("no codes selected")]
    NoCodes,
    #[error("duplicate passage id {0:?}")]
    DuplicatePassage(String),
    #[error("unknown code {0:?}")]
    UnknownCode(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Provenance that is a pure function of the run's inputs and outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_run_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codebook_id: Option<String>,
    pub unparseable_count: usize,
    /// Codes scored by this run, in codebook order.
    pub code_ids: Vec<String>,
    pub codebook: Codebook,
    pub passages: Vec<CorpusRecord>,
}

/// Wall-clock and cache statistics. These vary between otherwise identical
/// runs, so they are kept out of the run document and written to a sidecar.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionStats {
    pub started: String,
    pub finished: String,
    pub cache_hits: usize,
    pub provider_calls: usize,
    pub requeries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub codebook_version: String,
    pub config: PromptConfig,
    /// Sorted by (passage id, code id).
    pub decisions: Vec<CodingDecision>,
    pub meta: RunMeta,
    #[serde(skip)]
    pub execution: ExecutionStats,
}

impl RunRecord {
    pub fn is_complete(&self) -> bool {
        self.meta.complete
    }

    pub fn cache_hits(&self) -> usize {
        self.execution.cache_hits
    }

    pub fn unparseable_count(&self) -> usize {
        self.meta.unparseable_count
    }

    /// The decision covering `(passage_id, code_id)`.
    pub fn decision_for(&self, passage_id: &str, code_id: &str) -> Option<&CodingDecision> {
        self.decisions.iter().find(|d| {
            d.passage_id == passage_id
                && match (&d.scope_code, self.config.scope) {
                    (Some(scope), _) => scope == code_id,
                    (None, Scope::FullCodebook) => true,
                    (None, Scope::PerCode) => false,
                }
        })
    }

    pub fn passage(&self, passage_id: &str) -> Option<&CorpusRecord> {
        self.meta.passages.iter().find(|p| p.id == passage_id)
    }
}

/// What to run: which passages, which codes, under which configuration.
#[derive(Debug, Clone)]
pub struct RunPlan<'a> {
    pub codebook: &'a Codebook,
    pub passages: &'a [Passage],
    pub config: &'a PromptConfig,
    /// Codes to score; `None` means every code in the codebook.
    pub code_ids: Option<Vec<String>>,
    pub parent_run_id: Option<String>,
    pub codebook_id: Option<String>,
}

impl<'a> RunPlan<'a> {
    pub fn new(codebook: &'a Codebook, passages: &'a [Passage], config: &'a PromptConfig) -> Self {
        RunPlan {
            codebook,
            passages,
            config,
            code_ids: None,
            parent_run_id: None,
            codebook_id: None,
        }
    }

    fn selected_codes(&self) -> Result<Vec<String>, ExperimentError> {
        match &self.code_ids {
            None => Ok(self.codebook.code_ids().map(String::from).collect()),
            Some(ids) => {
                let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
                if let Some(unknown) = ids.iter().find(|id| self.codebook.code(id).is_none()) {
                    return Err(ExperimentError::UnknownCode(unknown.clone()));
                }
                // codebook order, duplicates dropped
                Ok(self
                    .codebook
                    .code_ids()
                    .filter(|id| wanted.contains(id))
                    .map(String::from)
                    .collect())
            }
        }
    }
}

/// A (passage index, code) pair; `code_id` is `None` for full-codebook cells.
struct Cell {
    passage: usize,
    code_id: Option<String>,
}

fn run_id_for(plan: &RunPlan<'_>, code_ids: &[String]) -> String {
    #[derive(Serialize)]
    struct Identity<'a> {
        codebook_version: &'a str,
        config: &'a PromptConfig,
        code_ids: &'a [String],
        passages: Vec<(&'a str, &'a str)>,
        parent: Option<&'a str>,
    }
    let identity = Identity {
        codebook_version: &plan.codebook.version,
        config: plan.config,
        code_ids,
        passages: plan.passages.iter().map(|p| (p.id.as_str(), p.text.as_str())).collect(),
        parent: plan.parent_run_id.as_deref(),
    };
    let digest = Sha256::digest(serde_json::to_vec(&identity).expect("run identity serializes"));
    format!("run-{}", &hex::encode(digest)[..16])
}

#[derive(Default)]
struct Counters {
    cache_hits: AtomicUsize,
    requeries: AtomicUsize,
    stop: AtomicBool,
}

type CellKey = (String, Option<String>);

/// Codes one cell, re-asking once with a format reminder if the first reply
/// cannot be read. `Err(None)` means the cell was skipped after a fatal error.
async fn code_cell(
    passage: &Passage,
    code_id: Option<String>,
    cb: &Codebook,
    cfg: &PromptConfig,
    client: &LlmClient,
    counters: &Counters,
) -> (CellKey, Result<CodingDecision, Option<ClientError>>) {
    let key = (passage.id.clone(), code_id.clone());
    if counters.stop.load(Ordering::SeqCst) {
        return (key, Err(None));
    }
    let code = code_id.as_deref().and_then(|id| cb.code(id));
    let req: ChatRequest = match code {
        Some(code) => per_code_messages(cb, code, passage, cfg),
        None => full_codebook_messages(cb, passage, cfg),
    };
    let cref = CellRef::new(passage.id.clone(), code_id.as_deref());
    let result: Result<CodingDecision, ClientError> = async {
        let reply = client.complete(&req, Some(&cref)).await?;
        if reply.cached {
            counters.cache_hits.fetch_add(1, Ordering::SeqCst);
        }
        let decision = parse_decision(&passage.id, &reply.text, cb, code_id.as_deref());
        if decision.is_parsed() {
            return Ok(decision);
        }
        counters.requeries.fetch_add(1, Ordering::SeqCst);
        let retry = req.with_format_reminder(cfg.scope, cfg.reasoning, code.map(|c| c.title.as_str()));
        let reply = client.complete(&retry, Some(&cref)).await?;
        if reply.cached {
            counters.cache_hits.fetch_add(1, Ordering::SeqCst);
        }
        Ok(parse_decision(&passage.id, &reply.text, cb, code_id.as_deref()))
    }
    .await;
    if let Err(e) = &result {
        if e.is_fatal() {
            counters.stop.store(true, Ordering::SeqCst);
        }
    }
    (key, result.map_err(Some))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Codes every passage in the plan. Provider failures do not abort with an
/// error: the returned record is marked incomplete, holds every decision
/// that did succeed, and names the first failing cell.
pub async fn execute(plan: &RunPlan<'_>, client: &LlmClient) -> Result<RunRecord, ExperimentError> {
    let issues = validate_codebook(plan.codebook);
    if !issues.is_empty() {
        return Err(ExperimentError::InvalidCodebook(issues));
    }
    plan.config.validate()?;
    if plan.passages.is_empty() {
        return Err(ExperimentError::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    for p in plan.passages {
        if !seen.insert(p.id.as_str()) {
            return Err(ExperimentError::DuplicatePassage(p.id.clone()));
        }
    }
    let code_ids = plan.selected_codes()?;
    if code_ids.is_empty() {
        return Err(ExperimentError::NoCodes);
    }

    let cfg = plan.config;
    let cb = plan.codebook;
    let cells: Vec<Cell> = match cfg.scope {
        Scope::PerCode => (0..plan.passages.len())
            .flat_map(|p| {
                code_ids.iter().map(move |c| Cell {
                    passage: p,
                    code_id: Some(c.clone()),
                })
            })
            .collect(),
        Scope::FullCodebook => (0..plan.passages.len())
            .map(|p| Cell {
                passage: p,
                code_id: None,
            })
            .collect(),
    };

    let started = now();
    let calls_before = client.provider_calls();
    let counters = Counters::default();
    let outcomes: Vec<_> = stream::iter(cells)
        .map(|cell| code_cell(&plan.passages[cell.passage], cell.code_id, cb, cfg, client, &counters))
        .buffer_unordered(client.max_in_flight())
        .collect()
        .await;

    let mut decisions = Vec::new();
    let mut failures = Vec::new();
    let mut skipped = 0usize;
    for (key, outcome) in outcomes {
        match outcome {
            Ok(d) => decisions.push(d),
            Err(Some(e)) => failures.push((key, e.to_string())),
            Err(None) => skipped += 1,
        }
    }
    decisions.sort_by(|x, y| (&x.passage_id, &x.scope_code).cmp(&(&y.passage_id, &y.scope_code)));
    failures.sort();

    let error = failures.first().map(|((passage, code), msg)| {
        let cell = match code {
            Some(c) => format!("passage {passage}, code {c}"),
            None => format!("passage {passage}"),
        };
        let mut text = format!("{cell}: {msg}");
        if failures.len() > 1 {
            text.push_str(&format!(" (+{} more failed cells)", failures.len() - 1));
        }
        if skipped > 0 {
            text.push_str(&format!(" ({skipped} cells not attempted)"));
        }
        text
    });

    let unparseable_count = decisions.iter().filter(|d| !d.is_parsed()).count();
    Ok(RunRecord {
        run_id: run_id_for(plan, &code_ids),
        codebook_version: cb.version.clone(),
        config: cfg.clone(),
        decisions,
        meta: RunMeta {
            complete: error.is_none(),
            error,
            parent_run_id: plan.parent_run_id.clone(),
            codebook_id: plan.codebook_id.clone(),
            unparseable_count,
            code_ids,
            codebook: cb.clone(),
            passages: plan.passages.iter().map(CorpusRecord::from).collect(),
        },
        execution: ExecutionStats {
            started,
            finished: now(),
            cache_hits: counters.cache_hits.into_inner(),
            provider_calls: client.provider_calls() - calls_before,
            requeries: counters.requeries.into_inner(),
        },
    })
}

/// Runs every code of `cb` over `passages` and, when a store is given,
/// persists the record (complete or not) before returning it.
pub async fn run_coding(
    cb: &Codebook,
    passages: &[Passage],
    cfg: &PromptConfig,
    client: &LlmClient,
    store: Option<&RunStore>,
) -> Result<RunRecord, ExperimentError> {
    let record = execute(&RunPlan::new(cb, passages, cfg), client).await?;
    if let Some(store) = store {
        store.save(&record)?;
    }
    Ok(record)
}
