#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use coda_cli::service::{router, AppState};
use coda_cli::workspace::Workspace;
use coda_core::codebook::Codebook;
use coda_core::fixtures::{demo_passages, demo_script, du_bois_codebook, DEMO_GOLD_CSV, DEMO_PASSAGES_JSONL};
use coda_core::llm_client::{cache_key, scripted_provider, LlmClient, ResponseCache, Script};
use coda_core::parser::render_reply;
use coda_core::prompting::{per_code_messages, PromptConfig, Reasoning, Scope};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const CODEBOOK_ID: &str = "du-bois";
pub const REFINED_CODE: &str = "advocacy";
pub const FLIPPED_PASSAGE: &str = "p3";
pub const REFINED_DEFINITION: &str =
    "Apply this code when the passage describes Du Bois advocating for social or political \
change, in any medium. Editorials, essays and speeches against lynching, segregation or disenfranchisement count, \
including his editorials in The Crisis.";

pub fn per_code_cot() -> PromptConfig {
    PromptConfig::new(Scope::PerCode, Reasoning::ChainOfThought, "mock-model")
}

/// The codebook after the refinement edit, built independently of the
/// service so the second script can be keyed to its exact prompt.
pub fn refined_codebook() -> Codebook {
    let v1 = du_bois_codebook();
    let mut code = v1.code(REFINED_CODE).unwrap().clone();
    code.definition = REFINED_DEFINITION.to_string();
    v1.with_code(code).unwrap()
}

/// First script: the demo replies keyed by cell. Second script: under the
/// refined definition, the flipped passage now receives the code.
pub fn two_script() -> Script {
    let mut script = demo_script();
    let v2 = refined_codebook();
    let passage = demo_passages().into_iter().find(|p| p.id == FLIPPED_PASSAGE).unwrap();
    let code = v2.code(REFINED_CODE).unwrap();
    let req = per_code_messages(&v2, code, &passage, &per_code_cot());
    script.entries.push(Script::by_key(
        cache_key(&req),
        render_reply(
            Some("The passage describes his editorials against lynching, which the definition counts as advocacy."),
            &[&code.title],
        ),
    ));
    script
}

/// Workspace with the fixture codebook, corpus and gold labels.
pub fn seeded_workspace(root: &Path) -> Workspace {
    let ws = Workspace::open(root).unwrap();
    ws.store_version(CODEBOOK_ID, &du_bois_codebook(), None).unwrap();
    std::fs::write(root.join("passages.jsonl"), DEMO_PASSAGES_JSONL).unwrap();
    std::fs::write(root.join("gold.csv"), DEMO_GOLD_CSV).unwrap();
    ws
}

pub fn app(root: &Path, script: &Script) -> Router {
    let ws = seeded_workspace(root);
    let cache = ResponseCache::on_disk(ws.cache_dir()).unwrap();
    let client = LlmClient::new(Arc::new(scripted_provider(script))).with_cache(cache);
    router(Arc::new(AppState::new(ws, client)))
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let request = Request::builder().method(method).uri(uri);
    let request = match body {
        Some(json) => request
            .header("content-type", "application/json")
            .body(Body::from(json.to_string())),
        None => request.body(Body::empty()),
    }
    .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Method::GET, uri, None).await
}

pub fn kappa_of(report: &Value, code_id: &str) -> Option<f64> {
    report["per_code"]
        .as_array()?
        .iter()
        .find(|r| r["code_id"] == code_id)?["stats"]["kappa"]
        .as_f64()
}
