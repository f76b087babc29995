//! Chain-of-thought prompt rendering.
//!
//! Every request is two messages. The system message carries the task in up
//! to four parts: the codebook preamble (role), the code definition(s)
//! (task), a justification instruction (chain-of-thought only), and the
//! decision/format block that tells the model how to lay out its answer. The
//! user message is the passage text, verbatim. No worked examples are ever
//! included.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Code, Codebook};
use crate::corpus::Passage;

/// The tag the parser looks for.
pub const CODES_APPLIED_TAG: &str = "Codes Applied:";
/// Prefix of the rationale line in chain-of-thought replies.
pub const JUSTIFICATION_TAG: &str = "Justification:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// One request per (passage, code).
    PerCode,
    /// One request per passage covering every code.
    FullCodebook,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reasoning {
    ChainOfThought,
    Direct,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::PerCode => "per-code",
            Scope::FullCodebook => "full-codebook",
        })
    }
}

impl fmt::Display for Reasoning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reasoning::ChainOfThought => "chain-of-thought",
            Reasoning::Direct => "direct",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("temperature {0} outside [0, 2]")]
    Temperature(f64),
    #[error("top_p {0} outside (0, 1]")]
    TopP(f64),
    #[error("model identifier is empty")]
    EmptyModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub scope: Scope,
    pub reasoning: Reasoning,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    pub model: String,
}

fn default_top_p() -> f64 {
    1.0
}

impl PromptConfig {
    /// Temperature 0 and top_p 1, the API defaults.
    pub fn new(scope: Scope, reasoning: Reasoning, model: impl Into<String>) -> Self {
        PromptConfig {
            scope,
            reasoning,
            temperature: 0.0,
            top_p: 1.0,
            model: model.into(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ConfigError::Temperature(self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ConfigError::TopP(self.top_p));
        }
        if self.model.trim().is_empty() {
            return Err(ConfigError::EmptyModel);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// Provider-agnostic chat request: one system message, then one user message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
}

impl ChatRequest {
    pub fn new(cfg: &PromptConfig, system: String, user: String) -> Self {
        ChatRequest {
            model: cfg.model.clone(),
            messages: vec![
                ChatMessage {
                    role: Role::System,
                    content: system,
                },
                ChatMessage {
                    role: Role::User,
                    content: user,
                },
            ],
            temperature: cfg.temperature,
            top_p: cfg.top_p,
        }
    }

    pub fn system(&self) -> &str {
        self.message(Role::System)
    }

    pub fn user(&self) -> &str {
        self.message(Role::User)
    }

    fn message(&self, role: Role) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == role)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    /// Whether the request is exactly `[System, User]` with non-empty content.
    pub fn is_well_formed(&self) -> bool {
        matches!(
            self.messages.as_slice(),
            [s, u] if s.role == Role::System && u.role == Role::User
                && !s.content.is_empty() && !u.content.is_empty()
        )
    }

    /// The same request with a format reminder appended to the user message.
    /// Used for the single re-query after an unparseable reply.
    pub fn with_format_reminder(&self, scope: Scope, reasoning: Reasoning, example_title: Option<&str>) -> ChatRequest {
        let mut req = self.clone();
        if let Some(user) = req.messages.iter_mut().find(|m| m.role == Role::User) {
            user.content
                .push_str("\n\n---\n\nYour previous reply could not be read. ");
            user.content
                .push_str(&decision_format_block(scope, reasoning, example_title));
        }
        req
    }
}

fn justification_step(scope: Scope) -> &'static str {
    match scope {
        Scope::PerCode => {
            "As you evaluate the passage, explain why you did or did not apply the code before you give your decision."
        }
        Scope::FullCodebook => {
            "As you evaluate the passage, explain for every code why you did or did not apply it before you give your decision."
        }
    }
}

/// Output-format instructions for the decision step.
///
/// `example_title` is shown in the sample list; without it a placeholder is
/// used.
pub fn decision_format_block(scope: Scope, reasoning: Reasoning, example_title: Option<&str>) -> String {
    let title = example_title.unwrap_or("[exact title of the code]");
    let cot = reasoning == Reasoning::ChainOfThought;
    let mut out = String::new();
    match (scope, cot) {
        (Scope::PerCode, true) => {
            let _ = write!(
                out,
                "Format your reply exactly as follows. If you applied the code:\n\n\
                 {JUSTIFICATION_TAG} [2-3 sentences explaining why the code applies]\n\n\
                 {CODES_APPLIED_TAG}\n- {title}\n\n\
                 If you did not apply the code:\n\n\
                 {JUSTIFICATION_TAG} [2-3 sentences explaining why the code does not apply]\n\n\
                 {CODES_APPLIED_TAG}\n- None\n"
            );
        }
        (Scope::PerCode, false) => {
            let _ = write!(
                out,
                "Reply with the decision only, formatted exactly as follows. If you applied the code:\n\n\
                 {CODES_APPLIED_TAG}\n- {title}\n\n\
                 If you did not apply the code:\n\n\
                 {CODES_APPLIED_TAG}\n- None\n"
            );
        }
        (Scope::FullCodebook, true) => {
            let _ = write!(
                out,
                "Format your reply exactly as follows. Start with a line reading \"{JUSTIFICATION_TAG}\". \
                 Below it write one short paragraph per code, in the order the codes are listed, \
                 each beginning with the code title and a colon and giving 2-3 sentences on why \
                 the code does or does not apply. Then list every code you applied, one per line, \
                 using the exact titles:\n\n\
                 {JUSTIFICATION_TAG}\n{title}: [2-3 sentences]\n[next code title]: [2-3 sentences]\n\n\
                 {CODES_APPLIED_TAG}\n- {title}\n- [another applied code title]\n\n\
                 If you applied no code, write:\n\n\
                 {CODES_APPLIED_TAG}\n- None\n"
            );
        }
        (Scope::FullCodebook, false) => {
            let _ = write!(
                out,
                "Reply with the decision only. List every code you applied, one per line, using the exact titles:\n\n\
                 {CODES_APPLIED_TAG}\n- {title}\n- [another applied code title]\n\n\
                 If you applied no code, write:\n\n\
                 {CODES_APPLIED_TAG}\n- None\n"
            );
        }
    }
    out.push_str(&format!(
        "\nDo not write anything after the \"{CODES_APPLIED_TAG}\" list."
    ));
    out
}

fn code_section(out: &mut String, code: &Code) {
    let _ = write!(out, "Code: {}\nDefinition: {}\n", code.title, code.definition);
}

/// Renders the request for one (passage, code) cell.
pub fn per_code_messages(cb: &Codebook, code: &Code, passage: &Passage, cfg: &PromptConfig) -> ChatRequest {
    let mut system = String::new();
    system.push_str(&cb.preamble);
    system.push_str("\n\n");
    code_section(&mut system, code);
    system.push('\n');
    if cfg.reasoning == Reasoning::ChainOfThought {
        system.push_str(justification_step(Scope::PerCode));
        system.push_str("\n\n");
    }
    system.push_str(&decision_format_block(Scope::PerCode, cfg.reasoning, Some(&code.title)));
    ChatRequest::new(cfg, system, passage.text.clone())
}

/// Renders the request for one passage against the whole codebook, listing
/// codes in codebook order.
pub fn full_codebook_messages(cb: &Codebook, passage: &Passage, cfg: &PromptConfig) -> ChatRequest {
    let mut system = String::new();
    system.push_str(&cb.preamble);
    let _ = write!(
        system,
        "\n\nThe codebook has {} code{}. Decide independently for each code whether it applies; \
         a passage may receive any number of codes.\n\n",
        cb.codes.len(),
        if cb.codes.len() == 1 { "" } else { "s" }
    );
    for code in &cb.codes {
        code_section(&mut system, code);
        system.push('\n');
    }
    if cfg.reasoning == Reasoning::ChainOfThought {
        system.push_str(justification_step(Scope::FullCodebook));
        system.push_str("\n\n");
    }
    system.push_str(&decision_format_block(Scope::FullCodebook, cfg.reasoning, None));
    ChatRequest::new(cfg, system, passage.text.clone())
}
