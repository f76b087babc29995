//! Reading coding decisions out of free-text model replies.
//!
//! The reply contract is tag based: an optional `Justification:` block, then
//! a `Codes Applied:` line followed by a bulleted list of code titles (or
//! `- None`). Parsing never fails; problems are reported through
//! [`ParseStatus`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::prompting::{CODES_APPLIED_TAG, JUSTIFICATION_TAG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseStatus {
    /// Reply followed the format exactly.
    Clean,
    /// A decision was read, but trailing prose was dropped or some listed
    /// titles did not resolve.
    Recovered,
    /// No `Codes Applied:` tag was found.
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodingDecision {
    pub passage_id: String,
    /// Set for per-code runs: the only code this decision can apply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub justification: Option<String>,
    pub applied: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unknown_titles: Vec<String>,
    pub parse_status: ParseStatus,
}

impl CodingDecision {
    pub fn unparseable(passage_id: impl Into<String>, scope_code: Option<String>) -> Self {
        CodingDecision {
            passage_id: passage_id.into(),
            scope_code,
            justification: None,
            applied: BTreeSet::new(),
            unknown_titles: Vec::new(),
            parse_status: ParseStatus::Unparseable,
        }
    }

    pub fn is_parsed(&self) -> bool {
        self.parse_status != ParseStatus::Unparseable
    }

    /// Whether `code_id` was applied; `None` when the reply was unparseable.
    pub fn applies(&self, code_id: &str) -> Option<bool> {
        self.is_parsed().then(|| self.applied.contains(code_id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TitleMatch {
    Known(String),
    Unknown(String),
}

const DECORATION: &[char] = &['*', '`', '"', '\u{201c}', '\u{201d}'];
const SENTENCE_PUNCTUATION: &[char] = &['.', ',', ';', ':', '!', '?'];

/// Strips one leading bullet marker (`-`, `*`, `+`, `•`, `1.`, `1)`) and
/// returns the rest, or `None` if the line is not a bullet.
fn strip_bullet(line: &str) -> Option<&str> {
    let t = line.trim_start();
    for marker in ['-', '*', '+', '\u{2022}', '\u{2013}'] {
        if let Some(rest) = t.strip_prefix(marker) {
            if rest.is_empty() || rest.starts_with(char::is_whitespace) {
                return Some(rest.trim());
            }
        }
    }
    let digits = t.len() - t.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            if rest.is_empty() || rest.starts_with(char::is_whitespace) {
                return Some(rest.trim());
            }
        }
    }
    None
}

fn clean_title(raw: &str) -> &str {
    let t = strip_bullet(raw).unwrap_or(raw).trim();
    t.trim_matches(DECORATION)
        .trim()
        .trim_end_matches(SENTENCE_PUNCTUATION)
        .trim_matches(DECORATION)
        .trim()
}

/// Resolves a listed title to a code id: exact match after trimming bullets,
/// whitespace and trailing punctuation, ignoring case. No fuzzy matching.
pub fn normalize_code_title(raw: &str, cb: &Codebook) -> TitleMatch {
    let cleaned = clean_title(raw);
    let folded = cleaned.to_lowercase();
    cb.codes
        .iter()
        .find(|c| c.title.trim().to_lowercase() == folded)
        .map(|c| TitleMatch::Known(c.id.clone()))
        .unwrap_or_else(|| TitleMatch::Unknown(cleaned.to_string()))
}

/// Line with markdown emphasis and heading markers removed, for tag matching.
fn tag_view(line: &str) -> String {
    line.replace(['*', '_'], "")
        .trim_start_matches(|c: char| c == '#' || c.is_whitespace())
        .to_string()
}

/// If `line` is a `Codes Applied:` tag line, returns whatever follows the tag.
fn tag_remainder(line: &str) -> Option<String> {
    let view = tag_view(line);
    let prefix_len = CODES_APPLIED_TAG.len();
    if view.len() >= prefix_len
        && view.is_char_boundary(prefix_len)
        && view[..prefix_len].eq_ignore_ascii_case(CODES_APPLIED_TAG)
    {
        Some(view[prefix_len..].trim().to_string())
    } else {
        None
    }
}

/// If `line` opens a justification block, returns the text after its colon.
fn justification_start(line: &str) -> Option<String> {
    let view = tag_view(line);
    let word = &JUSTIFICATION_TAG[..JUSTIFICATION_TAG.len() - 1];
    if view.len() < word.len() || !view.is_char_boundary(word.len()) || !view[..word.len()].eq_ignore_ascii_case(word) {
        return None;
    }
    let rest = view[word.len()..].trim_start();
    if !(rest.starts_with(':') || rest.starts_with('(')) {
        return None;
    }
    let colon = rest.find(':')?;
    Some(rest[colon + 1..].trim().to_string())
}

fn is_none_item(item: &str) -> bool {
    clean_title(item).eq_ignore_ascii_case("none")
}

/// Parses one model reply.
pub fn parse_decision(passage_id: &str, text: &str, cb: &Codebook, scope_code: Option<&str>) -> CodingDecision {
    let lines: Vec<&str> = text.lines().collect();
    let Some((tag_idx, inline)) = lines
        .iter()
        .enumerate()
        .rev()
        .find_map(|(i, l)| tag_remainder(l).map(|r| (i, r)))
    else {
        return CodingDecision::unparseable(passage_id, scope_code.map(String::from));
    };

    let mut recovered = false;
    let mut items: Vec<String> = Vec::new();
    if !inline.is_empty() {
        recovered = true;
        items.push(inline);
    }
    for line in &lines[tag_idx + 1..] {
        if line.trim().is_empty() {
            continue;
        }
        match strip_bullet(line) {
            Some(item) if !item.is_empty() => items.push(item.to_string()),
            Some(_) => {}
            None => {
                // prose after the list is dropped
                recovered = true;
                break;
            }
        }
    }

    let justification = lines[..tag_idx]
        .iter()
        .rposition(|l| justification_start(l).is_some())
        .and_then(|start| {
            let mut block = justification_start(lines[start]).unwrap_or_default();
            for l in &lines[start + 1..tag_idx] {
                block.push('\n');
                block.push_str(l);
            }
            let block = block.trim().to_string();
            (!block.is_empty()).then_some(block)
        });

    let mut applied = BTreeSet::new();
    let mut unknown_titles = Vec::new();
    let mut saw_none = false;
    for item in &items {
        if is_none_item(item) {
            saw_none = true;
            continue;
        }
        match normalize_code_title(item, cb) {
            TitleMatch::Known(id) if scope_code.is_none_or(|s| s == id) => {
                applied.insert(id);
            }
            TitleMatch::Known(_) => unknown_titles.push(clean_title(item).to_string()),
            TitleMatch::Unknown(raw) => unknown_titles.push(raw),
        }
    }
    if items.is_empty() || !unknown_titles.is_empty() || (saw_none && !applied.is_empty()) {
        recovered = true;
    }

    CodingDecision {
        passage_id: passage_id.to_string(),
        scope_code: scope_code.map(String::from),
        justification,
        applied,
        unknown_titles,
        parse_status: if recovered {
            ParseStatus::Recovered
        } else {
            ParseStatus::Clean
        },
    }
}

/// Renders a reply in exactly the requested format.
pub fn render_reply(justification: Option<&str>, titles: &[&str]) -> String {
    let mut out = String::new();
    if let Some(j) = justification {
        out.push_str(JUSTIFICATION_TAG);
        out.push(' ');
        out.push_str(j);
        out.push_str("\n\n");
    }
    out.push_str(CODES_APPLIED_TAG);
    out.push('\n');
    if titles.is_empty() {
        out.push_str("- None\n");
    }
    for t in titles {
        out.push_str("- ");
        out.push_str(t);
        out.push('\n');
    }
    out
}

/// From a full-codebook justification with one `Title: ...` paragraph per
/// code, picks the paragraph about `title`.
pub fn justification_excerpt<'a>(justification: &'a str, title: &str) -> Option<&'a str> {
    let folded = title.to_lowercase();
    let mut start = None;
    let mut offset = 0;
    for line in justification.split_inclusive('\n') {
        let head = line.trim_start().trim_start_matches(['*', '-', ' ']).to_lowercase();
        match start {
            None if head.starts_with(&folded) && head[folded.len()..].trim_start_matches('*').starts_with(':') => {
                start = Some(offset);
            }
            Some(s) if line.trim().is_empty() => {
                return Some(justification[s..offset].trim());
            }
            _ => {}
        }
        offset += line.len();
    }
    start.map(|s| justification[s..].trim())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::du_bois_codebook;

    fn ids(d: &CodingDecision) -> Vec<&str> {
        d.applied.iter().map(String::as_str).collect()
    }

    #[test]
    fn conforming_reply() {
        let cb = du_bois_codebook();
        let text = "Justification: The passage cites his sociological study.\n\nCodes Applied:\n- Scholar";
        let d = parse_decision("p", text, &cb, Some("scholar"));
        assert_eq!(ids(&d), ["scholar"]);
        assert_eq!(
            d.justification.as_deref(),
            Some("The passage cites his sociological study.")
        );
        assert_eq!(d.parse_status, ParseStatus::Clean);
    }

    #[test]
    fn none_reply() {
        let cb = du_bois_codebook();
        let d = parse_decision(
            "p",
            "Justification: No.\n\nCodes Applied:\n- None",
            &cb,
            Some("scholar"),
        );
        assert!(d.applied.is_empty());
        assert_eq!(d.parse_status, ParseStatus::Clean);
        let d = parse_decision("p", "Codes Applied:\n- none.", &cb, None);
        assert_eq!(d.parse_status, ParseStatus::Clean);
    }

    #[test]
    fn trailing_prose_is_recovered() {
        let cb = du_bois_codebook();
        let d = parse_decision(
            "p",
            "Codes Applied:\n- Scholar\n\nIn summary, the passage...",
            &cb,
            Some("scholar"),
        );
        assert_eq!(ids(&d), ["scholar"]);
        assert_eq!(d.parse_status, ParseStatus::Recovered);
    }

    #[test]
    fn missing_tag_is_unparseable() {
        let cb = du_bois_codebook();
        let d = parse_decision("p", "The passage is about his activism.", &cb, None);
        assert_eq!(d.parse_status, ParseStatus::Unparseable);
        assert!(d.applied.is_empty() && d.unknown_titles.is_empty());
        assert_eq!(d.applies("activist"), None);
    }

    #[test]
    fn last_tag_wins() {
        let cb = du_bois_codebook();
        let text = "You asked me to end with\nCodes Applied:\n- Scholar\nso here goes.\n\nJustification: He organized.\n\nCodes Applied:\n- Activist";
        let d = parse_decision("p", text, &cb, None);
        assert_eq!(ids(&d), ["activist"]);
        assert_eq!(d.justification.as_deref(), Some("He organized."));
        assert_eq!(d.parse_status, ParseStatus::Clean);
    }

    #[test]
    fn title_normalization() {
        let cb = du_bois_codebook();
        assert_eq!(
            normalize_code_title("- Scholar.", &cb),
            TitleMatch::Known("scholar".into())
        );
        assert_eq!(
            normalize_code_title("MONUMENTAL MEMORIALIZATION", &cb),
            TitleMatch::Known("memorialization".into())
        );
        assert_eq!(
            normalize_code_title("Academic Repute", &cb),
            TitleMatch::Unknown("Academic Repute".into())
        );
        assert_eq!(
            normalize_code_title("2. **Social/Political Advocacy**", &cb),
            TitleMatch::Known("advocacy".into())
        );
        assert_eq!(
            normalize_code_title("Scholars", &cb),
            TitleMatch::Unknown("Scholars".into())
        );
    }

    #[test]
    fn per_code_scope_excludes_other_codes() {
        let cb = du_bois_codebook();
        let d = parse_decision("p", "Codes Applied:\n- Scholar\n- Activist", &cb, Some("scholar"));
        assert_eq!(ids(&d), ["scholar"]);
        assert_eq!(d.unknown_titles, vec!["Activist".to_string()]);
        assert_eq!(d.parse_status, ParseStatus::Recovered);
    }

    #[test]
    fn bullet_styles_and_decorations() {
        let cb = du_bois_codebook();
        let text =
            "**Justification:** Both apply.\n\n**Codes Applied:**\n* Scholar\n1. Activist\n2) Coalition Building";
        let d = parse_decision("p", text, &cb, None);
        assert_eq!(ids(&d), ["activist", "coalition", "scholar"]);
        assert_eq!(d.justification.as_deref(), Some("Both apply."));
        assert_eq!(d.parse_status, ParseStatus::Clean);
    }

    #[test]
    fn inline_and_empty_lists_are_recovered() {
        let cb = du_bois_codebook();
        let d = parse_decision("p", "Codes Applied: Scholar", &cb, None);
        assert_eq!(ids(&d), ["scholar"]);
        assert_eq!(d.parse_status, ParseStatus::Recovered);
        let d = parse_decision("p", "Codes Applied:\n", &cb, None);
        assert!(d.applied.is_empty());
        assert_eq!(d.parse_status, ParseStatus::Recovered);
    }

    #[test]
    fn multi_line_justification_block() {
        let cb = du_bois_codebook();
        let text = "Justification:\nScholar: He is called a sociologist.\n\nActivist: Nothing about activism.\n\nCodes Applied:\n- Scholar";
        let d = parse_decision("p", text, &cb, None);
        let j = d.justification.unwrap();
        assert!(j.starts_with("Scholar:") && j.ends_with("activism."));
        assert_eq!(
            justification_excerpt(&j, "Activist"),
            Some("Activist: Nothing about activism.")
        );
        assert_eq!(
            justification_excerpt(&j, "scholar"),
            Some("Scholar: He is called a sociologist.")
        );
        assert_eq!(justification_excerpt(&j, "Coalition Building"), None);
    }

    #[test]
    fn render_then_parse() {
        let cb = du_bois_codebook();
        let text = render_reply(Some("Two sentences. Here."), &["Scholar", "Activist"]);
        let d = parse_decision("p", &text, &cb, None);
        assert_eq!(ids(&d), ["activist", "scholar"]);
        assert_eq!(d.parse_status, ParseStatus::Clean);
        assert_eq!(d.justification.as_deref(), Some("Two sentences. Here."));
    }
}
