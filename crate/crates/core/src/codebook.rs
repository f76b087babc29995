//! Qualitative codebooks.
//!
//! A [`Codebook`] is an ordered list of [`Code`]s plus the role-assignment
//! preamble that opens every prompt. Titles and definitions are copied into
//! prompts verbatim, so the file stores prose exactly as authored (only
//! trailing whitespace is trimmed) and the content digest is sensitive to
//! code order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// A single binary code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Code {
    pub id: String,
    pub title: String,
    pub definition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

/// An immutable, versioned codebook.
///
/// `version` is the content digest of the canonical serialization; editing a
/// codebook means building a new one (see [`Codebook::with_code`]).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    pub name: String,
    pub preamble: String,
    pub codes: Vec<Code>,
    pub version: String,
}

/// On-disk codebook layout. `version` is never stored; it is computed on load.
#[derive(Serialize, Deserialize)]
struct CodebookDocument {
    name: String,
    preamble: String,
    codes: Vec<Code>,
}

/// A violated codebook invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Issue {
    EmptyCodebook,
    InvalidId {
        id: String,
    },
    DuplicateId {
        id: String,
    },
    EmptyTitle {
        id: String,
    },
    DuplicateTitle {
        id: String,
        title: String,
        other_id: String,
        other_title: String,
    },
    BlankDefinition {
        id: String,
    },
    StaleVersion {
        expected: String,
        found: String,
    },
}

impl Issue {
    /// Id of the code the issue is about, if any.
    pub fn code_id(&self) -> Option<&str> {
        match self {
            Issue::EmptyCodebook | Issue::StaleVersion { .. } => None,
            Issue::InvalidId { id }
            | Issue::DuplicateId { id }
            | Issue::EmptyTitle { id }
            | Issue::DuplicateTitle { id, .. }
            | Issue::BlankDefinition { id } => Some(id),
        }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::EmptyCodebook => write!(f, "empty codebook"),
            Issue::InvalidId { id } => {
                write!(f, "code id {id:?} must be non-empty and match [a-z0-9_-]+")
            }
            Issue::DuplicateId { id } => write!(f, "duplicate code id {id:?}"),
            Issue::EmptyTitle { id } => write!(f, "code {id:?} has an empty title"),
            Issue::DuplicateTitle {
                id,
                title,
                other_id,
                other_title,
            } => write!(
                f,
                "duplicate title: {title:?} (code {id:?}) conflicts with {other_title:?} (code {other_id:?})"
            ),
            Issue::BlankDefinition { id } => write!(f, "code {id:?} has a blank definition"),
            Issue::StaleVersion { expected, found } => {
                write!(f, "version {found} does not match content digest {expected}")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("malformed codebook document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(Issue),
    #[error("unknown code {0:?}")]
    UnknownCode(String),
}

impl Codebook {
    /// Builds a codebook and computes its version. No validation is done;
    /// use [`Codebook::validated`] or [`validate_codebook`] for that.
    pub fn new(name: impl Into<String>, preamble: impl Into<String>, codes: Vec<Code>) -> Self {
        let mut cb = Codebook {
            name: name.into(),
            preamble: preamble.into(),
            codes,
            version: String::new(),
        };
        cb.version = content_version(&cb);
        cb
    }

    pub fn validated(
        name: impl Into<String>,
        preamble: impl Into<String>,
        codes: Vec<Code>,
    ) -> Result<Self, CodebookError> {
        let cb = Codebook::new(name, preamble, codes);
        match validate_codebook(&cb).into_iter().next() {
            Some(issue) => Err(CodebookError::Invalid(issue)),
            None => Ok(cb),
        }
    }

    pub fn code(&self, id: &str) -> Option<&Code> {
        self.codes.iter().find(|c| c.id == id)
    }

    pub fn code_ids(&self) -> impl Iterator<Item = &str> {
        self.codes.iter().map(|c| c.id.as_str())
    }

    /// Returns a new codebook in which the code with `code.id` is replaced.
    pub fn with_code(&self, code: Code) -> Result<Codebook, CodebookError> {
        let Some(pos) = self.codes.iter().position(|c| c.id == code.id) else {
            return Err(CodebookError::UnknownCode(code.id));
        };
        let mut codes = self.codes.clone();
        codes[pos] = trimmed_code(code);
        Codebook::validated(self.name.clone(), self.preamble.clone(), codes)
    }

    /// Serializes to the on-disk document format (pretty-printed, no version).
    pub fn to_document_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(&self.document()).expect("codebook documents always serialize");
        out.push('\n');
        out
    }

    fn document(&self) -> CodebookDocument {
        CodebookDocument {
            name: self.name.clone(),
            preamble: self.preamble.clone(),
            codes: self.codes.clone(),
        }
    }
}

fn trimmed_code(code: Code) -> Code {
    Code {
        id: code.id.trim_end().to_string(),
        title: code.title.trim_end().to_string(),
        definition: code.definition.trim_end().to_string(),
        category: code.category.map(|s| s.trim_end().to_string()),
        notes: code.notes.map(|s| s.trim_end().to_string()),
    }
}

/// Parses a codebook document and checks every invariant.
pub fn parse_codebook(bytes: &[u8]) -> Result<Codebook, CodebookError> {
    let doc: CodebookDocument = serde_json::from_slice(bytes)?;
    let codes = doc.codes.into_iter().map(trimmed_code).collect();
    Codebook::validated(doc.name.trim_end(), doc.preamble.trim_end(), codes)
}

fn is_valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

/// Lists every violated invariant. An empty list means the codebook is usable.
pub fn validate_codebook(cb: &Codebook) -> Vec<Issue> {
    let mut issues = Vec::new();
    if cb.codes.is_empty() {
        issues.push(Issue::EmptyCodebook);
    }

    let mut seen_ids: HashSet<&str> = HashSet::new();
    let mut seen_titles: HashMap<String, &Code> = HashMap::new();
    for code in &cb.codes {
        if !is_valid_id(&code.id) {
            issues.push(Issue::InvalidId { id: code.id.clone() });
        }
        if !seen_ids.insert(&code.id) {
            issues.push(Issue::DuplicateId { id: code.id.clone() });
        }
        if code.title.trim().is_empty() {
            issues.push(Issue::EmptyTitle { id: code.id.clone() });
        } else {
            let folded = code.title.trim().to_lowercase();
            if let Some(prev) = seen_titles.get(&folded) {
                issues.push(Issue::DuplicateTitle {
                    id: code.id.clone(),
                    title: code.title.clone(),
                    other_id: prev.id.clone(),
                    other_title: prev.title.clone(),
                });
            } else {
                seen_titles.insert(folded, code);
            }
        }
        if code.definition.trim().is_empty() {
            issues.push(Issue::BlankDefinition { id: code.id.clone() });
        }
    }

    let expected = content_version(cb);
    if cb.version != expected {
        issues.push(Issue::StaleVersion {
            expected,
            found: cb.version.clone(),
        });
    }
    issues
}

/// SHA-256 (hex) of the canonical compact serialization. Order-sensitive.
pub fn content_version(cb: &Codebook) -> String {
    let canonical = serde_json::to_vec(&cb.document()).expect("codebook documents always serialize");
    hex::encode(Sha256::digest(&canonical))
}

/// Field of a [`Code`] that a refinement step can change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeField {
    Title,
    Definition,
    Category,
    Notes,
}

impl fmt::Display for CodeField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodeField::Title => "title",
            CodeField::Definition => "definition",
            CodeField::Category => "category",
            CodeField::Notes => "notes",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldChange {
    pub code_id: String,
    pub field: CodeField,
    pub before: Option<String>,
    pub after: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookDiff {
    pub added: Vec<String>,
    pub removed: Vec<String>,
    pub changed: Vec<FieldChange>,
}

impl CodebookDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.changed.is_empty()
    }

    /// The diff from `b` back to `a`.
    pub fn reversed(&self) -> CodebookDiff {
        CodebookDiff {
            added: self.removed.clone(),
            removed: self.added.clone(),
            changed: self
                .changed
                .iter()
                .map(|c| FieldChange {
                    code_id: c.code_id.clone(),
                    field: c.field,
                    before: c.after.clone(),
                    after: c.before.clone(),
                })
                .collect(),
        }
    }
}

fn field_values(code: &Code) -> [(CodeField, Option<&String>); 4] {
    [
        (CodeField::Title, Some(&code.title)),
        (CodeField::Definition, Some(&code.definition)),
        (CodeField::Category, code.category.as_ref()),
        (CodeField::Notes, code.notes.as_ref()),
    ]
}

/// Code-level differences between two codebooks.
///
/// `added`, `removed` and `changed` are sorted by code id; `changed` is then
/// ordered by field.
pub fn diff_codebooks(a: &Codebook, b: &Codebook) -> CodebookDiff {
    let a_codes: BTreeMap<&str, &Code> = a.codes.iter().map(|c| (c.id.as_str(), c)).collect();
    let b_codes: BTreeMap<&str, &Code> = b.codes.iter().map(|c| (c.id.as_str(), c)).collect();

    let mut diff = CodebookDiff::default();
    for (id, before) in &a_codes {
        match b_codes.get(id) {
            None => diff.removed.push(id.to_string()),
            Some(after) => {
                for ((field, old), (_, new)) in field_values(before).into_iter().zip(field_values(after)) {
                    if old != new {
                        diff.changed.push(FieldChange {
                            code_id: id.to_string(),
                            field,
                            before: old.cloned(),
                            after: new.cloned(),
                        });
                    }
                }
            }
        }
    }
    diff.added = b_codes
        .keys()
        .filter(|id| !a_codes.contains_key(*id))
        .map(|id| id.to_string())
        .collect();
    diff
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(id: &str, title: &str) -> Code {
        Code {
            id: id.into(),
            title: title.into(),
            definition: format!("Definition of {title}."),
            category: None,
            notes: None,
        }
    }

    #[test]
    fn minimal_document_parses() {
        let doc =
            br#"{"name":"t","preamble":"You are...","codes":[{"id":"scholar","title":"Scholar","definition":"..."}]}"#;
        let cb = parse_codebook(doc).unwrap();
        assert_eq!(cb.codes.len(), 1);
        assert_eq!(cb.version.len(), 64);
    }

    #[test]
    fn case_insensitive_duplicate_title_is_rejected() {
        let doc = br#"{"name":"t","preamble":"p","codes":[
            {"id":"a","title":"Scholar","definition":"x"},
            {"id":"b","title":"scholar","definition":"y"}]}"#;
        let err = parse_codebook(doc).unwrap_err().to_string();
        assert!(err.contains("\"Scholar\"") && err.contains("\"scholar\""), "{err}");
    }

    #[test]
    fn parse_errors_name_the_code() {
        let dup = br#"{"name":"t","preamble":"p","codes":[
            {"id":"a","title":"A","definition":"x"},
            {"id":"a","title":"B","definition":"y"}]}"#;
        assert!(matches!(
            parse_codebook(dup),
            Err(CodebookError::Invalid(Issue::DuplicateId { id })) if id == "a"
        ));
        let empty = br#"{"name":"t","preamble":"p","codes":[]}"#;
        assert!(matches!(
            parse_codebook(empty),
            Err(CodebookError::Invalid(Issue::EmptyCodebook))
        ));
        let bad_id = br#"{"name":"t","preamble":"p","codes":[{"id":"Big Id","title":"A","definition":"x"}]}"#;
        assert!(matches!(
            parse_codebook(bad_id),
            Err(CodebookError::Invalid(Issue::InvalidId { .. }))
        ));
        assert!(matches!(
            parse_codebook(b"{\"name\": 3}"),
            Err(CodebookError::Malformed(_))
        ));
    }

    #[test]
    fn only_trailing_whitespace_is_trimmed() {
        let doc =
            br#"{"name":"t","preamble":"  p  ","codes":[{"id":"a","title":"A ","definition":"  keep leading\n"}]}"#;
        let cb = parse_codebook(doc).unwrap();
        assert_eq!(cb.preamble, "  p");
        assert_eq!(cb.codes[0].title, "A");
        assert_eq!(cb.codes[0].definition, "  keep leading");
    }

    #[test]
    fn validate_reports_blank_definition_and_empty_codebook() {
        let mut c = code("scholar", "Scholar");
        c.definition = "   ".into();
        let issues = validate_codebook(&Codebook::new("t", "p", vec![c]));
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].code_id(), Some("scholar"));

        let issues = validate_codebook(&Codebook::new("t", "p", vec![]));
        assert_eq!(issues, vec![Issue::EmptyCodebook]);
        assert_eq!(issues[0].to_string(), "empty codebook");
    }

    #[test]
    fn validate_detects_stale_version() {
        let mut cb = Codebook::new("t", "p", vec![code("a", "A")]);
        assert!(validate_codebook(&cb).is_empty());
        cb.codes[0].definition.push('!');
        assert!(matches!(
            validate_codebook(&cb).as_slice(),
            [Issue::StaleVersion { .. }]
        ));
    }

    #[test]
    fn version_is_deterministic_and_sensitive() {
        let cb = Codebook::new("t", "p", vec![code("a", "A"), code("b", "B")]);
        let again = parse_codebook(cb.to_document_json().as_bytes()).unwrap();
        assert_eq!(cb.version, again.version);

        let mut edited = cb.codes.clone();
        edited[0].definition.push('x');
        assert_ne!(Codebook::new("t", "p", edited).version, cb.version);

        let swapped = vec![cb.codes[1].clone(), cb.codes[0].clone()];
        assert_ne!(Codebook::new("t", "p", swapped).version, cb.version);

        assert_ne!(Codebook::new("t", "p2", cb.codes.clone()).version, cb.version);
    }

    #[test]
    fn diff_examples() {
        let a = Codebook::new("t", "p", vec![code("a", "A"), code("b", "B")]);
        assert!(diff_codebooks(&a, &a).is_empty());

        let mut codes = a.codes.clone();
        codes[1].definition = "New text.".into();
        let b = Codebook::new("t", "p", codes);
        let d = diff_codebooks(&a, &b);
        assert_eq!(
            d.changed,
            vec![FieldChange {
                code_id: "b".into(),
                field: CodeField::Definition,
                before: Some("Definition of B.".into()),
                after: Some("New text.".into()),
            }]
        );
        assert!(d.added.is_empty() && d.removed.is_empty());

        let mut codes = a.codes.clone();
        codes.push(code("c", "C"));
        let d = diff_codebooks(&a, &Codebook::new("t", "p", codes));
        assert_eq!(d.added, vec!["c".to_string()]);
        assert!(d.removed.is_empty() && d.changed.is_empty());
    }

    #[test]
    fn with_code_builds_a_new_version() {
        let a = Codebook::new("t", "p", vec![code("a", "A"), code("b", "B")]);
        let mut edit = a.codes[0].clone();
        edit.title = "b".into();
        assert!(matches!(
            a.with_code(edit),
            Err(CodebookError::Invalid(Issue::DuplicateTitle { .. }))
        ));
        let mut edit = a.codes[0].clone();
        edit.definition = "Changed.".into();
        let b = a.with_code(edit).unwrap();
        assert_ne!(a.version, b.version);
        assert!(matches!(
            a.with_code(code("zzz", "Z")),
            Err(CodebookError::UnknownCode(_))
        ));
    }
}
