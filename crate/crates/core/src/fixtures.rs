//! Shipped fixtures: the Du Bois codebook, a six-passage demo corpus with
//! gold labels and a mock-provider script, and synthetic cases for the
//! parser and the passage extractor.

use crate::codebook::{parse_codebook, Codebook};
use crate::corpus::{load_gold, load_passages, CorpusRecord, GoldLabels, Passage};
use crate::llm_client::Script;
use crate::parser::ParseStatus;

/// Raw JSON of the nine-code, three-category Du Bois news codebook.
pub const DU_BOIS_CODEBOOK_JSON: &str = include_str!("../fixtures/du_bois_codebook.json");

pub fn du_bois_codebook() -> Codebook {
    parse_codebook(DU_BOIS_CODEBOOK_JSON.as_bytes()).expect("shipped codebook fixture is valid")
}

pub const DEMO_PASSAGES_JSONL: &str = include_str!("../fixtures/demo/passages.jsonl");
pub const DEMO_GOLD_CSV: &str = include_str!("../fixtures/demo/gold.csv");
/// Per-code chain-of-thought replies for every demo cell. Three cells
/// disagree with the gold labels: (p2, coalition), (p3, advocacy) and
/// (p6, scholar).
pub const DEMO_SCRIPT_JSON: &str = include_str!("../fixtures/demo/script.json");

pub fn demo_passages() -> Vec<Passage> {
    load_passages(DEMO_PASSAGES_JSONL.as_bytes()).expect("demo corpus is valid")
}

pub fn demo_gold() -> GoldLabels {
    load_gold(DEMO_GOLD_CSV.as_bytes()).expect("demo gold labels are valid")
}

pub fn demo_script() -> Script {
    serde_json::from_str(DEMO_SCRIPT_JSON).expect("demo script is valid")
}

/// A reply with the status and applied set it must parse to.
#[derive(Debug, Clone)]
pub struct ParserCase {
    pub name: String,
    pub text: String,
    pub scope_code: Option<String>,
    pub applied: Vec<String>,
    pub unknown_titles: Vec<String>,
    pub status: ParseStatus,
}

fn case(
    name: String,
    text: String,
    scope: Option<&str>,
    applied: &[&str],
    unknown: &[&str],
    status: ParseStatus,
) -> ParserCase {
    ParserCase {
        name,
        text,
        scope_code: scope.map(String::from),
        applied: applied.iter().map(|s| s.to_string()).collect(),
        unknown_titles: unknown.iter().map(|s| s.to_string()).collect(),
        status,
    }
}

/// Synthetic replies against [`du_bois_codebook`]: six shapes per code
/// (conforming, `- None`, trailing prose, quoted tag, missing tag, unknown
/// title) plus a handful of full-codebook replies.
pub fn parser_cases() -> Vec<ParserCase> {
    let cb = du_bois_codebook();
    let mut cases = Vec::new();
    for code in &cb.codes {
        let (id, t) = (code.id.as_str(), code.title.as_str());
        let scope = Some(id);
        cases.push(case(
            format!("{id}/conforming"),
            format!("Justification: The passage fits {t}.\n\nCodes Applied:\n- {t}"),
            scope,
            &[id],
            &[],
            ParseStatus::Clean,
        ));
        cases.push(case(
            format!("{id}/none"),
            format!("Justification: The passage does not fit {t}.\n\nCodes Applied:\n- None"),
            scope,
            &[],
            &[],
            ParseStatus::Clean,
        ));
        cases.push(case(
            format!("{id}/trailing-prose"),
            format!("Codes Applied:\n- {t}\n\nIn summary, the passage clearly reflects this code."),
            scope,
            &[id],
            &[],
            ParseStatus::Recovered,
        ));
        cases.push(case(
            format!("{id}/quoted-tag"),
            format!(
                "Justification: I was asked to end with a list.\nCodes Applied: would normally list {t} here, \
                 but I will decide below.\n\nCodes Applied:\n- {t}"
            ),
            scope,
            &[id],
            &[],
            ParseStatus::Clean,
        ));
        cases.push(case(
            format!("{id}/missing-tag"),
            format!("The passage is about {t}, and I would apply it."),
            scope,
            &[],
            &[],
            ParseStatus::Unparseable,
        ));
        cases.push(case(
            format!("{id}/unknown-title"),
            "Codes Applied:\n- Academic Repute".to_string(),
            scope,
            &[],
            &["Academic Repute"],
            ParseStatus::Recovered,
        ));
    }
    cases.push(case(
        "full/multi".into(),
        "Justification:\nScholar: He is called a sociologist.\nActivist: No activism is described.\n\n\
         Codes Applied:\n- Scholar\n- Mention of Scholarly Work"
            .into(),
        None,
        &["scholar", "scholarly_work"],
        &[],
        ParseStatus::Clean,
    ));
    cases.push(case(
        "full/numbered".into(),
        "Codes Applied:\n1. activist\n2) COALITION BUILDING.".into(),
        None,
        &["activist", "coalition"],
        &[],
        ParseStatus::Clean,
    ));
    cases.push(case(
        "full/none".into(),
        "Codes Applied:\n* None".into(),
        None,
        &[],
        &[],
        ParseStatus::Clean,
    ));
    cases.push(case(
        "full/mixed-unknown".into(),
        "Codes Applied:\n- Scholar\n- Academic Repute".into(),
        None,
        &["scholar"],
        &["Academic Repute"],
        ParseStatus::Recovered,
    ));
    cases.push(case(
        "per-code/out-of-scope".into(),
        "Codes Applied:\n- Activist".into(),
        Some("scholar"),
        &[],
        &["Activist"],
        ParseStatus::Recovered,
    ));
    cases.push(case(
        "empty".into(),
        String::new(),
        None,
        &[],
        &[],
        ParseStatus::Unparseable,
    ));
    cases
}

/// A document with the passages extraction must produce from it.
#[derive(Debug, Clone)]
pub struct ExtractionCase {
    pub document: CorpusRecord,
    pub expected: Vec<String>,
}

pub const EXTRACTION_KEYWORD: &str = "Du Bois";

/// Paragraph layouts (`K` mentions the keyword, `x` does not) with the
/// paragraph ranges of their maximal keyword runs, worked out by hand.
const LAYOUTS: [(&str, &[(usize, usize)]); 20] = [
    ("K", &[(0, 1)]),
    ("x", &[]),
    ("KK", &[(0, 2)]),
    ("KxK", &[(0, 1), (2, 3)]),
    ("xKKx", &[(1, 3)]),
    ("KKKxK", &[(0, 3), (4, 5)]),
    ("xxK", &[(2, 3)]),
    ("Kxx", &[(0, 1)]),
    ("KxKxK", &[(0, 1), (2, 3), (4, 5)]),
    ("xKxKKxx", &[(1, 2), (3, 5)]),
    ("KKKK", &[(0, 4)]),
    ("xxxx", &[]),
    ("xKKKx", &[(1, 4)]),
    ("KxxK", &[(0, 1), (3, 4)]),
    ("KKxKK", &[(0, 2), (3, 5)]),
    ("xKx", &[(1, 2)]),
    ("KKxxKKK", &[(0, 2), (4, 7)]),
    ("xKKxKx", &[(1, 3), (4, 5)]),
    ("KxKKxKKK", &[(0, 1), (2, 4), (5, 8)]),
    ("xxKxxKKx", &[(2, 3), (5, 7)]),
];

/// Twenty synthetic news documents. Separators vary between one and
/// several blank lines (some whitespace-only), paragraphs may wrap over
/// two lines, and non-matching paragraphs include case variants of the
/// keyword, which do not count.
pub fn extraction_cases() -> Vec<ExtractionCase> {
    LAYOUTS
        .iter()
        .enumerate()
        .map(|(d, (layout, runs))| {
            let paragraphs: Vec<String> = layout
                .chars()
                .enumerate()
                .map(|(i, kind)| match (kind, (d + i) % 3) {
                    ('K', 0) => format!("Paragraph {i} of story {d} quotes Du Bois on the color line."),
                    ('K', 1) => format!("Paragraph {i} of story {d} recalls how Du Bois\nfounded The Crisis."),
                    ('K', _) => format!("In paragraph {i} of story {d}, W.E.B. Du Bois is remembered."),
                    (_, 0) => format!("Paragraph {i} of story {d} covers the school board budget."),
                    (_, 1) => format!("Paragraph {i} of story {d} mentions a du bois street fair."),
                    _ => format!("Paragraph {i} of story {d} reports\nthe weather."),
                })
                .collect();
            let separator = ["\n\n", "\n\n\n", "\n   \n", "\n\t\n\n"][d % 4];
            let text = format!("{}\n", paragraphs.join(separator));
            let expected = runs.iter().map(|&(s, e)| paragraphs[s..e].join("\n\n")).collect();
            ExtractionCase {
                document: CorpusRecord {
                    id: format!("story-{d:02}"),
                    text,
                    source: Some("Synthetic Gazette".into()),
                    date: Some(format!("2020-01-{:02}", d + 1)),
                },
                expected,
            }
        })
        .collect()
}
