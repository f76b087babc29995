//! Scoring runs against gold labels, comparing runs, and listing
//! disagreements for manual review.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::RunRecord;
use crate::corpus::GoldLabels;
use crate::parser::justification_excerpt;
use crate::prompting::Scope;
use crate::reliability::{
    aggregate_mean_kappa, agreement_stats, interpret_agreement, AgreementBand, AgreementStats, Confusion2x2, MeanKappa,
};

const EXCERPT_CHARS: usize = 280;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("gold labels missing for {} (passage, code) pairs: {}", .0.len(), format_pairs(.0))]
    MissingGold(Vec<(String, String)>),
}

fn format_pairs(pairs: &[(String, String)]) -> String {
    let shown: Vec<String> = pairs.iter().take(10).map(|(p, c)| format!("({p}, {c})")).collect();
    let mut out = shown.join(", ");
    if pairs.len() > 10 {
        out.push_str(", ...");
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompareError {
    #[error("reports cover different codes (first only: {first_only:?}; second only: {second_only:?})")]
    CodeSetMismatch {
        first_only: Vec<String>,
        second_only: Vec<String>,
    },
}

/// One row of an agreement report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeAgreement {
    pub code_id: String,
    pub title: String,
    pub confusion: Confusion2x2,
    pub stats: AgreementStats,
    /// `None` when kappa is undefined.
    pub band: Option<AgreementBand>,
    /// Passages scored (`a + b + c + d`).
    pub n: u64,
    /// Passages left out because the reply was unparseable or missing.
    pub excluded: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub run_id: String,
    pub codebook_version: String,
    /// Rows in codebook order.
    pub per_code: Vec<CodeAgreement>,
    pub mean_kappa: MeanKappa,
}

impl AgreementReport {
    pub fn row(&self, code_id: &str) -> Option<&CodeAgreement> {
        self.per_code.iter().find(|r| r.code_id == code_id)
    }
}

fn check_gold(run: &RunRecord, gold: &GoldLabels) -> Result<(), ScoreError> {
    let missing = gold.missing_pairs(
        run.meta.passages.iter().map(|p| p.id.as_str()),
        run.meta.code_ids.iter().map(String::as_str),
    );
    if missing.is_empty() {
        Ok(())
    } else {
        Err(ScoreError::MissingGold(missing))
    }
}

/// Per-code machine label, or `None` when the cell has no usable decision.
fn machine_label(run: &RunRecord, passage_id: &str, code_id: &str) -> Option<bool> {
    run.decision_for(passage_id, code_id)?.applies(code_id)
}

/// Scores a run code by code against the gold standard. Unparseable or
/// missing cells are excluded from the table and counted in `excluded`.
pub fn score_run(run: &RunRecord, gold: &GoldLabels) -> Result<AgreementReport, ScoreError> {
    check_gold(run, gold)?;
    let mut per_code = Vec::new();
    for code_id in &run.meta.code_ids {
        let mut table = Confusion2x2::default();
        let mut excluded = 0u64;
        for passage in &run.meta.passages {
            let truth = gold.get(&passage.id, code_id).expect("coverage checked");
            match machine_label(run, &passage.id, code_id) {
                Some(machine) => table.record(machine, truth),
                None => excluded += 1,
            }
        }
        let stats = agreement_stats(&table);
        per_code.push(CodeAgreement {
            code_id: code_id.clone(),
            title: run
                .meta
                .codebook
                .code(code_id)
                .map(|c| c.title.clone())
                .unwrap_or_default(),
            confusion: table,
            band: stats.kappa.map(interpret_agreement),
            stats,
            n: table.n(),
            excluded,
        });
    }
    let kappas: Vec<Option<f64>> = per_code.iter().map(|r| r.stats.kappa).collect();
    Ok(AgreementReport {
        run_id: run.run_id.clone(),
        codebook_version: run.codebook_version.clone(),
        mean_kappa: aggregate_mean_kappa(&kappas),
        per_code,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into())
}

fn band_label(b: Option<AgreementBand>) -> String {
    b.map(|b| b.to_string()).unwrap_or_else(|| "undefined".into())
}

const REPORT_COLUMNS: [&str; 11] = [
    "code_id",
    "a",
    "b",
    "c",
    "d",
    "n",
    "excluded",
    "kappa",
    "percent_agreement",
    "ac1",
    "band",
];

fn report_cells(r: &CodeAgreement) -> [String; 11] {
    [
        r.code_id.clone(),
        r.confusion.a.to_string(),
        r.confusion.b.to_string(),
        r.confusion.c.to_string(),
        r.confusion.d.to_string(),
        r.n.to_string(),
        r.excluded.to_string(),
        fmt_opt(r.stats.kappa),
        format!("{:.6}", r.stats.percent_agreement),
        fmt_opt(r.stats.ac1),
        band_label(r.band),
    ]
}

/// One CSV row per code.
pub fn report_csv(report: &AgreementReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS).expect("writing to memory");
    for row in &report.per_code {
        w.write_record(report_cells(row)).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv output is utf-8")
}

/// The CSV columns as a Markdown table, followed by the mean kappa.
pub fn report_markdown(report: &AgreementReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", REPORT_COLUMNS.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(REPORT_COLUMNS.len()));
    for row in &report.per_code {
        let cells = report_cells(row).map(|c| c.replace('|', "\\|"));
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
    let _ = writeln!(
        out,
        "\nMean kappa: {} ({} undefined excluded)",
        fmt_opt(report.mean_kappa.mean),
        report.mean_kappa.excluded
    );
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaDelta {
    pub code_id: String,
    pub before: Option<f64>,
    pub after: Option<f64>,
    /// `after - before`; undefined if either side is.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub rows: Vec<KappaDelta>,
    /// Mean kappa of each report over the codes defined in both.
    pub mean_before: Option<f64>,
    pub mean_after: Option<f64>,
    pub delta_mean: Option<f64>,
}

/// Per-code kappa differences `second - first`.
pub fn compare_runs(first: &AgreementReport, second: &AgreementReport) -> Result<RunComparison, CompareError> {
    let a: BTreeSet<&str> = first.per_code.iter().map(|r| r.code_id.as_str()).collect();
    let b: BTreeSet<&str> = second.per_code.iter().map(|r| r.code_id.as_str()).collect();
    if a != b {
        return Err(CompareError::CodeSetMismatch {
            first_only: a.difference(&b).map(|s| s.to_string()).collect(),
            second_only: b.difference(&a).map(|s| s.to_string()).collect(),
        });
    }
    let rows: Vec<KappaDelta> = first
        .per_code
        .iter()
        .map(|r1| {
            let after = second.row(&r1.code_id).and_then(|r2| r2.stats.kappa);
            let before = r1.stats.kappa;
            KappaDelta {
                code_id: r1.code_id.clone(),
                before,
                after,
                delta: before.zip(after).map(|(x, y)| y - x),
            }
        })
        .collect();
    let both: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.before.zip(r.after)).collect();
    let (mean_before, mean_after) = if both.is_empty() {
        (None, None)
    } else {
        let n = both.len() as f64;
        (
            Some(both.iter().map(|p| p.0).sum::<f64>() / n),
            Some(both.iter().map(|p| p.1).sum::<f64>() / n),
        )
    };
    Ok(RunComparison {
        rows,
        mean_before,
        mean_after,
        delta_mean: mean_before.zip(mean_after).map(|(x, y)| y - x),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub passage_id: String,
    pub code_id: String,
    pub code_title: String,
    pub gold: bool,
    pub machine: bool,
    pub justification: Option<String>,
    pub excerpt: String,
}

fn excerpt(text: &str) -> String {
    let mut chars = text.chars();
    let head: String = chars.by_ref().take(EXCERPT_CHARS).collect();
    if chars.next().is_some() {
        format!("{}…", head.trim_end())
    } else {
        head
    }
}

/// Cells where the machine and the gold standard disagree, sorted by
/// (code id, passage id). Unparseable cells are not listed.
pub fn disagreements(run: &RunRecord, gold: &GoldLabels) -> Result<Vec<Disagreement>, ScoreError> {
    check_gold(run, gold)?;
    let mut out = Vec::new();
    for code_id in &run.meta.code_ids {
        let title = run
            .meta
            .codebook
            .code(code_id)
            .map(|c| c.title.clone())
            .unwrap_or_default();
        for passage in &run.meta.passages {
            let truth = gold.get(&passage.id, code_id).expect("coverage checked");
            let Some(decision) = run.decision_for(&passage.id, code_id) else {
                continue;
            };
            let Some(machine) = decision.applies(code_id) else {
                continue;
            };
            if machine == truth {
                continue;
            }
            let justification = decision.justification.as_deref().map(|j| match run.config.scope {
                Scope::FullCodebook => justification_excerpt(j, &title).unwrap_or(j).to_string(),
                Scope::PerCode => j.to_string(),
            });
            out.push(Disagreement {
                passage_id: passage.id.clone(),
                code_id: code_id.clone(),
                code_title: title.clone(),
                gold: truth,
                machine,
                justification,
                excerpt: excerpt(&passage.text),
            });
        }
    }
    out.sort_by(|x, y| (&x.code_id, &x.passage_id).cmp(&(&y.code_id, &y.passage_id)));
    Ok(out)
}
