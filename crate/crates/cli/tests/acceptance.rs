//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use axum::http::{Method, StatusCode};
use coda_core::codebook::Codebook;
use coda_core::corpus::{extract_from_documents, keyword_runs, segment_paragraphs};
use coda_core::experiment::{compare_runs, AgreementReport, CodeAgreement};
use coda_core::fixtures::{
    du_bois_codebook, extraction_cases, parser_cases, DEMO_GOLD_CSV, DEMO_PASSAGES_JSONL, DEMO_SCRIPT_JSON,
    DU_BOIS_CODEBOOK_JSON, EXTRACTION_KEYWORD,
};
use coda_core::parser::{parse_decision, render_reply, ParseStatus};
use coda_core::reliability::{
    aggregate_mean_kappa, agreement_stats, cohen_kappa, gwet_ac1, interpret_agreement, AgreementBand, Confusion2x2,
};
use common::*;
use num_rational::Ratio;
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use serde_json::json;

type Outcome = Result<String, String>;
type Q = Ratio<i64>;
type Check = fn() -> Outcome;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    }};
}

fn within(got: Option<f64>, want: f64, tol: f64) -> bool {
    got.is_some_and(|g| (g - want).abs() <= tol)
}

fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

/// (p_o, kappa, ac1) in exact arithmetic.
fn reference(t: &Confusion2x2) -> Option<(Q, Option<Q>, Q)> {
    let (a, b, c, d) = (t.a as i64, t.b as i64, t.c as i64, t.d as i64);
    let n = a + b + c + d;
    if n == 0 {
        return None;
    }
    let one = Q::from_integer(1);
    let p_o = Q::new(a + d, n);
    let machine = Q::new(a + b, n);
    let gold = Q::new(a + c, n);
    let p_e = machine * gold + (one - machine) * (one - gold);
    let kappa = (p_e != one).then(|| (p_o - p_e) / (one - p_e));
    let pi = (machine + gold) / Q::from_integer(2);
    let p_e1 = Q::from_integer(2) * pi * (one - pi);
    Some((p_o, kappa, (p_o - p_e1) / (one - p_e1)))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut tables = 0u64;
    for n in 0..=12u64 {
        for a in 0..=n {
            for b in 0..=n - a {
                for c in 0..=n - a - b {
                    let t = Confusion2x2::new(a, b, c, n - a - b - c);
                    let s = agreement_stats(&t);
                    tables += 1;
                    match reference(&t) {
                        None => ensure!(
                            cohen_kappa(&t).is_none() && gwet_ac1(&t).is_none(),
                            "empty table {t:?} should be undefined"
                        ),
                        Some((p_o, kappa, ac1)) => {
                            ensure!((s.percent_agreement - to_f64(p_o)).abs() <= 1e-12, "p_o {t:?}");
                            match kappa {
                                None => ensure!(s.kappa.is_none(), "kappa {t:?} should be undefined"),
                                Some(k) => ensure!(within(s.kappa, to_f64(k), 1e-12), "kappa {t:?}"),
                            }
                            ensure!(within(s.ac1, to_f64(ac1), 1e-12), "ac1 {t:?}");
                        }
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{tables} tables in {:.2?}", elapsed))
}

fn hand_tables() -> Outcome {
    let s = agreement_stats(&Confusion2x2::new(4, 1, 1, 4));
    ensure!(
        within(s.kappa, 0.6, 1e-9) && within(s.ac1, 0.6, 1e-9),
        "4,1,1,4 gave {s:?}"
    );
    let s = agreement_stats(&Confusion2x2::new(1, 1, 1, 7));
    ensure!(within(s.kappa, 0.375, 1e-9), "1,1,1,7 kappa {:?}", s.kappa);
    ensure!(within(s.ac1, 12.0 / 17.0, 1e-9), "1,1,1,7 ac1 {:?}", s.ac1);
    Ok(format!(
        "1,1,1,7: kappa {:.5}, ac1 {:.5}",
        s.kappa.unwrap(),
        s.ac1.unwrap()
    ))
}

fn bands() -> Outcome {
    for (k, want) in [
        (0.81, AgreementBand::Excellent),
        (0.60, AgreementBand::Substantial),
        (0.34, AgreementBand::Low),
    ] {
        let got = interpret_agreement(k);
        ensure!(got == want, "{k} banded as {got}");
    }
    Ok("0.81 excellent, 0.60 substantial, 0.34 low".into())
}

fn end_to_end_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (name, body) in [
        ("codebook.json", DU_BOIS_CODEBOOK_JSON),
        ("passages.jsonl", DEMO_PASSAGES_JSONL),
        ("gold.csv", DEMO_GOLD_CSV),
        ("script.json", DEMO_SCRIPT_JSON),
    ] {
        std::fs::write(dir.path().join(name), body).map_err(|e| e.to_string())?;
    }
    let coda = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_coda"))
            .args(args)
            .current_dir(dir.path())
            .env_remove("CODA_CACHE_DIR")
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(
            out.status.success(),
            "coda {} failed: {}",
            args[0],
            String::from_utf8_lossy(&out.stderr)
        );
        Ok(())
    };
    let start = Instant::now();
    for i in 1..=2 {
        let run = format!("run{i}.json");
        let report = format!("report{i}.csv");
        coda(&[
            "run",
            "--codebook",
            "codebook.json",
            "--corpus",
            "passages.jsonl",
            "--scope",
            "per-code",
            "--reasoning",
            "cot",
            "--model",
            "mock-model",
            "--provider",
            "mock",
            "--script",
            "script.json",
            "--cache-dir",
            "cache",
            "--out",
            &run,
        ])?;
        coda(&["report", "--run", &run, "--gold", "gold.csv", "--out", &report])?;
    }
    let elapsed = start.elapsed();
    let read = |name: &str| std::fs::read(dir.path().join(name)).map_err(|e| format!("{name}: {e}"));
    ensure!(read("run1.json")? == read("run2.json")?, "run files differ");
    ensure!(read("report1.csv")? == read("report2.csv")?, "report files differ");
    let stats = |name: &str| -> Result<serde_json::Value, String> {
        serde_json::from_slice(&read(name)?).map_err(|e| e.to_string())
    };
    let (first, second) = (stats("run1.exec.json")?, stats("run2.exec.json")?);
    ensure!(
        first["provider_calls"] == 54,
        "cold run made {} calls",
        first["provider_calls"]
    );
    ensure!(
        second["provider_calls"] == 0,
        "warm run made {} calls",
        second["provider_calls"]
    );
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("54 cells, warm replay 0 provider calls, {:.2?}", elapsed))
}

fn random_words(rng: &mut StdRng) -> String {
    const WORDS: [&str; 12] = [
        "the",
        "passage",
        "mentions",
        "Du",
        "Bois",
        "editorial",
        "(1903)",
        "lecture,",
        "civil",
        "rights",
        "memorial",
        "students'",
    ];
    let n = rng.random_range(1..=14);
    let mut s: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
    s.push("done.");
    s.join(" ")
}

fn parser_suite() -> Outcome {
    let cb = du_bois_codebook();
    let cases = parser_cases();
    ensure!(cases.len() >= 50, "only {} synthetic cases", cases.len());
    for case in &cases {
        let d = parse_decision("p", &case.text, &cb, case.scope_code.as_deref());
        let applied: BTreeSet<String> = case.applied.iter().cloned().collect();
        ensure!(
            d.parse_status == case.status,
            "{}: status {:?}",
            case.name,
            d.parse_status
        );
        ensure!(d.applied == applied, "{}: applied {:?}", case.name, d.applied);
        ensure!(
            d.unknown_titles == case.unknown_titles,
            "{}: unknown {:?}",
            case.name,
            d.unknown_titles
        );
    }

    let mut rng = StdRng::seed_from_u64(0x00c0_da00);
    for i in 0..1000 {
        let chosen: BTreeSet<usize> = (0..cb.codes.len()).filter(|_| rng.random_bool(0.3)).collect();
        let titles: Vec<String> = chosen
            .iter()
            .map(|&c| match rng.random_range(0..3) {
                0 => cb.codes[c].title.clone(),
                1 => cb.codes[c].title.to_lowercase(),
                _ => cb.codes[c].title.to_uppercase(),
            })
            .collect();
        let refs: Vec<&str> = titles.iter().map(String::as_str).collect();
        let justification = rng.random_bool(0.8).then(|| random_words(&mut rng));
        let text = render_reply(justification.as_deref(), &refs);
        let d = parse_decision("p", &text, &cb, None);
        let expected: BTreeSet<String> = chosen.iter().map(|&c| cb.codes[c].id.clone()).collect();
        ensure!(
            d.parse_status == ParseStatus::Clean,
            "round trip {i}: {:?}\n{text}",
            d.parse_status
        );
        ensure!(d.applied == expected, "round trip {i}: {:?}\n{text}", d.applied);
        ensure!(
            d.justification == justification,
            "round trip {i}: justification {:?}",
            d.justification
        );
    }
    Ok(format!("{} synthetic replies, 1000 round trips", cases.len()))
}

fn report_with(kappas: &[f64]) -> AgreementReport {
    let per_code = kappas
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let table = Confusion2x2::new(1, 0, 0, 1);
            let mut stats = agreement_stats(&table);
            stats.kappa = Some(k);
            CodeAgreement {
                code_id: format!("code{i}"),
                title: format!("Code {i}"),
                confusion: table,
                stats,
                band: Some(interpret_agreement(k)),
                n: 2,
                excluded: 0,
            }
        })
        .collect();
    let values: Vec<Option<f64>> = kappas.iter().copied().map(Some).collect();
    AgreementReport {
        run_id: "fixture".into(),
        codebook_version: "0".into(),
        per_code,
        mean_kappa: aggregate_mean_kappa(&values),
    }
}

fn aggregation() -> Outcome {
    let direct = report_with(&[0.81, 0.45, 0.62, 0.50, 0.70, 0.38, 0.66, 0.55, 0.64]);
    let cot = report_with(&[0.85, 0.60, 0.70, 0.58, 0.77, 0.52, 0.72, 0.66, 0.72]);
    let cmp = compare_runs(&direct, &cot).map_err(|e| e.to_string())?;
    ensure!(within(cmp.mean_before, 0.59, 1e-12), "before {:?}", cmp.mean_before);
    ensure!(within(cmp.mean_after, 0.68, 1e-12), "after {:?}", cmp.mean_after);
    ensure!(within(cmp.delta_mean, 0.09, 1e-12), "delta {:?}", cmp.delta_mean);
    Ok(format!("delta of means {:.12}", cmp.delta_mean.unwrap()))
}

fn extraction() -> Outcome {
    let cases = extraction_cases();
    ensure!(cases.len() == 20, "{} documents", cases.len());
    let docs: Vec<_> = cases.iter().map(|c| c.document.clone()).collect();
    let all = extract_from_documents(&docs, EXTRACTION_KEYWORD);
    let mut total = 0;
    for case in &cases {
        let paragraphs = segment_paragraphs(&case.document.text);
        let runs = keyword_runs(&paragraphs, EXTRACTION_KEYWORD);
        let mut last_end = 0;
        for &(s, e) in &runs {
            ensure!(
                s < e && s >= last_end,
                "{}: overlapping spans {runs:?}",
                case.document.id
            );
            last_end = e;
        }
        let prefix = format!("{}#", case.document.id);
        let got: Vec<&str> = all
            .iter()
            .filter(|p| p.id.starts_with(&prefix))
            .map(|p| p.text.as_str())
            .collect();
        ensure!(got == case.expected, "{}: got {got:?}", case.document.id);
        ensure!(
            got.iter().all(|t| t.contains(EXTRACTION_KEYWORD)),
            "{}: keyword missing",
            case.document.id
        );
        total += got.len();
    }
    ensure!(total == all.len(), "stray passages");
    let ids: BTreeSet<&str> = all.iter().map(|p| p.id.as_str()).collect();
    ensure!(ids.len() == all.len(), "duplicate passage ids");
    Ok(format!("{total} passages from 20 documents"))
}

async fn refinement_loop() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let app = app(dir.path(), &two_script());
    let expect = |status: StatusCode, want: StatusCode, body: &serde_json::Value| -> Result<(), String> {
        ensure!(status == want, "status {status}: {body}");
        Ok(())
    };

    let (status, body) = call(
        &app,
        Method::POST,
        "/runs",
        Some(json!({"codebook_id": CODEBOOK_ID, "config": per_code_cot()})),
    )
    .await;
    expect(status, StatusCode::CREATED, &body)?;
    let parent = body["run_id"].as_str().unwrap_or_default().to_string();

    let (_, found) = get(&app, &format!("/runs/{parent}/disagreements")).await;
    let target = found
        .as_array()
        .and_then(|f| {
            f.iter()
                .find(|d| d["code_id"] == REFINED_CODE && d["passage_id"] == FLIPPED_PASSAGE)
        })
        .cloned();
    ensure!(target.is_some(), "chosen disagreement absent: {found}");
    let (_, report) = get(&app, &format!("/runs/{parent}/report")).await;
    let before = kappa_of(&report, REFINED_CODE).ok_or("no parent kappa")?;

    let (status, change) = call(
        &app,
        Method::PUT,
        &format!("/codebooks/{CODEBOOK_ID}/codes/{REFINED_CODE}"),
        Some(json!({"definition": REFINED_DEFINITION})),
    )
    .await;
    expect(status, StatusCode::OK, &change)?;
    let version = change["new_version"].as_str().unwrap_or_default().to_string();
    let refined: Codebook = refined_codebook();
    ensure!(version == refined.version, "edit produced {version}");

    let passage_ids: Vec<String> = coda_core::fixtures::demo_passages().into_iter().map(|p| p.id).collect();
    let (status, created) = call(
        &app,
        Method::POST,
        &format!("/runs/{parent}/retest"),
        Some(json!({
            "parent_run_id": parent,
            "passage_ids": passage_ids,
            "code_ids": [REFINED_CODE],
            "codebook_version": version
        })),
    )
    .await;
    expect(status, StatusCode::CREATED, &created)?;
    let derived = created["derived_run_id"].as_str().unwrap_or_default().to_string();

    let (_, found) = get(&app, &format!("/runs/{derived}/disagreements")).await;
    let still = found
        .as_array()
        .is_some_and(|f| f.iter().any(|d| d["passage_id"] == FLIPPED_PASSAGE));
    ensure!(!still, "disagreement persists: {found}");
    let (_, report) = get(&app, &format!("/runs/{derived}/report")).await;
    let after = kappa_of(&report, REFINED_CODE).ok_or("no derived kappa")?;
    ensure!(after > before, "kappa {before} -> {after}");
    Ok(format!(
        "{REFINED_CODE} on {FLIPPED_PASSAGE} now agrees, kappa {before:.6} -> {after:.6}"
    ))
}

fn refinement() -> Outcome {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?
        .block_on(refinement_loop())
}

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("reliability oracle equivalence", oracle_equivalence),
        ("hand tables", hand_tables),
        ("agreement bands", bands),
        ("end-to-end determinism", end_to_end_determinism),
        ("parser suite", parser_suite),
        ("aggregation arithmetic", aggregation),
        ("extraction contract", extraction),
        ("refinement loop", refinement),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
