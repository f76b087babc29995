//! Corpus ingestion: paragraph segmentation, keyword-anchored passage
//! extraction, desk-scale statistics, and the gold label matrix.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed corpus record: {source}")]
    Record {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: record {id:?} has empty text")]
    EmptyText { line: usize, id: String },
    #[error("duplicate passage id {0:?}")]
    DuplicateId(String),
    #[error("corpus file is not valid UTF-8")]
    Encoding,
}

#[derive(Debug, Error)]
pub enum GoldError {
    #[error("gold labels: expected header `passage_id,code_id,applied`, found {0:?}")]
    Header(String),
    #[error("gold labels line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("gold labels line {line}: value {token:?} is not 0 or 1")]
    BadValue { line: u64, token: String },
    #[error("gold labels: conflicting values for ({passage_id}, {code_id})")]
    Conflict { passage_id: String, code_id: String },
}

/// A unit of text to be coded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
    #[serde(default)]
    pub word_count: usize,
    #[serde(default)]
    pub sentence_count: usize,
}

impl Passage {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Passage {
            id: id.into(),
            word_count: count_words(&text),
            sentence_count: count_sentences(&text),
            text,
            source: None,
            date: None,
        }
    }
}

/// One line of a corpus JSON-lines file. The same shape holds raw documents
/// and extracted passages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

impl From<&Passage> for CorpusRecord {
    fn from(p: &Passage) -> Self {
        CorpusRecord {
            id: p.id.clone(),
            text: p.text.clone(),
            source: p.source.clone(),
            date: p.date.clone(),
        }
    }
}

/// Whitespace-delimited tokens.
pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Occurrences of `.`, `!` or `?` followed by whitespace or end of text.
pub fn count_sentences(text: &str) -> usize {
    let mut chars = text.chars().peekable();
    let mut count = 0;
    while let Some(ch) = chars.next() {
        if matches!(ch, '.' | '!' | '?') && chars.peek().is_none_or(|next| next.is_whitespace()) {
            count += 1;
        }
    }
    count
}

/// Splits on blank lines (lines that are empty or whitespace-only). Each
/// paragraph is trimmed; empty paragraphs are dropped.
pub fn segment_paragraphs(document: &str) -> Vec<String> {
    let mut paragraphs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in document.lines() {
        if line.trim().is_empty() {
            flush(&mut current, &mut paragraphs);
        } else {
            current.push(line);
        }
    }
    flush(&mut current, &mut paragraphs);
    paragraphs
}

fn flush(lines: &mut Vec<&str>, out: &mut Vec<String>) {
    if lines.is_empty() {
        return;
    }
    let para = lines.join("\n");
    let para = para.trim();
    if !para.is_empty() {
        out.push(para.to_string());
    }
    lines.clear();
}

/// Paragraph index ranges `[start, end)` of maximal runs of consecutive
/// paragraphs that contain `keyword`.
pub fn keyword_runs(paragraphs: &[String], keyword: &str) -> Vec<(usize, usize)> {
    if keyword.is_empty() {
        return Vec::new();
    }
    let mut runs = Vec::new();
    let mut start = None;
    for (i, para) in paragraphs.iter().enumerate() {
        match (para.contains(keyword), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, paragraphs.len()));
    }
    runs
}

/// Extracts one passage per maximal run of consecutive keyword-containing
/// paragraphs (case-sensitive). Paragraphs in a run are joined with a single
/// blank line. Passage ids are `p1`, `p2`, ... in document order.
///
/// An empty keyword matches nothing.
pub fn extract_passages(document: &str, keyword: &str) -> Vec<Passage> {
    let paragraphs = segment_paragraphs(document);
    keyword_runs(&paragraphs, keyword)
        .into_iter()
        .enumerate()
        .map(|(i, (s, e))| Passage::new(format!("p{}", i + 1), paragraphs[s..e].join("\n\n")))
        .collect()
}

/// Runs [`extract_passages`] over every document, prefixing passage ids with
/// the document id (`<doc>#p1`) and carrying source and date over.
pub fn extract_from_documents(docs: &[CorpusRecord], keyword: &str) -> Vec<Passage> {
    docs.iter()
        .flat_map(|doc| {
            extract_passages(&doc.text, keyword).into_iter().map(move |mut p| {
                p.id = format!("{}#{}", doc.id, p.id);
                p.source = doc.source.clone();
                p.date = doc.date.clone();
                p
            })
        })
        .collect()
}

/// Reads JSON-lines records. Blank lines are skipped; ids must be unique.
pub fn load_records(bytes: &[u8]) -> Result<Vec<CorpusRecord>, CorpusError> {
    let text = std::str::from_utf8(bytes).map_err(|_| CorpusError::Encoding)?;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(line).map_err(|source| CorpusError::Record { line: idx + 1, source })?;
        if record.text.trim().is_empty() {
            return Err(CorpusError::EmptyText {
                line: idx + 1,
                id: record.id,
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

/// Reads a passage file, recomputing word and sentence counts.
pub fn load_passages(bytes: &[u8]) -> Result<Vec<Passage>, CorpusError> {
    Ok(load_records(bytes)?
        .into_iter()
        .map(|r| Passage {
            source: r.source,
            date: r.date,
            ..Passage::new(r.id, r.text)
        })
        .collect())
}

pub fn write_passages(passages: &[Passage]) -> String {
    let mut out = String::new();
    for p in passages {
        out.push_str(&serde_json::to_string(&CorpusRecord::from(p)).expect("records serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n: usize,
    pub mean_words: f64,
    pub sd_words: f64,
    pub mean_sentences: f64,
    pub sd_sentences: f64,
}

fn mean_and_population_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn corpus_stats(passages: &[Passage]) -> CorpusStats {
    let words: Vec<f64> = passages.iter().map(|p| p.word_count as f64).collect();
    let sentences: Vec<f64> = passages.iter().map(|p| p.sentence_count as f64).collect();
    let (mean_words, sd_words) = mean_and_population_sd(&words);
    let (mean_sentences, sd_sentences) = mean_and_population_sd(&sentences);
    CorpusStats {
        n: passages.len(),
        mean_words,
        sd_words,
        mean_sentences,
        sd_sentences,
    }
}

/// Human gold-standard labels: an explicit 0/1 for every (passage, code) pair.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoldLabels {
    entries: BTreeMap<(String, String), bool>,
}

impl GoldLabels {
    pub fn from_entries(entries: impl IntoIterator<Item = ((String, String), bool)>) -> Self {
        GoldLabels {
            entries: entries.into_iter().collect(),
        }
    }

    pub fn get(&self, passage_id: &str, code_id: &str) -> Option<bool> {
        self.entries
            .get(&(passage_id.to_string(), code_id.to_string()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, bool)> {
        self.entries.iter().map(|((p, c), v)| (p.as_str(), c.as_str(), *v))
    }

    pub fn passage_ids(&self) -> BTreeSet<&str> {
        self.entries.keys().map(|(p, _)| p.as_str()).collect()
    }

    pub fn code_ids(&self) -> BTreeSet<&str> {
        self.entries.keys().map(|(_, c)| c.as_str()).collect()
    }

    /// Pairs from the given grid that have no label.
    pub fn missing_pairs<'a>(
        &self,
        passage_ids: impl IntoIterator<Item = &'a str> + Clone,
        code_ids: impl IntoIterator<Item = &'a str>,
    ) -> Vec<(String, String)> {
        let mut missing = Vec::new();
        for code in code_ids {
            for passage in passage_ids.clone() {
                if self.get(passage, code).is_none() {
                    missing.push((passage.to_string(), code.to_string()));
                }
            }
        }
        missing.sort();
        missing
    }

    /// Ids referenced by the labels that are absent from the corpus or codebook.
    pub fn unknown_references<'a>(
        &self,
        passage_ids: impl IntoIterator<Item = &'a str>,
        code_ids: impl IntoIterator<Item = &'a str>,
    ) -> (Vec<String>, Vec<String>) {
        let passages: HashSet<&str> = passage_ids.into_iter().collect();
        let codes: HashSet<&str> = code_ids.into_iter().collect();
        let unknown_p = self
            .passage_ids()
            .into_iter()
            .filter(|p| !passages.contains(p))
            .map(String::from)
            .collect();
        let unknown_c = self
            .code_ids()
            .into_iter()
            .filter(|c| !codes.contains(c))
            .map(String::from)
            .collect();
        (unknown_p, unknown_c)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("passage_id,code_id,applied\n");
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for (p, c, v) in self.iter() {
            w.write_record([p, c, if v { "1" } else { "0" }])
                .expect("writing to memory");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf8"));
        out
    }
}

/// Parses the long-format gold CSV (`passage_id,code_id,applied`).
pub fn load_gold(bytes: &[u8]) -> Result<GoldLabels, GoldError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader.headers().map_err(|e| GoldError::Header(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["passage_id", "code_id", "applied"] {
        return Err(GoldError::Header(headers.iter().collect::<Vec<_>>().join(",")));
    }

    let mut entries: BTreeMap<(String, String), bool> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| GoldError::Malformed {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let (Some(passage), Some(code), Some(token)) = (row.get(0), row.get(1), row.get(2)) else {
            return Err(GoldError::Malformed {
                line,
                message: "expected 3 fields".into(),
            });
        };
        if passage.is_empty() || code.is_empty() {
            return Err(GoldError::Malformed {
                line,
                message: "empty passage_id or code_id".into(),
            });
        }
        let value = match token {
            "1" => true,
            "0" => false,
            other => {
                return Err(GoldError::BadValue {
                    line,
                    token: other.to_string(),
                })
            }
        };
        let key = (passage.to_string(), code.to_string());
        match entries.get(&key) {
            Some(&prev) if prev != value => {
                return Err(GoldError::Conflict {
                    passage_id: key.0,
                    code_id: key.1,
                })
            }
            _ => {
                entries.insert(key, value);
            }
        }
    }
    Ok(GoldLabels { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmentation_examples() {
        assert_eq!(segment_paragraphs("A\n\nB"), vec!["A", "B"]);
        assert_eq!(segment_paragraphs("A\n\n\n\nB\n"), vec!["A", "B"]);
        assert!(segment_paragraphs("").is_empty());
        assert_eq!(
            segment_paragraphs("  one\ntwo  \n \t \nthree\r\n"),
            vec!["one\ntwo", "three"]
        );
    }

    #[test]
    fn extraction_examples() {
        let doc = "Du Bois wrote.\n\nNothing here.\n\nMore on Du Bois.";
        let ps = extract_passages(doc, "Du Bois");
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[0].text, "Du Bois wrote.");
        assert_eq!(ps[1].text, "More on Du Bois.");

        let doc = "Du Bois one.\n\nDu Bois two.";
        let ps = extract_passages(doc, "Du Bois");
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0].text, "Du Bois one.\n\nDu Bois two.");

        assert!(extract_passages("nothing\n\nhere", "Du Bois").is_empty());
        assert!(extract_passages("du bois lowercase", "Du Bois").is_empty());
        assert!(extract_passages("anything", "").is_empty());
    }

    #[test]
    fn counting_rules() {
        let p = Passage::new("x", "One two three. Four.");
        assert_eq!((p.word_count, p.sentence_count), (4, 2));
        assert_eq!(count_sentences("Dr.Smith said hi! Really? Yes... ok"), 3);
        assert_eq!(count_sentences("3.14 is pi"), 0);
    }

    #[test]
    fn stats_examples() {
        assert_eq!(corpus_stats(&[]), CorpusStats::default());

        let s = corpus_stats(&[Passage::new("a", "One two three. Four.")]);
        assert_eq!(s.n, 1);
        assert_eq!(s.mean_words, 4.0);
        assert_eq!(s.mean_sentences, 2.0);
        assert_eq!((s.sd_words, s.sd_sentences), (0.0, 0.0));

        let s = corpus_stats(&[Passage::new("a", "w w"), Passage::new("b", "w w w w w w")]);
        assert_eq!(s.mean_words, 4.0);
        assert_eq!(s.sd_words, 2.0);
    }

    #[test]
    fn gold_examples() {
        let g = load_gold(b"passage_id,code_id,applied\np1,scholar,1\np1,activist,0\n").unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get("p1", "scholar"), Some(true));
        assert_eq!(g.get("p1", "activist"), Some(false));
        assert_eq!(g.get("p2", "activist"), None);

        let err = load_gold(b"passage_id,code_id,applied\np1,scholar,1\np1,scholar,0\n").unwrap_err();
        assert!(
            matches!(&err, GoldError::Conflict { passage_id, code_id } if passage_id == "p1" && code_id == "scholar")
        );

        let err = load_gold(b"passage_id,code_id,applied\np1,scholar,yes\n").unwrap_err();
        assert!(matches!(err, GoldError::BadValue { token, .. } if token == "yes"));

        assert!(matches!(load_gold(b"a,b,c\n"), Err(GoldError::Header(_))));
        assert!(matches!(
            load_gold(b"passage_id,code_id,applied\np1,scholar\n"),
            Err(GoldError::Malformed { .. })
        ));
        // repeated identical rows are harmless
        assert_eq!(
            load_gold(b"passage_id,code_id,applied\np1,s,1\np1,s,1\n")
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn gold_csv_round_trips() {
        let g = load_gold(b"passage_id,code_id,applied\n\"p,1\",s,1\np2,s,0\n").unwrap();
        assert_eq!(load_gold(g.to_csv().as_bytes()).unwrap(), g);
    }

    #[test]
    fn gold_coverage_helpers() {
        let g = load_gold(b"passage_id,code_id,applied\np1,a,1\np2,a,0\np1,b,0\n").unwrap();
        assert_eq!(
            g.missing_pairs(["p1", "p2"], ["a", "b"]),
            vec![("p2".to_string(), "b".to_string())]
        );
        let (p, c) = g.unknown_references(["p1"], ["a", "b"]);
        assert_eq!(p, vec!["p2".to_string()]);
        assert!(c.is_empty());
    }

    #[test]
    fn corpus_records_load() {
        let bytes = b"{\"id\":\"d1\",\"text\":\"Du Bois. Hi\",\"source\":\"NYT\"}\n\n{\"id\":\"d2\",\"text\":\"x\"}\n";
        let ps = load_passages(bytes).unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[0].source.as_deref(), Some("NYT"));
        assert_eq!(ps[0].sentence_count, 1);
        assert_eq!(load_passages(write_passages(&ps).as_bytes()).unwrap(), ps);

        let dup = b"{\"id\":\"d1\",\"text\":\"a\"}\n{\"id\":\"d1\",\"text\":\"b\"}\n";
        assert!(matches!(load_records(dup), Err(CorpusError::DuplicateId(_))));
        assert!(matches!(
            load_records(b"{\"id\":1}\n"),
            Err(CorpusError::Record { line: 1, .. })
        ));
    }
}
