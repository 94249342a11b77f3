//! Span-annotated responses: data model, JSONL ingestion, validation,
//! canonical export and corpus statistics.
//!
//! Offsets are Unicode scalar value indices, end-exclusive. Characters not
//! covered by any span are implicitly [`Label::Accurate`]; gaps are never
//! stored as explicit spans.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter;

/// Annotation category of a response segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Accurate,
    Inaccurate,
    Analysis,
    Unsure,
}

impl Label {
    pub const ALL: [Label; 4] = [
        Label::Accurate,
        Label::Inaccurate,
        Label::Analysis,
        Label::Unsure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Accurate => "accurate",
            Label::Inaccurate => "inaccurate",
            Label::Analysis => "analysis",
            Label::Unsure => "unsure",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        Label::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub start: usize,
    pub end: usize,
    pub label: Label,
}

impl SpanAnnotation {
    pub fn new(start: usize, end: usize, label: Label) -> Self {
        Self { start, end, label }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// One image/prompt/response triplet with its labeled character spans.
///
/// Field order is the canonical JSONL field order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedResponse {
    pub id: String,
    pub image_ref: String,
    pub prompt: String,
    pub response: String,
    pub spans: Vec<SpanAnnotation>,
    pub split: Split,
}

impl AnnotatedResponse {
    /// Length of the response in Unicode scalar values.
    pub fn char_len(&self) -> usize {
        self.response.chars().count()
    }

    /// Per-character labels with gaps materialized as Accurate.
    pub fn char_labels(&self) -> Vec<Label> {
        let mut labels = vec![Label::Accurate; self.char_len()];
        for span in &self.spans {
            let end = span.end.min(labels.len());
            for slot in labels.iter_mut().take(end).skip(span.start) {
                *slot = span.label;
            }
        }
        labels
    }

    /// Spans plus the implicit-Accurate gaps between them, in order.
    pub fn units(&self) -> Vec<SpanAnnotation> {
        let len = self.char_len();
        let mut out = Vec::with_capacity(self.spans.len() * 2 + 1);
        let mut cursor = 0;
        for span in &self.spans {
            if span.start > cursor {
                out.push(SpanAnnotation::new(cursor, span.start, Label::Accurate));
            }
            out.push(*span);
            cursor = cursor.max(span.end);
        }
        if cursor < len {
            out.push(SpanAnnotation::new(cursor, len, Label::Accurate));
        }
        out
    }
}

/// A single broken invariant found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    EmptySpan {
        index: usize,
        start: usize,
    },
    OutOfBounds {
        index: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    Unsorted {
        index: usize,
    },
    Overlap {
        first: usize,
        first_span: (usize, usize),
        second: usize,
        second_span: (usize, usize),
    },
    UnknownLabel {
        index: usize,
        label: String,
    },
    UnknownSplit {
        split: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "empty id"),
            Violation::EmptySpan { index, start } => {
                write!(f, "empty span: span {index} at offset {start}")
            }
            Violation::OutOfBounds {
                index,
                start,
                end,
                len,
            } => write!(
                f,
                "offset out of bounds: span {index} [{start},{end}) on response of length {len}"
            ),
            Violation::Unsorted { index } => {
                write!(f, "spans not sorted by start: span {index}")
            }
            Violation::Overlap {
                first,
                first_span,
                second,
                second_span,
            } => write!(
                f,
                "overlapping spans: span {first} [{},{}) and span {second} [{},{})",
                first_span.0, first_span.1, second_span.0, second_span.1
            ),
            Violation::UnknownLabel { index, label } => {
                write!(f, "unknown label: span {index} has label {label:?}")
            }
            Violation::UnknownSplit { split } => write!(f, "unknown split {split:?}"),
        }
    }
}

/// Every invariant violation of one record; empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Span bounds, emptiness, ordering and overlap checks over `(start, end)`
/// pairs. Shared by typed records and raw JSON lines.
fn check_spans(spans: &[(usize, usize)], len: usize, out: &mut Vec<Violation>) {
    for (index, &(start, end)) in spans.iter().enumerate() {
        if start == end {
            out.push(Violation::EmptySpan { index, start });
        } else if start > end || end > len {
            out.push(Violation::OutOfBounds {
                index,
                start,
                end,
                len,
            });
        }
    }
    for i in 1..spans.len() {
        let (prev, cur) = (spans[i - 1], spans[i]);
        if cur.0 < prev.0 {
            out.push(Violation::Unsorted { index: i });
        }
    }
    // Pairwise overlap, independent of ordering.
    for i in 0..spans.len() {
        for j in i + 1..spans.len() {
            let (a, b) = (spans[i], spans[j]);
            if a.0 < a.1 && b.0 < b.1 && a.0 < b.1 && b.0 < a.1 {
                out.push(Violation::Overlap {
                    first: i,
                    first_span: a,
                    second: j,
                    second_span: b,
                });
            }
        }
    }
}

pub fn validate(record: &AnnotatedResponse) -> ValidationReport {
    let mut violations = Vec::new();
    if record.id.is_empty() {
        violations.push(Violation::EmptyId);
    }
    let spans: Vec<_> = record.spans.iter().map(|s| (s.start, s.end)).collect();
    check_spans(&spans, record.char_len(), &mut violations);
    ValidationReport { violations }
}

#[derive(Debug, Deserialize)]
struct RawSpan {
    start: usize,
    end: usize,
    label: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    image_ref: String,
    prompt: String,
    response: String,
    spans: Vec<RawSpan>,
    split: String,
}

impl RawRecord {
    fn into_record(self) -> std::result::Result<AnnotatedResponse, (String, ValidationReport)> {
        let mut violations = Vec::new();
        if self.id.is_empty() {
            violations.push(Violation::EmptyId);
        }
        let bounds: Vec<_> = self.spans.iter().map(|s| (s.start, s.end)).collect();
        check_spans(&bounds, self.response.chars().count(), &mut violations);
        let mut spans = Vec::with_capacity(self.spans.len());
        for (index, raw) in self.spans.iter().enumerate() {
            match Label::parse(&raw.label) {
                Some(label) => spans.push(SpanAnnotation::new(raw.start, raw.end, label)),
                None => violations.push(Violation::UnknownLabel {
                    index,
                    label: raw.label.clone(),
                }),
            }
        }
        let split = Split::parse(&self.split);
        if split.is_none() {
            violations.push(Violation::UnknownSplit {
                split: self.split.clone(),
            });
        }
        if !violations.is_empty() {
            return Err((self.id, ValidationReport { violations }));
        }
        Ok(AnnotatedResponse {
            id: self.id,
            image_ref: self.image_ref,
            prompt: self.prompt,
            response: self.response,
            spans,
            split: split.expect("checked above"),
        })
    }
}

/// Outcome of checking one JSONL line without aborting the whole file.
#[derive(Debug, Clone)]
pub struct LineIssue {
    pub line: usize,
    pub id: Option<String>,
    pub message: String,
}

/// Parse and validate every line, collecting all problems instead of
/// stopping at the first. Used by the `validate` subcommand.
pub fn lint_str(text: &str) -> (Vec<AnnotatedResponse>, Vec<LineIssue>) {
    let mut records = Vec::new();
    let mut issues = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                issues.push(LineIssue {
                    line: line_no,
                    id: None,
                    message: format!("malformed JSON: {e}"),
                });
                continue;
            }
        };
        match raw.into_record() {
            Ok(rec) => {
                if let Some(first) = seen.get(&rec.id) {
                    issues.push(LineIssue {
                        line: line_no,
                        id: Some(rec.id.clone()),
                        message: format!("duplicate id (first seen on line {first})"),
                    });
                } else {
                    seen.insert(rec.id.clone(), line_no);
                    records.push(rec);
                }
            }
            Err((id, report)) => issues.push(LineIssue {
                line: line_no,
                id: Some(id),
                message: report.to_string(),
            }),
        }
    }
    (records, issues)
}

/// Parse JSONL text into validated records, failing on the first problem.
pub fn ingest_str(text: &str) -> Result<Vec<AnnotatedResponse>> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|source| Error::Json {
            line: line_no,
            source,
        })?;
        let rec = raw.into_record().map_err(|(id, report)| Error::Invalid {
            line: line_no,
            id,
            report,
        })?;
        if let Some(&first_line) = seen.get(&rec.id) {
            return Err(Error::DuplicateId {
                id: rec.id,
                first_line,
                line: line_no,
            });
        }
        seen.insert(rec.id.clone(), line_no);
        records.push(rec);
    }
    Ok(records)
}

pub fn ingest(path: impl AsRef<Path>) -> Result<Vec<AnnotatedResponse>> {
    let text = fs::read_to_string(path.as_ref())?;
    ingest_str(&text)
}

/// Serialize one record in canonical form, spans sorted, no trailing newline.
pub fn canonical_line(record: &AnnotatedResponse) -> String {
    let mut rec = record.clone();
    rec.spans.sort_by_key(|s| (s.start, s.end));
    serde_json::to_string(&rec).expect("record serialization is infallible")
}

/// Canonical JSONL: fixed field order, sorted spans, UTF-8, LF endings.
pub fn export(corpus: &[AnnotatedResponse]) -> Vec<u8> {
    let mut out = String::new();
    for record in corpus {
        out.push_str(&canonical_line(record));
        out.push('\n');
    }
    out.into_bytes()
}

/// Number of equal-width bins in the Inaccurate density histogram.
pub const DENSITY_BINS: usize = 10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LabelCounts {
    pub chars: usize,
    pub spans: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub records: usize,
    pub train: usize,
    pub val: usize,
    pub total_chars: usize,
    pub implicit_accurate_chars: usize,
    pub accurate: LabelCounts,
    pub inaccurate: LabelCounts,
    pub analysis: LabelCounts,
    pub unsure: LabelCounts,
    pub sentences: usize,
    /// Sentences with at least one Inaccurate non-whitespace character,
    /// bucketed by the Inaccurate fraction of their non-whitespace characters.
    pub inaccurate_density: [usize; DENSITY_BINS],
}

impl CorpusStats {
    pub fn label(&self, label: Label) -> LabelCounts {
        match label {
            Label::Accurate => self.accurate,
            Label::Inaccurate => self.inaccurate,
            Label::Analysis => self.analysis,
            Label::Unsure => self.unsure,
        }
    }

    fn label_mut(&mut self, label: Label) -> &mut LabelCounts {
        match label {
            Label::Accurate => &mut self.accurate,
            Label::Inaccurate => &mut self.inaccurate,
            Label::Analysis => &mut self.analysis,
            Label::Unsure => &mut self.unsure,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: usize| out.push_str(&format!("{k},{v}\n"));
        row("records", self.records);
        row("train", self.train);
        row("val", self.val);
        row("total_chars", self.total_chars);
        row("implicit_accurate_chars", self.implicit_accurate_chars);
        for label in Label::ALL {
            let c = self.label(label);
            row(&format!("{label}_chars"), c.chars);
            row(&format!("{label}_spans"), c.spans);
        }
        row("sentences", self.sentences);
        for (i, count) in self.inaccurate_density.iter().enumerate() {
            row(&format!("density_bin_{i}"), *count);
        }
        out
    }
}

/// Histogram bucket for a density in (0, 1]; 1.0 lands in the top bucket.
pub fn density_bucket(density: f64) -> usize {
    ((density * DENSITY_BINS as f64).floor() as usize).min(DENSITY_BINS - 1)
}

pub fn stats(corpus: &[AnnotatedResponse]) -> Result<CorpusStats> {
    let mut st = CorpusStats {
        records: corpus.len(),
        train: 0,
        val: 0,
        total_chars: 0,
        implicit_accurate_chars: 0,
        accurate: LabelCounts::default(),
        inaccurate: LabelCounts::default(),
        analysis: LabelCounts::default(),
        unsure: LabelCounts::default(),
        sentences: 0,
        inaccurate_density: [0; DENSITY_BINS],
    };
    for record in corpus {
        let report = validate(record);
        if !report.is_valid() {
            return Err(Error::Invalid {
                line: 0,
                id: record.id.clone(),
                report,
            });
        }
        match record.split {
            Split::Train => st.train += 1,
            Split::Val => st.val += 1,
        }
        let len = record.char_len();
        st.total_chars += len;
        let mut covered = 0;
        for span in &record.spans {
            let c = st.label_mut(span.label);
            c.chars += span.len();
            c.spans += 1;
            covered += span.len();
        }
        st.implicit_accurate_chars += len - covered;

        let chars: Vec<char> = record.response.chars().collect();
        let labels = record.char_labels();
        for (start, end) in segmenter::split_sentences(&record.response) {
            st.sentences += 1;
            let (mut nonws, mut bad) = (0usize, 0usize);
            for i in start..end {
                if !chars[i].is_whitespace() {
                    nonws += 1;
                    if labels[i] == Label::Inaccurate {
                        bad += 1;
                    }
                }
            }
            if bad > 0 {
                st.inaccurate_density[density_bucket(bad as f64 / nonws as f64)] += 1;
            }
        }
    }
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(response: &str, spans: Vec<SpanAnnotation>) -> AnnotatedResponse {
        AnnotatedResponse {
            id: "r1".into(),
            image_ref: "coco/1.jpg".into(),
            prompt: "Describe the image.".into(),
            response: response.into(),
            spans,
            split: Split::Train,
        }
    }

    fn line(spans: &str, response: &str) -> String {
        format!(
            r#"{{"id":"a","image_ref":"i","prompt":"p","response":"{response}","spans":{spans},"split":"train"}}"#
        )
    }

    #[test]
    fn accepts_simple_span() {
        let text = line(
            r#"[{"start":0,"end":5,"label":"inaccurate"}]"#,
            "twenty chars exactly",
        );
        let recs = ingest_str(&text).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(
            recs[0].spans[0],
            SpanAnnotation::new(0, 5, Label::Inaccurate)
        );
    }

    #[test]
    fn overlap_names_both_spans() {
        let text = line(
            r#"[{"start":0,"end":5,"label":"accurate"},{"start":3,"end":8,"label":"analysis"}]"#,
            "twenty chars exactly",
        );
        let err = ingest_str(&text).unwrap_err();
        match err {
            Error::Invalid { report, .. } => {
                assert!(report.violations.contains(&Violation::Overlap {
                    first: 0,
                    first_span: (0, 5),
                    second: 1,
                    second_span: (3, 8),
                }));
                let msg = report.to_string();
                assert!(msg.contains("span 0 [0,5)") && msg.contains("span 1 [3,8)"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn end_equal_to_length_is_accepted() {
        let text = line(
            r#"[{"start":13,"end":20,"label":"analysis"}]"#,
            "twenty chars exactly",
        );
        assert!(ingest_str(&text).is_ok());
    }

    #[test]
    fn zero_spans_is_all_accurate() {
        let r = rec("A dog sits.", vec![]);
        assert!(validate(&r).is_valid());
        assert!(r.char_labels().iter().all(|&l| l == Label::Accurate));
    }

    #[test]
    fn empty_and_unsorted_spans_reported() {
        let r = rec(
            "abcdefghij",
            vec![SpanAnnotation::new(3, 3, Label::Analysis)],
        );
        assert!(validate(&r).to_string().contains("empty span"));
        let r = rec(
            "abcdefghij",
            vec![
                SpanAnnotation::new(5, 7, Label::Analysis),
                SpanAnnotation::new(0, 2, Label::Inaccurate),
            ],
        );
        assert!(validate(&r)
            .to_string()
            .contains("spans not sorted by start"));
    }

    #[test]
    fn unknown_label_and_bad_json() {
        let text = line(r#"[{"start":0,"end":2,"label":"wrong"}]"#, "abc");
        let err = ingest_str(&text).unwrap_err().to_string();
        assert!(err.contains("unknown label"), "{err}");

        let text = format!("{}\n{{not json", line("[]", "abc"));
        match ingest_str(&text).unwrap_err() {
            Error::Json { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_is_hard_error() {
        let l = line("[]", "abc");
        let err = ingest_str(&format!("{l}\n{l}\n")).unwrap_err();
        assert!(matches!(
            err,
            Error::DuplicateId {
                first_line: 1,
                line: 2,
                ..
            }
        ));
    }

    #[test]
    fn offsets_are_scalar_values() {
        // "café ☕" has 6 scalar values but 9 bytes
        let text = line(r#"[{"start":5,"end":6,"label":"unsure"}]"#, "café ☕");
        let recs = ingest_str(&text).unwrap();
        assert_eq!(recs[0].char_len(), 6);
        let text = line(r#"[{"start":5,"end":7,"label":"unsure"}]"#, "café ☕");
        assert!(ingest_str(&text).is_err());
    }

    #[test]
    fn export_is_canonical() {
        let r = rec("A dog.", vec![SpanAnnotation::new(2, 5, Label::Inaccurate)]);
        let bytes = export(std::slice::from_ref(&r));
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            "{\"id\":\"r1\",\"image_ref\":\"coco/1.jpg\",\"prompt\":\"Describe the image.\",\"response\":\"A dog.\",\"spans\":[{\"start\":2,\"end\":5,\"label\":\"inaccurate\"}],\"split\":\"train\"}\n"
        );
        assert!(export(&[]).is_empty());
    }

    #[test]
    fn full_inaccurate_sentence_in_top_bucket() {
        let r = rec(
            "A cat. A dog.",
            vec![SpanAnnotation::new(7, 13, Label::Inaccurate)],
        );
        let st = stats(&[r]).unwrap();
        assert_eq!(st.inaccurate_density[DENSITY_BINS - 1], 1);
        assert_eq!(st.inaccurate_density.iter().sum::<usize>(), 1);
        assert_eq!(st.sentences, 2);
    }

    #[test]
    fn units_fill_gaps() {
        let r = rec(
            "0123456789",
            vec![
                SpanAnnotation::new(2, 4, Label::Analysis),
                SpanAnnotation::new(6, 7, Label::Inaccurate),
            ],
        );
        let u: Vec<_> = r
            .units()
            .iter()
            .map(|s| (s.start, s.end, s.label))
            .collect();
        assert_eq!(
            u,
            vec![
                (0, 2, Label::Accurate),
                (2, 4, Label::Analysis),
                (4, 6, Label::Accurate),
                (6, 7, Label::Inaccurate),
                (7, 10, Label::Accurate)
            ]
        );
    }
}
