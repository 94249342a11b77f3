//! Sentence splitting, whitespace tokenization, sentence label condensation
//! and class-granularity reduction.
//!
//! All offsets are Unicode scalar value indices into the source text.

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedResponse, Label, SpanAnnotation, Split};

const TERMINATORS: [char; 3] = ['.', '!', '?'];
const CLOSERS: [char; 9] = [
    '"', '\'', ')', ']', '}', '\u{201D}', '\u{2019}', '\u{BB}', '\u{300D}',
];

/// Split text into sentence spans.
///
/// A sentence ends after `.`, `!` or `?` (plus any closing quotes or
/// brackets) when the next character is whitespace or the end of text.
/// Surrounding whitespace is trimmed from every span.
pub fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < n {
        let c = chars[i];
        if start.is_none() && !c.is_whitespace() {
            start = Some(i);
        }
        if TERMINATORS.contains(&c) {
            let mut j = i + 1;
            while j < n && CLOSERS.contains(&chars[j]) {
                j += 1;
            }
            if j == n || chars[j].is_whitespace() {
                if let Some(s) = start.take() {
                    out.push((s, j));
                }
                i = j;
                continue;
            }
        }
        i += 1;
    }
    if let Some(s) = start {
        let mut end = n;
        while end > s && chars[end - 1].is_whitespace() {
            end -= 1;
        }
        out.push((s, end));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.text.as_str())
    }
}

/// Maximal runs of non-whitespace characters.
pub fn tokenize(text: &str) -> TokenSequence {
    let mut tokens = Vec::new();
    let mut cur: Option<(usize, String)> = None;
    let mut idx = 0;
    for c in text.chars() {
        if c.is_whitespace() {
            if let Some((start, s)) = cur.take() {
                tokens.push(Token {
                    text: s,
                    start,
                    end: idx,
                });
            }
        } else {
            cur.get_or_insert_with(|| (idx, String::new())).1.push(c);
        }
        idx += 1;
    }
    if let Some((start, s)) = cur {
        tokens.push(Token {
            text: s,
            start,
            end: idx,
        });
    }
    TokenSequence { tokens }
}

/// A sentence with its condensed label (never Unsure).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSegment {
    pub start: usize,
    pub end: usize,
    pub label: Label,
}

/// Condense sub-sentence spans into one label per sentence.
///
/// Any Inaccurate or Unsure character makes the sentence Inaccurate.
/// Otherwise the sentence is Analysis when at least half of its
/// non-whitespace characters are Analysis, and Accurate otherwise.
pub fn condense(record: &AnnotatedResponse) -> Vec<SentenceSegment> {
    let chars: Vec<char> = record.response.chars().collect();
    let labels = record.char_labels();
    split_sentences(&record.response)
        .into_iter()
        .map(|(start, end)| {
            let mut nonws = 0usize;
            let mut analysis = 0usize;
            let mut bad = false;
            for i in start..end {
                if chars[i].is_whitespace() {
                    continue;
                }
                nonws += 1;
                match labels[i] {
                    Label::Inaccurate | Label::Unsure => bad = true,
                    Label::Analysis => analysis += 1,
                    Label::Accurate => {}
                }
            }
            let label = if bad {
                Label::Inaccurate
            } else if nonws > 0 && 2 * analysis >= nonws {
                Label::Analysis
            } else {
                Label::Accurate
            };
            SentenceSegment { start, end, label }
        })
        .collect()
}

/// Number of reward classes and how labels map onto them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Binary,
    Ternary,
}

/// Class indices shared by both granularities.
pub const ACCURATE_CLASS: usize = 0;
pub const INACCURATE_CLASS: usize = 1;
pub const ANALYSIS_CLASS: usize = 2;

impl Granularity {
    pub fn num_classes(self) -> usize {
        match self {
            Granularity::Binary => 2,
            Granularity::Ternary => 3,
        }
    }

    pub fn from_num_classes(c: usize) -> Option<Self> {
        match c {
            2 => Some(Granularity::Binary),
            3 => Some(Granularity::Ternary),
            _ => None,
        }
    }

    /// Unsure folds into the Inaccurate class under both granularities.
    pub fn class_of(self, label: Label) -> usize {
        match (self, label) {
            (_, Label::Accurate) => ACCURATE_CLASS,
            (_, Label::Inaccurate | Label::Unsure) => INACCURATE_CLASS,
            (Granularity::Binary, Label::Analysis) => ACCURATE_CLASS,
            (Granularity::Ternary, Label::Analysis) => ANALYSIS_CLASS,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "binary" => Some(Granularity::Binary),
            "ternary" => Some(Granularity::Ternary),
            _ => None,
        }
    }
}

pub fn reduce(labels: &[SentenceSegment], g: Granularity) -> Vec<usize> {
    labels.iter().map(|s| g.class_of(s.label)).collect()
}

/// Where reward targets are placed: one per sentence or one per annotated
/// span (gaps included).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Density {
    Sentence,
    Segment,
}

impl Density {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sentence" => Some(Density::Sentence),
            "segment" => Some(Density::Segment),
            _ => None,
        }
    }
}

/// A supervised token position and its (Unsure-folded) label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenTarget {
    pub token: usize,
    pub label: Label,
}

impl TokenTarget {
    pub fn class(&self, g: Granularity) -> usize {
        g.class_of(self.label)
    }
}

/// Labeled character units of a record at the given density.
pub fn label_units(record: &AnnotatedResponse, density: Density) -> Vec<SpanAnnotation> {
    match density {
        Density::Sentence => condense(record)
            .into_iter()
            .map(|s| SpanAnnotation::new(s.start, s.end, s.label))
            .collect(),
        Density::Segment => record
            .units()
            .into_iter()
            .map(|mut u| {
                if u.label == Label::Unsure {
                    u.label = Label::Inaccurate;
                }
                u
            })
            .collect(),
    }
}

/// Target positions: the last token overlapping each unit. Units that touch
/// no token (whitespace only) are skipped; every other position is masked.
pub fn segment_end_tokens(
    record: &AnnotatedResponse,
    tokens: &TokenSequence,
    density: Density,
) -> Vec<TokenTarget> {
    let units = label_units(record, density);
    let mut out = Vec::with_capacity(units.len());
    for unit in units {
        let last = tokens
            .tokens
            .iter()
            .rposition(|t| t.start < unit.end && t.end > unit.start);
        if let Some(token) = last {
            out.push(TokenTarget {
                token,
                label: unit.label,
            });
        }
    }
    out
}

/// Index of the unit covering the most characters of `[start, end)`; ties go
/// to the unit that starts first. `units` must be sorted and non-overlapping.
pub fn majority_unit(units: &[SpanAnnotation], start: usize, end: usize) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (i, u) in units.iter().enumerate() {
        let lo = u.start.max(start);
        let hi = u.end.min(end);
        if hi <= lo {
            continue;
        }
        let cover = hi - lo;
        if best.is_none_or(|(_, c)| cover > c) {
            best = Some((i, cover));
        }
    }
    best.map(|(i, _)| i)
}

/// A record with its condensed sentence labels, for JSONL export.
#[derive(Debug, Clone, Serialize)]
pub struct CondensedRecord<'a> {
    pub id: &'a str,
    pub image_ref: &'a str,
    pub prompt: &'a str,
    pub response: &'a str,
    pub spans: &'a [SpanAnnotation],
    pub split: Split,
    pub sentence_labels: Vec<SentenceSegment>,
}

pub fn condensed_line(record: &AnnotatedResponse) -> String {
    let mut spans = record.spans.clone();
    spans.sort_by_key(|s| (s.start, s.end));
    let rec = CondensedRecord {
        id: &record.id,
        image_ref: &record.image_ref,
        prompt: &record.prompt,
        response: &record.response,
        spans: &spans,
        split: record.split,
        sentence_labels: condense(record),
    };
    serde_json::to_string(&rec).expect("serialization is infallible")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(response: &str, spans: Vec<SpanAnnotation>) -> AnnotatedResponse {
        AnnotatedResponse {
            id: "x".into(),
            image_ref: "img".into(),
            prompt: "Describe.".into(),
            response: response.into(),
            spans,
            split: Split::Train,
        }
    }

    #[test]
    fn two_sentences() {
        assert_eq!(
            split_sentences("The image features a dog. It is brown."),
            vec![(0, 25), (26, 38)]
        );
        assert_eq!(split_sentences("Hello"), vec![(0, 5)]);
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   \n ").is_empty());
    }

    #[test]
    fn question_and_quoted_terminator() {
        // Hand-applied: boundaries after "?" (index 14), after `."` (index 35),
        // and "3.5" does not split because '.' is followed by '5'.
        let text = "Is it a dog?  He said \"no cats.\" It costs 3.5 dollars";
        assert_eq!(split_sentences(text), vec![(0, 12), (14, 32), (33, 53)]);
        assert_eq!(&text[14..32], "He said \"no cats.\"");
        // Trailing whitespace and nested closers.
        assert_eq!(split_sentences(" (Really?)  "), vec![(1, 10)]);
        assert_eq!(split_sentences("Wait?! Ok."), vec![(0, 6), (7, 10)]);
    }

    #[test]
    fn tokenize_offsets() {
        let t = tokenize("a  b");
        assert_eq!(
            t.tokens,
            vec![
                Token {
                    text: "a".into(),
                    start: 0,
                    end: 1
                },
                Token {
                    text: "b".into(),
                    start: 3,
                    end: 4
                }
            ]
        );
        assert!(tokenize("").is_empty());
        let text = "There is a red bus parked near the old tree.";
        let t = tokenize(text);
        assert_eq!(t.len(), 10);
        let starts: Vec<_> = t.tokens.iter().map(|t| t.start).collect();
        assert_eq!(starts, vec![0, 6, 9, 11, 15, 19, 26, 31, 35, 39]);
        assert_eq!(t.tokens[9].end, 44);
        assert_eq!(t.tokens[9].text, "tree.");
    }

    #[test]
    fn condense_rules() {
        let r = rec(
            "A big red dog runs. A cat.",
            vec![SpanAnnotation::new(6, 9, Label::Inaccurate)],
        );
        let c = condense(&r);
        assert_eq!(c[0].label, Label::Inaccurate);
        assert_eq!(c[1].label, Label::Accurate);

        let r = rec(
            "A dog. It may be sad.",
            vec![SpanAnnotation::new(7, 9, Label::Unsure)],
        );
        assert_eq!(condense(&r)[1].label, Label::Inaccurate);

        let r = rec("A dog sleeps.", vec![]);
        assert_eq!(condense(&r)[0].label, Label::Accurate);

        // "ab cd." non-ws = 5 chars; analysis covers "ab c" -> 3 of 5.
        let r = rec("ab cd.", vec![SpanAnnotation::new(0, 4, Label::Analysis)]);
        assert_eq!(condense(&r)[0].label, Label::Analysis);
        // exactly half: "ab cd" (4 non-ws) with "ab" analysis -> tie -> Analysis
        let r = rec("ab cd", vec![SpanAnnotation::new(0, 2, Label::Analysis)]);
        assert_eq!(condense(&r)[0].label, Label::Analysis);
        let r = rec("ab cde", vec![SpanAnnotation::new(0, 2, Label::Analysis)]);
        assert_eq!(condense(&r)[0].label, Label::Accurate);
    }

    #[test]
    fn binary_reduction() {
        let segs: Vec<_> = [Label::Analysis, Label::Inaccurate, Label::Accurate]
            .into_iter()
            .map(|label| SentenceSegment {
                start: 0,
                end: 1,
                label,
            })
            .collect();
        assert_eq!(
            reduce(&segs, Granularity::Binary),
            vec![ACCURATE_CLASS, INACCURATE_CLASS, ACCURATE_CLASS]
        );
        assert_eq!(reduce(&segs, Granularity::Ternary), vec![2, 1, 0]);
        assert!(reduce(&[], Granularity::Binary).is_empty());
    }

    #[test]
    fn sentence_targets_at_last_token() {
        let r = rec("one two three four five. six seven eight nine.", vec![]);
        let tokens = tokenize(&r.response);
        let t: Vec<_> = segment_end_tokens(&r, &tokens, Density::Sentence)
            .iter()
            .map(|t| t.token)
            .collect();
        assert_eq!(t, vec![4, 8]);
    }

    #[test]
    fn segment_targets_with_gaps() {
        // tokens: t0 "aa"[0,2) t1 "bb"[3,5) t2 "cc"[6,8) t3 "dd"[9,11)
        //         t4 "ee"[12,14) t5 "ff"[15,17) t6 "gg."[18,21)
        let text = "aa bb cc dd ee ff gg.";
        let r = rec(
            text,
            vec![
                SpanAnnotation::new(3, 8, Label::Inaccurate),
                SpanAnnotation::new(9, 11, Label::Analysis),
                SpanAnnotation::new(15, 17, Label::Unsure),
            ],
        );
        let tokens = tokenize(text);
        let got: Vec<_> = segment_end_tokens(&r, &tokens, Density::Segment)
            .iter()
            .map(|t| (t.token, t.label))
            .collect();
        // gap [0,3) -> t0; span [3,8) -> t2; gap [8,9) whitespace -> skipped;
        // span [9,11) -> t3; gap [11,15) -> t4; span [15,17) -> t5 (Unsure
        // folded); gap [17,21) -> t6.
        assert_eq!(
            got,
            vec![
                (0, Label::Accurate),
                (2, Label::Inaccurate),
                (3, Label::Analysis),
                (4, Label::Accurate),
                (5, Label::Inaccurate),
                (6, Label::Accurate)
            ]
        );
    }

    #[test]
    fn majority_tie_goes_to_earlier() {
        let units = vec![
            SpanAnnotation::new(0, 2, Label::Accurate),
            SpanAnnotation::new(2, 4, Label::Inaccurate),
        ];
        assert_eq!(majority_unit(&units, 0, 4), Some(0));
        assert_eq!(majority_unit(&units, 1, 4), Some(1));
        assert_eq!(majority_unit(&units, 5, 6), None);
    }
}
