//! Word-level hallucination rate and reward/human correlation.

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedResponse, Label};
use crate::error::{Error, Result};
use crate::segmenter::{majority_unit, tokenize};

/// Label of every whitespace-delimited word: the span (or gap) covering most
/// of its characters, ties to the earlier one.
pub fn word_labels(record: &AnnotatedResponse) -> Vec<Label> {
    let units = record.units();
    tokenize(&record.response)
        .tokens
        .iter()
        .map(|t| {
            majority_unit(&units, t.start, t.end)
                .map(|i| units[i].label)
                .unwrap_or(Label::Accurate)
        })
        .collect()
}

/// Inaccurate words over all non-Analysis words. Unsure counts as
/// Inaccurate; a passage with no non-Analysis words scores 0.
pub fn hallucination_rate(record: &AnnotatedResponse) -> f64 {
    let labels = word_labels(record);
    let analysis = labels.iter().filter(|&&l| l == Label::Analysis).count();
    let bad = labels
        .iter()
        .filter(|&&l| matches!(l, Label::Inaccurate | Label::Unsure))
        .count();
    let denom = labels.len() - analysis;
    if denom == 0 {
        0.0
    } else {
        bad as f64 / denom as f64
    }
}

/// Fraction of descriptive content that is truthful.
pub fn truthful_fraction(record: &AnnotatedResponse) -> f64 {
    1.0 - hallucination_rate(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub reward_score: f64,
    pub human_score: f64,
}

impl EvalRecord {
    pub fn from_annotation(record: &AnnotatedResponse, reward_score: f64) -> Self {
        Self {
            id: record.id.clone(),
            reward_score,
            human_score: truthful_fraction(record),
        }
    }
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Undefined("need at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation between reward scores and human truthful fractions.
pub fn correlate(records: &[EvalRecord]) -> Result<f64> {
    let xs: Vec<f64> = records.iter().map(|r| r.reward_score).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.human_score).collect();
    pearson(&xs, &ys)
}

pub fn points_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("id,reward_score,human_score\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.id, r.reward_score, r.human_score));
    }
    out
}

pub fn parse_points_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line.starts_with("id,")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || {
            Error::InvalidArgument(format!(
                "line {}: expected id,reward_score,human_score",
                i + 1
            ))
        };
        if fields.len() != 3 {
            return Err(bad());
        }
        out.push(EvalRecord {
            id: fields[0].to_string(),
            reward_score: fields[1].trim().parse().map_err(|_| bad())?,
            human_score: fields[2].trim().parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
