//! Best-of-n / worst-of-n rejection sampling over scored candidates and
//! Monte Carlo selection curves.

use std::collections::HashMap;
use std::fmt;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::score_passage;
use crate::scorer::Scorer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Lowest passage score.
    Best,
    /// Highest passage score.
    Worst,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "best" => Some(Mode::Best),
            "worst" => Some(Mode::Worst),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Best => "best",
            Mode::Worst => "worst",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub response: String,
    pub sentence_scores: Vec<f64>,
    pub score: f64,
}

impl Candidate {
    pub fn new(id: impl Into<String>, score: f64) -> Self {
        Self {
            id: id.into(),
            response: String::new(),
            sentence_scores: Vec::new(),
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub prompt_id: String,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn new(prompt_id: impl Into<String>, candidates: Vec<Candidate>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("candidate set is empty".into()));
        }
        if let Some(c) = candidates.iter().find(|c| !c.score.is_finite()) {
            return Err(Error::NonFinite(format!("score of candidate {:?}", c.id)));
        }
        Ok(Self {
            prompt_id: prompt_id.into(),
            candidates,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Pick the extreme candidate among `indices`; ties go to the smallest id.
fn pick(set: &CandidateSet, indices: impl IntoIterator<Item = usize>, mode: Mode) -> &Candidate {
    let mut best: Option<&Candidate> = None;
    for i in indices {
        let c = &set.candidates[i];
        best = Some(match best {
            None => c,
            Some(b) => {
                let better = match mode {
                    Mode::Best => c.score < b.score,
                    Mode::Worst => c.score > b.score,
                };
                if better || (c.score == b.score && c.id < b.id) {
                    c
                } else {
                    b
                }
            }
        });
    }
    best.expect("at least one index")
}

/// Draw `n` candidates without replacement and keep the best (or worst).
pub fn select(set: &CandidateSet, n: usize, mode: Mode, seed: u64) -> Result<&Candidate> {
    if n < 1 || n > set.len() {
        return Err(Error::InvalidArgument(format!(
            "n = {n} outside 1..={} for prompt {:?}",
            set.len(),
            set.prompt_id
        )));
    }
    if n == set.len() {
        return Ok(pick(set, 0..set.len(), mode));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drawn = sample(&mut rng, set.len(), n);
    Ok(pick(set, drawn, mode))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub n: usize,
    /// Mean selected score over all prompts and draws.
    pub mean: f64,
    /// Population variance over all prompts and draws.
    pub variance: f64,
    /// Sample variance of the per-prompt means.
    pub variance_across_prompts: f64,
    /// Mean of the per-prompt variances across draws.
    pub variance_across_draws: f64,
    /// Standard error of `mean`.
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionCurve {
    pub points: Vec<CurvePoint>,
}

impl SelectionCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,mean,variance\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.n, p.mean, p.variance));
        }
        out
    }
}

// Shifted by the first value so constant inputs come back exactly.
fn mean(v: &[f64]) -> f64 {
    let Some(&first) = v.first() else {
        return f64::NAN;
    };
    first + v.iter().map(|x| x - first).sum::<f64>() / v.len() as f64
}

fn population_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Monte Carlo estimate of the selected score as a function of `n`.
///
/// Each draw shuffles a prompt's candidates once and evaluates every `n` on
/// a prefix of that shuffle, so the subsets are nested and the per-draw
/// best score can only improve as `n` grows.
pub fn curve(
    sets: &[CandidateSet],
    grid: &[usize],
    draws: usize,
    mode: Mode,
    seed: u64,
) -> Result<SelectionCurve> {
    if sets.is_empty() || grid.is_empty() || draws == 0 {
        return Err(Error::InvalidArgument(
            "curve needs at least one prompt, one n and one draw".into(),
        ));
    }
    let min_count = sets.iter().map(CandidateSet::len).min().unwrap_or(0);
    if let Some(&bad) = grid.iter().find(|&&n| n < 1 || n > min_count) {
        return Err(Error::InvalidArgument(format!(
            "n = {bad} outside 1..={min_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // values[g][p][d]
    let mut values = vec![vec![Vec::with_capacity(draws); sets.len()]; grid.len()];
    for (p, set) in sets.iter().enumerate() {
        let mut order: Vec<usize> = (0..set.len()).collect();
        for _ in 0..draws {
            order.shuffle(&mut rng);
            for (g, &n) in grid.iter().enumerate() {
                values[g][p].push(pick(set, order[..n].iter().copied(), mode).score);
            }
        }
    }
    let points = grid
        .iter()
        .zip(values)
        .map(|(&n, per_prompt)| {
            let all: Vec<f64> = per_prompt.iter().flatten().copied().collect();
            let prompt_means: Vec<f64> = per_prompt.iter().map(|v| mean(v)).collect();
            let within: Vec<f64> = per_prompt.iter().map(|v| sample_variance(v)).collect();
            let variance_across_prompts = sample_variance(&prompt_means);
            let variance_across_draws = mean(&within);
            let std_error = if sets.len() > 1 {
                (variance_across_prompts / sets.len() as f64).sqrt()
            } else {
                (variance_across_draws / draws as f64).sqrt()
            };
            CurvePoint {
                n,
                mean: mean(&all),
                variance: population_variance(&all),
                variance_across_prompts,
                variance_across_draws,
                std_error,
            }
        })
        .collect();
    Ok(SelectionCurve { points })
}

/// One line of a generations file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generation {
    pub prompt_id: String,
    pub candidate_id: String,
    pub prompt: String,
    pub response: String,
}

/// One line of a score report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub id: String,
    pub prompt_id: String,
    pub sentence_scores: Vec<f64>,
    pub passage_score: f64,
}

/// One line of a selection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionLine {
    pub prompt_id: String,
    pub n: usize,
    pub mode: Mode,
    pub chosen: String,
    pub score: f64,
}

fn parse_lines<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| Error::Json {
                line: i + 1,
                source,
            })
        })
        .collect()
}

pub fn parse_generations(text: &str) -> Result<Vec<Generation>> {
    parse_lines(text)
}

/// Group items by prompt id in first-appearance order, rejecting repeated
/// candidate ids within a prompt.
fn group<T>(items: Vec<T>, key: impl Fn(&T) -> (&str, &str)) -> Result<Vec<(String, Vec<T>)>> {
    let mut order: Vec<(String, Vec<T>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for item in items {
        let (prompt, cand) = key(&item);
        let slot = match index.get(prompt) {
            Some(&i) => i,
            None => {
                index.insert(prompt.to_string(), order.len());
                order.push((prompt.to_string(), Vec::new()));
                order.len() - 1
            }
        };
        if order[slot].1.iter().any(|o| key(o).1 == cand) {
            return Err(Error::InvalidArgument(format!(
                "candidate {cand:?} appears twice for prompt {prompt:?}"
            )));
        }
        order[slot].1.push(item);
    }
    Ok(order)
}

/// Score every generation with a sentence-level reward model and group the
/// candidates by prompt id.
pub fn score_external(generations: &[Generation], model: &Scorer) -> Result<Vec<CandidateSet>> {
    let groups = group(generations.to_vec(), |g| (&g.prompt_id, &g.candidate_id))?;
    let mut out = Vec::with_capacity(groups.len());
    for (prompt_id, gens) in groups {
        if let Some(g) = gens.iter().find(|g| g.prompt != gens[0].prompt) {
            return Err(Error::InvalidArgument(format!(
                "prompt id {prompt_id:?} maps to different prompt texts (candidate {:?})",
                g.candidate_id
            )));
        }
        let mut candidates = Vec::with_capacity(gens.len());
        for g in gens {
            let s = score_passage(model, &g.prompt, &g.response)?;
            candidates.push(Candidate {
                id: g.candidate_id,
                response: g.response,
                sentence_scores: s.sentence_scores,
                score: s.passage_score,
            });
        }
        out.push(CandidateSet::new(prompt_id, candidates)?);
    }
    Ok(out)
}

pub fn score_report(sets: &[CandidateSet]) -> String {
    let mut out = String::new();
    for set in sets {
        for c in &set.candidates {
            let line = ScoreLine {
                id: c.id.clone(),
                prompt_id: set.prompt_id.clone(),
                sentence_scores: c.sentence_scores.clone(),
                passage_score: c.score,
            };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
    }
    out
}

/// Rebuild candidate sets from a score report.
pub fn parse_score_report(text: &str) -> Result<Vec<CandidateSet>> {
    let lines: Vec<ScoreLine> = parse_lines(text)?;
    group(lines, |l| (&l.prompt_id, &l.id))?
        .into_iter()
        .map(|(prompt_id, lines)| {
            let candidates = lines
                .into_iter()
                .map(|l| Candidate {
                    id: l.id,
                    response: String::new(),
                    sentence_scores: l.sentence_scores,
                    score: l.passage_score,
                })
                .collect();
            CandidateSet::new(prompt_id, candidates)
        })
        .collect()
}
