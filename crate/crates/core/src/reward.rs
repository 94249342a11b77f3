//! Reward models over sentence or segment targets.
//!
//! One forward pass per response; the class label of each unit sits on the
//! unit's last token and every other position is masked out of the
//! cross-entropy.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedResponse;
use crate::error::{Error, Result};
use crate::optim::{Adam, CosineSchedule, TrainOutcome};
use crate::scorer::{log_softmax, softmax, ParamMask, Scorer, TokenId};
use crate::segmenter::{
    segment_end_tokens, split_sentences, tokenize, Density, Granularity, ACCURATE_CLASS,
    ANALYSIS_CLASS,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RmConfig {
    pub density: Density,
    pub granularity: Granularity,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RmConfig {
    fn default() -> Self {
        Self {
            density: Density::Sentence,
            granularity: Granularity::Ternary,
            epochs: 20,
            learning_rate: 0.01,
            warmup_ratio: 0.0,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Token ids (prompt then response) with supervised positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RmExample {
    pub id: String,
    pub tokens: Vec<TokenId>,
    /// `(sequence index, class)` pairs.
    pub targets: Vec<(usize, usize)>,
}

pub fn build_example(
    record: &AnnotatedResponse,
    model: &Scorer,
    density: Density,
    granularity: Granularity,
) -> RmExample {
    let prompt = tokenize(&record.prompt);
    let response = tokenize(&record.response);
    let mut tokens = model.encode(prompt.texts());
    let offset = tokens.len();
    tokens.extend(model.encode(response.texts()));
    let targets = segment_end_tokens(record, &response, density)
        .into_iter()
        .map(|t| (offset + t.token, t.class(granularity)))
        .collect();
    RmExample {
        id: record.id.clone(),
        tokens,
        targets,
    }
}

/// Mean masked cross-entropy over every target in `batch`, optionally adding
/// its gradient into `grad`. Returns `(loss, target count)`.
pub fn rm_loss(model: &Scorer, batch: &[RmExample], mut grad: Option<&mut [f64]>) -> (f64, usize) {
    let count: usize = batch.iter().map(|e| e.targets.len()).sum();
    if count == 0 {
        return (0.0, 0);
    }
    let n = count as f64;
    let mut total = 0.0;
    for ex in batch {
        if ex.targets.is_empty() {
            continue;
        }
        let trace = model.trace(&ex.tokens);
        let mut positions = Vec::with_capacity(ex.targets.len());
        let mut cot = Vec::with_capacity(ex.targets.len());
        for &(pos, class) in &ex.targets {
            let q = model.class_logits_at(&trace, pos);
            let lp = log_softmax(&q);
            total -= lp[class];
            if grad.is_some() {
                let mut d: Vec<f64> = lp.iter().map(|l| l.exp() / n).collect();
                d[class] -= 1.0 / n;
                positions.push(pos);
                cot.push(d);
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            model.accumulate_class_grad(&trace, &positions, &cot, g);
        }
    }
    (total / n, count)
}

/// Train the classification head (and the layers selected by `mask`) with
/// masked cross-entropy.
pub fn train_rm(
    model: &Scorer,
    corpus: &[AnnotatedResponse],
    cfg: &RmConfig,
    mask: ParamMask,
) -> Result<TrainOutcome> {
    if model.num_classes() != cfg.granularity.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes but {:?} granularity needs {}",
            model.num_classes(),
            cfg.granularity,
            cfg.granularity.num_classes()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut model = model.clone();
    let examples: Vec<RmExample> = corpus
        .iter()
        .map(|r| build_example(r, &model, cfg.density, cfg.granularity))
        .collect();
    if examples.iter().all(|e| e.targets.is_empty()) {
        return Err(Error::NoTargets);
    }
    let batches = examples.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule::new(cfg.learning_rate, cfg.warmup_ratio, cfg.epochs * batches);
    let ranges = model.layout().masked_ranges(mask);
    let mut adam = Adam::new(model.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model.set_density(Some(cfg.density));
    let mut loss_trace = vec![rm_loss(&model, &examples, None).0];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<RmExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let mut grad = model.zero_grad();
            let (loss, count) = rm_loss(&model, &batch, Some(&mut grad));
            if !loss.is_finite() {
                return Err(Error::Diverged { batch: step, loss });
            }
            if count > 0 {
                adam.step(model.params_mut(), &grad, schedule.lr(step), &ranges);
            }
            step += 1;
        }
        let loss = rm_loss(&model, &examples, None).0;
        info!("reward epoch {} loss {loss:.6}", epoch + 1);
        loss_trace.push(loss);
    }
    Ok(TrainOutcome {
        model,
        loss_trace,
        steps: step,
    })
}

/// Square confusion matrix, rows gold and columns predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut c = Self::new(classes);
        for (gold, pred) in pairs {
            c.counts[gold][pred] += 1;
        }
        c
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: usize = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        diag as f64 / total as f64
    }

    /// Per-class F1; `None` for a class absent from both gold and predictions.
    pub fn f1_scores(&self) -> Vec<Option<f64>> {
        (0..self.classes())
            .map(|k| {
                let tp = self.counts[k][k];
                let gold: usize = self.counts[k].iter().sum();
                let pred: usize = self.counts.iter().map(|row| row[k]).sum();
                if gold + pred == 0 {
                    None
                } else {
                    Some(2.0 * tp as f64 / (gold + pred) as f64)
                }
            })
            .collect()
    }

    /// Mean F1 over classes present in gold or predictions.
    pub fn macro_f1(&self) -> f64 {
        let present: Vec<f64> = self.f1_scores().into_iter().flatten().collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Merge Accurate and Analysis into the Accurate class of a ternary matrix.
pub fn reduce_ternary_to_binary(confusion: &Confusion) -> Result<Confusion> {
    if confusion.classes() != 3 {
        return Err(Error::InvalidArgument(format!(
            "expected a ternary confusion matrix, got {} classes",
            confusion.classes()
        )));
    }
    let mut out = Confusion::new(2);
    for (gold, row) in confusion.counts.iter().enumerate() {
        for (pred, &n) in row.iter().enumerate() {
            out.counts[ternary_to_binary(gold)][ternary_to_binary(pred)] += n;
        }
    }
    Ok(out)
}

pub fn ternary_to_binary(class: usize) -> usize {
    if class == ANALYSIS_CLASS {
        ACCURATE_CLASS
    } else {
        class
    }
}

pub fn reduce_ternary_predictions(classes: &[usize]) -> Vec<usize> {
    classes.iter().map(|&c| ternary_to_binary(c)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<Option<f64>>,
    pub confusion: Confusion,
}

impl RmMetrics {
    pub fn from_confusion(confusion: Confusion) -> Self {
        Self {
            accuracy: confusion.accuracy(),
            macro_f1: confusion.macro_f1(),
            per_class_f1: confusion.f1_scores(),
            confusion,
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax prediction at every target position against gold.
pub fn eval_rm(model: &Scorer, corpus: &[AnnotatedResponse], cfg: &RmConfig) -> RmMetrics {
    let classes = cfg.granularity.num_classes();
    let mut pairs = Vec::new();
    for record in corpus {
        let ex = build_example(record, model, cfg.density, cfg.granularity);
        if ex.targets.is_empty() {
            continue;
        }
        let trace = model.trace(&ex.tokens);
        for &(pos, gold) in &ex.targets {
            let q = model.class_logits_at(&trace, pos);
            pairs.push((gold, argmax(&q[..classes.min(q.len())])));
        }
    }
    RmMetrics::from_confusion(Confusion::from_pairs(classes, pairs))
}

/// Floor applied to non-hallucination probabilities before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassageScore {
    /// Per-sentence probability of containing no hallucination.
    pub probabilities: Vec<f64>,
    /// `-ln max(p, floor)` per sentence.
    pub sentence_scores: Vec<f64>,
    /// Mean of the sentence scores; lower is better.
    pub passage_score: f64,
}

impl PassageScore {
    pub fn from_probabilities(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::NoSentences);
        }
        let sentence_scores: Vec<f64> = probabilities
            .iter()
            .map(|&p| -p.max(PROB_FLOOR).ln())
            .collect();
        let passage_score = sentence_scores.iter().sum::<f64>() / sentence_scores.len() as f64;
        Ok(Self {
            probabilities,
            sentence_scores,
            passage_score,
        })
    }
}

/// Probability that a class distribution is not a hallucination: the
/// Accurate class, plus Analysis under ternary granularity.
pub fn non_hallucination_probability(logits: &[f64], granularity: Granularity) -> f64 {
    let p = softmax(logits);
    match granularity {
        Granularity::Binary => p[ACCURATE_CLASS],
        Granularity::Ternary => p[ACCURATE_CLASS] + p[ANALYSIS_CLASS],
    }
}

/// Score a passage with a sentence-density model: one probability per
/// sentence read at the sentence's last token.
pub fn score_passage(model: &Scorer, prompt: &str, response: &str) -> Result<PassageScore> {
    let granularity = Granularity::from_num_classes(model.num_classes())
        .ok_or_else(|| Error::Config(format!("model has {} classes", model.num_classes())))?;
    if model.density() == Some(Density::Segment) {
        return Err(Error::Config(
            "segment-density reward models cannot score passages; train at sentence density".into(),
        ));
    }
    let prompt_tokens = tokenize(prompt);
    let response_tokens = tokenize(response);
    let mut ids = model.encode(prompt_tokens.texts());
    let offset = ids.len();
    ids.extend(model.encode(response_tokens.texts()));
    let trace = model.trace(&ids);
    let mut probs = Vec::new();
    for (start, end) in split_sentences(response) {
        let last = response_tokens
            .tokens
            .iter()
            .rposition(|t| t.start < end && t.end > start);
        if let Some(i) = last {
            let q = model.class_logits_at(&trace, offset + i);
            probs.push(non_hallucination_probability(&q, granularity));
        }
    }
    PassageScore::from_probabilities(probs)
}
