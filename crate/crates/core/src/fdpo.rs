//! Pairwise DPO loss and the fine-grained per-segment variant.
//!
//! Each response is cut into contiguous labeled chunks. A chunk's implicit
//! reward is `r = log pi(y|x) - log pi_ref(y|x)` where `x` is everything
//! before the chunk. Preferred chunks contribute `-log sigmoid(beta * r)`,
//! dispreferred chunks `-log sigmoid(-beta * r)`, and neutral chunks are
//! skipped: they add nothing and do not count toward the mean.

use std::ops::Range;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedResponse, Label};
use crate::error::{Error, Result};
use crate::optim::{Adam, CosineSchedule, TrainOutcome};
use crate::scorer::{ParamMask, Scorer, TokenId};
use crate::segmenter::{majority_unit, tokenize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PreferenceClass {
    /// c = 0
    Dispreferred,
    /// c = 1
    Preferred,
    /// c > 1
    Neutral,
}

/// How Analysis chunks are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapMode {
    /// Ignore analysis: Analysis is neutral.
    Ia,
    /// Disprefer analysis: Analysis is dispreferred.
    Da,
}

impl MapMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ia" => Some(MapMode::Ia),
            "da" => Some(MapMode::Da),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassMap {
    pub mode: MapMode,
}

impl ClassMap {
    pub fn new(mode: MapMode) -> Self {
        Self { mode }
    }

    pub fn class_of(&self, label: Label) -> PreferenceClass {
        match (label, self.mode) {
            (Label::Accurate, _) => PreferenceClass::Preferred,
            (Label::Inaccurate | Label::Unsure, _) => PreferenceClass::Dispreferred,
            (Label::Analysis, MapMode::Ia) => PreferenceClass::Neutral,
            (Label::Analysis, MapMode::Da) => PreferenceClass::Dispreferred,
        }
    }
}

/// One chunk `(x, y, c)` materialized as separate token lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FdpoSample {
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub c: PreferenceClass,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FdpoSegment {
    /// Token positions inside [`FdpoSequence::tokens`].
    pub range: Range<usize>,
    pub class: PreferenceClass,
}

/// Prompt plus response tokens with ordered, non-overlapping chunks covering
/// the response. Scored with one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FdpoSequence {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub segments: Vec<FdpoSegment>,
}

impl FdpoSequence {
    /// Chunk a record's response at annotation boundaries. Each token joins
    /// the span (or implicit-Accurate gap) covering most of its characters;
    /// consecutive tokens of the same unit form one chunk.
    pub fn from_record(record: &AnnotatedResponse, model: &Scorer, map: ClassMap) -> Self {
        let prompt = tokenize(&record.prompt);
        let response = tokenize(&record.response);
        let mut tokens = model.encode(prompt.texts());
        let offset = tokens.len();
        tokens.extend(model.encode(response.texts()));

        let units = record.units();
        let mut segments: Vec<FdpoSegment> = Vec::new();
        let mut current: Option<(usize, usize)> = None; // (unit, start token)
        for (i, tok) in response.tokens.iter().enumerate() {
            let unit = majority_unit(&units, tok.start, tok.end).unwrap_or(0);
            match current {
                Some((u, _)) if u == unit => {}
                Some((u, start)) => {
                    segments.push(FdpoSegment {
                        range: offset + start..offset + i,
                        class: map.class_of(units[u].label),
                    });
                    current = Some((unit, i));
                }
                None => current = Some((unit, i)),
            }
        }
        if let Some((u, start)) = current {
            segments.push(FdpoSegment {
                range: offset + start..offset + response.len(),
                class: map.class_of(units[u].label),
            });
        }
        Self {
            id: record.id.clone(),
            tokens,
            segments,
        }
    }

    pub fn samples(&self) -> Vec<FdpoSample> {
        self.segments
            .iter()
            .map(|s| FdpoSample {
                x: self.tokens[..s.range.start].to_vec(),
                y: self.tokens[s.range.clone()].to_vec(),
                c: s.class,
            })
            .collect()
    }

    fn active(&self) -> impl Iterator<Item = (&FdpoSegment, f64)> {
        self.segments.iter().filter_map(|s| match s.class {
            PreferenceClass::Preferred => Some((s, 1.0)),
            PreferenceClass::Dispreferred => Some((s, -1.0)),
            PreferenceClass::Neutral => None,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FdpoConfig {
    pub beta: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: MapMode,
}

impl Default for FdpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            epochs: 5,
            learning_rate: 1e-6,
            warmup_ratio: 0.03,
            batch_size: 8,
            seed: 0,
            mode: MapMode::Ia,
        }
    }
}

impl FdpoConfig {
    pub fn check(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio must be in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x)
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(delta)` with `delta = beta * [(log pi(yw|x) - log ref(yw|x))
/// - (log pi(yl|x) - log ref(yl|x))]`.
pub fn dpo_loss(
    policy: &Scorer,
    reference: &Scorer,
    x: &[TokenId],
    y_w: &[TokenId],
    y_l: &[TokenId],
    beta: f64,
) -> Result<f64> {
    if y_w == y_l {
        return Err(Error::InvalidArgument(
            "preferred and dispreferred continuations are identical".into(),
        ));
    }
    let lp = [
        policy.logprob(x, y_w),
        reference.logprob(x, y_w),
        policy.logprob(x, y_l),
        reference.logprob(x, y_l),
    ];
    if lp.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("log-probabilities {lp:?}")));
    }
    let delta = beta * ((lp[0] - lp[1]) - (lp[2] - lp[3]));
    Ok(-log_sigmoid(delta))
}

/// Value of the fine-grained loss on a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FdpoLoss {
    pub value: f64,
    /// Non-neutral chunks in the batch (the mean's denominator).
    pub active_segments: usize,
    /// Set when the batch has no non-neutral chunk; `value` is then 0.
    pub empty: bool,
}

/// Reference log-probabilities of every chunk, one vector per sequence.
pub fn reference_logprobs(reference: &Scorer, batch: &[FdpoSequence]) -> Vec<Vec<f64>> {
    batch
        .iter()
        .map(|seq| {
            if seq.active().next().is_none() {
                return vec![0.0; seq.segments.len()];
            }
            let trace = reference.trace(&seq.tokens);
            let ranges: Vec<_> = seq.segments.iter().map(|s| s.range.clone()).collect();
            reference.span_logprobs(&trace, &ranges)
        })
        .collect()
}

/// Per-chunk implicit rewards `r` (policy minus reference log-probability),
/// one vector per sequence.
pub fn segment_rewards(
    policy: &Scorer,
    reference: &Scorer,
    batch: &[FdpoSequence],
) -> Vec<Vec<f64>> {
    let refs = reference_logprobs(reference, batch);
    batch
        .iter()
        .zip(refs)
        .map(|(seq, ref_lp)| {
            let trace = policy.trace(&seq.tokens);
            let ranges: Vec<_> = seq.segments.iter().map(|s| s.range.clone()).collect();
            policy
                .span_logprobs(&trace, &ranges)
                .into_iter()
                .zip(ref_lp)
                .map(|(p, r)| p - r)
                .collect()
        })
        .collect()
}

fn loss_with_refs(
    policy: &Scorer,
    batch: &[FdpoSequence],
    ref_lp: &[Vec<f64>],
    beta: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<FdpoLoss> {
    let active: usize = batch.iter().map(|s| s.active().count()).sum();
    if active == 0 {
        warn!("fdpo batch has no preferred or dispreferred chunks");
        return Ok(FdpoLoss {
            value: 0.0,
            active_segments: 0,
            empty: true,
        });
    }
    let n = active as f64;
    let mut total = 0.0;
    for (seq, refs) in batch.iter().zip(ref_lp) {
        let picked: Vec<(usize, f64)> = seq
            .segments
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s.class {
                PreferenceClass::Preferred => Some((i, 1.0)),
                PreferenceClass::Dispreferred => Some((i, -1.0)),
                PreferenceClass::Neutral => None,
            })
            .collect();
        if picked.is_empty() {
            continue;
        }
        let trace = policy.trace(&seq.tokens);
        let ranges: Vec<Range<usize>> = picked
            .iter()
            .map(|&(i, _)| seq.segments[i].range.clone())
            .collect();
        let lps = policy.span_logprobs(&trace, &ranges);
        let mut weights = Vec::with_capacity(picked.len());
        for (&(i, sign), lp) in picked.iter().zip(&lps) {
            let r = lp - refs[i];
            if !r.is_finite() {
                return Err(Error::NonFinite(format!(
                    "chunk {i} of {:?} has reward {r}",
                    seq.id
                )));
            }
            let k = sign * r;
            total += -log_sigmoid(beta * k);
            // d/dr of -log sigmoid(beta * sign * r)
            weights.push(-beta * sign * sigmoid(-beta * k) / n);
        }
        if let Some(g) = grad.as_deref_mut() {
            policy.accumulate_span_logprob_grad(&trace, &ranges, &weights, g);
        }
    }
    Ok(FdpoLoss {
        value: total / n,
        active_segments: active,
        empty: false,
    })
}

/// Mean per-chunk loss over every non-neutral chunk in the batch.
pub fn fdpo_loss(
    policy: &Scorer,
    reference: &Scorer,
    batch: &[FdpoSequence],
    beta: f64,
) -> Result<FdpoLoss> {
    let refs = reference_logprobs(reference, batch);
    loss_with_refs(policy, batch, &refs, beta, None)
}

/// Loss together with its gradient with respect to every policy parameter.
pub fn fdpo_loss_and_grad(
    policy: &Scorer,
    reference: &Scorer,
    batch: &[FdpoSequence],
    beta: f64,
) -> Result<(FdpoLoss, Vec<f64>)> {
    let refs = reference_logprobs(reference, batch);
    let mut grad = policy.zero_grad();
    let loss = loss_with_refs(policy, batch, &refs, beta, Some(&mut grad))?;
    Ok((loss, grad))
}

/// Minibatch Adam on the fine-grained loss with warmup + cosine schedule.
/// Only the parameters selected by `mask` move.
pub fn train_fdpo(
    policy: &Scorer,
    reference: &Scorer,
    corpus: &[AnnotatedResponse],
    map: ClassMap,
    cfg: &FdpoConfig,
    mask: ParamMask,
) -> Result<TrainOutcome> {
    cfg.check()?;
    let mut model = policy.clone();
    let sequences: Vec<FdpoSequence> = corpus
        .iter()
        .map(|r| FdpoSequence::from_record(r, &model, map))
        .collect();
    let refs = reference_logprobs(reference, &sequences);
    let batches_per_epoch = sequences.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let schedule = CosineSchedule::new(cfg.learning_rate, cfg.warmup_ratio, total_steps);
    let ranges = model.layout().masked_ranges(mask);
    let mut adam = Adam::new(model.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut loss_trace = vec![loss_with_refs(&model, &sequences, &refs, cfg.beta, None)?.value];
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<FdpoSequence> = chunk.iter().map(|&i| sequences[i].clone()).collect();
            let batch_refs: Vec<Vec<f64>> = chunk.iter().map(|&i| refs[i].clone()).collect();
            let mut grad = model.zero_grad();
            let loss = loss_with_refs(&model, &batch, &batch_refs, cfg.beta, Some(&mut grad))
                .map_err(|_| Error::Diverged {
                    batch: step,
                    loss: f64::NAN,
                })?;
            if !loss.value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    batch: step,
                    loss: loss.value,
                });
            }
            if !loss.empty {
                adam.step(model.params_mut(), &grad, schedule.lr(step), &ranges);
            }
            step += 1;
        }
        loss_trace.push(loss_with_refs(&model, &sequences, &refs, cfg.beta, None)?.value);
    }
    Ok(TrainOutcome {
        model,
        loss_trace,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SpanAnnotation, Split};
    use crate::scorer::{ScorerConfig, Vocab};

    fn model(seed: u64) -> Scorer {
        let vocab = Vocab::build(
            "a red dog sat on the purple mat . describe it".split(' '),
            64,
        );
        Scorer::new(
            vocab,
            ScorerConfig {
                dim: 5,
                classes: 2,
                init_scale: 0.5,
                zero_head: true,
            },
            seed,
        )
    }

    fn record(spans: Vec<SpanAnnotation>) -> AnnotatedResponse {
        AnnotatedResponse {
            id: "r".into(),
            image_ref: "img".into(),
            prompt: "describe it".into(),
            response: "a red dog sat on the purple mat .".into(),
            spans,
            split: Split::Train,
        }
    }

    #[test]
    fn class_maps() {
        let ia = ClassMap::new(MapMode::Ia);
        let da = ClassMap::new(MapMode::Da);
        for m in [ia, da] {
            assert_eq!(m.class_of(Label::Accurate), PreferenceClass::Preferred);
            assert_eq!(m.class_of(Label::Inaccurate), PreferenceClass::Dispreferred);
            assert_eq!(m.class_of(Label::Unsure), PreferenceClass::Dispreferred);
        }
        assert_eq!(ia.class_of(Label::Analysis), PreferenceClass::Neutral);
        assert_eq!(da.class_of(Label::Analysis), PreferenceClass::Dispreferred);
    }

    #[test]
    fn chunks_follow_spans_and_reconstruct_response() {
        let m = model(1);
        // "a red dog sat on the purple mat ."
        //  0 2   6   10  14 17  21     28  32  (prompt adds 2 tokens)
        let r = record(vec![
            SpanAnnotation::new(21, 27, Label::Inaccurate),
            SpanAnnotation::new(32, 33, Label::Analysis),
        ]);
        let seq = FdpoSequence::from_record(&r, &m, ClassMap::new(MapMode::Ia));
        let got: Vec<_> = seq
            .segments
            .iter()
            .map(|s| (s.range.clone(), s.class))
            .collect();
        assert_eq!(
            got,
            vec![
                (2..8, PreferenceClass::Preferred),
                (8..9, PreferenceClass::Dispreferred),
                (9..10, PreferenceClass::Preferred),
                (10..11, PreferenceClass::Neutral),
            ]
        );
        let ys: Vec<TokenId> = seq.samples().into_iter().flat_map(|s| s.y).collect();
        assert_eq!(ys, seq.tokens[2..].to_vec());
        let samples = seq.samples();
        assert_eq!(samples[1].x, seq.tokens[..8].to_vec());
    }

    #[test]
    fn identical_models_give_ln2() {
        let m = model(3);
        let r = record(vec![SpanAnnotation::new(21, 27, Label::Inaccurate)]);
        let seq = FdpoSequence::from_record(&r, &m, ClassMap::new(MapMode::Da));
        let loss = fdpo_loss(&m, &m, &[seq], 0.5).unwrap();
        assert!((loss.value - std::f64::consts::LN_2).abs() < 1e-12);

        let x = m.encode(["describe", "it"]);
        let yw = m.encode(["a", "dog"]);
        let yl = m.encode(["purple", "mat"]);
        let l = dpo_loss(&m, &m, &x, &yw, &yl, 0.5).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(dpo_loss(&m, &m, &x, &yw, &yw, 0.5).is_err());
    }

    #[test]
    fn beta_zero_dpo_is_ln2() {
        let (p, q) = (model(1), model(2));
        let x = p.encode(["describe"]);
        let l = dpo_loss(&p, &q, &x, &p.encode(["a"]), &p.encode(["dog"]), 0.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn all_neutral_batch_is_zero() {
        let m = model(3);
        let r = record(vec![SpanAnnotation::new(0, 33, Label::Analysis)]);
        let seq = FdpoSequence::from_record(&r, &m, ClassMap::new(MapMode::Ia));
        let loss = fdpo_loss(&model(4), &m, &[seq], 0.5).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.empty);
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = FdpoConfig::default();
        assert!(c.check().is_ok());
        c.beta = 0.0;
        assert!(c.check().is_err());
        c.beta = 0.5;
        c.warmup_ratio = 1.0;
        assert!(c.check().is_err());
    }

    #[test]
    fn zero_epochs_leaves_policy_unchanged() {
        let m = model(5);
        let r = record(vec![SpanAnnotation::new(21, 27, Label::Inaccurate)]);
        let cfg = FdpoConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train_fdpo(
            &m,
            &m,
            &[r],
            ClassMap::new(MapMode::Ia),
            &cfg,
            ParamMask::PREFERENCE,
        )
        .unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
    }
}
