//! A small autoregressive scorer with a next-token head and a
//! classification head, plus exact gradients.
//!
//! Hidden state at sequence position `t` (position 0 is the BOS token):
//!
//! ```text
//! u_t = E[id_t] + mean(E[id_0..=t])
//! h_t = tanh(H u_t + b_h)
//! next-token logits  z_t = W h_t + b      (predicts id_{t+1})
//! class logits       q_t = Wc h_t + b_c
//! ```
//!
//! Every state depends only on positions `<= t`, so scoring a continuation
//! in one pass over `context ++ continuation` matches scoring it piecewise.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::AnnotatedResponse;
use crate::error::{Error, Result};
use crate::segmenter::{tokenize, Density};

pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const BOS: TokenId = 1;
const UNK_TEXT: &str = "<unk>";
const BOS_TEXT: &str = "<bos>";

pub const DEFAULT_DIM: usize = 32;
pub const MAX_VOCAB: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Vocabulary ordered by descending frequency, ties broken
    /// lexicographically, capped at `max_size` entries including the two
    /// reserved ids.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in words {
            *counts.entry(w).or_default() += 1;
        }
        let mut ranked: Vec<_> = counts
            .into_iter()
            .filter(|(w, _)| *w != UNK_TEXT && *w != BOS_TEXT)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let keep = max_size.max(2) - 2;
        let tokens = [UNK_TEXT, BOS_TEXT]
            .into_iter()
            .chain(ranked.into_iter().take(keep).map(|(w, _)| w))
            .map(str::to_owned)
            .collect();
        Self::from_tokens(tokens)
    }

    /// Vocabulary over the whitespace tokens of every prompt and response.
    pub fn from_records(records: &[AnnotatedResponse], max_size: usize) -> Self {
        let texts: Vec<_> = records
            .iter()
            .flat_map(|r| [tokenize(&r.prompt), tokenize(&r.response)])
            .collect();
        Self::build(texts.iter().flat_map(|t| t.texts()), max_size)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vec<TokenId> {
        tokens.into_iter().map(|t| self.id(t)).collect()
    }
}

/// Which parameter groups an optimizer may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMask {
    pub embedding: bool,
    pub hidden: bool,
    pub output: bool,
    pub head: bool,
}

impl ParamMask {
    pub const ALL: ParamMask = ParamMask {
        embedding: true,
        hidden: true,
        output: true,
        head: true,
    };
    /// Reward training: hidden layer and classification head.
    pub const REWARD: ParamMask = ParamMask {
        embedding: false,
        hidden: true,
        output: false,
        head: true,
    };
    /// Preference training: next-token output projection only.
    pub const PREFERENCE: ParamMask = ParamMask {
        embedding: false,
        hidden: false,
        output: true,
        head: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorerConfig {
    pub dim: usize,
    pub classes: usize,
    /// Half-width of the uniform initialization interval.
    pub init_scale: f64,
    /// Start the classification head at zero (uniform class probabilities).
    pub zero_head: bool,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            classes: 2,
            init_scale: 0.1,
            zero_head: true,
        }
    }
}

/// Offsets of each parameter array inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embedding: Range<usize>,
    pub hidden_w: Range<usize>,
    pub hidden_b: Range<usize>,
    pub output_w: Range<usize>,
    pub output_b: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
}

impl Layout {
    fn new(vocab: usize, dim: usize, classes: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Self {
            embedding: take(vocab * dim),
            hidden_w: take(dim * dim),
            hidden_b: take(dim),
            output_w: take(vocab * dim),
            output_b: take(vocab),
            head_w: take(classes * dim),
            head_b: take(classes),
        }
    }

    pub fn total(&self) -> usize {
        self.head_b.end
    }

    pub fn masked_ranges(&self, mask: ParamMask) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        if mask.embedding {
            out.push(self.embedding.clone());
        }
        if mask.hidden {
            out.push(self.hidden_w.start..self.hidden_b.end);
        }
        if mask.output {
            out.push(self.output_w.start..self.output_b.end);
        }
        if mask.head {
            out.push(self.head_w.start..self.head_b.end);
        }
        out
    }
}

/// Cached forward pass over `[BOS] ++ ids`.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Sequence including the leading BOS.
    pub ids: Vec<TokenId>,
    u: Vec<f64>,
    h: Vec<f64>,
    dim: usize,
}

impl Trace {
    /// Number of positions including BOS.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn state(&self, pos: usize) -> &[f64] {
        &self.h[pos * self.dim..(pos + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    vocab: Vocab,
    dim: usize,
    classes: usize,
    layout: Layout,
    params: Vec<f64>,
    density: Option<Density>,
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

fn matvec(w: &[f64], x: &[f64], b: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * d..(i + 1) * d];
        *o = b[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl Scorer {
    pub fn new(vocab: Vocab, cfg: ScorerConfig, seed: u64) -> Self {
        let layout = Layout::new(vocab.len(), cfg.dim, cfg.classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<f64> = (0..layout.total())
            .map(|_| rng.gen_range(-cfg.init_scale..=cfg.init_scale))
            .collect();
        if cfg.zero_head {
            params[layout.head_w.start..layout.head_b.end].fill(0.0);
        }
        Self {
            vocab,
            dim: cfg.dim,
            classes: cfg.classes,
            layout,
            params,
            density: None,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Target density the classification head was trained at, if any.
    pub fn density(&self) -> Option<Density> {
        self.density
    }

    pub fn set_density(&mut self, density: Option<Density>) {
        self.density = density;
    }

    /// Replace the classification head with a fresh zeroed one of `classes`
    /// outputs, keeping every other parameter.
    pub fn with_head(&self, classes: usize) -> Scorer {
        let layout = Layout::new(self.vocab.len(), self.dim, classes);
        let mut params = vec![0.0; layout.total()];
        params[..self.layout.head_w.start]
            .copy_from_slice(&self.params[..self.layout.head_w.start]);
        Scorer {
            vocab: self.vocab.clone(),
            dim: self.dim,
            classes,
            layout,
            params,
            density: None,
        }
    }

    pub fn encode<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vec<TokenId> {
        self.vocab.encode(tokens)
    }

    fn embedding(&self, id: TokenId) -> &[f64] {
        let at = self.layout.embedding.start + id as usize * self.dim;
        &self.params[at..at + self.dim]
    }

    /// Forward pass over `[BOS] ++ ids`.
    pub fn trace(&self, ids: &[TokenId]) -> Trace {
        let d = self.dim;
        let mut seq = Vec::with_capacity(ids.len() + 1);
        seq.push(if self.vocab.len() > BOS as usize {
            BOS
        } else {
            UNK
        });
        seq.extend(ids.iter().map(|&i| {
            if (i as usize) < self.vocab.len() {
                i
            } else {
                UNK
            }
        }));
        let n = seq.len();
        let mut u = vec![0.0; n * d];
        let mut h = vec![0.0; n * d];
        let mut running = vec![0.0; d];
        let hw = &self.params[self.layout.hidden_w.clone()];
        let hb = &self.params[self.layout.hidden_b.clone()];
        for (t, &id) in seq.iter().enumerate() {
            let e = self.embedding(id);
            for (r, x) in running.iter_mut().zip(e) {
                *r += x;
            }
            let inv = 1.0 / (t + 1) as f64;
            let ut = &mut u[t * d..(t + 1) * d];
            for j in 0..d {
                ut[j] = e[j] + running[j] * inv;
            }
            let ht = &mut h[t * d..(t + 1) * d];
            matvec(hw, ut, hb, ht);
            for x in ht.iter_mut() {
                *x = x.tanh();
            }
        }
        Trace {
            ids: seq,
            u,
            h,
            dim: d,
        }
    }

    /// Next-token logits from the state at trace position `pos`.
    pub fn next_logits(&self, trace: &Trace, pos: usize) -> Vec<f64> {
        let mut z = vec![0.0; self.vocab.len()];
        matvec(
            &self.params[self.layout.output_w.clone()],
            trace.state(pos),
            &self.params[self.layout.output_b.clone()],
            &mut z,
        );
        z
    }

    fn head_logits(&self, trace: &Trace, pos: usize) -> Vec<f64> {
        let mut q = vec![0.0; self.classes];
        matvec(
            &self.params[self.layout.head_w.clone()],
            trace.state(pos),
            &self.params[self.layout.head_b.clone()],
            &mut q,
        );
        q
    }

    /// Log-probability of the token at sequence index `i` (0-based, BOS
    /// excluded) given everything before it.
    pub fn token_logprob(&self, trace: &Trace, i: usize) -> f64 {
        let z = self.next_logits(trace, i);
        log_softmax(&z)[trace.ids[i + 1] as usize]
    }

    /// Summed log-probability of each range of sequence indices, read off one
    /// forward pass.
    pub fn span_logprobs(&self, trace: &Trace, ranges: &[Range<usize>]) -> Vec<f64> {
        ranges
            .iter()
            .map(|r| r.clone().map(|i| self.token_logprob(trace, i)).sum())
            .collect()
    }

    /// `log p(continuation | context)`; zero for an empty continuation.
    pub fn logprob(&self, context: &[TokenId], continuation: &[TokenId]) -> f64 {
        if continuation.is_empty() {
            return 0.0;
        }
        let mut seq = context.to_vec();
        seq.extend_from_slice(continuation);
        let trace = self.trace(&seq);
        self.span_logprobs(&trace, std::slice::from_ref(&(context.len()..seq.len())))[0]
    }

    /// Class logits at every position of `ids`.
    pub fn class_logits(&self, ids: &[TokenId]) -> Vec<Vec<f64>> {
        let trace = self.trace(ids);
        self.class_logits_from(&trace)
    }

    pub fn class_logits_from(&self, trace: &Trace) -> Vec<Vec<f64>> {
        (1..trace.len())
            .map(|p| self.head_logits(trace, p))
            .collect()
    }

    pub fn class_logits_at(&self, trace: &Trace, i: usize) -> Vec<f64> {
        self.head_logits(trace, i + 1)
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    /// Add `sum_k weights[k] * d(span_logprob_k)/d(params)` into `grad`.
    pub fn accumulate_span_logprob_grad(
        &self,
        trace: &Trace,
        ranges: &[Range<usize>],
        weights: &[f64],
        grad: &mut [f64],
    ) {
        let d = self.dim;
        let mut dh = vec![0.0; trace.len() * d];
        let ow = self.layout.output_w.clone();
        let ob = self.layout.output_b.clone();
        for (range, &w) in ranges.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            for i in range.clone() {
                let z = self.next_logits(trace, i);
                let probs = softmax(&z);
                let target = trace.ids[i + 1] as usize;
                let h = trace.state(i);
                let dh_i = &mut dh[i * d..(i + 1) * d];
                for (v, p) in probs.iter().enumerate() {
                    let dz = w * (if v == target { 1.0 } else { 0.0 } - p);
                    if dz == 0.0 {
                        continue;
                    }
                    grad[ob.start + v] += dz;
                    let row = ow.start + v * d;
                    for j in 0..d {
                        grad[row + j] += dz * h[j];
                        dh_i[j] += dz * self.params[row + j];
                    }
                }
            }
        }
        self.backward_hidden(trace, &dh, grad);
    }

    /// Add the gradient for class-logit cotangents `dq` at sequence indices
    /// `positions` into `grad`.
    pub fn accumulate_class_grad(
        &self,
        trace: &Trace,
        positions: &[usize],
        dq: &[Vec<f64>],
        grad: &mut [f64],
    ) {
        let d = self.dim;
        let mut dh = vec![0.0; trace.len() * d];
        let hw = self.layout.head_w.clone();
        let hb = self.layout.head_b.clone();
        for (&i, dq_i) in positions.iter().zip(dq) {
            let pos = i + 1;
            let h = trace.state(pos);
            let dh_p = &mut dh[pos * d..(pos + 1) * d];
            for (c, &g) in dq_i.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad[hb.start + c] += g;
                let row = hw.start + c * d;
                for j in 0..d {
                    grad[row + j] += g * h[j];
                    dh_p[j] += g * self.params[row + j];
                }
            }
        }
        self.backward_hidden(trace, &dh, grad);
    }

    fn backward_hidden(&self, trace: &Trace, dh: &[f64], grad: &mut [f64]) {
        let d = self.dim;
        let n = trace.len();
        let hw = self.layout.hidden_w.start;
        let hb = self.layout.hidden_b.start;
        let emb = self.layout.embedding.start;
        // Positions past the last non-zero cotangent contribute nothing.
        let Some(last) = (0..n)
            .rev()
            .find(|&t| dh[t * d..(t + 1) * d].iter().any(|&x| x != 0.0))
        else {
            return;
        };
        let n = last + 1;
        let mut du = vec![0.0; n * d];
        for t in 0..n {
            let dh_t = &dh[t * d..(t + 1) * d];
            if dh_t.iter().all(|&x| x == 0.0) {
                continue;
            }
            let h_t = trace.state(t);
            let u_t = &trace.u[t * d..(t + 1) * d];
            let du_t = &mut du[t * d..(t + 1) * d];
            for i in 0..d {
                let da = dh_t[i] * (1.0 - h_t[i] * h_t[i]);
                if da == 0.0 {
                    continue;
                }
                grad[hb + i] += da;
                let row = hw + i * d;
                for j in 0..d {
                    grad[row + j] += da * u_t[j];
                    du_t[j] += da * self.params[row + j];
                }
            }
        }
        // u_t = E[id_t] + mean(E[id_0..=t]); the mean term routes du_t/(t+1)
        // to every earlier position, accumulated as a suffix sum.
        let mut suffix = vec![0.0; d];
        for t in (0..n).rev() {
            let inv = 1.0 / (t + 1) as f64;
            let du_t = &du[t * d..(t + 1) * d];
            let row = emb + trace.ids[t] as usize * d;
            for j in 0..d {
                suffix[j] += du_t[j] * inv;
                grad[row + j] += du_t[j] + suffix[j];
            }
        }
    }

    const MAGIC: &'static [u8; 8] = b"FGSCORER";
    const VERSION: u32 = 2;

    /// Checkpoint bytes: magic, version, dims, head density tag, vocabulary,
    /// then every parameter array as little-endian f64 in layout order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.params.len() * 8);
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.push(match self.density {
            None => 0,
            Some(Density::Sentence) => 1,
            Some(Density::Segment) => 2,
        });
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for tok in &self.vocab.tokens {
            out.extend_from_slice(&(tok.len() as u32).to_le_bytes());
            out.extend_from_slice(tok.as_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let read_u32 = |cur: &mut Cursor<&[u8]>| -> Result<u32> {
            let mut b = [0u8; 4];
            cur.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = read_u32(&mut cur)?;
        if version != Self::VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let dim = read_u32(&mut cur)? as usize;
        let classes = read_u32(&mut cur)? as usize;
        let mut tag = [0u8; 1];
        cur.read_exact(&mut tag).map_err(|_| bad("truncated"))?;
        let density = match tag[0] {
            0 => None,
            1 => Some(Density::Sentence),
            2 => Some(Density::Segment),
            t => return Err(Error::Checkpoint(format!("unknown density tag {t}"))),
        };
        let vocab_len = read_u32(&mut cur)? as usize;
        let mut tokens = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            let len = read_u32(&mut cur)? as usize;
            let mut buf = vec![0u8; len];
            cur.read_exact(&mut buf)
                .map_err(|_| bad("truncated vocabulary"))?;
            tokens.push(String::from_utf8(buf).map_err(|_| bad("vocabulary is not UTF-8"))?);
        }
        let mut b8 = [0u8; 8];
        cur.read_exact(&mut b8).map_err(|_| bad("truncated"))?;
        let count = u64::from_le_bytes(b8) as usize;
        let layout = Layout::new(vocab_len, dim, classes);
        if count != layout.total() {
            return Err(bad("parameter count does not match dimensions"));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            cur.read_exact(&mut b8)
                .map_err(|_| bad("truncated parameters"))?;
            params.push(f64::from_le_bytes(b8));
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Scorer {
            vocab: Vocab::from_tokens(tokens),
            dim,
            classes,
            layout,
            params,
            density,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// `|a - f| / (max(|a|, |f|) + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-8)
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    /// Parameter index with the largest relative error.
    pub worst: Option<usize>,
}

/// Compare analytic gradients with central differences.
///
/// `loss` returns the loss value and its full gradient. With `subset =
/// Some((k, seed))` only `k` randomly chosen parameters are perturbed.
pub fn grad_check<F>(
    model: &Scorer,
    loss: F,
    eps: f64,
    subset: Option<(usize, u64)>,
) -> Result<GradientReport>
where
    F: Fn(&Scorer) -> (f64, Vec<f64>),
{
    let (base, grad) = loss(model);
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss {base}")));
    }
    let n = model.num_params();
    let indices: Vec<usize> = match subset {
        Some((k, seed)) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = sample(&mut rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    };
    let mut probe = model.clone();
    let mut analytic = Vec::with_capacity(indices.len());
    let mut numeric = Vec::with_capacity(indices.len());
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for &i in &indices {
        let orig = probe.params[i];
        probe.params[i] = orig + eps;
        let plus = loss(&probe).0;
        probe.params[i] = orig - eps;
        let minus = loss(&probe).0;
        probe.params[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("perturbed loss at parameter {i}")));
        }
        let fd = (plus - minus) / (2.0 * eps);
        let rel = relative_error(grad[i], fd);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst = Some(i);
        }
        analytic.push(grad[i]);
        numeric.push(fd);
    }
    Ok(GradientReport {
        indices,
        analytic,
        numeric,
        max_rel_error,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, zero_head: bool) -> Scorer {
        let words = "the dog sat on a red mat . it was purple";
        let vocab = Vocab::build(words.split(' '), 64);
        Scorer::new(
            vocab,
            ScorerConfig {
                dim: 6,
                classes,
                init_scale: 0.5,
                zero_head,
            },
            7,
        )
    }

    #[test]
    fn vocab_reserves_unknown_and_bos() {
        let v = Vocab::build(["b", "a", "b"], 10);
        assert_eq!(v.token(UNK), "<unk>");
        assert_eq!(v.token(BOS), "<bos>");
        assert_eq!(v.id("b"), 2);
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(Vocab::build(["a", "b", "c"], 3).len(), 3);
    }

    #[test]
    fn empty_continuation_is_zero() {
        let m = toy(2, true);
        let ctx = m.encode(["the", "dog"]);
        assert_eq!(m.logprob(&ctx, &[]), 0.0);
    }

    #[test]
    fn single_token_vocab_has_zero_logprob() {
        // Only the two reserved ids exist; a one-entry output is built by
        // dropping BOS's row via a vocab of size 1.
        let vocab = Vocab::from_tokens(vec!["<unk>".into()]);
        let m = Scorer::new(
            vocab,
            ScorerConfig {
                dim: 4,
                ..Default::default()
            },
            1,
        );
        // BOS id is out of range for this vocabulary and maps to UNK.
        let lp = m.logprob(&[], &[UNK, UNK]);
        assert_eq!(lp, 0.0);
    }

    #[test]
    fn softmax_normalizes_and_logprobs_nonpositive() {
        let m = toy(3, false);
        let ids = m.encode("the dog sat on a red mat".split(' '));
        let tr = m.trace(&ids);
        for p in 0..tr.len() {
            let probs = softmax(&m.next_logits(&tr, p));
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for i in 0..ids.len() {
            assert!(m.token_logprob(&tr, i) <= 0.0);
        }
    }

    #[test]
    fn zero_head_gives_uniform_classes() {
        let m = toy(3, true);
        let ids = m.encode(["the", "dog"]);
        for q in m.class_logits(&ids) {
            assert_eq!(q.len(), 3);
            for p in softmax(&q) {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn logprob_is_additive() {
        let m = toy(2, false);
        let x = m.encode(["the", "dog"]);
        let y1 = m.encode(["sat", "on"]);
        let y2 = m.encode(["a", "mat", "."]);
        let mut y = y1.clone();
        y.extend(&y2);
        let mut x1 = x.clone();
        x1.extend(&y1);
        let whole = m.logprob(&x, &y);
        let parts = m.logprob(&x, &y1) + m.logprob(&x1, &y2);
        assert!((whole - parts).abs() < 1e-9);
    }

    #[test]
    fn quadratic_loss_checks_exactly() {
        let m = toy(2, false);
        let report = grad_check(
            &m,
            |s| {
                let p = s.params();
                let v = p
                    .iter()
                    .enumerate()
                    .map(|(i, x)| (i % 5) as f64 * x * x)
                    .sum();
                let g = p
                    .iter()
                    .enumerate()
                    .map(|(i, x)| 2.0 * (i % 5) as f64 * x)
                    .collect();
                (v, g)
            },
            1e-4,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{}", report.max_rel_error);
    }

    #[test]
    fn span_logprob_gradient_matches_differences() {
        let m = toy(2, false);
        let ids = m.encode("the dog sat on a purple mat".split(' '));
        let ranges = vec![2..4, 4..7];
        let weights = vec![0.7, -1.3];
        let report = grad_check(
            &m,
            |s| {
                let tr = s.trace(&ids);
                let lps = s.span_logprobs(&tr, &ranges);
                let v = lps.iter().zip(&weights).map(|(l, w)| l * w).sum();
                let mut g = s.zero_grad();
                s.accumulate_span_logprob_grad(&tr, &ranges, &weights, &mut g);
                (v, g)
            },
            1e-4,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
    }

    #[test]
    fn class_gradient_matches_differences() {
        let m = toy(3, false);
        let ids = m.encode("it was a red dog".split(' '));
        let positions = vec![1, 4];
        let cot = vec![vec![0.2, -0.5, 0.1], vec![-1.0, 0.3, 0.7]];
        let report = grad_check(
            &m,
            |s| {
                let tr = s.trace(&ids);
                let v = positions
                    .iter()
                    .zip(&cot)
                    .map(|(&i, c)| {
                        s.class_logits_at(&tr, i)
                            .iter()
                            .zip(c)
                            .map(|(q, w)| q * w)
                            .sum::<f64>()
                    })
                    .sum();
                let mut g = s.zero_grad();
                s.accumulate_class_grad(&tr, &positions, &cot, &mut g);
                (v, g)
            },
            1e-4,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
    }

    #[test]
    fn checkpoint_roundtrip_and_rejects_garbage() {
        let m = toy(3, false);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..8], b"FGSCORER");
        let back = Scorer::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert!(Scorer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Scorer::from_bytes(b"NOTMODEL").is_err());

        let mut tagged = m.clone();
        tagged.set_density(Some(Density::Segment));
        let back = Scorer::from_bytes(&tagged.to_bytes()).unwrap();
        assert_eq!(back.density(), Some(Density::Segment));
    }

    #[test]
    fn with_head_keeps_body() {
        let m = toy(2, false);
        let m3 = m.with_head(3);
        assert_eq!(m3.num_classes(), 3);
        let ids = m.encode(["the", "dog"]);
        assert_eq!(m.logprob(&[], &ids), m3.logprob(&[], &ids));
        assert!(m3.class_logits(&ids).iter().flatten().all(|&q| q == 0.0));
    }

    #[test]
    fn same_seed_same_params() {
        assert_eq!(toy(2, false).params(), toy(2, false).params());
    }
}
