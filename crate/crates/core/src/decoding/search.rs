use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BOS, EOS, PAD};
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{Memory, Model, ModelMode};
use crate::tensor::{kernels, Graph, ParamStore, Tensor};

/// Anything that scores the next token after a prefix.
pub trait NextToken {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities of the next token after each prefix.
    fn next_log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f32>>>;
}

impl<S: NextToken + ?Sized> NextToken for &S {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn next_log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f32>>> {
        (**self).next_log_probs(prefixes)
    }
}

/// A trained model bound to one source sentence (or none for a language
/// model). The encoder runs once; each query reruns the decoder over the
/// full prefix with dropout off.
pub struct ModelScorer<'a> {
    model: &'a Model,
    params: &'a ParamStore,
    memory: Option<(Tensor, usize)>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, params: &'a ParamStore, source: Option<&[u32]>) -> Result<Self> {
        model.check_params(params)?;
        let memory = match (model.config().mode, source) {
            (ModelMode::EncoderDecoder, Some(src)) if !src.is_empty() => {
                let mut g = Graph::new();
                let mask = vec![true; src.len()];
                let states = model.encode(&mut g, params, src, 1, src.len(), &mask, None)?;
                Some((g.value(states).clone(), src.len()))
            }
            (ModelMode::EncoderDecoder, _) => {
                return Err(Error::Input("encoder-decoder decoding needs a non-empty source".into()))
            }
            (ModelMode::DecoderOnly, _) => None,
        };
        Ok(Self { model, params, memory })
    }
}

impl NextToken for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn next_log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f32>>> {
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let max_pos = self.model.config().max_positions;
        // A language model slides its window; a translation model cannot.
        let windows: Vec<&[u32]> = prefixes
            .iter()
            .map(|p| match self.memory {
                None if p.len() > max_pos => Ok(&p[p.len() - max_pos..]),
                _ if p.is_empty() => Err(shape_err!("empty decoder prefix")),
                _ => Ok(*p),
            })
            .collect::<Result<_>>()?;
        let k = windows.len();
        let len = windows.iter().map(|w| w.len()).max().unwrap_or(1);
        let mut ids = vec![PAD; k * len];
        let mut mask = vec![false; k * len];
        for (i, w) in windows.iter().enumerate() {
            ids[i * len..i * len + w.len()].copy_from_slice(w);
            mask[i * len..i * len + w.len()].fill(true);
        }

        let mut g = Graph::new();
        let mem_mask;
        let memory = match &self.memory {
            Some((states, s_len)) => {
                let d = states.shape()[1];
                let mut rep = Vec::with_capacity(k * states.len());
                for _ in 0..k {
                    rep.extend_from_slice(states.data());
                }
                let var = g.constant(Tensor::new(vec![k * s_len, d], rep)?);
                mem_mask = vec![true; k * s_len];
                Some(Memory {
                    states: var,
                    mask: &mem_mask,
                    len: *s_len,
                })
            }
            None => None,
        };
        let logits = self
            .model
            .decode(&mut g, self.params, memory, &ids, k, len, &mask, None)?;
        let v = self.vocab_size();
        let data = g.value(logits).data();
        let mut out = Vec::with_capacity(k);
        for (i, w) in windows.iter().enumerate() {
            let r = i * len + w.len() - 1;
            let mut row = vec![0.0f32; v];
            kernels::log_softmax_row(&data[r * v..(r + 1) * v], &mut row);
            out.push(row);
        }
        Ok(out)
    }
}

/// Next-token table keyed by the full prefix. Prefixes missing from the
/// table get a uniform row.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTable {
    vocab: usize,
    rows: BTreeMap<Vec<u32>, Vec<f32>>,
}

impl ToyTable {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            rows: BTreeMap::new(),
        }
    }

    /// Sets the distribution after `prefix` from probabilities.
    pub fn set(&mut self, prefix: &[u32], probs: &[f64]) -> Result<()> {
        if probs.len() != self.vocab {
            return Err(shape_err!(
                "row of {} entries for vocabulary {}",
                probs.len(),
                self.vocab
            ));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("row {probs:?} is not a distribution")));
        }
        self.rows
            .insert(prefix.to_vec(), probs.iter().map(|&p| p.ln() as f32).collect());
        Ok(())
    }

    /// Random strictly positive rows for every non-EOS prefix of up to
    /// `depth` tokens after `[BOS]`.
    pub fn random(vocab: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = Self::new(vocab);
        let mut frontier = vec![vec![BOS]];
        for _ in 0..depth {
            let mut next = Vec::new();
            for prefix in frontier {
                let raw: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.05..1.0f64).powi(3)).collect();
                let total: f64 = raw.iter().sum();
                let row: Vec<f64> = raw.iter().map(|r| r / total).collect();
                table
                    .rows
                    .insert(prefix.clone(), row.iter().map(|&p| p.ln() as f32).collect());
                for w in 0..vocab as u32 {
                    if w != EOS {
                        let mut p = prefix.clone();
                        p.push(w);
                        next.push(p);
                    }
                }
            }
            frontier = next;
        }
        table
    }
}

impl NextToken for ToyTable {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f32>>> {
        let uniform = vec![-(self.vocab as f32).ln(); self.vocab];
        Ok(prefixes
            .iter()
            .map(|p| self.rows.get(*p).cloned().unwrap_or_else(|| uniform.clone()))
            .collect())
    }
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(config_err!("max_len must be at least 1"));
    }
    Ok(())
}

fn argmax(row: &[f32]) -> u32 {
    crate::model::greedy_predictions(row, row.len())[0]
}

/// Argmax decoding after `prefix` until EOS or `max_len` new tokens.
/// The returned tokens exclude the prefix and include EOS when emitted.
pub fn greedy_decode<S: NextToken + ?Sized>(scorer: &S, prefix: &[u32], max_len: usize) -> Result<Vec<u32>> {
    check_max_len(max_len)?;
    let mut seq = prefix.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len {
        let row = scorer.next_log_probs(&[&seq])?.remove(0);
        let w = argmax(&row);
        seq.push(w);
        out.push(w);
        if w == EOS {
            break;
        }
    }
    Ok(out)
}

/// One beam entry.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// `log_prob / len^gamma`.
    pub score: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    fn new(tokens: Vec<u32>, log_prob: f64, gamma: f64, finished: bool) -> Self {
        let len = tokens.len().max(1) as f64;
        Self {
            score: log_prob / len.powf(gamma),
            tokens,
            log_prob,
            finished,
        }
    }
}

/// Beam search returning the best hypothesis under length normalization.
///
/// Each step ranks every one-token extension of the live beams by
/// cumulative log-probability (ties to the earlier beam, then the lower
/// token id). Extensions that end in EOS or reach `max_len` within the top
/// `beam` ranks are finished; the live beam is refilled with the best
/// unfinished ones. Search stops once `beam` hypotheses have finished.
pub fn beam_decode<S: NextToken + ?Sized>(
    scorer: &S,
    prefix: &[u32],
    beam: usize,
    gamma: f64,
    max_len: usize,
) -> Result<BeamHypothesis> {
    if beam == 0 {
        return Err(config_err!("beam size must be at least 1"));
    }
    check_max_len(max_len)?;
    let v = scorer.vocab_size();
    let mut alive = vec![BeamHypothesis::new(Vec::new(), 0.0, gamma, false)];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    for step in 1..=max_len {
        let seqs: Vec<Vec<u32>> = alive.iter().map(|h| [prefix, &h.tokens].concat()).collect();
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let rows = scorer.next_log_probs(&refs)?;

        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(alive.len() * v);
        for (b, row) in rows.iter().enumerate() {
            for (w, &lp) in row.iter().enumerate() {
                if lp > f32::NEG_INFINITY {
                    cands.push((alive[b].log_prob + lp as f64, b, w as u32));
                }
            }
        }
        // Stable: equal scores keep (beam, token) order.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));

        let mut next = Vec::with_capacity(beam);
        for (rank, &(lp, b, w)) in cands.iter().enumerate() {
            if next.len() == beam && rank >= beam {
                break;
            }
            let mut tokens = alive[b].tokens.clone();
            tokens.push(w);
            let done = w == EOS || step == max_len;
            if done {
                if rank < beam {
                    finished.push(BeamHypothesis::new(tokens, lp, gamma, true));
                }
            } else if next.len() < beam {
                next.push(BeamHypothesis::new(tokens, lp, gamma, false));
            }
        }
        alive = next;
        if finished.len() >= beam || alive.is_empty() {
            break;
        }
    }

    let pool = if finished.is_empty() { &alive } else { &finished };
    // First maximum wins, so earlier-finished hypotheses win ties.
    let mut best = &pool[0];
    for h in &pool[1..] {
        if h.score > best.score {
            best = h;
        }
    }
    Ok(best.clone())
}

/// Brute-force search over every continuation of up to `max_len` tokens
/// (stopping at EOS). Exponential in `max_len`; meant as a test oracle.
pub fn exhaustive_decode<S: NextToken + ?Sized>(
    scorer: &S,
    prefix: &[u32],
    gamma: f64,
    max_len: usize,
) -> Result<BeamHypothesis> {
    check_max_len(max_len)?;
    let mut best: Option<BeamHypothesis> = None;
    let mut stack = vec![(Vec::<u32>::new(), 0.0f64)];
    while let Some((tokens, lp)) = stack.pop() {
        let seq = [prefix, &tokens].concat();
        let row = scorer.next_log_probs(&[&seq])?.remove(0);
        for (w, &l) in row.iter().enumerate() {
            let mut t = tokens.clone();
            t.push(w as u32);
            let total = lp + l as f64;
            if w as u32 == EOS || t.len() == max_len {
                let h = BeamHypothesis::new(t, total, gamma, true);
                if best.as_ref().is_none_or(|b| h.score > b.score) {
                    best = Some(h);
                }
            } else {
                stack.push((t, total));
            }
        }
    }
    best.ok_or_else(|| Error::Degenerate("no hypothesis enumerated".into()))
}

/// Smallest highest-probability set whose mass reaches `p`, renormalized.
/// Returns a full-length vector with zeros outside the nucleus. Sorting
/// breaks ties by lower id; `p == 1` returns the distribution unchanged.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(config_err!("nucleus p must be in (0, 1], got {p}"));
    }
    if p == 1.0 {
        return Ok(probs.to_vec());
    }
    let total: f64 = probs.iter().sum();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut out = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        out[i] = probs[i];
        mass += probs[i];
        if mass >= p * total {
            break;
        }
    }
    for o in out.iter_mut() {
        *o /= mass;
    }
    Ok(out)
}

/// Draws an index from unnormalized weights by walking cumulative mass in
/// id order.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Nucleus sampling at temperature 1 until EOS or `max_len` new tokens.
pub fn nucleus_sample<S: NextToken + ?Sized, R: Rng + ?Sized>(
    scorer: &S,
    prefix: &[u32],
    p: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    check_max_len(max_len)?;
    if !(p > 0.0 && p <= 1.0) {
        return Err(config_err!("nucleus p must be in (0, 1], got {p}"));
    }
    let mut seq = prefix.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len {
        let row = scorer.next_log_probs(&[&seq])?.remove(0);
        let probs: Vec<f64> = row.iter().map(|&lp| (lp as f64).exp()).collect();
        let w = sample_index(&nucleus_filter(&probs, p)?, rng) as u32;
        seq.push(w);
        out.push(w);
        if w == EOS {
            break;
        }
    }
    Ok(out)
}

/// Sampling from the full distribution; the same draws as `p == 1`.
pub fn ancestral_sample<S: NextToken + ?Sized, R: Rng + ?Sized>(
    scorer: &S,
    prefix: &[u32],
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    nucleus_sample(scorer, prefix, 1.0, max_len, rng)
}
