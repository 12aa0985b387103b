use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// One training example. `source` is empty for language modelling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

impl Pair {
    pub fn new(source: Vec<u32>, target: Vec<u32>) -> Self {
        Self { source, target }
    }
}

/// Padded, row-major batch of examples.
///
/// `target_input` is the BOS-prefixed target and `target_output` the same
/// sequence shifted left by one. Masks are `true` on real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelBatch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub source: Vec<u32>,
    pub source_mask: Vec<bool>,
    pub target_input: Vec<u32>,
    pub target_output: Vec<u32>,
    pub target_mask: Vec<bool>,
}

impl ParallelBatch {
    /// Pads `pairs` into one batch. With `append_eos` the output sequence is
    /// `target + [EOS]` and the input `[BOS] + target`; without it the
    /// output is `target` and the input `[BOS] + target[..-1]`.
    pub fn from_pairs(pairs: &[&Pair], append_eos: bool) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let steps = |p: &Pair| if append_eos { p.target.len() + 1 } else { p.target.len() };
        let size = pairs.len();
        let src_len = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
        let tgt_len = pairs.iter().map(|p| steps(p)).max().unwrap_or(0);
        if tgt_len == 0 {
            return Err(Error::Input("batch has no target tokens".into()));
        }
        let mut b = Self {
            size,
            src_len,
            tgt_len,
            source: vec![PAD; size * src_len],
            source_mask: vec![false; size * src_len],
            target_input: vec![PAD; size * tgt_len],
            target_output: vec![PAD; size * tgt_len],
            target_mask: vec![false; size * tgt_len],
        };
        for (i, p) in pairs.iter().enumerate() {
            for (j, &t) in p.source.iter().enumerate() {
                b.source[i * src_len + j] = t;
                b.source_mask[i * src_len + j] = true;
            }
            let n = steps(p);
            let row = i * tgt_len;
            b.target_input[row] = BOS;
            for j in 0..n {
                let out = p.target.get(j).copied().unwrap_or(EOS);
                b.target_output[row + j] = out;
                b.target_mask[row + j] = true;
                if j + 1 < n {
                    b.target_input[row + j + 1] = out;
                }
            }
        }
        Ok(b)
    }

    /// Number of non-pad target positions.
    pub fn target_tokens(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count()
    }

    /// Padded token footprint used for the `max_tokens` budget.
    pub fn footprint(&self) -> usize {
        self.size * self.src_len.max(self.tgt_len)
    }

    pub fn has_source(&self) -> bool {
        self.src_len > 0
    }

    pub fn target_row(&self, i: usize) -> &[u32] {
        &self.target_output[i * self.tgt_len..(i + 1) * self.tgt_len]
    }
}

/// Groups pairs into padded batches of similar length.
///
/// Pairs are shuffled with `shuffle_seed`, stably sorted by length, cut into
/// batches whose padded footprint stays within `max_tokens`, and the batch
/// order is shuffled again with the same seed.
pub fn make_batches(
    pairs: &[Pair],
    max_tokens: usize,
    shuffle_seed: u64,
    append_eos: bool,
) -> Result<Vec<ParallelBatch>> {
    let extra = usize::from(append_eos);
    let len_of = |p: &Pair| p.source.len().max(p.target.len() + extra);
    if let Some(p) = pairs.iter().find(|p| len_of(p) > max_tokens) {
        return Err(Error::Config(format!(
            "a sequence of {} tokens exceeds max_tokens={max_tokens}",
            len_of(p)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (pairs[i].target.len(), pairs[i].source.len()));

    let mut groups: Vec<Vec<&Pair>> = Vec::new();
    let mut current: Vec<&Pair> = Vec::new();
    let mut longest = 0;
    for i in order {
        let p = &pairs[i];
        let l = len_of(p).max(longest);
        if !current.is_empty() && (current.len() + 1) * l > max_tokens {
            groups.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(len_of(p));
        current.push(p);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut rng);
    groups
        .iter()
        .map(|g| ParallelBatch::from_pairs(g, append_eos))
        .collect()
}
