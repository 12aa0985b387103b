use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_N: usize = 4;

/// BLEU-4 on the 0..100 scale with its ingredients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub bleu: f64,
    /// Modified n-gram precisions for n = 1..4.
    pub precisions: [f64; MAX_N],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Everything the evaluation command reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: BleuScore,
    pub oracle_bleu: f64,
    pub entropy: f64,
    /// Repetition ratio of the hypotheses for n = 1, 2, 3.
    pub repetition: [f64; 3],
    pub token_accuracy: f64,
    pub sequence_accuracy: f64,
    pub sentences: usize,
    pub tokens: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and totals per order for one hypothesis.
fn clipped_stats<T: Eq + Hash>(hyp: &[T], refs: &[Vec<T>]) -> [(usize, usize); MAX_N] {
    let mut out = [(0, 0); MAX_N];
    for (i, slot) in out.iter_mut().enumerate() {
        let n = i + 1;
        let h = ngram_counts(hyp, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched = h
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        *slot = (matched, hyp.len().saturating_sub(n - 1));
    }
    out
}

/// Reference length closest to `hyp_len`, shorter on ties.
fn closest_ref_len<T>(hyp_len: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(hyp_len), l))
        .unwrap_or(0)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

fn check_aligned<T>(hyps: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Input("BLEU over an empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} hypotheses but {} reference sets",
            hyps.len(),
            refs.len()
        )));
    }
    if let Some(i) = refs.iter().position(|r| r.is_empty()) {
        return Err(Error::Input(format!("hypothesis {i} has no reference")));
    }
    Ok(())
}

/// Corpus BLEU-4 with per-n-gram clipping at the maximum reference count
/// and a brevity penalty against the summed closest reference lengths.
/// Any zero precision makes the score 0.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<BleuScore> {
    check_aligned(hyps, refs)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut c, mut r) = (0, 0);
    for (h, rs) in hyps.iter().zip(refs) {
        for (i, (m, t)) in clipped_stats(h, rs).into_iter().enumerate() {
            matched[i] += m;
            total[i] += t;
        }
        c += h.len();
        r += closest_ref_len(h.len(), rs);
    }
    let mut precisions = [0.0; MAX_N];
    for i in 0..MAX_N {
        precisions[i] = if total[i] == 0 {
            0.0
        } else {
            matched[i] as f64 / total[i] as f64
        };
    }
    let bp = brevity_penalty(c, r);
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_N as f64;
        100.0 * bp * mean_log.exp()
    };
    Ok(BleuScore {
        bleu,
        precisions,
        brevity_penalty: bp,
        hyp_len: c,
        ref_len: r,
    })
}

/// Sentence BLEU-4 (0..100) with add-one smoothing of matches and totals
/// for n >= 2.
pub fn sentence_bleu<T: Eq + Hash>(hyp: &[T], refs: &[Vec<T>]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::Input("sentence BLEU needs a reference".into()));
    }
    let stats = clipped_stats(hyp, refs);
    let (m1, t1) = stats[0];
    if m1 == 0 || t1 == 0 {
        return Ok(0.0);
    }
    let mut log_sum = (m1 as f64 / t1 as f64).ln();
    for &(m, t) in &stats[1..] {
        log_sum += ((m + 1) as f64 / (t + 1) as f64).ln();
    }
    let bp = brevity_penalty(hyp.len(), closest_ref_len(hyp.len(), refs));
    Ok(100.0 * bp * (log_sum / MAX_N as f64).exp())
}

/// Mean over hypotheses of the best smoothed sentence BLEU against any one
/// of its references.
pub fn oracle_sentence_bleu<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<f64> {
    check_aligned(hyps, refs)?;
    let mut total = 0.0;
    for (h, rs) in hyps.iter().zip(refs) {
        let mut best = f64::NEG_INFINITY;
        for r in rs {
            best = best.max(sentence_bleu(h, std::slice::from_ref(r))?);
        }
        total += best;
    }
    Ok(total / hyps.len() as f64)
}

/// Mean over rows of the natural-log entropy of next-token distributions
/// given as log-probabilities. Zero rows give 0.
pub fn generation_entropy<R: AsRef<[f32]>>(rows: &[R]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for row in rows {
        let mut h = 0.0f64;
        for &lp in row.as_ref() {
            if lp > f32::NEG_INFINITY {
                let lp = lp as f64;
                h -= lp.exp() * lp;
            }
        }
        total += h;
    }
    total / rows.len() as f64
}

/// `1 - distinct / total` over the n-grams of `tokens`; 0 when there are
/// fewer than `n` tokens.
pub fn ngram_repetition_ratio<T: Eq + Hash>(tokens: &[T], n: usize) -> f64 {
    if n == 0 || tokens.len() < n {
        return 0.0;
    }
    let total = tokens.len() - n + 1;
    let distinct = ngram_counts(tokens, n).len();
    1.0 - distinct as f64 / total as f64
}

/// Absolute difference of the n-gram repetition ratios of two texts.
pub fn repetition_ratio_difference<T: Eq + Hash>(perturbed: &[T], original: &[T], n: usize) -> f64 {
    (ngram_repetition_ratio(perturbed, n) - ngram_repetition_ratio(original, n)).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_hand_examples() {
        let hyps = vec![toks("the cat sat on the mat"), toks("a quick brown fox jumps")];
        let refs: Vec<Vec<Vec<&str>>> = hyps.iter().map(|h| vec![h.clone()]).collect();
        assert_eq!(corpus_bleu(&hyps, &refs).unwrap().bleu, 100.0);

        let s = corpus_bleu(&[toks("the the the")], &[vec![toks("the cat")]]).unwrap();
        assert!((s.precisions[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(&s.precisions[1..], &[0.0, 0.0, 0.0]);
        assert_eq!(s.bleu, 0.0);

        let hyp = toks("the cat is on the mat");
        let one = corpus_bleu(std::slice::from_ref(&hyp), &[vec![toks("there is a cat on the mat")]]).unwrap();
        assert!(one.bleu < 100.0);
        let two = corpus_bleu(
            std::slice::from_ref(&hyp),
            &[vec![toks("there is a cat on the mat"), hyp.clone()]],
        )
        .unwrap();
        assert_eq!(two.bleu, 100.0);
    }

    #[test]
    fn brevity_uses_closest_reference() {
        let s = corpus_bleu(
            &[toks("a b c d e")],
            &[vec![toks("a b c d e f g h i j"), toks("a b c d e f")]],
        )
        .unwrap();
        assert_eq!(s.ref_len, 6);
        assert!((s.brevity_penalty - (1.0f64 - 6.0 / 5.0).exp()).abs() < 1e-12);
        // Equidistant references: the shorter one counts.
        assert_eq!(closest_ref_len(5, &[toks("a b c d"), toks("a b c d e f")]), 4);
    }

    #[test]
    fn bleu_rejects_bad_input() {
        let empty: Vec<Vec<&str>> = Vec::new();
        assert_eq!(corpus_bleu(&empty, &[]).unwrap_err().code(), "E_INPUT");
        assert!(corpus_bleu(&[toks("a")], &[]).is_err());
        assert!(oracle_sentence_bleu(&[toks("a")], &[vec![]]).is_err());
    }

    #[test]
    fn oracle_bleu_examples() {
        let hyps = vec![toks("the cat sat on the mat")];
        let refs = vec![vec![toks("a dog"), toks("the cat sat on the mat"), toks("x y z")]];
        assert_eq!(oracle_sentence_bleu(&hyps, &refs).unwrap(), 100.0);

        let hyps = vec![toks("the cat sat"), toks("a b c d")];
        let single = vec![vec![toks("the cat sat down")], vec![toks("a b x d")]];
        let mean = (sentence_bleu(&hyps[0], &single[0]).unwrap() + sentence_bleu(&hyps[1], &single[1]).unwrap()) / 2.0;
        assert_eq!(oracle_sentence_bleu(&hyps, &single).unwrap(), mean);
    }

    // From an independent Python implementation (tests/oracles/bleu_oracle.py).
    const FROZEN_00: f64 = 48.54917717073234;
    const FROZEN_01: f64 = 80.34284189446518;
    const FROZEN_10: f64 = 37.99178428257963;
    const FROZEN_11: f64 = 51.24797359336637;
    const FROZEN_ORACLE: f64 = 65.79540774391577;

    #[test]
    fn oracle_bleu_two_by_two_table() {
        let hyps = vec![toks("the cat sat on the mat"), toks("he read the book")];
        let refs = vec![
            vec![toks("the cat is on the mat"), toks("a cat sat on the mat")],
            vec![toks("he reads a book"), toks("she read the book today")],
        ];
        let table = [
            [
                sentence_bleu(&hyps[0], &refs[0][..1]).unwrap(),
                sentence_bleu(&hyps[0], &refs[0][1..]).unwrap(),
            ],
            [
                sentence_bleu(&hyps[1], &refs[1][..1]).unwrap(),
                sentence_bleu(&hyps[1], &refs[1][1..]).unwrap(),
            ],
        ];
        let expected = [[FROZEN_00, FROZEN_01], [FROZEN_10, FROZEN_11]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((table[i][j] - expected[i][j]).abs() < 1e-9, "{i},{j}: {}", table[i][j]);
            }
        }
        let oracle = oracle_sentence_bleu(&hyps, &refs).unwrap();
        assert!((oracle - FROZEN_ORACLE).abs() < 1e-9, "{oracle}");
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(generation_entropy(&[vec![0.0f32, f32::NEG_INFINITY]]), 0.0);
        let uniform = vec![-(5f32).ln(); 5];
        assert!((generation_entropy(&[uniform]) - 5f64.ln()).abs() < 1e-6);
        let rows = vec![vec![0.5f32.ln(), 0.5f32.ln()], vec![0.0, f32::NEG_INFINITY]];
        assert!((generation_entropy(&rows) - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn repetition_examples() {
        assert_eq!(ngram_repetition_ratio(&toks("a b c"), 1), 0.0);
        assert_eq!(ngram_repetition_ratio(&toks("a a a a"), 1), 0.75);
        assert!((ngram_repetition_ratio(&toks("a b a b"), 2) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(ngram_repetition_ratio(&toks("a"), 2), 0.0);
        assert_eq!(repetition_ratio_difference(&toks("a a a a"), &toks("a b c d"), 1), 0.75);
        assert_eq!(repetition_ratio_difference(&toks("a b"), &toks("a b"), 1), 0.0);
    }

    proptest! {
        #[test]
        fn bleu_is_order_invariant(
            sents in prop::collection::vec(
                (prop::collection::vec(0u8..6, 1..9), prop::collection::vec(0u8..6, 1..9)),
                1..6,
            ),
            rot in 0usize..6,
        ) {
            let hyps: Vec<Vec<u8>> = sents.iter().map(|s| s.0.clone()).collect();
            let refs: Vec<Vec<Vec<u8>>> = sents.iter().map(|s| vec![s.1.clone()]).collect();
            let a = corpus_bleu(&hyps, &refs).unwrap();
            let k = rot % hyps.len();
            let mut h2 = hyps.clone();
            let mut r2 = refs.clone();
            h2.rotate_left(k);
            r2.rotate_left(k);
            let b = corpus_bleu(&h2, &r2).unwrap();
            prop_assert_eq!(a.precisions, b.precisions);
            prop_assert!((a.bleu - b.bleu).abs() < 1e-9);
            let rebuilt = if a.precisions.contains(&0.0) {
                0.0
            } else {
                100.0 * a.brevity_penalty * (a.precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
            };
            prop_assert!((a.bleu - rebuilt).abs() < 1e-6);
            prop_assert!((0.0..=100.0 + 1e-9).contains(&a.bleu));
        }

        #[test]
        fn repetition_in_unit_interval(t in prop::collection::vec(0u8..4, 0..30), n in 1usize..4) {
            let r = ngram_repetition_ratio(&t, n);
            prop_assert!((0.0..1.0).contains(&r) || r == 0.0);
            prop_assert_eq!(repetition_ratio_difference(&t, &t, n), 0.0);
        }
    }
}
