//! Corpus BLEU, oracle BLEU, n-gram repetition and generation entropy on
//! hand-made examples.

use dysi::decoding::{
    corpus_bleu, generation_entropy, ngram_repetition_ratio, oracle_sentence_bleu, repetition_ratio_difference,
    sentence_bleu,
};

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn main() -> dysi::Result<()> {
    let hyps = vec![toks("the cat sat on the mat"), toks("a dog ran in the park today")];
    let refs = vec![
        vec![toks("the cat sat on the mat")],
        vec![
            toks("the dog ran in the park"),
            toks("a dog was running in the park today"),
        ],
    ];
    let score = corpus_bleu(&hyps, &refs)?;
    println!(
        "corpus BLEU {:.2}  precisions {:.3?}  BP {:.3}  ({} / {} tokens)",
        score.bleu, score.precisions, score.brevity_penalty, score.hyp_len, score.ref_len
    );
    for (h, r) in hyps.iter().zip(&refs) {
        println!("sentence BLEU {:.2}  {:?}", sentence_bleu(h, r)?, h.join(" "));
    }
    let oracle = oracle_sentence_bleu(&hyps, &refs)?;
    println!("oracle BLEU {oracle:.2}");

    let looping = toks("i am what i am what i am what i am");
    let fresh = toks("shall i compare thee to a summer day");
    for n in 1..=3 {
        println!(
            "n={n}  rep(looping) {:.3}  rep(fresh) {:.3}  diff {:.3}",
            ngram_repetition_ratio(&looping, n),
            ngram_repetition_ratio(&fresh, n),
            repetition_ratio_difference(&looping, &fresh, n)
        );
    }

    let peaked = vec![vec![0.97f32.ln(), 0.01f32.ln(), 0.01f32.ln(), 0.01f32.ln()]];
    let flat = vec![vec![0.25f32.ln(); 4]];
    println!(
        "entropy peaked {:.3}  flat {:.3}  (ln 4 = {:.3})",
        generation_entropy(&peaked),
        generation_entropy(&flat),
        4f64.ln()
    );
    Ok(())
}
