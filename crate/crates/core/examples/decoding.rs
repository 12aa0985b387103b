//! Greedy, beam and exhaustive search over a small next-token table where
//! the greedy choice is a trap.

use dysi::data::{BOS, EOS};
use dysi::decoding::{beam_decode, exhaustive_decode, greedy_decode, nucleus_filter, ToyTable};

fn main() -> dysi::Result<()> {
    // Vocabulary of 6: ids 0..=3 are reserved, 4 and 5 are words.
    let mut table = ToyTable::new(6);
    let eos = EOS as usize;
    let row = |probs: [(usize, f64); 3]| {
        let mut r = vec![0.0; 6];
        for (i, p) in probs {
            r[i] = p;
        }
        r
    };
    table.set(&[BOS], &row([(4, 0.55), (5, 0.45), (eos, 0.0)]))?;
    // After 4 the model is unsure; after 5 it is confident.
    table.set(&[BOS, 4], &row([(4, 0.3), (5, 0.3), (eos, 0.4)]))?;
    table.set(&[BOS, 5], &row([(eos, 0.95), (4, 0.05), (5, 0.0)]))?;

    let greedy = greedy_decode(&table, &[BOS], 3)?;
    println!("greedy     {greedy:?}");
    for beam in [1, 2, 4] {
        let h = beam_decode(&table, &[BOS], beam, 0.0, 3)?;
        println!("beam {beam}     {:?}  log p {:.4}", h.tokens, h.log_prob);
    }
    let best = exhaustive_decode(&table, &[BOS], 0.0, 3)?;
    println!("exhaustive {:?}  log p {:.4}", best.tokens, best.log_prob);

    // Length normalization favours longer hypotheses as gamma grows.
    let random = ToyTable::random(5, 4, 7);
    for gamma in [0.0, 0.5, 1.0] {
        let h = beam_decode(&random, &[BOS], 5, gamma, 4)?;
        println!("gamma {gamma:.1}  {:?}  score {:.4}", h.tokens, h.score);
    }

    let probs = [0.5, 0.2, 0.15, 0.1, 0.05];
    for p in [0.5, 0.8, 0.95] {
        let kept = nucleus_filter(&probs, p)?;
        let shown: Vec<String> = kept.iter().map(|x| format!("{x:.3}")).collect();
        println!("nucleus p={p}: [{}]", shown.join(", "));
    }
    Ok(())
}
