//! The dynamic scheduler: how many decoder inputs get replaced for a
//! sequence, as a function of its training accuracy.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dysi::scheduling::{dynamic_sample_count, step_decay_epsilon, DecayParams, DecayScheme};

fn main() -> dysi::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = 10;
    for beta in [0.25, 0.5, 1.0] {
        for acc in [0.0, 0.5, 1.0] {
            let mut hist = BTreeMap::new();
            let draws = 20_000;
            let mut sum = 0;
            for _ in 0..draws {
                let n = dynamic_sample_count(acc, t, beta, t, &mut rng)?;
                *hist.entry(n).or_insert(0usize) += 1;
                sum += n;
            }
            let shares: Vec<String> = hist
                .iter()
                .map(|(n, c)| format!("{n}:{:.2}", *c as f64 / draws as f64))
                .collect();
            println!(
                "beta {beta:<4} acc {acc:<3}  mean N {:.3}  [{}]",
                sum as f64 / draws as f64,
                shares.join(" ")
            );
        }
    }

    // Step-based schedules used by vanilla scheduled sampling, for contrast.
    let p = DecayParams::for_run(3000);
    for scheme in [DecayScheme::Linear, DecayScheme::Exponential] {
        let eps: Vec<String> = [0u64, 500, 1000, 2000, 3000]
            .iter()
            .map(|&s| step_decay_epsilon(scheme, s, &p).map(|e| format!("{e:.3}")))
            .collect::<dysi::Result<_>>()?;
        println!("{scheme:?}: {}", eps.join(" "));
    }
    Ok(())
}
