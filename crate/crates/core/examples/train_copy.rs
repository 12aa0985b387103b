//! Train a small encoder-decoder on the copy task, then decode held-out
//! pairs with beam search.
//!
//!     cargo run --release --example train_copy -- [objective]

use std::path::Path;

use dysi::app::commands::evaluate;
use dysi::app::{train, RunConfig};

fn main() -> dysi::Result<()> {
    let objective = std::env::args().nth(1).unwrap_or_else(|| "dysi".into());
    let out = std::env::temp_dir().join(format!("dysi-copy-{objective}"));
    let _ = std::fs::remove_dir_all(&out);
    let text = format!(
        "task.kind=copy\ntask.vocab_size=16\ntask.num_pairs=2000\ntask.max_len=8\n\
         training.objective={objective}\ntraining.max_steps=1500\ntraining.max_tokens=300\n\
         training.lr=0.002\ntraining.warmup=200\ntraining.target_accuracy=0.99\n\
         decoding.strategy=beam\ndecoding.beam=5\ndecoding.max_len=12\noutput.dir={}\n",
        out.display()
    );
    let config = RunConfig::parse(&text, Path::new("train_copy"))?;
    let outcome = train(&config)?;
    println!(
        "stopped at step {} (target reached at {:?})",
        outcome.step, outcome.reached_target_at
    );
    if let Some(v) = &outcome.last_validation {
        println!("validation loss {:.4} acc {:.4}", v.loss, v.acc);
    }
    let eval = evaluate(&config, &outcome.final_checkpoint, None, &[])?;
    let r = &eval.report;
    println!(
        "BLEU {:.2}  seq acc {:.3}  token acc {:.3}  entropy {:.3}",
        r.bleu.bleu, r.sequence_accuracy, r.token_accuracy, r.entropy
    );
    for h in eval.hypotheses.iter().take(5) {
        println!("  {h}");
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
