//! A character-level language model on the bundled sonnets, then sampled
//! continuations and the last-word perturbation suite over the checkpoint.
//!
//!     cargo run --release --example char_lm -- [steps]

use std::path::Path;

use dysi::app::commands::{generate, perturb};
use dysi::app::{train, RunConfig};
use dysi::data::BUILTIN_CORPUS;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let out = std::env::temp_dir().join("dysi-char-lm");
    let _ = std::fs::remove_dir_all(&out);
    let text = format!(
        "task.kind=lm\ntask.tokenization=char\ntask.context=64\nmodel.d_model=32\nmodel.ffn_dim=64\n\
         training.objective=dysi\ntraining.max_steps={steps}\ntraining.max_tokens=512\ntraining.lr=0.002\n\
         training.warmup=100\ntraining.checkpoint_every={steps}\ndecoding.strategy=nucleus\ndecoding.p=0.8\n\
         decoding.max_len=120\nrobustness.perturbations=last-word:3,last-word:10\nrobustness.budget=120\n\
         robustness.max_prompts=4\noutput.dir={}\n",
        out.display()
    );
    let config = RunConfig::parse(&text, Path::new("char_lm"))?;
    let outcome = train(&config)?;

    let prompts = out.join("prompts.txt");
    let lines: Vec<&str> = BUILTIN_CORPUS.lines().rev().take(4).collect();
    std::fs::write(&prompts, lines.join("\n"))?;
    for (prompt, cont) in lines.iter().zip(generate(
        &config,
        &outcome.final_checkpoint,
        &prompts,
        &out.join("gen.txt"),
    )?) {
        let head: String = prompt.chars().take(60).collect();
        println!("{head} ... | {cont}");
    }
    let report = perturb(&config, &[outcome.final_checkpoint], &prompts)?;
    print!("{}", report.summary_csv());
    Ok(())
}
