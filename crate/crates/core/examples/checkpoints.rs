//! Save, reload, verify and average checkpoints.

use dysi::app::{run_digest, Checkpoint};
use dysi::data::Vocabulary;
use dysi::model::{Model, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = ModelConfig {
        vocab_size: 12,
        d_model: 16,
        ffn_dim: 32,
        n_heads: 2,
        ..ModelConfig::default()
    };
    let model = Model::new(config.clone())?;
    let digest = run_digest(&config, &Vocabulary::synthetic(12)?);
    let dir = std::env::temp_dir().join("dysi-checkpoints");
    std::fs::create_dir_all(&dir)?;

    let mut saved = Vec::new();
    for seed in 0..3 {
        let ckpt = Checkpoint {
            params: model.init_params(seed),
            optimizer: None,
            step: seed * 100,
            digest,
        };
        let path = dir.join(format!("seed{seed}.ckpt"));
        ckpt.save(&path)?;
        let back = Checkpoint::load(&path)?;
        back.verify(&digest)?;
        println!(
            "{} bytes, round trip exact: {}",
            std::fs::metadata(&path)?.len(),
            back == ckpt
        );
        saved.push(back);
    }

    let avg = Checkpoint::average(&saved)?;
    let first = avg.params.ids().next().expect("parameter");
    let mean: f32 = saved.iter().map(|c| c.params.get(first).data()[0]).sum::<f32>() / 3.0;
    println!(
        "averaged {}[0] = {:.6} (mean of inputs {:.6})",
        avg.params.name(first),
        avg.params.get(first).data()[0],
        mean
    );

    let other = run_digest(&ModelConfig { d_model: 32, ..config }, &Vocabulary::synthetic(12)?);
    match saved[0].verify(&other) {
        Err(e) => println!("mismatched run rejected: {} ({e})", e.code()),
        Ok(()) => println!("mismatched run unexpectedly accepted"),
    }
    Ok(())
}
