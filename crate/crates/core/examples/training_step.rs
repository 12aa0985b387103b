//! A hand-written training loop around `train_step`, printing how the
//! dynamic scheduler ramps up replacements as accuracy grows.

use dysi::data::{gen_reverse_task, make_batches};
use dysi::imitation::{train_step, Objective, TrainSettings};
use dysi::model::{Model, ModelConfig, ModelMode};
use dysi::tensor::{lr_inverse_sqrt, Adam, AdamConfig};

fn main() -> dysi::Result<()> {
    let model = Model::new(ModelConfig {
        vocab_size: 14,
        d_model: 32,
        n_heads: 4,
        n_layers: 2,
        ffn_dim: 64,
        dropout: 0.1,
        max_positions: 16,
        mode: ModelMode::EncoderDecoder,
    })?;
    let mut params = model.init_params(0);
    let mut opt = Adam::new(&params, AdamConfig::default());
    let pairs = gen_reverse_task(1000, (2, 8), 14, 0)?;
    let batches = make_batches(&pairs, 200, 0, true)?;
    let settings = TrainSettings {
        objective: Objective::Dysi,
        ..TrainSettings::default()
    };

    println!("step   total     mle      il     acc   mean_N");
    for step in 1..=600u64 {
        let batch = &batches[(step as usize - 1) % batches.len()];
        let lr = lr_inverse_sqrt(step, 100, 2e-3)?;
        let r = train_step(&model, &mut params, &mut opt, batch, &settings, step, lr, 0)?;
        if step % 50 == 0 {
            println!(
                "{step:>4}  {:.4}  {:.4}  {:.4}  {:.3}  {:.2}",
                r.loss.total, r.loss.mle, r.loss.imitation, r.acc, r.mean_n
            );
        }
    }
    Ok(())
}
