//! The imitation term: KL from the teacher-forced expert to the learner
//! that saw partly model-generated inputs, on a real batch.

use dysi::data::{gen_cipher_task, ParallelBatch};
use dysi::imitation::{expert_pass, imitation_loss};
use dysi::model::{greedy_predictions, Model, ModelConfig, StepDistributions};
use dysi::scheduling::{eligible_positions, mix_sequence};
use dysi::tensor::Graph;

fn main() -> dysi::Result<()> {
    let model = Model::new(ModelConfig {
        vocab_size: 20,
        d_model: 32,
        ffn_dim: 64,
        dropout: 0.0,
        ..ModelConfig::default()
    })?;
    let params = model.init_params(1);
    let pairs = gen_cipher_task(8, (4, 10), 20, 3)?;
    let refs: Vec<_> = pairs.iter().collect();
    let batch = ParallelBatch::from_pairs(&refs, true)?;

    let expert_lp = expert_pass(&model, &params, &batch)?;
    let preds = greedy_predictions(expert_lp.data(), 20);
    let expert = StepDistributions::from_log_probs(expert_lp, batch.target_mask.clone());

    let t = batch.tgt_len;
    for stride in [0usize, 4, 2, 1] {
        let mut input = Vec::with_capacity(batch.target_input.len());
        for i in 0..batch.size {
            let rows = i * t..(i + 1) * t;
            let slots: Vec<usize> = if stride == 0 {
                Vec::new()
            } else {
                eligible_positions(&batch.target_mask[rows.clone()])
                    .into_iter()
                    .step_by(stride)
                    .collect()
            };
            input.extend(mix_sequence(&batch.target_input[rows.clone()], &preds[rows], &slots)?);
        }
        let mut g = Graph::new();
        let lp = model.forward(&mut g, &params, &batch, &input, None)?;
        let learner = StepDistributions::from_log_probs(g.value(lp).clone(), batch.target_mask.clone());
        let kl = imitation_loss(&expert, &learner, &batch.target_mask)?;
        let label = if stride == 0 {
            "none".to_string()
        } else {
            format!("1 in {stride}")
        };
        println!("replaced {label:<7} KL(expert || learner) = {kl:.5}");
    }
    Ok(())
}
