//! Imitation loss, the combined objective and one full training step.

use crate::data::ParallelBatch;
use crate::error::{config_err, Error, Result};
use crate::model::{greedy_predictions, Model, StepDistributions};
use crate::rng::{stream, Purpose};
use crate::scheduling::{bernoulli_mix, dynamic_mix, step_decay_epsilon, training_accuracy, DecayParams, DecayScheme};
use crate::tensor::{kernels, Adam, Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Teacher forcing.
    Mle,
    /// Step-decay scheduled sampling.
    VanillaSs,
    /// Accuracy-driven scheduled sampling without the imitation term.
    DynamicSs,
    /// Dynamic scheduling plus the imitation term.
    Dysi,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(Self::Mle),
            "vanilla-ss" => Ok(Self::VanillaSs),
            "dynamic-ss" => Ok(Self::DynamicSs),
            "dysi" => Ok(Self::Dysi),
            other => Err(config_err!("unknown objective {other:?}")),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mle => "mle",
            Self::VanillaSs => "vanilla-ss",
            Self::DynamicSs => "dynamic-ss",
            Self::Dysi => "dysi",
        })
    }
}

/// Loss terms of one step. `total == mle + alpha * imitation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mle: f32,
    pub imitation: f32,
    pub total: f32,
    pub alpha: f32,
    pub token_count: usize,
}

pub fn total_loss(mle: f32, imitation: f32, alpha: f32, token_count: usize) -> Result<LossBreakdown> {
    if alpha < 0.0 {
        return Err(config_err!("alpha must be non-negative, got {alpha}"));
    }
    Ok(LossBreakdown {
        mle,
        imitation,
        total: mle + alpha * imitation,
        alpha,
        token_count,
    })
}

/// Mean over non-pad steps of `KL(expert_t || learner_t)`.
pub fn imitation_loss(expert: &StepDistributions, learner: &StepDistributions, mask: &[bool]) -> Result<f32> {
    if expert.log_probs.shape() != learner.log_probs.shape() || mask.len() != expert.rows() {
        return Err(Error::Shape(format!(
            "imitation over {:?} vs {:?} with {} mask entries",
            expert.log_probs.shape(),
            learner.log_probs.shape(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Degenerate("imitation loss over zero tokens".into()));
    }
    let mut total = 0.0f32;
    for (r, &m) in mask.iter().enumerate() {
        if m {
            total += kernels::kl_row_log(expert.log_row(r), learner.log_row(r));
        }
    }
    Ok(total / count as f32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub objective: Objective,
    pub alpha: f32,
    pub beta: f64,
    pub label_smoothing: f32,
    pub decay_scheme: DecayScheme,
    pub decay: DecayParams,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            objective: Objective::Dysi,
            alpha: 0.5,
            beta: 0.5,
            label_smoothing: 0.1,
            decay_scheme: DecayScheme::Exponential,
            decay: DecayParams::for_run(3000),
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(config_err!("beta must be in [0, 1], got {}", self.beta));
        }
        if self.alpha < 0.0 {
            return Err(config_err!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(config_err!(
                "label smoothing must be in [0, 1), got {}",
                self.label_smoothing
            ));
        }
        Ok(())
    }

    /// Weight of the imitation term actually applied.
    pub fn effective_alpha(&self) -> f32 {
        match self.objective {
            Objective::Dysi => self.alpha,
            _ => 0.0,
        }
    }
}

/// Loss nodes of the combined objective on one graph.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub log_probs: Var,
    pub mle: Var,
    pub imitation: Var,
    pub total: Var,
}

/// Records the combined objective: smoothed NLL of the ground-truth targets
/// under the pass over `decoder_input`, plus `alpha` times the divergence
/// from the expert, given as `[B·T × V]` log-probabilities the caller has
/// detached from the graph.
///
/// With `alpha == 0` the total is the NLL node itself, so the imitation
/// node is evaluated but never reached by backward.
#[allow(clippy::too_many_arguments)]
pub fn objective_graph<T: Scalar>(
    model: &Model,
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    batch: &ParallelBatch,
    decoder_input: &[u32],
    expert_log_probs: Var,
    alpha: T,
    label_smoothing: T,
    drop: crate::model::DropoutRng<'_>,
) -> Result<LossVars> {
    let log_probs = model.forward(g, params, batch, decoder_input, drop)?;
    let mle = g.smoothed_nll(log_probs, &batch.target_output, &batch.target_mask, label_smoothing)?;
    let imitation = g.kl_div(expert_log_probs, log_probs, &batch.target_mask)?;
    let total = if alpha == T::zero() {
        mle
    } else {
        let weighted = g.scale(imitation, alpha);
        g.add(mle, weighted)?
    };
    Ok(LossVars {
        log_probs,
        mle,
        imitation,
        total,
    })
}

/// What one optimizer step did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    /// Token-level teacher-forced accuracy over the batch.
    pub acc: f64,
    pub mean_n: f64,
    pub epsilon: Option<f64>,
    pub lr: f32,
}

/// Teacher-forced pass with dropout disabled: log-probabilities `[B·T × V]`.
pub fn expert_pass(model: &Model, params: &ParamStore, batch: &ParallelBatch) -> Result<Tensor> {
    let mut g = Graph::new();
    let lp = model.forward(&mut g, params, batch, &batch.target_input, None)?;
    Ok(g.value(lp).clone())
}

/// Label-smoothed NLL of the batch under teacher forcing, dropout off.
pub fn teacher_forced_loss(
    model: &Model,
    params: &ParamStore,
    batch: &ParallelBatch,
    label_smoothing: f32,
) -> Result<f32> {
    let mut g = Graph::new();
    let lp = model.forward(&mut g, params, batch, &batch.target_input, None)?;
    let nll = g.smoothed_nll(lp, &batch.target_output, &batch.target_mask, label_smoothing)?;
    Ok(g.value(nll).item())
}

/// One training update with the configured objective.
///
/// Steps: teacher-forced expert pass (dropout off, detached), greedy
/// predictions and accuracy, input mixing, operative pass with dropout,
/// combined loss, backward, Adam. Random draws come from streams keyed by
/// `(seed, step)`, so the outcome depends only on the inputs.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &Model,
    params: &mut ParamStore,
    optimizer: &mut Adam,
    batch: &ParallelBatch,
    settings: &TrainSettings,
    step: u64,
    lr: f32,
    seed: u64,
) -> Result<StepReport> {
    settings.validate()?;
    let expert_lp = expert_pass(model, params, batch)?;
    let vocab = model.config().vocab_size;
    let predictions = greedy_predictions(expert_lp.data(), vocab);
    let acc = training_accuracy(&batch.target_output, &predictions, &batch.target_mask)?;

    let mut sched_rng = stream(seed, step, Purpose::Scheduler);
    let (decoder_input, replaced, epsilon) = match settings.objective {
        Objective::Mle => (batch.target_input.clone(), 0, None),
        Objective::VanillaSs => {
            let eps = step_decay_epsilon(settings.decay_scheme, step, &settings.decay)?;
            let t = batch.tgt_len;
            let mut mixed = Vec::with_capacity(batch.target_input.len());
            let mut replaced = 0;
            for i in 0..batch.size {
                let rows = i * t..(i + 1) * t;
                let (row, r) = bernoulli_mix(
                    &batch.target_input[rows.clone()],
                    &predictions[rows.clone()],
                    &batch.target_mask[rows],
                    eps,
                    &mut sched_rng,
                );
                mixed.extend(row);
                replaced += r;
            }
            (mixed, replaced, Some(eps))
        }
        Objective::DynamicSs | Objective::Dysi => {
            let (mixed, decisions) = dynamic_mix(batch, &predictions, settings.beta, &mut sched_rng)?;
            (mixed, decisions.iter().map(|d| d.n).sum(), None)
        }
    };

    let alpha = settings.effective_alpha();
    let mut g = Graph::new();
    let expert = g.constant(expert_lp);
    let mut drop_rng = stream(seed, step, Purpose::Dropout);
    let vars = objective_graph(
        model,
        &mut g,
        params,
        batch,
        &decoder_input,
        expert,
        alpha,
        settings.label_smoothing,
        Some(&mut drop_rng),
    )?;
    let loss = total_loss(
        g.value(vars.mle).item(),
        g.value(vars.imitation).item(),
        alpha,
        batch.target_tokens(),
    )?;
    if !loss.total.is_finite() || !loss.imitation.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {step}: {loss:?}")));
    }
    let grads = g.backward(vars.total)?;
    optimizer.update(params, &grads, lr)?;
    Ok(StepReport {
        loss,
        acc,
        mean_n: replaced as f64 / batch.size as f64,
        epsilon,
        lr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_copy_task, make_batches};
    use crate::model::{ModelConfig, ModelMode};
    use crate::tensor::AdamConfig;

    fn dists(rows: &[&[f32]]) -> StepDistributions {
        let v = rows[0].len();
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect();
        StepDistributions::from_log_probs(Tensor::new(vec![rows.len(), v], data).unwrap(), vec![true; rows.len()])
    }

    #[test]
    fn imitation_examples() {
        let e = dists(&[&[1.0, 0.0, 0.0, 0.0]]);
        let l = dists(&[&[0.25; 4]]);
        assert!((imitation_loss(&e, &l, &[true]).unwrap() - 4f32.ln()).abs() < 1e-4);
        let e = dists(&[&[1.0, 0.0]]);
        let l = dists(&[&[0.5, 0.5]]);
        assert!((imitation_loss(&e, &l, &[true]).unwrap() - 2f32.ln()).abs() < 1e-4);
        let same = dists(&[&[0.2, 0.3, 0.5], &[0.6, 0.1, 0.3]]);
        assert!(imitation_loss(&same, &same, &[true, true]).unwrap().abs() < 1e-6);
        assert_eq!(imitation_loss(&same, &e, &[true]).unwrap_err().code(), "E_SHAPE");
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(2.0, 0.5, 1.0, 1).unwrap().total, 2.5);
        assert_eq!(total_loss(1.25, 7.0, 0.0, 1).unwrap().total, 1.25);
        assert!(total_loss(1.0, 1.0, -1.0, 1).is_err());
        assert_eq!(TrainSettings::default().alpha, 0.5);
    }

    fn setup(dropout: f32) -> (Model, ParamStore, Vec<ParallelBatch>) {
        let model = Model::new(ModelConfig {
            vocab_size: 12,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            ffn_dim: 32,
            dropout,
            max_positions: 12,
            mode: ModelMode::EncoderDecoder,
        })
        .unwrap();
        let params = model.init_params(7);
        let pairs = gen_copy_task(64, (2, 6), 12, 1).unwrap();
        let batches = make_batches(&pairs, 80, 1, true).unwrap();
        (model, params, batches)
    }

    #[test]
    fn zero_alpha_beta_reduces_to_teacher_forcing() {
        let (model, init, batches) = setup(0.1);
        let run = |objective| {
            let mut p = init.clone();
            let mut opt = Adam::new(&p, AdamConfig::default());
            let settings = TrainSettings {
                objective,
                alpha: 0.0,
                beta: 0.0,
                ..TrainSettings::default()
            };
            let mut reports = Vec::new();
            for (s, b) in batches.iter().cycle().take(12).enumerate() {
                reports.push(train_step(&model, &mut p, &mut opt, b, &settings, s as u64 + 1, 1e-3, 3).unwrap());
            }
            (p, reports)
        };
        assert_eq!(run(Objective::Mle), run(Objective::Dysi));
    }

    #[test]
    fn mle_targets_stay_ground_truth_under_mixing() {
        let (model, params, batches) = setup(0.0);
        let b = &batches[0];
        let mut mixed = b.target_input.clone();
        for v in mixed.iter_mut().skip(1).step_by(2) {
            if *v > 3 {
                *v = 4;
            }
        }
        let mut g = Graph::new();
        let expert = g.constant(Tensor::full(&[b.target_input.len(), 12], -(12f32.ln())));
        let vars = objective_graph(&model, &mut g, &params, b, &mixed, expert, 0.0, 0.0, None).unwrap();
        let lp = g.value(vars.log_probs).clone();
        let mut nll = 0.0;
        let mut count = 0;
        for (r, (&t, &m)) in b.target_output.iter().zip(&b.target_mask).enumerate() {
            if m {
                nll -= lp.data()[r * 12 + t as usize];
                count += 1;
            }
        }
        let expected = nll / count as f32;
        assert!((g.value(vars.mle).item() - expected).abs() < 1e-5);
    }

    #[test]
    fn imitation_is_zero_without_mixing_or_dropout() {
        let (model, mut params, batches) = setup(0.0);
        let mut opt = Adam::new(&params, AdamConfig::default());
        let settings = TrainSettings {
            beta: 0.0,
            ..TrainSettings::default()
        };
        let r = train_step(&model, &mut params, &mut opt, &batches[0], &settings, 1, 1e-3, 0).unwrap();
        assert_eq!(r.mean_n, 0.0);
        assert_eq!(r.loss.imitation, 0.0);
    }

    #[test]
    fn dysi_loss_decreases_on_copy() {
        for seed in 0..3 {
            let (model, mut params, batches) = setup(0.0);
            let mut opt = Adam::new(&params, AdamConfig::default());
            let settings = TrainSettings::default();
            let b = &batches[0];
            let mut last = teacher_forced_loss(&model, &params, b, 0.1).unwrap();
            for s in 1..=50 {
                train_step(&model, &mut params, &mut opt, b, &settings, s, 1e-3, seed).unwrap();
                let now = teacher_forced_loss(&model, &params, b, 0.1).unwrap();
                assert!(now < last, "seed {seed} step {s}: {now} !< {last}");
                last = now;
            }
        }
    }

    #[test]
    fn mle_loss_decreases_for_lr_range() {
        let (model, _, batches) = setup(0.0);
        let settings = TrainSettings {
            objective: Objective::Mle,
            ..TrainSettings::default()
        };
        let b = &batches[0];
        for lr in [1e-4f32, 1e-3] {
            for seed in 0..3 {
                let mut params = model.init_params(seed);
                let mut opt = Adam::new(&params, AdamConfig::default());
                let mut last = teacher_forced_loss(&model, &params, b, 0.1).unwrap();
                for s in 1..=100 {
                    train_step(&model, &mut params, &mut opt, b, &settings, s, lr, seed).unwrap();
                    let now = teacher_forced_loss(&model, &params, b, 0.1).unwrap();
                    assert!(now < last, "lr {lr} seed {seed} step {s}: {now} !< {last}");
                    last = now;
                }
            }
        }
    }
}
