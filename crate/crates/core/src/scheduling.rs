//! Decoder-input mixing schedules: the accuracy-driven dynamic scheduler
//! and the step-decay baselines.

use rand::seq::index::sample;
use rand::Rng;

use crate::data::ParallelBatch;
use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayScheme {
    Exponential,
    Linear,
}

impl std::str::FromStr for DecayScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" => Ok(Self::Exponential),
            "linear" => Ok(Self::Linear),
            other => Err(config_err!("unknown decay scheme {other:?}")),
        }
    }
}

/// Parameters of the step-decay schedules.
///
/// Exponential: `k^(step / unit)`. Linear: `max(eps_min, 1 - c * step)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayParams {
    pub k: f64,
    pub unit: f64,
    pub c: f64,
    pub eps_min: f64,
}

impl DecayParams {
    /// Defaults for a run of `max_steps` updates.
    pub fn for_run(max_steps: u64) -> Self {
        Self {
            k: 0.985,
            unit: 100.0,
            c: 1.0 / max_steps.max(1) as f64,
            eps_min: 0.3,
        }
    }
}

/// Probability of feeding the ground-truth token at `step`.
pub fn step_decay_epsilon(scheme: DecayScheme, step: u64, p: &DecayParams) -> Result<f64> {
    match scheme {
        DecayScheme::Exponential => {
            if !(p.k > 0.0 && p.k < 1.0) || p.unit <= 0.0 {
                return Err(config_err!(
                    "exponential decay needs k in (0,1) and unit > 0, got k={} unit={}",
                    p.k,
                    p.unit
                ));
            }
            Ok(p.k.powf(step as f64 / p.unit))
        }
        DecayScheme::Linear => {
            if !(0.0..=1.0).contains(&p.eps_min) || p.c < 0.0 {
                return Err(config_err!(
                    "linear decay needs eps_min in [0,1] and c >= 0, got eps_min={} c={}",
                    p.eps_min,
                    p.c
                ));
            }
            Ok((1.0 - p.c * step as f64).max(p.eps_min))
        }
    }
}

/// Fraction of non-pad positions where `predicted` equals `reference`.
pub fn training_accuracy(reference: &[u32], predicted: &[u32], mask: &[bool]) -> Result<f64> {
    if reference.len() != predicted.len() || reference.len() != mask.len() {
        return Err(Error::Shape(format!(
            "accuracy over {} references, {} predictions, {} mask entries",
            reference.len(),
            predicted.len(),
            mask.len()
        )));
    }
    let mut total = 0usize;
    let mut hits = 0usize;
    for ((&r, &p), &m) in reference.iter().zip(predicted).zip(mask) {
        if m {
            total += 1;
            hits += usize::from(r == p);
        }
    }
    if total == 0 {
        return Err(Error::Degenerate("accuracy over zero tokens".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Replacement count `round(beta * u)` with `u ~ U(0, acc * t_eff)`, capped
/// at `eligible`.
pub fn dynamic_sample_count<R: Rng + ?Sized>(
    acc: f64,
    t_eff: usize,
    beta: f64,
    eligible: usize,
    rng: &mut R,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(config_err!("beta must be in [0, 1], got {beta}"));
    }
    if !(0.0..=1.0).contains(&acc) {
        return Err(Error::Contract(format!("accuracy {acc} outside [0, 1]")));
    }
    let u = rng.gen::<f64>() * acc * t_eff as f64;
    Ok(((beta * u).round() as usize).min(eligible))
}

/// Uniform `n`-subset of `eligible`, returned sorted.
pub fn select_positions<R: Rng + ?Sized>(eligible: &[usize], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n > eligible.len() {
        return Err(Error::Contract(format!(
            "cannot choose {n} of {} eligible positions",
            eligible.len()
        )));
    }
    let mut picked: Vec<usize> = sample(rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Decoder-input slots that may be replaced: every non-pad slot except BOS.
pub fn eligible_positions(mask_row: &[bool]) -> Vec<usize> {
    (1..mask_row.len()).filter(|&j| mask_row[j]).collect()
}

/// Replaces decoder-input slot `j` with the prediction made for it, i.e. the
/// argmax of step `j - 1`, at each of `positions`.
pub fn mix_sequence(target_input: &[u32], predictions: &[u32], positions: &[usize]) -> Result<Vec<u32>> {
    let mut out = target_input.to_vec();
    for &j in positions {
        if j == 0 || j >= target_input.len() || j > predictions.len() {
            return Err(Error::Contract(format!(
                "position {j} outside the replaceable range of a length-{} input",
                target_input.len()
            )));
        }
        out[j] = predictions[j - 1];
    }
    Ok(out)
}

/// Keeps each eligible ground-truth slot with probability `epsilon`,
/// otherwise substitutes the prediction. Returns the mixed row and how many
/// slots were replaced.
pub fn bernoulli_mix<R: Rng + ?Sized>(
    target_input: &[u32],
    predictions: &[u32],
    mask_row: &[bool],
    epsilon: f64,
    rng: &mut R,
) -> (Vec<u32>, usize) {
    let mut out = target_input.to_vec();
    let mut replaced = 0;
    for j in eligible_positions(mask_row) {
        if rng.gen::<f64>() >= epsilon {
            out[j] = predictions[j - 1];
            replaced += 1;
        }
    }
    (out, replaced)
}

/// Outcome of the dynamic scheduler for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerDecision {
    pub n: usize,
    pub positions: Vec<usize>,
    pub acc: f64,
}

/// Runs the dynamic scheduler independently on every sequence of a batch.
///
/// `predictions` are the teacher-forced argmax ids in `[B·T]` order; the
/// returned input is the batch's target input with the chosen slots
/// replaced.
pub fn dynamic_mix<R: Rng + ?Sized>(
    batch: &ParallelBatch,
    predictions: &[u32],
    beta: f64,
    rng: &mut R,
) -> Result<(Vec<u32>, Vec<SchedulerDecision>)> {
    let t = batch.tgt_len;
    let mut mixed = Vec::with_capacity(batch.target_input.len());
    let mut decisions = Vec::with_capacity(batch.size);
    for i in 0..batch.size {
        let rows = i * t..(i + 1) * t;
        let mask = &batch.target_mask[rows.clone()];
        let acc = training_accuracy(&batch.target_output[rows.clone()], &predictions[rows.clone()], mask)?;
        let t_eff = mask.iter().filter(|&&m| m).count();
        let eligible = eligible_positions(mask);
        let n = dynamic_sample_count(acc, t_eff, beta, eligible.len(), rng)?;
        let positions = select_positions(&eligible, n, rng)?;
        mixed.extend(mix_sequence(
            &batch.target_input[rows.clone()],
            &predictions[rows],
            &positions,
        )?);
        decisions.push(SchedulerDecision { n, positions, acc });
    }
    Ok((mixed, decisions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_examples() {
        let m = [true; 3];
        assert_eq!(training_accuracy(&[4, 5, 6], &[4, 5, 6], &m).unwrap(), 1.0);
        assert_eq!(training_accuracy(&[4, 5, 6], &[7, 8, 9], &m).unwrap(), 0.0);
        let acc = training_accuracy(&[5, 6, 7, 0], &[5, 9, 7, 4], &[true, true, true, false]).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            training_accuracy(&[1], &[1], &[false]).unwrap_err().code(),
            "E_DEGENERATE"
        );
    }

    #[test]
    fn sample_count_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_eq!(dynamic_sample_count(0.0, 10, 0.5, 9, &mut rng).unwrap(), 0);
            assert_eq!(dynamic_sample_count(1.0, 10, 0.0, 9, &mut rng).unwrap(), 0);
        }
        assert!(dynamic_sample_count(1.0, 10, 1.5, 9, &mut rng).is_err());
        for _ in 0..1000 {
            assert!(dynamic_sample_count(1.0, 10, 1.0, 3, &mut rng).unwrap() <= 3);
        }
    }

    #[test]
    fn sample_count_distribution_is_step_agnostic() {
        // two independently seeded draws standing in for two training steps
        let hist = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut h = [0usize; 6];
            for _ in 0..20_000 {
                h[dynamic_sample_count(1.0, 10, 0.5, 9, &mut rng).unwrap()] += 1;
            }
            h
        };
        let (a, b) = (hist(10), hist(20_000));
        for k in 0..6 {
            let diff = (a[k] as f64 - b[k] as f64).abs() / 20_000.0;
            assert!(diff < 0.015, "bucket {k}: {a:?} vs {b:?}");
        }
    }

    #[test]
    fn positions_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = [1, 2, 3, 4];
        assert!(select_positions(&e, 0, &mut rng).unwrap().is_empty());
        assert_eq!(select_positions(&e, 4, &mut rng).unwrap(), e.to_vec());
        assert_eq!(select_positions(&e, 5, &mut rng).unwrap_err().code(), "E_CONTRACT");
        let mut counts = [0usize; 5];
        for _ in 0..100_000 {
            counts[select_positions(&e, 1, &mut rng).unwrap()[0]] += 1;
        }
        for &c in &counts[1..] {
            assert!((c as f64 / 100_000.0 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn mix_examples() {
        let input = [1, 11, 12, 13];
        assert_eq!(mix_sequence(&input, &[21, 22, 23], &[]).unwrap(), input.to_vec());
        assert_eq!(mix_sequence(&input, &[21, 22, 23], &[2]).unwrap(), vec![1, 11, 22, 13]);
        assert_eq!(mix_sequence(&input, &[11, 12, 13], &[1, 2, 3]).unwrap(), input.to_vec());
        assert!(mix_sequence(&input, &[21, 22, 23], &[0]).is_err());
        let once = mix_sequence(&input, &[21, 22, 23], &[1, 3]).unwrap();
        assert_eq!(mix_sequence(&once, &[21, 22, 23], &[1, 3]).unwrap(), once);
    }

    #[test]
    fn decay_examples() {
        let p = DecayParams {
            k: 0.5,
            unit: 1000.0,
            c: 1e-3,
            eps_min: 0.3,
        };
        assert_eq!(step_decay_epsilon(DecayScheme::Exponential, 0, &p).unwrap(), 1.0);
        assert_eq!(step_decay_epsilon(DecayScheme::Linear, 0, &p).unwrap(), 1.0);
        assert_eq!(step_decay_epsilon(DecayScheme::Exponential, 2000, &p).unwrap(), 0.25);
        assert_eq!(step_decay_epsilon(DecayScheme::Linear, 100_000, &p).unwrap(), 0.3);
        let bad = DecayParams { k: 1.5, ..p };
        assert!(step_decay_epsilon(DecayScheme::Exponential, 1, &bad).is_err());
        let mut last = 1.0;
        for s in (0..5000).step_by(50) {
            let e = step_decay_epsilon(DecayScheme::Exponential, s, &DecayParams::for_run(5000)).unwrap();
            assert!(e <= last);
            last = e;
        }
    }

    #[test]
    fn bernoulli_mix_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = [1, 11, 12, 13];
        let preds = [21, 22, 23, 24];
        let mask = [true; 4];
        assert_eq!(bernoulli_mix(&input, &preds, &mask, 1.0, &mut rng).0, input.to_vec());
        assert_eq!(
            bernoulli_mix(&input, &preds, &mask, 0.0, &mut rng).0,
            vec![1, 21, 22, 23]
        );
        let long_in = vec![5u32; 100_001];
        let long_pred = vec![6u32; 100_001];
        let (_, replaced) = bernoulli_mix(&long_in, &long_pred, &vec![true; 100_001], 0.5, &mut rng);
        assert!((replaced as f64 / 100_000.0 - 0.5).abs() < 0.01);
    }

    #[test]
    fn zero_beta_keeps_ground_truth() {
        let pairs = crate::data::gen_copy_task(8, (2, 7), 20, 3).unwrap();
        let batch = crate::data::make_batches(&pairs, 1000, 0, true).unwrap().remove(0);
        let preds = batch.target_output.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mixed, d) = dynamic_mix(&batch, &preds, 0.0, &mut rng).unwrap();
        assert_eq!(mixed, batch.target_input);
        assert!(d.iter().all(|d| d.n == 0 && d.acc == 1.0));
    }

    proptest::proptest! {
        #[test]
        fn decisions_respect_bounds(seed in 0u64..500, beta in 0.0f64..=1.0) {
            let pairs = crate::data::gen_copy_task(6, (1, 9), 20, seed).unwrap();
            let batch = crate::data::make_batches(&pairs, 1000, seed, true).unwrap().remove(0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds: Vec<u32> = batch.target_output.iter().map(|&t| if rng.gen_bool(0.5) { t } else { 7 }).collect();
            let (mixed, decisions) = dynamic_mix(&batch, &preds, beta, &mut rng).unwrap();
            for (i, d) in decisions.iter().enumerate() {
                let mask = &batch.target_mask[i * batch.tgt_len..(i + 1) * batch.tgt_len];
                let t_eff = mask.iter().filter(|&&m| m).count();
                proptest::prop_assert!(d.n as f64 <= (beta * d.acc * t_eff as f64).round());
                proptest::prop_assert_eq!(d.positions.len(), d.n);
                let eligible = eligible_positions(mask);
                proptest::prop_assert!(d.positions.iter().all(|p| eligible.contains(p)));
                proptest::prop_assert_eq!(mixed[i * batch.tgt_len], crate::data::BOS);
            }
        }
    }
}
