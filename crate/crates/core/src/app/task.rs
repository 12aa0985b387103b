//! Turns the task block of a run configuration into data.

use crate::data::{encode_pairs, gen_task, load_parallel_tsv, read_text, LmCorpus, Pair, Vocabulary, BUILTIN_CORPUS};
use crate::error::{config_err, Error, Result};
use crate::model::ModelConfig;

use super::config::{RunConfig, TaskSource};

/// Vocabulary plus train and validation examples.
#[derive(Clone, Debug)]
pub struct PreparedTask {
    pub vocab: Vocabulary,
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    /// False for language modelling, where targets carry no EOS.
    pub append_eos: bool,
}

impl PreparedTask {
    pub fn load(config: &RunConfig) -> Result<Self> {
        let t = &config.task;
        match &t.source {
            TaskSource::Synthetic(kind) => {
                let pairs = gen_task(*kind, t.num_pairs, t.len_range, t.vocab_size, t.data_seed)?;
                let (train, valid) = split(pairs, t.valid_fraction, t.max_valid);
                Ok(Self {
                    vocab: Vocabulary::synthetic(t.vocab_size)?,
                    train,
                    valid,
                    append_eos: true,
                })
            }
            TaskSource::Parallel => {
                let path = t
                    .train_path
                    .as_ref()
                    .ok_or_else(|| config_err!("task.train_path is required"))?;
                let lines = load_parallel_tsv(path)?;
                let text: Vec<&str> = lines.iter().flat_map(|(s, t)| [s.as_str(), t.as_str()]).collect();
                let vocab = Vocabulary::build(&text, t.tokenization, t.min_count)?;
                let pairs = encode_pairs(&lines, &vocab);
                let (train, valid) = match &t.valid_path {
                    Some(vp) => {
                        let mut valid = encode_pairs(&load_parallel_tsv(vp)?, &vocab);
                        valid.truncate(t.max_valid);
                        (pairs, valid)
                    }
                    None => split(pairs, t.valid_fraction, t.max_valid),
                };
                Ok(Self {
                    vocab,
                    train,
                    valid,
                    append_eos: true,
                })
            }
            TaskSource::Lm => {
                let text = match &t.train_path {
                    Some(p) => read_text(p)?,
                    None => BUILTIN_CORPUS.to_string(),
                };
                let lines: Vec<&str> = text.lines().collect();
                let vocab = Vocabulary::build(&lines, t.tokenization, t.min_count)?;
                // Windows never straddle the split point.
                let joined = lines.join(" ");
                let (train_text, valid_text) = match &t.valid_path {
                    Some(vp) => (joined, read_text(vp)?.lines().collect::<Vec<_>>().join(" ")),
                    None => {
                        let cut = char_cut(&joined, 1.0 - t.valid_fraction);
                        (joined[..cut].to_string(), joined[cut..].to_string())
                    }
                };
                let train_corpus = LmCorpus::new(&train_text, &vocab, t.context)?;
                let valid_corpus = LmCorpus::new(&valid_text, &vocab, t.context)?;
                if train_corpus.is_empty() {
                    return Err(Error::Input(format!(
                        "language-model text is shorter than the context of {}",
                        t.context
                    )));
                }
                let train = (0..train_corpus.len()).map(|i| train_corpus.pair(i)).collect();
                // Non-overlapping validation windows.
                let valid = (0..valid_corpus.len())
                    .step_by(t.context)
                    .take(t.max_valid)
                    .map(|i| valid_corpus.pair(i))
                    .collect();
                Ok(Self {
                    vocab,
                    train,
                    valid,
                    append_eos: false,
                })
            }
        }
    }

    /// Held-out test pairs for a synthetic task: the generator is extended
    /// past the training draw, so the cipher table is shared and the
    /// sentences are fresh draws. `n` defaults to the validation size.
    pub fn synthetic_test(config: &RunConfig, n: usize) -> Result<Vec<Pair>> {
        let t = &config.task;
        let TaskSource::Synthetic(kind) = t.source else {
            return Err(config_err!(
                "a test set file is required for task.kind other than copy, reverse or cipher"
            ));
        };
        let mut all = gen_task(kind, t.num_pairs + n, t.len_range, t.vocab_size, t.data_seed)?;
        Ok(all.split_off(t.num_pairs))
    }

    /// The configured model shape with this task's vocabulary size.
    pub fn model_config(&self, config: &RunConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            ..config.model.clone()
        }
    }
}

fn split(mut pairs: Vec<Pair>, fraction: f64, max_valid: usize) -> (Vec<Pair>, Vec<Pair>) {
    let n_valid = ((pairs.len() as f64 * fraction).round() as usize).min(max_valid);
    let valid = pairs.split_off(pairs.len() - n_valid);
    (pairs, valid)
}

/// Byte offset of the char boundary nearest `fraction` of the text.
fn char_cut(text: &str, fraction: f64) -> usize {
    let target = (text.len() as f64 * fraction) as usize;
    (target..=text.len())
        .find(|&i| text.is_char_boundary(i))
        .unwrap_or(text.len())
}
