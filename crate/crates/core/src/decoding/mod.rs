//! Free-running decoders and evaluation metrics.

mod metrics;
mod search;

pub use metrics::{
    corpus_bleu, generation_entropy, ngram_repetition_ratio, oracle_sentence_bleu, repetition_ratio_difference,
    sentence_bleu, BleuScore, MetricReport,
};
pub use search::{
    ancestral_sample, beam_decode, exhaustive_decode, greedy_decode, nucleus_filter, nucleus_sample, sample_index,
    BeamHypothesis, ModelScorer, NextToken, ToyTable,
};

use crate::error::{config_err, Error, Result};

/// Decoding strategy with its knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Greedy,
    Beam { size: usize, gamma: f64 },
    Nucleus { p: f64 },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Greedy => "greedy",
            Self::Beam { .. } => "beam",
            Self::Nucleus { .. } => "nucleus",
        }
    }

    /// Builds a strategy from its name and the decoding block's values.
    pub fn from_parts(name: &str, beam: usize, gamma: f64, p: f64) -> Result<Self> {
        let s = match name {
            "greedy" => Self::Greedy,
            "beam" => Self::Beam { size: beam, gamma },
            "nucleus" => Self::Nucleus { p },
            other => return Err(config_err!("unknown decoding strategy {other:?}")),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Beam { size, gamma } if size == 0 || !gamma.is_finite() => Err(config_err!(
                "beam size must be >= 1 and gamma finite, got {size} / {gamma}"
            )),
            Self::Nucleus { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::Config(format!("nucleus p must be in (0, 1], got {p}")))
            }
            _ => Ok(()),
        }
    }
}
