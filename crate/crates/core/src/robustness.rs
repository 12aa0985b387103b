//! Prompt perturbations and the auto-completion comparison suite.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::data::{Vocabulary, BOS};
use crate::decoding::{nucleus_sample, repetition_ratio_difference, ModelScorer};
use crate::error::{config_err, Error, Result};
use crate::model::Model;
use crate::rng::{stream, Purpose};
use crate::tensor::ParamStore;

/// Words never chosen for replacement while enough other words exist.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "all", "am", "an", "and", "are", "as", "at", "be", "been", "but", "by", "can", "do", "did", "for",
    "from", "had", "has", "have", "he", "her", "him", "his", "how", "i", "if", "in", "into", "is", "it", "its", "me",
    "my", "no", "nor", "not", "o", "of", "on", "or", "our", "shall", "she", "so", "than", "that", "the", "thee",
    "their", "them", "then", "there", "these", "they", "thine", "this", "those", "thou", "thy", "to", "too", "up",
    "us", "was", "we", "were", "what", "when", "where", "which", "who", "whom", "why", "will", "with", "would", "ye",
    "yet", "you", "your",
];

/// True for punctuation-only words and the built-in function words.
pub fn is_stopword(word: &str) -> bool {
    let bare: String = word
        .chars()
        .filter(|c| c.is_alphanumeric() || *c == '\'')
        .flat_map(char::to_lowercase)
        .collect();
    bare.is_empty() || STOPWORDS.contains(&bare.as_str())
}

/// First `words_per_prompt` words of every paragraph that has at least
/// that many.
pub fn extract_prompts<S: AsRef<str>>(paragraphs: &[S], words_per_prompt: usize) -> Result<Vec<String>> {
    if words_per_prompt == 0 {
        return Err(config_err!("words_per_prompt must be positive"));
    }
    let prompts: Vec<String> = paragraphs
        .iter()
        .filter_map(|p| {
            let words: Vec<&str> = p.as_ref().split_whitespace().collect();
            (words.len() >= words_per_prompt).then(|| words[..words_per_prompt].join(" "))
        })
        .collect();
    if prompts.is_empty() {
        return Err(Error::Input(format!(
            "no paragraph has {words_per_prompt} words; zero prompts extracted"
        )));
    }
    Ok(prompts)
}

/// Appends the last word `m` more times.
pub fn perturb_last_word(prompt: &str, m: usize) -> String {
    let mut out = prompt.to_string();
    if let Some(last) = prompt.split_whitespace().last() {
        for _ in 0..m {
            out.push(' ');
            out.push_str(last);
        }
    }
    out
}

/// Appends a copy of the final `n` words (the whole prompt when shorter).
pub fn perturb_ngram(prompt: &str, n: usize) -> String {
    let words: Vec<&str> = prompt.split_whitespace().collect();
    let tail = &words[words.len().saturating_sub(n)..];
    if tail.is_empty() {
        return prompt.to_string();
    }
    format!("{prompt} {}", tail.join(" "))
}

/// Replaces `k` distinct words, preferring non-stopwords, with words drawn
/// uniformly from `pool` that differ from the original. `k` above the word
/// count is clamped.
pub fn perturb_replace_words<R: Rng + ?Sized>(prompt: &str, k: usize, pool: &[String], rng: &mut R) -> Result<String> {
    let mut words: Vec<String> = prompt.split_whitespace().map(str::to_string).collect();
    let k = if k > words.len() {
        log::warn!("replacement count {k} exceeds {} prompt words; clamping", words.len());
        words.len()
    } else {
        k
    };
    if k == 0 {
        return Ok(prompt.to_string());
    }
    let content: Vec<usize> = (0..words.len()).filter(|&i| !is_stopword(&words[i])).collect();
    let candidates: Vec<usize> = if content.len() >= k {
        content
    } else {
        (0..words.len()).collect()
    };
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    chosen.sort_unstable();
    for i in chosen {
        let others: Vec<&String> = pool.iter().filter(|w| **w != words[i]).collect();
        if others.is_empty() {
            return Err(Error::Degenerate(format!(
                "replacement pool has no word other than {:?}",
                words[i]
            )));
        }
        words[i] = others[rng.gen_range(0..others.len())].clone();
    }
    Ok(words.join(" "))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    Identity,
    LastWord,
    Ngram,
    Replacement,
}

impl std::fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::LastWord => "last-word",
            Self::Ngram => "ngram",
            Self::Replacement => "replacement",
        })
    }
}

impl std::str::FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "last-word" => Ok(Self::LastWord),
            "ngram" => Ok(Self::Ngram),
            "replacement" => Ok(Self::Replacement),
            other => Err(config_err!("unknown perturbation {other:?}")),
        }
    }
}

/// A perturbation kind with its level (m, n or k).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub level: usize,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, level: usize) -> Self {
        Self { kind, level }
    }

    /// Levels used by default: m, n in {3, 5, 7, 10}; k in {5, 10, 20}.
    pub fn default_levels(kind: PerturbationKind) -> Vec<Self> {
        let levels: &[usize] = match kind {
            PerturbationKind::Identity => &[0],
            PerturbationKind::LastWord | PerturbationKind::Ngram => &[3, 5, 7, 10],
            PerturbationKind::Replacement => &[5, 10, 20],
        };
        levels.iter().map(|&l| Self::new(kind, l)).collect()
    }

    pub fn apply<R: Rng + ?Sized>(&self, prompt: &str, pool: &[String], rng: &mut R) -> Result<String> {
        Ok(match self.kind {
            PerturbationKind::Identity => prompt.to_string(),
            PerturbationKind::LastWord => perturb_last_word(prompt, self.level),
            PerturbationKind::Ngram => perturb_ngram(prompt, self.level),
            PerturbationKind::Replacement => perturb_replace_words(prompt, self.level, pool, rng)?,
        })
    }
}

impl std::fmt::Display for PerturbationSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.kind, self.level)
    }
}

impl std::str::FromStr for PerturbationSpec {
    type Err = Error;

    /// `kind:level`, or a bare kind for `identity`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, level) = match s.split_once(':') {
            Some((k, l)) => (
                k.parse()?,
                l.trim()
                    .parse()
                    .map_err(|_| config_err!("bad perturbation level in {s:?}"))?,
            ),
            None => (s.parse()?, 0),
        };
        Ok(Self::new(kind, level))
    }
}

/// Something that continues a text prompt.
pub trait CompletionModel {
    fn name(&self) -> &str;

    /// Samples a continuation of at most `budget` of the model's own tokens.
    fn complete(&self, prompt: &str, p: f64, budget: usize, rng: &mut dyn RngCore) -> Result<String>;
}

/// A trained decoder-only model with its vocabulary.
pub struct LmCompleter<'a> {
    pub name: String,
    pub model: &'a Model,
    pub params: &'a ParamStore,
    pub vocab: &'a Vocabulary,
}

impl CompletionModel for LmCompleter<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, prompt: &str, p: f64, budget: usize, rng: &mut dyn RngCore) -> Result<String> {
        let scorer = ModelScorer::new(self.model, self.params, None)?;
        let mut prefix = vec![BOS];
        prefix.extend(self.vocab.encode(prompt));
        let ids = nucleus_sample(&scorer, &prefix, p, budget, rng)?;
        Ok(self.vocab.decode(&ids))
    }
}

/// Stub that falls into a loop only when its input already ends in one:
/// if the last two words are equal it repeats that word, otherwise it emits
/// fresh distinct words. Its repetition is maximally sensitive to
/// last-word perturbation.
pub struct RepeatStub;

impl CompletionModel for RepeatStub {
    fn name(&self) -> &str {
        "always-repeat"
    }

    fn complete(&self, prompt: &str, _p: f64, budget: usize, _rng: &mut dyn RngCore) -> Result<String> {
        let words: Vec<&str> = prompt.split_whitespace().collect();
        let looping = words.len() >= 2 && words[words.len() - 1] == words[words.len() - 2];
        let out: Vec<String> = (0..budget)
            .map(|i| {
                if looping {
                    words[words.len() - 1].to_string()
                } else {
                    format!("w{i}")
                }
            })
            .collect();
        Ok(out.join(" "))
    }
}

/// Stub that ignores its input and samples words uniformly from a list.
pub struct UniformStub {
    pub words: Vec<String>,
}

impl CompletionModel for UniformStub {
    fn name(&self) -> &str {
        "uniform-random"
    }

    fn complete(&self, _prompt: &str, _p: f64, budget: usize, rng: &mut dyn RngCore) -> Result<String> {
        if self.words.is_empty() {
            return Err(Error::Input("uniform stub has no words".into()));
        }
        let out: Vec<&str> = (0..budget)
            .map(|_| self.words[rng.gen_range(0..self.words.len())].as_str())
            .collect();
        Ok(out.join(" "))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub perturbations: Vec<PerturbationSpec>,
    pub samples_per_model: usize,
    pub p: f64,
    pub budget: usize,
    pub ngram_orders: Vec<usize>,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            perturbations: PerturbationSpec::default_levels(PerturbationKind::LastWord),
            samples_per_model: 2,
            p: 0.8,
            budget: 200,
            ngram_orders: vec![1, 2, 3],
            seed: 0,
        }
    }
}

/// Prompt, perturbed prompt and the sampled continuations of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub model: String,
    pub prompt_index: usize,
    pub perturbation: PerturbationSpec,
    pub prompt: String,
    pub perturbed_prompt: String,
    pub original: Vec<String>,
    pub perturbed: Vec<String>,
}

/// One JSON-lines row: mean |Δ repetition| over all sample pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub model: String,
    pub prompt_index: usize,
    pub perturbation: PerturbationKind,
    pub level: usize,
    pub n: usize,
    pub delta: f64,
}

/// Mean of [`SuiteRow::delta`] over prompts for one model, perturbation
/// level and n-gram order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub perturbation: PerturbationKind,
    pub level: usize,
    pub n: usize,
    pub mean_delta: f64,
    pub prompts: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SuiteReport {
    pub records: Vec<CompletionRecord>,
    pub rows: Vec<SuiteRow>,
    pub summary: Vec<SummaryRow>,
}

impl SuiteReport {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("model,perturbation,level,n,mean_delta,prompts\n");
        for r in &self.summary {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{}\n",
                r.model, r.perturbation, r.level, r.n, r.mean_delta, r.prompts
            ));
        }
        out
    }

    pub fn mean_delta(&self, model: &str, spec: PerturbationSpec, n: usize) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.model == model && r.perturbation == spec.kind && r.level == spec.level && r.n == n)
            .map(|r| r.mean_delta)
    }
}

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Independent sampling stream per (model, prompt, variant, sample).
fn sample_rng(seed: u64, model: usize, prompt: usize, variant: usize, sample: usize) -> rand_chacha::ChaCha8Rng {
    let key = ((model as u64) << 44) | ((prompt as u64) << 24) | ((variant as u64) << 8) | sample as u64;
    stream(seed, key, Purpose::Sampling)
}

/// Receives each suite row as soon as it is computed.
pub type RowSink<'a> = &'a mut dyn FnMut(&SuiteRow) -> Result<()>;

/// Runs every model on every prompt, original and perturbed, and compares
/// the n-gram repetition of the continuations (measured over whitespace
/// words). `sink` sees each row as soon as it exists, so partial results
/// survive a later failure.
pub fn run_completion_suite(
    models: &[&dyn CompletionModel],
    prompts: &[String],
    config: &SuiteConfig,
    replacement_pool: &[String],
    mut sink: Option<RowSink<'_>>,
) -> Result<SuiteReport> {
    if config.samples_per_model == 0 || config.budget == 0 {
        return Err(config_err!("samples_per_model and budget must be positive"));
    }
    if prompts.is_empty() {
        return Err(Error::Input("no prompts".into()));
    }
    let mut report = SuiteReport::default();
    for (mi, model) in models.iter().enumerate() {
        for (pi, prompt) in prompts.iter().enumerate() {
            let mut original = Vec::with_capacity(config.samples_per_model);
            for s in 0..config.samples_per_model {
                let mut rng = sample_rng(config.seed, mi, pi, 0, s);
                original.push(model.complete(prompt, config.p, config.budget, &mut rng)?);
            }
            for (ki, spec) in config.perturbations.iter().enumerate() {
                let mut prng = stream(config.seed, ((pi as u64) << 16) | ki as u64, Purpose::Perturbation);
                let perturbed_prompt = spec.apply(prompt, replacement_pool, &mut prng)?;
                let mut perturbed = Vec::with_capacity(config.samples_per_model);
                for s in 0..config.samples_per_model {
                    let mut rng = sample_rng(config.seed, mi, pi, ki + 1, s);
                    perturbed.push(model.complete(&perturbed_prompt, config.p, config.budget, &mut rng)?);
                }
                for &n in &config.ngram_orders {
                    let mut total = 0.0;
                    for a in &perturbed {
                        for b in &original {
                            total += repetition_ratio_difference(&words(a), &words(b), n);
                        }
                    }
                    let row = SuiteRow {
                        model: model.name().to_string(),
                        prompt_index: pi,
                        perturbation: spec.kind,
                        level: spec.level,
                        n,
                        delta: total / (perturbed.len() * original.len()) as f64,
                    };
                    if let Some(f) = sink.as_mut() {
                        f(&row)?;
                    }
                    report.rows.push(row);
                }
                report.records.push(CompletionRecord {
                    model: model.name().to_string(),
                    prompt_index: pi,
                    perturbation: *spec,
                    prompt: prompt.clone(),
                    perturbed_prompt,
                    original: original.clone(),
                    perturbed,
                });
            }
        }
    }

    let mut groups: BTreeMap<(usize, PerturbationSpec, usize), (f64, usize)> = BTreeMap::new();
    let order: Vec<&str> = models.iter().map(|m| m.name()).collect();
    for r in &report.rows {
        let mi = order.iter().position(|n| *n == r.model).unwrap_or(0);
        let e = groups
            .entry((mi, PerturbationSpec::new(r.perturbation, r.level), r.n))
            .or_insert((0.0, 0));
        e.0 += r.delta;
        e.1 += 1;
    }
    report.summary = groups
        .into_iter()
        .map(|((mi, spec, n), (sum, count))| SummaryRow {
            model: order[mi].to_string(),
            perturbation: spec.kind,
            level: spec.level,
            n,
            mean_delta: sum / count as f64,
            prompts: count,
        })
        .collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sixty_words() -> String {
        (0..60).map(|i| format!("word{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn prompt_extraction() {
        let short = (0..40).map(|i| format!("s{i}")).collect::<Vec<_>>().join(" ");
        let prompts = extract_prompts(&[sixty_words(), short.clone()], 50).unwrap();
        assert_eq!(prompts.len(), 1);
        assert_eq!(prompts[0].split_whitespace().count(), 50);
        assert!(prompts[0].ends_with("word49"));
        assert_eq!(extract_prompts(&[short], 50).unwrap_err().code(), "E_INPUT");
    }

    #[test]
    fn last_word_and_ngram() {
        assert_eq!(perturb_last_word("she was", 3), "she was was was was");
        assert_eq!(perturb_last_word("she was", 0), "she was");
        assert_eq!(perturb_ngram("with The Bells", 2), "with The Bells The Bells");
        assert_eq!(perturb_ngram("a b c", 1), perturb_last_word("a b c", 1));
        assert_eq!(perturb_ngram("a b", 5), "a b a b");
        let p = sixty_words();
        for m in [3, 5, 7, 10] {
            let q = perturb_last_word(&p, m);
            assert!(q.starts_with(&p));
            assert_eq!(q.split_whitespace().count(), 60 + m);
        }
    }

    #[test]
    fn replacement_properties() {
        let pool: Vec<String> = ["rose", "time", "beauty", "love", "eye"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prompt = "the rose of my love is in thy eye";
        assert_eq!(perturb_replace_words(prompt, 0, &pool, &mut rng).unwrap(), prompt);

        // rose, love, eye are the content words.
        let out = perturb_replace_words(prompt, 3, &pool, &mut rng).unwrap();
        let (a, b): (Vec<&str>, Vec<&str>) = (prompt.split(' ').collect(), out.split(' ').collect());
        for i in [1, 4, 8] {
            assert_ne!(a[i], b[i]);
        }
        for i in [0, 2, 3, 5, 6, 7] {
            assert_eq!(a[i], b[i]);
        }

        for _ in 0..10_000 {
            let out = perturb_replace_words("love", 1, &pool, &mut rng).unwrap();
            assert_ne!(out, "love");
        }
        // Clamped to the word count.
        let out = perturb_replace_words("rose time", 9, &pool, &mut rng).unwrap();
        assert_eq!(out.split(' ').count(), 2);
        assert!(perturb_replace_words("rose", 1, &pool[..1], &mut rng).is_err());
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(
            "last-word:10".parse::<PerturbationSpec>().unwrap(),
            PerturbationSpec::new(PerturbationKind::LastWord, 10)
        );
        assert_eq!(
            "identity".parse::<PerturbationSpec>().unwrap().kind,
            PerturbationKind::Identity
        );
        assert!("bogus:1".parse::<PerturbationSpec>().is_err());
    }

    fn pool() -> Vec<String> {
        (0..50).map(|i| format!("v{i}")).collect()
    }

    #[test]
    fn identity_with_deterministic_model_gives_zero() {
        let prompts = vec![sixty_words()];
        let config = SuiteConfig {
            perturbations: vec![PerturbationSpec::new(PerturbationKind::Identity, 0)],
            budget: 30,
            ..SuiteConfig::default()
        };
        let report = run_completion_suite(&[&RepeatStub], &prompts, &config, &pool(), None).unwrap();
        assert!(report.rows.iter().all(|r| r.delta == 0.0));
    }

    #[test]
    fn repeat_stub_outranks_uniform_stub() {
        let prompts = vec![sixty_words(), sixty_words().replace("word", "x")];
        let config = SuiteConfig {
            budget: 100,
            ..SuiteConfig::default()
        };
        let uniform = UniformStub { words: pool() };
        let models: [&dyn CompletionModel; 2] = [&RepeatStub, &uniform];
        let mut streamed = 0;
        let mut sink = |_: &SuiteRow| -> Result<()> {
            streamed += 1;
            Ok(())
        };
        let report = run_completion_suite(&models, &prompts, &config, &pool(), Some(&mut sink)).unwrap();
        assert_eq!(report.summary.len(), 2 * 4 * 3);
        assert_eq!(report.rows.len(), 2 * 2 * 4 * 3);
        assert_eq!(streamed, report.rows.len());
        let m10 = PerturbationSpec::new(PerturbationKind::LastWord, 10);
        let rep = report.mean_delta("always-repeat", m10, 1).unwrap();
        let uni = report.mean_delta("uniform-random", m10, 1).unwrap();
        assert!((rep - 0.99).abs() < 1e-12, "{rep}");
        assert!(rep > uni);
        let again = run_completion_suite(&models, &prompts, &config, &pool(), None).unwrap();
        assert_eq!(again.rows, report.rows);
        assert_eq!(report.summary_csv().lines().count(), 1 + 24);
    }
}
