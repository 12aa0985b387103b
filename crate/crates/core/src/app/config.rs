//! Flat `section.key=value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{TaskKind, Tokenization};
use crate::decoding::Strategy;
use crate::error::{config_err, Error, Result};
use crate::imitation::{Objective, TrainSettings};
use crate::model::{ModelConfig, ModelMode};
use crate::robustness::{PerturbationKind, PerturbationSpec, SuiteConfig};
use crate::scheduling::{DecayParams, DecayScheme};

/// Every accepted key with its default, in canonical order. An empty
/// default means "unset".
const KEYS: &[(&str, &str)] = &[
    ("task.kind", "copy"),
    ("task.vocab_size", "32"),
    ("task.num_pairs", "2000"),
    ("task.min_len", "2"),
    ("task.max_len", "10"),
    ("task.data_seed", "0"),
    ("task.valid_fraction", "0.1"),
    ("task.max_valid", "1000"),
    ("task.train_path", ""),
    ("task.valid_path", ""),
    ("task.tokenization", "char"),
    ("task.min_count", "1"),
    ("task.context", "64"),
    ("model.mode", ""),
    ("model.d_model", "64"),
    ("model.n_heads", "4"),
    ("model.n_layers", "2"),
    ("model.ffn_dim", "128"),
    ("model.dropout", "0.1"),
    ("model.max_positions", "64"),
    ("training.objective", "dysi"),
    ("training.alpha", "0.5"),
    ("training.beta", "0.5"),
    ("training.label_smoothing", "0.1"),
    ("training.lr", "0.001"),
    ("training.warmup", "400"),
    ("training.max_steps", "3000"),
    ("training.max_tokens", "600"),
    ("training.seed", "0"),
    ("training.checkpoint_every", "200"),
    ("training.average_last", "3"),
    ("training.init_checkpoint", ""),
    ("training.target_accuracy", "0"),
    ("training.decay_scheme", "exponential"),
    ("training.decay_k", "0.985"),
    ("training.decay_unit", "100"),
    ("training.decay_c", ""),
    ("training.eps_min", "0.3"),
    ("decoding.strategy", "beam"),
    ("decoding.beam", "5"),
    ("decoding.gamma", "0.2"),
    ("decoding.p", "0.8"),
    ("decoding.max_len", "64"),
    (
        "robustness.perturbations",
        "last-word:3,last-word:5,last-word:7,last-word:10",
    ),
    ("robustness.samples", "2"),
    ("robustness.p", "0.8"),
    ("robustness.budget", "200"),
    ("robustness.words_per_prompt", "50"),
    ("robustness.max_prompts", "0"),
    ("robustness.ngram_orders", "1,2,3"),
    ("output.dir", "runs/default"),
];

/// Where training examples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskSource {
    Synthetic(TaskKind),
    /// TAB-separated parallel text.
    Parallel,
    /// Plain text for a language model; no path means the bundled corpus.
    Lm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub source: TaskSource,
    pub vocab_size: usize,
    pub num_pairs: usize,
    pub len_range: (usize, usize),
    pub data_seed: u64,
    pub valid_fraction: f64,
    pub max_valid: usize,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub tokenization: Tokenization,
    pub min_count: usize,
    pub context: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub settings: TrainSettings,
    pub lr: f32,
    pub warmup: u64,
    pub max_steps: u64,
    pub max_tokens: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub average_last: usize,
    pub init_checkpoint: Option<PathBuf>,
    /// Stop at a validation point once teacher-forced accuracy reaches
    /// this value; 0 disables.
    pub target_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodingConfig {
    pub strategy: Strategy,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessConfig {
    pub suite: SuiteConfig,
    pub words_per_prompt: usize,
    /// 0 keeps every prompt.
    pub max_prompts: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskConfig,
    /// `vocab_size` is filled in once the vocabulary is known.
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub decoding: DecodingConfig,
    pub robustness: RobustnessConfig,
    pub out_dir: PathBuf,
    raw: BTreeMap<String, String>,
}

struct Values<'a> {
    map: &'a BTreeMap<String, String>,
}

impl Values<'_> {
    fn raw(&self, key: &str) -> &str {
        self.map.get(key).map(String::as_str).unwrap_or_else(|| {
            KEYS.iter()
                .find(|(k, _)| *k == key)
                .map(|(_, d)| *d)
                .expect("key listed in KEYS")
        })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| config_err!("{key}: cannot parse {v:?}"))
    }

    fn parsed<T: FromStr<Err = Error>>(&self, key: &str) -> Result<T> {
        self.raw(key).parse().map_err(|e: Error| config_err!("{key}: {e}"))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| config_err!("{key}: cannot parse {s:?}")))
            .collect()
    }
}

impl RunConfig {
    /// Parses configuration text. `origin` names the source in errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(config_err!("{}:{}: unknown key {key:?}", origin.display(), i + 1));
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(parse_err(format!("duplicate key {key:?}")));
            }
        }
        Self::from_map(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// All defaults.
    pub fn defaults() -> Self {
        Self::from_map(BTreeMap::new()).expect("defaults are valid")
    }

    /// Applies `key=value` overrides, as if they were appended to the file.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, String)>) -> Result<Self> {
        let mut map = self.raw.clone();
        for (k, v) in pairs {
            if !KEYS.iter().any(|(key, _)| *key == k) {
                return Err(config_err!("unknown key {k:?}"));
            }
            map.insert(k.to_string(), v);
        }
        Self::from_map(map)
    }

    fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        let v = Values { map: &map };
        let kind: String = v.get("task.kind")?;
        let source = match kind.as_str() {
            "tsv" => TaskSource::Parallel,
            "lm" => TaskSource::Lm,
            other => TaskSource::Synthetic(
                other
                    .parse()
                    .map_err(|_| config_err!("task.kind must be copy, reverse, cipher, tsv or lm; got {other:?}"))?,
            ),
        };
        let task = TaskConfig {
            vocab_size: v.get("task.vocab_size")?,
            num_pairs: v.get("task.num_pairs")?,
            len_range: (v.get("task.min_len")?, v.get("task.max_len")?),
            data_seed: v.get("task.data_seed")?,
            valid_fraction: v.get("task.valid_fraction")?,
            max_valid: v.get("task.max_valid")?,
            train_path: v.path("task.train_path"),
            valid_path: v.path("task.valid_path"),
            tokenization: v.parsed("task.tokenization")?,
            min_count: v.get("task.min_count")?,
            context: v.get("task.context")?,
            source,
        };
        if !(0.0..1.0).contains(&task.valid_fraction) {
            return Err(config_err!("task.valid_fraction must be in [0, 1)"));
        }
        if task.source == TaskSource::Parallel && task.train_path.is_none() {
            return Err(config_err!("task.kind=tsv needs task.train_path"));
        }

        let natural = if task.source == TaskSource::Lm {
            ModelMode::DecoderOnly
        } else {
            ModelMode::EncoderDecoder
        };
        let mode = match v.raw("model.mode") {
            "" => natural,
            m => m.parse()?,
        };
        if mode != natural {
            return Err(config_err!("model.mode={mode} does not fit task.kind={kind}"));
        }
        let model = ModelConfig {
            vocab_size: match task.source {
                TaskSource::Synthetic(_) => task.vocab_size,
                _ => 0,
            },
            d_model: v.get("model.d_model")?,
            n_heads: v.get("model.n_heads")?,
            n_layers: v.get("model.n_layers")?,
            ffn_dim: v.get("model.ffn_dim")?,
            dropout: v.get("model.dropout")?,
            max_positions: v.get("model.max_positions")?,
            mode,
        };

        let max_steps: u64 = v.get("training.max_steps")?;
        let mut decay = DecayParams::for_run(max_steps);
        decay.k = v.get("training.decay_k")?;
        decay.unit = v.get("training.decay_unit")?;
        decay.eps_min = v.get("training.eps_min")?;
        if !v.raw("training.decay_c").is_empty() {
            decay.c = v.get("training.decay_c")?;
        }
        let settings = TrainSettings {
            objective: v.parsed::<Objective>("training.objective")?,
            alpha: v.get("training.alpha")?,
            beta: v.get("training.beta")?,
            label_smoothing: v.get("training.label_smoothing")?,
            decay_scheme: v.parsed::<DecayScheme>("training.decay_scheme")?,
            decay,
        };
        settings.validate()?;
        if settings.objective == Objective::Dysi && (settings.alpha == 0.0 || settings.beta == 0.0) {
            log::warn!("objective=dysi with alpha or beta at 0 runs an ablation, not the full method");
        }
        let training = TrainingConfig {
            settings,
            lr: v.get("training.lr")?,
            warmup: v.get("training.warmup")?,
            max_steps,
            max_tokens: v.get("training.max_tokens")?,
            seed: v.get("training.seed")?,
            checkpoint_every: v.get("training.checkpoint_every")?,
            average_last: v.get("training.average_last")?,
            init_checkpoint: v.path("training.init_checkpoint"),
            target_accuracy: v.get("training.target_accuracy")?,
        };
        if training.checkpoint_every == 0 || training.warmup == 0 || training.average_last == 0 {
            return Err(config_err!(
                "checkpoint_every, warmup and average_last must be positive"
            ));
        }

        let decoding = DecodingConfig {
            strategy: Strategy::from_parts(
                v.raw("decoding.strategy"),
                v.get("decoding.beam")?,
                v.get("decoding.gamma")?,
                v.get("decoding.p")?,
            )?,
            max_len: v.get("decoding.max_len")?,
        };

        let perturbations = v
            .raw("robustness.perturbations")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                if let Ok(kind) = s.parse::<PerturbationKind>() {
                    if kind != PerturbationKind::Identity {
                        return Ok(PerturbationSpec::default_levels(kind));
                    }
                }
                s.parse::<PerturbationSpec>().map(|p| vec![p])
            })
            .collect::<Result<Vec<_>>>()?
            .concat();
        let robustness = RobustnessConfig {
            suite: SuiteConfig {
                perturbations,
                samples_per_model: v.get("robustness.samples")?,
                p: v.get("robustness.p")?,
                budget: v.get("robustness.budget")?,
                ngram_orders: v.list("robustness.ngram_orders")?,
                seed: training.seed,
            },
            words_per_prompt: v.get("robustness.words_per_prompt")?,
            max_prompts: v.get("robustness.max_prompts")?,
        };

        Ok(Self {
            task,
            model,
            training,
            decoding,
            robustness,
            out_dir: PathBuf::from(v.raw("output.dir")),
            raw: map,
        })
    }

    /// Canonical text with every key, defaults included.
    pub fn to_text(&self) -> String {
        let v = Values { map: &self.raw };
        let mut out = String::new();
        for (k, _) in KEYS {
            out.push_str(k);
            out.push('=');
            out.push_str(v.raw(k));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("run.cfg"))
    }

    #[test]
    fn defaults_and_overrides() {
        let c = parse("# comment\ntraining.alpha = 0.25\n\ntask.kind=cipher\n").unwrap();
        assert_eq!(c.training.settings.alpha, 0.25);
        assert_eq!(c.task.source, TaskSource::Synthetic(TaskKind::Cipher));
        assert_eq!(c.training.settings.beta, 0.5);
        assert_eq!(c.model.mode, ModelMode::EncoderDecoder);
        assert_eq!(c.training.checkpoint_every, 200);
        assert_eq!(c.training.average_last, 3);
        let lm = parse("task.kind=lm\n").unwrap();
        assert_eq!(lm.model.mode, ModelMode::DecoderOnly);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let e = parse("training.alpah=0.5\n").unwrap_err();
        assert_eq!(e.code(), "E_CONFIG");
        assert!(e.to_string().contains("run.cfg:1"));
        assert_eq!(parse("no equals sign\n").unwrap_err().code(), "E_PARSE");
        assert_eq!(parse("training.beta=1.5\n").unwrap_err().code(), "E_CONFIG");
        assert_eq!(
            parse("task.kind=lm\nmodel.mode=encoder-decoder\n").unwrap_err().code(),
            "E_CONFIG"
        );
        assert_eq!(parse("decoding.beam=0\n").unwrap_err().code(), "E_CONFIG");
    }

    #[test]
    fn canonical_text_round_trips() {
        let c = parse("task.kind=reverse\ntraining.seed=9\n").unwrap();
        let again = parse(&c.to_text()).unwrap();
        assert_eq!(again.task, c.task);
        assert_eq!(again.training, c.training);
        assert_eq!(again.to_text(), c.to_text());
    }

    #[test]
    fn perturbation_lists() {
        let c = parse("robustness.perturbations=last-word,identity,ngram:2\n").unwrap();
        let labels: Vec<String> = c.robustness.suite.perturbations.iter().map(|p| p.to_string()).collect();
        assert_eq!(
            labels,
            [
                "last-word:3",
                "last-word:5",
                "last-word:7",
                "last-word:10",
                "identity:0",
                "ngram:2"
            ]
        );
    }
}
