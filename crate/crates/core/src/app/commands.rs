//! The non-training verbs: checkpoint averaging, evaluation, generation
//! and the perturbation suite.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{encode_pairs, load_parallel_tsv, read_text, Pair, BOS, EOS};
use crate::decoding::{
    beam_decode, corpus_bleu, generation_entropy, greedy_decode, ngram_repetition_ratio, nucleus_sample,
    oracle_sentence_bleu, MetricReport, ModelScorer, NextToken, Strategy,
};
use crate::error::{config_err, Error, Result};
use crate::model::ModelMode;
use crate::rng::{stream, Purpose};
use crate::robustness::{
    extract_prompts, is_stopword, run_completion_suite, CompletionModel, LmCompleter, SuiteReport,
};
use crate::tensor::ParamStore;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::task::PreparedTask;
use super::trainer::Run;

/// Worker pool sized by `DYSI_THREADS`, or rayon's default when unset.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("DYSI_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| config_err!("DYSI_THREADS must be a positive integer, got {v:?}"))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| config_err!("cannot start worker threads: {e}"))
}

/// Element-wise mean of the checkpoints' parameters, written to `output`.
pub fn average_checkpoints(paths: &[PathBuf], output: &Path) -> Result<Checkpoint> {
    if paths.is_empty() {
        return Err(Error::Input("no checkpoints to average".into()));
    }
    let loaded: Vec<Checkpoint> = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<_>>()?;
    let avg = Checkpoint::average(&loaded)?;
    avg.save(output)?;
    Ok(avg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn strip_eos(mut ids: Vec<u32>) -> Vec<u32> {
    if ids.last() == Some(&EOS) {
        ids.pop();
    }
    ids
}

/// Decodes one sequence after `prefix` with the given strategy. Sampling
/// draws from a stream keyed by `index`, so output does not depend on
/// scheduling.
pub fn decode_with<S: NextToken + ?Sized>(
    scorer: &S,
    prefix: &[u32],
    strategy: &Strategy,
    max_len: usize,
    seed: u64,
    index: u64,
) -> Result<Vec<u32>> {
    match *strategy {
        Strategy::Greedy => greedy_decode(scorer, prefix, max_len),
        Strategy::Beam { size, gamma } => Ok(beam_decode(scorer, prefix, size, gamma, max_len)?.tokens),
        Strategy::Nucleus { p } => {
            nucleus_sample(scorer, prefix, p, max_len, &mut stream(seed, index, Purpose::Sampling))
        }
    }
}

/// Log-probability rows the model assigned at every step of `generated`.
fn path_rows<S: NextToken + ?Sized>(scorer: &S, prefix: &[u32], generated: &[u32]) -> Result<Vec<Vec<f32>>> {
    let full: Vec<u32> = prefix.iter().chain(generated).copied().collect();
    let prefixes: Vec<&[u32]> = (0..generated.len()).map(|i| &full[..prefix.len() + i]).collect();
    scorer.next_log_probs(&prefixes)
}

/// Decoded test set with its scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub hypotheses: Vec<String>,
}

/// Scores hypotheses (EOS stripped) against reference sets whose first
/// entry is the primary reference used for accuracy.
pub fn score_hypotheses(hyps: &[Vec<u32>], refs: &[Vec<Vec<u32>>], rows: &[Vec<f32>]) -> Result<MetricReport> {
    let bleu = corpus_bleu(hyps, refs)?;
    let oracle_bleu = oracle_sentence_bleu(hyps, refs)?;
    let mut repetition = [0.0; 3];
    for (i, r) in repetition.iter_mut().enumerate() {
        *r = hyps.iter().map(|h| ngram_repetition_ratio(h, i + 1)).sum::<f64>() / hyps.len() as f64;
    }
    let (mut correct, mut total, mut exact) = (0usize, 0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let primary = &r[0];
        correct += primary.iter().zip(h).filter(|(a, b)| a == b).count();
        total += primary.len();
        exact += usize::from(h == primary);
    }
    Ok(MetricReport {
        bleu,
        oracle_bleu,
        entropy: generation_entropy(rows),
        repetition,
        token_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        sequence_accuracy: exact as f64 / hyps.len() as f64,
        sentences: hyps.len(),
        tokens: hyps.iter().map(Vec::len).sum(),
    })
}

/// Decodes `pairs` with the configured strategy and scores them. Extra
/// references are aligned with `pairs`, one list per pair.
pub fn evaluate_pairs(
    run: &Run,
    params: &ParamStore,
    pairs: &[Pair],
    extra_refs: &[Vec<Vec<u32>>],
) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    if run.model.config().mode != ModelMode::EncoderDecoder {
        return Err(config_err!(
            "evaluation needs an encoder-decoder task; use generate or perturb for language models"
        ));
    }
    let dc = &run.config.decoding;
    let seed = run.config.training.seed;
    let pool = thread_pool()?;
    let decoded: Vec<(Vec<u32>, Vec<Vec<f32>>)> = pool.install(|| {
        pairs
            .par_iter()
            .enumerate()
            .map(|(i, pair)| {
                let scorer = ModelScorer::new(&run.model, params, Some(&pair.source))?;
                let out = decode_with(&scorer, &[BOS], &dc.strategy, dc.max_len, seed, i as u64)?;
                let rows = path_rows(&scorer, &[BOS], &out)?;
                Ok((strip_eos(out), rows))
            })
            .collect::<Result<_>>()
    })?;

    let refs: Vec<Vec<Vec<u32>>> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut r = vec![p.target.clone()];
            if let Some(extra) = extra_refs.get(i) {
                r.extend(extra.iter().cloned());
            }
            r
        })
        .collect();
    let hyps: Vec<Vec<u32>> = decoded.iter().map(|d| d.0.clone()).collect();
    let rows: Vec<Vec<f32>> = decoded.into_iter().flat_map(|d| d.1).collect();
    let report = score_hypotheses(&hyps, &refs, &rows)?;
    let hypotheses = hyps.iter().map(|h| run.task.vocab.decode(h)).collect();
    Ok(Evaluation { report, hypotheses })
}

/// Evaluates a checkpoint on a TSV test set, or on fresh draws of a
/// synthetic task when `testset` is `None`. Each `references` file holds
/// one extra reference per test line. Writes `eval.json` and
/// `hypotheses.txt` to the output directory.
pub fn evaluate(
    config: &RunConfig,
    checkpoint: &Path,
    testset: Option<&Path>,
    references: &[PathBuf],
) -> Result<Evaluation> {
    let run = Run::prepare(config)?;
    let ckpt = run.load_checkpoint(checkpoint)?;
    let pairs = match testset {
        Some(p) => encode_pairs(&load_parallel_tsv(p)?, &run.task.vocab),
        None => PreparedTask::synthetic_test(config, run.task.valid.len().max(1))?,
    };
    let mut extra: Vec<Vec<Vec<u32>>> = vec![Vec::new(); pairs.len()];
    for path in references {
        let text = read_text(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() != pairs.len() {
            return Err(Error::Input(format!(
                "{}: {} lines for {} test sentences",
                path.display(),
                lines.len(),
                pairs.len()
            )));
        }
        for (slot, line) in extra.iter_mut().zip(lines) {
            slot.push(run.task.vocab.encode(line));
        }
    }
    let eval = evaluate_pairs(&run, &ckpt.params, &pairs, &extra)?;
    let json = serde_json::to_string_pretty(&eval.report).map_err(|e| Error::Input(e.to_string()))?;
    write_file(&config.out_dir.join("eval.json"), &(json + "\n"))?;
    let mut hyp_text = eval.hypotheses.join("\n");
    hyp_text.push('\n');
    write_file(&config.out_dir.join("hypotheses.txt"), &hyp_text)?;
    Ok(eval)
}

/// One output line per prompt line: a continuation for a language model,
/// a translation for an encoder-decoder model. Lines are decoded
/// independently, so sampling is reproducible per line.
pub fn generate(config: &RunConfig, checkpoint: &Path, prompts: &Path, output: &Path) -> Result<Vec<String>> {
    let run = Run::prepare(config)?;
    let ckpt = run.load_checkpoint(checkpoint)?;
    let text = read_text(prompts)?;
    let lines: Vec<&str> = text.lines().collect();
    let dc = &config.decoding;
    let vocab = &run.task.vocab;
    let pool = thread_pool()?;
    let outputs: Vec<String> = pool.install(|| {
        lines
            .par_iter()
            .enumerate()
            .map(|(i, line)| {
                let ids = vocab.encode(line);
                let (scorer, prefix) = match run.model.config().mode {
                    ModelMode::DecoderOnly => {
                        let mut prefix = vec![BOS];
                        prefix.extend(ids);
                        (ModelScorer::new(&run.model, &ckpt.params, None)?, prefix)
                    }
                    ModelMode::EncoderDecoder => (ModelScorer::new(&run.model, &ckpt.params, Some(&ids))?, vec![BOS]),
                };
                let out = decode_with(
                    &scorer,
                    &prefix,
                    &dc.strategy,
                    dc.max_len,
                    config.training.seed,
                    i as u64,
                )?;
                Ok(vocab.decode(&strip_eos(out)).replace('\n', " "))
            })
            .collect::<Result<_>>()
    })?;
    let mut body = outputs.join("\n");
    if !outputs.is_empty() {
        body.push('\n');
    }
    write_file(output, &body)?;
    Ok(outputs)
}

/// Distinct non-stopword words of the prompts: the pool replacement
/// perturbations draw from.
pub fn replacement_pool(prompts: &[String]) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    for p in prompts {
        for w in p.split_whitespace() {
            if !is_stopword(w) {
                seen.insert(w.to_string());
            }
        }
    }
    seen.into_iter().collect()
}

/// Runs the perturbation suite over language-model checkpoints. Rows are
/// streamed to `perturb.jsonl` as they are produced; the summary goes to
/// `perturb_summary.csv` and the raw completions to `completions.jsonl`.
pub fn perturb(config: &RunConfig, checkpoints: &[PathBuf], prompts: &Path) -> Result<SuiteReport> {
    if checkpoints.is_empty() {
        return Err(Error::Input("no checkpoints given".into()));
    }
    let run = Run::prepare(config)?;
    if run.model.config().mode != ModelMode::DecoderOnly {
        return Err(config_err!("perturb needs a language-model task (task.kind=lm)"));
    }
    let loaded: Vec<Checkpoint> = checkpoints
        .iter()
        .map(|p| run.load_checkpoint(p))
        .collect::<Result<_>>()?;
    let completers: Vec<LmCompleter> = loaded
        .iter()
        .zip(checkpoints)
        .map(|(c, path)| LmCompleter {
            name: path.display().to_string(),
            model: &run.model,
            params: &c.params,
            vocab: &run.task.vocab,
        })
        .collect();
    let models: Vec<&dyn CompletionModel> = completers.iter().map(|c| c as &dyn CompletionModel).collect();

    let text = read_text(prompts)?;
    let paragraphs: Vec<&str> = text.lines().collect();
    let rc = &config.robustness;
    let mut prompt_list = extract_prompts(&paragraphs, rc.words_per_prompt)?;
    if rc.max_prompts > 0 {
        prompt_list.truncate(rc.max_prompts);
    }
    let pool = replacement_pool(&prompt_list);

    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let rows_path = config.out_dir.join("perturb.jsonl");
    let file = File::create(&rows_path).map_err(|e| Error::io(&rows_path, e))?;
    let mut rows_out = BufWriter::new(file);
    let mut sink = |row: &crate::robustness::SuiteRow| -> Result<()> {
        let line = serde_json::to_string(row).map_err(|e| Error::Input(e.to_string()))?;
        writeln!(rows_out, "{line}")
            .and_then(|_| rows_out.flush())
            .map_err(|e| Error::io(&rows_path, e))
    };
    let report = run_completion_suite(&models, &prompt_list, &rc.suite, &pool, Some(&mut sink))?;

    write_file(&config.out_dir.join("perturb_summary.csv"), &report.summary_csv())?;
    let mut records = String::new();
    for r in &report.records {
        records.push_str(&serde_json::to_string(r).map_err(|e| Error::Input(e.to_string()))?);
        records.push('\n');
    }
    write_file(&config.out_dir.join("completions.jsonl"), &records)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::trainer::train;

    fn copy_config(dir: &Path, extra: &[(&str, &str)]) -> RunConfig {
        let text = format!(
            "task.kind=copy\ntask.vocab_size=8\ntask.num_pairs=40\ntask.min_len=2\ntask.max_len=4\n\
             model.d_model=16\nmodel.n_heads=2\nmodel.n_layers=1\nmodel.ffn_dim=16\nmodel.max_positions=8\n\
             training.max_steps=6\ntraining.checkpoint_every=3\ntraining.max_tokens=40\ntraining.warmup=2\n\
             decoding.max_len=6\noutput.dir={}\n",
            dir.display()
        );
        RunConfig::parse(&text, Path::new("t.cfg"))
            .unwrap()
            .with_overrides(extra.iter().map(|(k, v)| (*k, v.to_string())))
            .unwrap()
    }

    #[test]
    fn perfect_hypotheses_score_full_marks() {
        let refs = vec![vec![vec![4, 5, 6, 7]], vec![vec![5, 5, 6, 4, 7]]];
        let hyps: Vec<Vec<u32>> = refs.iter().map(|r| r[0].clone()).collect();
        let r = score_hypotheses(&hyps, &refs, &[vec![0.0, f32::NEG_INFINITY]]).unwrap();
        assert!((r.bleu.bleu - 100.0).abs() < 1e-9);
        assert!((r.oracle_bleu - 100.0).abs() < 1e-9);
        assert_eq!((r.token_accuracy, r.sequence_accuracy), (1.0, 1.0));
        assert_eq!(r.entropy, 0.0);
        assert_eq!((r.sentences, r.tokens), (2, 9));
    }

    #[test]
    fn beam_one_report_equals_greedy() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = copy_config(dir.path(), &[]);
        train(&cfg).unwrap();
        let ckpt = dir.path().join("final.ckpt");
        let greedy = evaluate(
            &copy_config(dir.path(), &[("decoding.strategy", "greedy")]),
            &ckpt,
            None,
            &[],
        )
        .unwrap();
        let beam1 = evaluate(
            &copy_config(dir.path(), &[("decoding.strategy", "beam"), ("decoding.beam", "1")]),
            &ckpt,
            None,
            &[],
        )
        .unwrap();
        assert_eq!(greedy, beam1);
        let r = &greedy.report;
        for v in [
            r.bleu.bleu,
            r.oracle_bleu,
            r.entropy,
            r.token_accuracy,
            r.sequence_accuracy,
        ] {
            assert!(v.is_finite());
        }
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
        for key in [
            "bleu",
            "oracle_bleu",
            "entropy",
            "repetition",
            "token_accuracy",
            "sequence_accuracy",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let hyps = std::fs::read_to_string(dir.path().join("hypotheses.txt")).unwrap();
        assert_eq!(hyps.lines().count(), r.sentences);
    }

    #[test]
    fn extra_reference_file_must_align() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = copy_config(dir.path(), &[("decoding.strategy", "greedy")]);
        train(&cfg).unwrap();
        let refs = dir.path().join("refs.txt");
        std::fs::write(&refs, "a\n").unwrap();
        let err = evaluate(&cfg, &dir.path().join("final.ckpt"), None, &[refs]).unwrap_err();
        assert_eq!(err.code(), "E_INPUT");
    }

    #[test]
    fn averaging_writes_the_mean() {
        let dir = tempfile::tempdir().unwrap();
        train(&copy_config(dir.path(), &[])).unwrap();
        let a = dir.path().join("checkpoints/step-0000003.ckpt");
        let out = dir.path().join("avg.ckpt");
        let avg = average_checkpoints(&[a.clone(), a.clone()], &out).unwrap();
        assert_eq!(avg.params, Checkpoint::load(&a).unwrap().params);
        assert_eq!(Checkpoint::load(&out).unwrap(), avg);
        assert!(average_checkpoints(&[], &out).is_err());
    }

    #[test]
    fn lm_generation_and_perturbation() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.txt");
        let para = "the quiet river runs past the old mill and under the stone bridge toward the sea";
        std::fs::write(&corpus, format!("{para}\n{para}\n")).unwrap();
        let cfg = RunConfig::parse(
            &format!(
                "task.kind=lm\ntask.train_path={}\ntask.context=16\nmodel.d_model=16\nmodel.n_heads=2\n\
                 model.n_layers=1\nmodel.ffn_dim=16\nmodel.max_positions=16\ntraining.max_steps=2\n\
                 training.checkpoint_every=2\ntraining.max_tokens=64\ndecoding.strategy=nucleus\n\
                 decoding.max_len=10\nrobustness.words_per_prompt=5\nrobustness.budget=12\n\
                 robustness.perturbations=identity:0,last-word:3\noutput.dir={}\n",
                corpus.display(),
                dir.path().display()
            ),
            Path::new("t.cfg"),
        )
        .unwrap();
        train(&cfg).unwrap();
        let ckpt = dir.path().join("final.ckpt");

        let prompts = dir.path().join("prompts.txt");
        std::fs::write(&prompts, "the river\n\nold mill\n").unwrap();
        let out_a = generate(&cfg, &ckpt, &prompts, &dir.path().join("a.txt")).unwrap();
        let out_b = generate(&cfg, &ckpt, &prompts, &dir.path().join("b.txt")).unwrap();
        assert_eq!(out_a, out_b);
        assert_eq!(out_a.len(), 3);
        assert_eq!(
            std::fs::read_to_string(dir.path().join("a.txt"))
                .unwrap()
                .lines()
                .count(),
            3
        );

        let report = perturb(&cfg, std::slice::from_ref(&ckpt), &corpus).unwrap();
        assert_eq!(report.summary.len(), 2 * 3);
        for r in report.summary.iter().filter(|r| r.level == 0) {
            assert_eq!(r.mean_delta, 0.0);
        }
        let again = perturb(&cfg, &[ckpt], &corpus).unwrap();
        assert_eq!(report, again);
        let rows = std::fs::read_to_string(dir.path().join("perturb.jsonl")).unwrap();
        assert_eq!(rows.lines().count(), report.rows.len());
        assert!(dir.path().join("perturb_summary.csv").exists());
    }
}
