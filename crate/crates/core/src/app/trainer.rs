//! The training loop: batching, logging, checkpoints, validation, resume.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Pair, ParallelBatch};
use crate::error::{Error, Result};
use crate::imitation::{expert_pass, teacher_forced_loss, train_step, StepReport};
use crate::model::{greedy_predictions, Model};
use crate::rng::{stream, Purpose};
use crate::scheduling::training_accuracy;
use crate::tensor::{lr_inverse_sqrt, Adam, AdamConfig, ParamStore};

use super::checkpoint::{run_digest, Checkpoint};
use super::config::RunConfig;
use super::task::PreparedTask;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: u64,
    pub loss_total: f32,
    pub loss_mle: f32,
    pub loss_il: f32,
    pub acc: f64,
    #[serde(rename = "mean_N")]
    pub mean_n: f64,
    pub epsilon: Option<f64>,
    pub lr: f32,
}

impl MetricsLine {
    fn new(step: u64, r: &StepReport) -> Self {
        Self {
            step,
            loss_total: r.loss.total,
            loss_mle: r.loss.mle,
            loss_il: r.loss.imitation,
            acc: r.acc,
            mean_n: r.mean_n,
            epsilon: r.epsilon,
            lr: r.lr,
        }
    }
}

/// One line of `validation.jsonl`: teacher-forced NLL and token accuracy
/// on the held-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationLine {
    pub step: u64,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Step counter when training stopped.
    pub step: u64,
    pub final_checkpoint: PathBuf,
    pub reached_target_at: Option<u64>,
    pub last_validation: Option<ValidationLine>,
}

/// A configuration with its data and model resolved.
pub struct Run {
    pub config: RunConfig,
    pub task: PreparedTask,
    pub model: Model,
    pub digest: [u8; 32],
}

impl Run {
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        let task = PreparedTask::load(config)?;
        let model = Model::new(task.model_config(config))?;
        let digest = run_digest(model.config(), &task.vocab);
        Ok(Self {
            config: config.clone(),
            task,
            model,
            digest,
        })
    }

    /// Loads a checkpoint and checks it belongs to this model and vocabulary.
    pub fn load_checkpoint(&self, path: &Path) -> Result<Checkpoint> {
        let c = Checkpoint::load(path)?;
        c.verify(&self.digest)?;
        self.model.check_params(&c.params)?;
        Ok(c)
    }

    /// Teacher-forced NLL and token accuracy over `pairs`, dropout off.
    pub fn teacher_forced_metrics(&self, params: &ParamStore, pairs: &[Pair]) -> Result<(f64, f64)> {
        if pairs.is_empty() {
            return Err(Error::Input("no examples to evaluate".into()));
        }
        let batches = make_batches(pairs, self.config.training.max_tokens, 0, self.task.append_eos)?;
        let (mut loss, mut correct, mut tokens) = (0.0, 0.0, 0.0);
        for b in &batches {
            let n = b.target_tokens() as f64;
            loss += teacher_forced_loss(&self.model, params, b, 0.0)? as f64 * n;
            let lp = expert_pass(&self.model, params, b)?;
            let pred = greedy_predictions(lp.data(), self.model.config().vocab_size);
            correct += training_accuracy(&b.target_output, &pred, &b.target_mask)? * n;
            tokens += n;
        }
        Ok((loss / tokens, correct / tokens))
    }
}

/// Deterministic batch order: epoch `e` reshuffles with a seed derived from
/// `(seed, e)`. The batch count per epoch depends only on the lengths, so
/// step `s` maps to a fixed batch without replaying earlier epochs.
struct BatchSchedule<'a> {
    pairs: &'a [Pair],
    max_tokens: usize,
    seed: u64,
    append_eos: bool,
    per_epoch: usize,
    cached: Option<(u64, Vec<ParallelBatch>)>,
}

impl<'a> BatchSchedule<'a> {
    fn new(pairs: &'a [Pair], max_tokens: usize, seed: u64, append_eos: bool) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Input("no training examples".into()));
        }
        let mut s = Self {
            pairs,
            max_tokens,
            seed,
            append_eos,
            per_epoch: 0,
            cached: None,
        };
        s.load_epoch(0)?;
        s.per_epoch = s.cached.as_ref().map_or(0, |c| c.1.len());
        Ok(s)
    }

    fn load_epoch(&mut self, epoch: u64) -> Result<()> {
        let shuffle = stream(self.seed, epoch, Purpose::Batching).next_u64();
        self.cached = Some((
            epoch,
            make_batches(self.pairs, self.max_tokens, shuffle, self.append_eos)?,
        ));
        Ok(())
    }

    fn batch(&mut self, step: u64) -> Result<&ParallelBatch> {
        let idx = step - 1;
        let epoch = idx / self.per_epoch as u64;
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            self.load_epoch(epoch)?;
        }
        let batches = &self.cached.as_ref().expect("loaded").1;
        Ok(&batches[(idx % self.per_epoch as u64) as usize])
    }
}

/// Exclusive ownership of an output directory while a run is active.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Input(format!(
                "{} is locked by another run (delete {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn checkpoint_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoints")
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    checkpoint_dir(out_dir).join(format!("step-{step:07}.ckpt"))
}

/// Saved step checkpoints in ascending step order.
pub fn list_checkpoints(out_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let dir = checkpoint_dir(out_dir);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse().ok());
        if let Some(step) = step {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Keeps the lines of a JSON-lines log whose `step` is at most `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let s: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("{}: corrupt log line: {e}", path.display())))?;
        if s.get("step").and_then(|v| v.as_u64()).is_some_and(|s| s <= step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn write_line<T: Serialize>(w: &mut impl Write, value: &T, path: &Path) -> Result<()> {
    let s = serde_json::to_string(value).map_err(|e| Error::Input(e.to_string()))?;
    writeln!(w, "{s}").map_err(|e| Error::io(path, e))
}

fn point_best(out_dir: &Path, target: &Path) -> Result<()> {
    let link = out_dir.join("best.ckpt");
    let _ = std::fs::remove_file(&link);
    #[cfg(unix)]
    {
        let rel = target.strip_prefix(out_dir).unwrap_or(target);
        std::os::unix::fs::symlink(rel, &link).map_err(|e| Error::io(&link, e))
    }
    #[cfg(not(unix))]
    {
        std::fs::copy(target, &link)
            .map(|_| ())
            .map_err(|e| Error::io(&link, e))
    }
}

/// Trains per the configuration, resuming from the newest checkpoint in the
/// output directory when one exists. A fresh run starts from
/// `training.init_checkpoint` when set (hot start: parameters only, with a
/// new optimizer, step counter and learning-rate schedule).
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    let run = Run::prepare(config)?;
    let out = &config.out_dir;
    std::fs::create_dir_all(checkpoint_dir(out)).map_err(|e| Error::io(out, e))?;
    let _lock = DirLock::acquire(out)?;
    std::fs::write(out.join("config.cfg"), config.to_text()).map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join("vocab.txt"), run.task.vocab.to_text()).map_err(|e| Error::io(out, e))?;

    let tc = &config.training;
    let existing = list_checkpoints(out)?;
    let (mut params, mut optimizer, start) = match existing.last() {
        Some((_, path)) => {
            let c = run.load_checkpoint(path)?;
            let opt = c
                .optimizer
                .ok_or_else(|| Error::Checkpoint(format!("{} has no optimizer state to resume", path.display())))?;
            log::info!("resuming from {} at step {}", path.display(), c.step);
            (c.params, opt, c.step)
        }
        None => {
            let params = match &tc.init_checkpoint {
                Some(p) => {
                    log::info!("hot start from {}", p.display());
                    run.load_checkpoint(p)?.params
                }
                None => run.model.init_params(tc.seed),
            };
            let opt = Adam::new(&params, AdamConfig::default());
            (params, opt, 0)
        }
    };

    let metrics_path = out.join("metrics.jsonl");
    let valid_path = out.join("validation.jsonl");
    if start > 0 {
        truncate_log(&metrics_path, start)?;
        truncate_log(&valid_path, start)?;
    }
    let mut metrics = open_log(&metrics_path, start > 0)?;
    let mut validation = open_log(&valid_path, start > 0)?;

    let mut best: Option<f64> = None;
    if start > 0 && valid_path.exists() {
        let text = std::fs::read_to_string(&valid_path).map_err(|e| Error::io(&valid_path, e))?;
        for line in text.lines() {
            if let Ok(v) = serde_json::from_str::<ValidationLine>(line) {
                best = Some(best.map_or(v.loss, |b: f64| b.min(v.loss)));
            }
        }
    }

    let mut schedule = BatchSchedule::new(&run.task.train, tc.max_tokens, tc.seed, run.task.append_eos)?;
    let mut step = start;
    let mut reached = None;
    let mut last_validation = None;
    while step < tc.max_steps {
        step += 1;
        let lr = lr_inverse_sqrt(step, tc.warmup, tc.lr)?;
        let batch = schedule.batch(step)?;
        let report = train_step(
            &run.model,
            &mut params,
            &mut optimizer,
            batch,
            &tc.settings,
            step,
            lr,
            tc.seed,
        )?;
        write_line(&mut metrics, &MetricsLine::new(step, &report), &metrics_path)?;
        if step % 100 == 0 {
            log::info!(
                "step {step} loss {:.4} acc {:.3} N {:.2} lr {:.2e}",
                report.loss.total,
                report.acc,
                report.mean_n,
                lr
            );
        }
        if step % tc.checkpoint_every == 0 || step == tc.max_steps {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            let path = checkpoint_path(out, step);
            Checkpoint {
                params: params.clone(),
                optimizer: Some(optimizer.clone()),
                step,
                digest: run.digest,
            }
            .save(&path)?;
            if !run.task.valid.is_empty() {
                let (loss, acc) = run.teacher_forced_metrics(&params, &run.task.valid)?;
                let line = ValidationLine { step, loss, acc };
                write_line(&mut validation, &line, &valid_path)?;
                validation.flush().map_err(|e| Error::io(&valid_path, e))?;
                log::info!("validation at step {step}: loss {loss:.4} acc {acc:.4}");
                if best.is_none_or(|b| loss < b) {
                    best = Some(loss);
                    point_best(out, &path)?;
                }
                if tc.target_accuracy > 0.0 && acc >= tc.target_accuracy {
                    reached = Some(step);
                    last_validation = Some(line);
                    break;
                }
                last_validation = Some(line);
            }
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let final_path = out.join("final.ckpt");
    Checkpoint {
        params,
        optimizer: Some(optimizer),
        step,
        digest: run.digest,
    }
    .save(&final_path)?;

    let saved = list_checkpoints(out)?;
    if saved.len() >= 2 && tc.average_last >= 2 {
        let recent: Vec<Checkpoint> = saved[saved.len().saturating_sub(tc.average_last)..]
            .iter()
            .map(|(_, p)| Checkpoint::load(p))
            .collect::<Result<_>>()?;
        Checkpoint::average(&recent)?.save(&out.join("averaged.ckpt"))?;
    }
    Ok(TrainOutcome {
        step,
        final_checkpoint: final_path,
        reached_target_at: reached,
        last_validation,
    })
}

/// Hot start: parameters from `init`, everything else fresh.
pub fn hot_start(config: &RunConfig, init: &Path) -> Result<TrainOutcome> {
    let cfg = config.with_overrides([("training.init_checkpoint", init.display().to_string())])?;
    if !list_checkpoints(&cfg.out_dir)?.is_empty() {
        return Err(Error::Input(format!(
            "{} already holds checkpoints; hot start needs a fresh output directory",
            cfg.out_dir.display()
        )));
    }
    train(&cfg)
}
