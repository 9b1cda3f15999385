//! Training loop: batched forward/backward over a dataset mixture, Adam
//! with a cosine schedule and per-group learning rates, per-step loss CSV
//! logging, and checkpointing at regular intervals.
//!
//! The entire run is a pure function of (config, dataset files): identical
//! configs reproduce loss curves and checkpoints byte for byte, and a run
//! resumed from a checkpoint continues the exact trajectory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, TrainState};
use crate::dataset::{sample_batch, Dataset};
use crate::error::{Error, Result};
use crate::loss::{LabelSpace, LossReport};
use crate::model::{synthetic_labels, ModelConfig};
use crate::optim::cosine_lr;
use crate::params::GradAccum;
use crate::scenes::{augment, drop_triplets, AnnotatedExample};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup: usize,
    pub lr_body: f64,
    pub lr_text: f64,
    pub eval_interval: usize,
    /// Instance budget M for selection during training.
    pub m: usize,
    /// Pair budget k for selection during training.
    pub k: usize,
    pub rebalance: bool,
    pub datasets: Vec<PathBuf>,
    pub mixture: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            seed: 0,
            batch_size: 8,
            steps: 5000,
            warmup: 100,
            lr_body: 3e-4,
            lr_text: 3e-4,
            eval_interval: 500,
            m: 16,
            k: 64,
            rebalance: true,
            datasets: vec![],
            mixture: vec![],
        }
    }
}

impl TrainConfig {
    /// Applies one `key = value` setting. Keys match the config file format
    /// and the CLI flag names (with `-` for `_`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| {
                Error::Usage(format!("config key {key:?}: cannot parse {value:?}"))
            })
        }
        let key = key.replace('-', "_");
        match key.as_str() {
            "seed" => self.seed = num(&key, value)?,
            "batch_size" => self.batch_size = num(&key, value)?,
            "steps" => self.steps = num(&key, value)?,
            "warmup" => self.warmup = num(&key, value)?,
            "lr_body" => self.lr_body = num(&key, value)?,
            "lr_text" => self.lr_text = num(&key, value)?,
            "eval_interval" => self.eval_interval = num(&key, value)?,
            "m" => self.m = num(&key, value)?,
            "k" => self.k = num(&key, value)?,
            "rebalance" => self.rebalance = num(&key, value)?,
            "shared_projection" => self.model.shared_projection = num(&key, value)?,
            "side" => self.model.encoder.side = num(&key, value)?,
            "patch" => self.model.encoder.patch = num(&key, value)?,
            "dim" => self.model.encoder.dim = num(&key, value)?,
            "layers" => self.model.encoder.layers = num(&key, value)?,
            "heads" => self.model.encoder.heads = num(&key, value)?,
            "mlp_ratio" => self.model.encoder.mlp_ratio = num(&key, value)?,
            "datasets" => {
                self.datasets =
                    value.split(',').map(|s| PathBuf::from(s.trim())).collect();
            }
            "mixture" => {
                self.mixture = value
                    .split(',')
                    .map(|s| num("mixture", s))
                    .collect::<Result<Vec<f64>>>()?;
            }
            other => return Err(Error::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Reads a flat `key = value` file; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = TrainConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(
                    format!("{}:{}", path.display(), no + 1),
                    format!("expected key = value, got {raw:?}"),
                ));
            };
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::Usage(format!("{}:{}: {e}", path.display(), no + 1)))?;
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Usage("batch_size must be at least 1".into()));
        }
        if self.steps > 0 {
            if self.eval_interval == 0 || self.steps % self.eval_interval != 0 {
                return Err(Error::Usage(format!(
                    "eval_interval {} must divide total steps {}",
                    self.eval_interval, self.steps
                )));
            }
            if self.warmup >= self.steps {
                return Err(Error::Usage(format!(
                    "warmup {} must be shorter than total steps {}",
                    self.warmup, self.steps
                )));
            }
        }
        let n = self.model.encoder.num_tokens();
        if self.m < 1 || self.m > n {
            return Err(Error::Usage(format!("m {} out of range 1..={n}", self.m)));
        }
        if self.k > self.m * (self.m - 1) {
            return Err(Error::Usage(format!(
                "k {} exceeds m(m-1) = {}",
                self.k,
                self.m * (self.m - 1)
            )));
        }
        if !(self.lr_body.is_finite() && self.lr_body >= 0.0)
            || !(self.lr_text.is_finite() && self.lr_text >= 0.0)
        {
            return Err(Error::Usage("learning rates must be finite and >= 0".into()));
        }
        if self.datasets.is_empty() {
            return Err(Error::Usage("at least one dataset is required".into()));
        }
        if self.datasets.len() != self.mixture.len() {
            return Err(Error::Usage(format!(
                "{} datasets but {} mixture weights",
                self.datasets.len(),
                self.mixture.len()
            )));
        }
        let sum: f64 = self.mixture.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Usage(format!("mixture weights must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// One optimizer update on a prepared batch. Advances `state.step` and
/// stores the batch-mean loss report.
pub fn train_step(
    state: &mut TrainState,
    batch: &[AnnotatedExample],
    labels: &LabelSpace,
    config: &TrainConfig,
    lr_body: f64,
    lr_text: f64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Contract("train_step needs a non-empty batch".into()));
    }
    let mut accum = GradAccum::zeros_like(&state.model.store);
    let mut sum = LossReport { cls: 0.0, l1: 0.0, giou: 0.0, score: 0.0, total: 0.0 };
    for example in batch {
        let (mut fwd, parts, _) =
            state.model.training_loss(example, labels, config.m, config.k)?;
        let grads = fwd.tape.backward(parts.total)?;
        accum.accumulate(&fwd.tape, &grads);
        let report = parts.report(&fwd.tape);
        sum.cls += report.cls;
        sum.l1 += report.l1;
        sum.giou += report.giou;
        sum.score += report.score;
        sum.total += report.total;
    }
    accum.scale(1.0 / batch.len() as f32);
    state.adam.step(&mut state.model.store, &accum, lr_body, lr_text)?;
    let n = batch.len() as f64;
    let mean = LossReport {
        cls: sum.cls / n,
        l1: sum.l1 / n,
        giou: sum.giou / n,
        score: sum.score / n,
        total: sum.total / n,
    };
    state.step += 1;
    state.last_loss = Some(mean);
    Ok(mean)
}

fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(format!("checkpoint-{step}.bin"))
}

fn format_loss_row(step: usize, r: &LossReport, lr: f64) -> String {
    format!("{step},{},{},{},{},{},{lr}\n", r.cls, r.l1, r.giou, r.score, r.total)
}

/// Keeps the CSV header plus the first `rows` data rows; used when resuming
/// so re-run steps are not duplicated.
fn truncate_csv(path: &Path, rows: usize) -> Result<()> {
    if !path.exists() {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(b"step,cls,l1,giou,score,total,lr\n").map_err(|e| Error::io(path, e))?;
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let keep: Vec<&str> = text.lines().take(1 + rows).collect();
    let mut out = keep.join("\n");
    out.push('\n');
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Runs (or resumes) a full training job. Writes `loss.csv` and
/// `checkpoint-{step}.bin` files into `out_dir` and returns the final
/// state. With `resume`, the state is restored from that checkpoint and the
/// loop continues at its step; the CSV is truncated to match.
pub fn train(config: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainState> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let datasets: Vec<Dataset> =
        config.datasets.iter().map(|p| Dataset::load(p)).collect::<Result<_>>()?;
    let frequencies: Option<Vec<[f64; 8]>> = if config.rebalance {
        Some(datasets.iter().map(|d| d.predicate_frequencies()).collect::<Result<_>>()?)
    } else {
        None
    };
    let labels = synthetic_labels()?;

    let mut state = match resume {
        Some(path) => {
            let state = checkpoint::load(path)?;
            if state.model.config != config.model {
                return Err(Error::Usage(format!(
                    "checkpoint model config {:?} does not match training config {:?}",
                    state.model.config, config.model
                )));
            }
            state
        }
        None => TrainState::fresh(config.model, config.seed)?,
    };
    if state.step > config.steps {
        return Err(Error::Usage(format!(
            "checkpoint is at step {} but the run ends at {}",
            state.step, config.steps
        )));
    }

    let csv_path = out_dir.join("loss.csv");
    truncate_csv(&csv_path, state.step)?;
    let mut csv = fs::OpenOptions::new()
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::io(&csv_path, e))?;

    if state.step == 0 {
        checkpoint::save(&checkpoint_path(out_dir, 0), &state)?;
    }

    let side = config.model.encoder.side;
    while state.step < config.steps {
        let step = state.step;
        let lr_body = cosine_lr(step, config.steps, config.warmup, config.lr_body)?;
        let lr_text = cosine_lr(step, config.steps, config.warmup, config.lr_text)?;

        let handles =
            sample_batch(&datasets, &config.mixture, config.batch_size, &mut state.rng)?;
        let mut batch = Vec::with_capacity(handles.len());
        for (d, i) in handles {
            let mut example = augment(&datasets[d].example(i, side), &mut state.rng);
            if let Some(freqs) = &frequencies {
                example = drop_triplets(&example, &freqs[d], &mut state.rng);
            }
            batch.push(example);
        }

        let report = train_step(&mut state, &batch, &labels, config, lr_body, lr_text)?;
        csv.write_all(format_loss_row(state.step, &report, lr_body).as_bytes())
            .map_err(|e| Error::io(&csv_path, e))?;

        if state.step % config.eval_interval == 0 {
            csv.flush().map_err(|e| Error::io(&csv_path, e))?;
            checkpoint::save(&checkpoint_path(out_dir, state.step), &state)?;
        }
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(state)
}
