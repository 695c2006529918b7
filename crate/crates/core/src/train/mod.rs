//! Episodic training: every query is scored against every class
//! representative, the scores are fitted to same-class targets with binary
//! cross-entropy, and Adam takes one step per episode.

mod checkpoint;

pub use checkpoint::{Checkpoint, RngState, FORMAT_VERSION, MAGIC};

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::episodes::{sample_episode, Dataset, Episode};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSettings, ShotAggregation};
use crate::model::{average_support, Bound, GridVar, Model, ModelParams};
use crate::tensor::gradcheck::{check_piecewise_gradients, TensorCheck};
use crate::tensor::{kernels, AdamConfig, AdamState, BackwardFault, Graph, Tensor, Var};

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_LOG: &str = "metrics.log";
const CSV_HEADER: &str = "episode,loss,positives,negatives,val_acc,val_ci";
/// Mixed into the run seed so validation episodes differ from training ones
/// but stay fixed across evaluations.
const VAL_SEED_SALT: u64 = 0x5eed_0f_7a1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    /// Query images per class in each training episode.
    pub q_queries: usize,
    pub episodes_total: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Validate and write `latest.ckpt` every this many episodes; 0 disables.
    pub eval_every: u64,
    pub val_episodes: usize,
    pub val_q_queries: usize,
    pub seed: u64,
    /// Where checkpoints and metrics go. `None` keeps everything in memory.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            n_way: 5,
            k_shot: 1,
            q_queries: 5,
            episodes_total: 2000,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            eval_every: 200,
            val_episodes: 100,
            val_q_queries: 5,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot == 0 || self.q_queries == 0 {
            return Err(Error::Config(format!(
                "training episodes need n_way ≥ 2, k_shot ≥ 1 and q_queries ≥ 1, got {}/{}/{}",
                self.n_way, self.k_shot, self.q_queries
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("adam epsilon must be positive".into()));
        }
        if self.eval_every > 0 && (self.val_episodes == 0 || self.val_q_queries == 0) {
            return Err(Error::Config(
                "validation needs val_episodes ≥ 1 and val_q_queries ≥ 1".into(),
            ));
        }
        Ok(())
    }

    fn val_settings(&self) -> EvalSettings {
        EvalSettings {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_queries: self.val_q_queries,
            episodes: self.val_episodes,
            seed: self.seed ^ VAL_SEED_SALT,
            aggregation: ShotAggregation::MeanRepresentation,
        }
    }
}

/// Mean binary cross-entropy of `(score, target)` pairs.
pub fn pairwise_loss(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput { op: "pairwise_loss" });
    }
    let mut g = Graph::new();
    let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let targets: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let s = g.constant(Tensor::vector(&scores));
    let loss = g.bce(s, &targets)?;
    Ok(g.value(loss).item())
}

/// Records every query-vs-class score of `episode` on `g`, before the final
/// sigmoid. Returns the stacked logits and their 0/1 targets, query-major.
pub fn score_episode(
    model: &Model,
    g: &mut Graph,
    b: &Bound,
    episode: &Episode,
) -> Result<(Var, Vec<f64>)> {
    let embed = |g: &mut Graph, image: &Tensor| -> Result<GridVar> {
        let x = g.constant(image.clone());
        model.extract_objects(g, b, x)
    };
    let mut reps = Vec::with_capacity(episode.n_way);
    for label in 0..episode.n_way {
        let grids = episode
            .shots(label)
            .iter()
            .map(|item| embed(g, &item.image))
            .collect::<Result<Vec<_>>>()?;
        reps.push(average_support(g, &grids)?);
    }
    let mut scores = Vec::with_capacity(episode.query.len() * reps.len());
    let mut targets = Vec::with_capacity(scores.capacity());
    for item in &episode.query {
        let q = embed(g, &item.image)?;
        for (label, rep) in reps.iter().enumerate() {
            scores.push(model.score_logit(g, b, rep, &q)?);
            targets.push(if label == item.label { 1.0 } else { 0.0 });
        }
    }
    Ok((g.stack(&scores)?, targets))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub positives: usize,
    pub negatives: usize,
    pub score_min: f64,
    pub score_max: f64,
}

/// Loss of `model` on `episode` without touching parameters.
pub fn episode_loss(model: &Model, episode: &Episode) -> Result<f64> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false)?;
    let (logits, targets) = score_episode(model, &mut g, &b, episode)?;
    let loss = g.bce_with_logits(logits, &targets)?;
    Ok(g.value(loss).item())
}

/// One forward/backward pass over the whole episode followed by one Adam
/// update. A non-finite loss aborts before any parameter changes.
pub fn train_step(model: &mut Model, adam: &mut AdamState, episode: &Episode) -> Result<StepStats> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, true)?;
    let (logits, targets) = score_episode(model, &mut g, &b, episode)?;
    let (score_min, score_max) = g
        .value(logits)
        .data()
        .iter()
        .map(|&z| kernels::sigmoid(z))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)));
    let loss = g.bce_with_logits(logits, &targets)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?.into_named();
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient for `{name}`; scores span [{score_min:e}, {score_max:e}]"
        )));
    }
    adam.step(model.params_mut().as_map_mut(), &grads)?;
    let positives = targets.iter().filter(|&&y| y == 1.0).count();
    Ok(StepStats {
        loss: value,
        positives,
        negatives: targets.len() - positives,
        score_min,
        score_max,
    })
}

/// Compares backpropagated gradients of the episode's scores against central
/// finite differences for every parameter. The probed objective is the
/// mean of `(1 − 2y)·s` over query/class scores `s`, linear in the scores
/// so that saturated scores do not drown the differences in round-off the
/// way `ln(1 − s)` does. Probes that would cross a ReLU or max-pool kink are
/// refined; see [`check_piecewise_gradients`]. `fault` corrupts the analytic
/// pass only.
pub fn check_episode_gradients(
    model: &Model,
    episode: &Episode,
    step: f64,
    fault: Option<BackwardFault>,
) -> Result<Vec<TensorCheck>> {
    let loss_of = |g: &mut Graph, m: &Model, trainable: bool| -> Result<Var> {
        let b = m.bind(g, trainable)?;
        let (logits, targets) = score_episode(m, g, &b, episode)?;
        let scores = g.sigmoid(logits);
        let n = targets.len() as f64;
        let signs: Vec<f64> = targets.iter().map(|y| (1.0 - 2.0 * y) / n).collect();
        let signs = g.constant(Tensor::vector(&signs));
        let column = g.reshape(scores, &[targets.len(), 1])?;
        g.matmul(signs, column)
    };
    let mut g = Graph::new();
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let loss = loss_of(&mut g, model, true)?;
    let analytic = g.backward(loss)?.into_named();
    let config = model.config().clone();
    check_piecewise_gradients(model.params().as_map(), &analytic, step, |p| {
        let m = Model::from_parts(config.clone(), ModelParams::from_map(p.clone()))?;
        let mut g = Graph::new();
        let loss = loss_of(&mut g, &m, false)?;
        Ok((g.value(loss).item(), g.branch_pattern()))
    })
}

/// One metrics record per training episode.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub episode: u64,
    pub loss: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Validation accuracy and 95% half-width, on evaluation episodes.
    pub val: Option<(f64, f64)>,
}

impl StepRecord {
    /// `episode=<int> loss=<float> [val_acc=<float> val_ci=<float>]`.
    pub fn log_line(&self) -> String {
        let mut s = format!("episode={} loss={:.6}", self.episode, self.loss);
        if let Some((acc, ci)) = self.val {
            s.push_str(&format!(" val_acc={acc:.6} val_ci={ci:.6}"));
        }
        s
    }

    pub fn csv_row(&self) -> String {
        let (acc, ci) = match self.val {
            Some((a, c)) => (a.to_string(), c.to_string()),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{acc},{ci}",
            self.episode, self.loss, self.positives, self.negatives
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub latest: Checkpoint,
    /// Highest validation accuracy seen; the final state when no validation
    /// ran.
    pub best: Checkpoint,
    /// Records produced by this call, not including any before a resume.
    pub records: Vec<StepRecord>,
    /// True when `on_step` stopped the run early.
    pub interrupted: bool,
}

/// Trains from `start` until `config.episodes_total` episodes are complete.
///
/// With a checkpoint directory, metrics go to `metrics.csv` and
/// `metrics.log`, and `latest.ckpt`/`best.ckpt` are written at every
/// validation point and at the end. A `start` past episode 0 is treated as a
/// resume: metrics rows after `start.episode` are dropped before appending.
/// `on_step` sees every record after it is written; `Break` stops at once
/// without a final save, as an interruption would.
pub fn train_loop(
    config: &TrainConfig,
    start: Checkpoint,
    train: &Dataset,
    val: Option<&Dataset>,
    on_step: &mut dyn FnMut(&StepRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let dir = config.checkpoint_dir.as_deref();
    let mut sink = match dir {
        Some(d) => Some(MetricsSink::open(d, start.episode)?),
        None => None,
    };
    let mut best = match dir.map(|d| d.join(BEST_CHECKPOINT)) {
        Some(p) if start.episode > 0 && p.exists() => Some(Checkpoint::load(&p)?),
        _ => None,
    };
    let mut cp = start;
    let mut rng = cp.rng.restore();
    let mut records = Vec::new();

    while cp.episode < config.episodes_total {
        let seed: u64 = rng.random();
        let episode = sample_episode(train, config.n_way, config.k_shot, config.q_queries, seed)?;
        let stats = train_step(&mut cp.model, &mut cp.adam, &episode)?;
        cp.episode += 1;
        cp.rng = RngState::capture(&rng);

        let checkpoint_now = config.eval_every > 0 && cp.episode % config.eval_every == 0;
        let mut record = StepRecord {
            episode: cp.episode,
            loss: stats.loss,
            positives: stats.positives,
            negatives: stats.negatives,
            val: None,
        };
        if let (true, Some(val)) = (checkpoint_now, val) {
            let report = evaluate(val, &cp.model, &config.val_settings())?;
            record.val = Some((report.mean_accuracy, report.ci95_halfwidth));
            if cp.best_val.is_none_or(|b| report.mean_accuracy > b) {
                cp.best_val = Some(report.mean_accuracy);
                if let Some(d) = dir {
                    cp.save(&d.join(BEST_CHECKPOINT))?;
                }
                best = Some(cp.clone());
            }
        }
        if let Some(s) = sink.as_mut() {
            s.write(&record)?;
        }
        if let (true, Some(d)) = (checkpoint_now, dir) {
            cp.save(&d.join(LATEST_CHECKPOINT))?;
        }
        records.push(record);
        if on_step(records.last().expect("just pushed")).is_break() {
            let best = best.unwrap_or_else(|| cp.clone());
            return Ok(TrainOutcome {
                latest: cp,
                best,
                records,
                interrupted: true,
            });
        }
    }

    let best = best.unwrap_or_else(|| cp.clone());
    if let Some(d) = dir {
        cp.save(&d.join(LATEST_CHECKPOINT))?;
        if cp.best_val.is_none() {
            best.save(&d.join(BEST_CHECKPOINT))?;
        }
    }
    Ok(TrainOutcome {
        latest: cp,
        best,
        records,
        interrupted: false,
    })
}

struct MetricsSink {
    csv: File,
    log: File,
}

impl MetricsSink {
    /// Opens both metrics files for appending, first discarding any record
    /// past episode `keep_through`.
    fn open(dir: &Path, keep_through: u64) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(METRICS_CSV);
        let log_path = dir.join(METRICS_LOG);
        let episode_of_csv = |line: &str| line.split(',').next().and_then(|f| f.parse::<u64>().ok());
        let episode_of_log = |line: &str| {
            line.strip_prefix("episode=")
                .and_then(|r| r.split(' ').next())
                .and_then(|f| f.parse::<u64>().ok())
        };
        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        let mut log = String::new();
        if keep_through > 0 {
            let keep = |path: &Path, episode_of: &dyn Fn(&str) -> Option<u64>, out: &mut String| {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                for line in text.lines() {
                    if episode_of(line).is_some_and(|e| e <= keep_through) {
                        out.push_str(line);
                        out.push('\n');
                    }
                }
                Ok::<_, Error>(())
            };
            keep(&csv_path, &episode_of_csv, &mut csv)?;
            keep(&log_path, &episode_of_log, &mut log)?;
        }
        fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
        fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
        let append = |p: &Path| {
            OpenOptions::new()
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))
        };
        Ok(Self {
            csv: append(&csv_path)?,
            log: append(&log_path)?,
        })
    }

    fn write(&mut self, record: &StepRecord) -> Result<()> {
        writeln!(self.csv, "{}", record.csv_row()).map_err(|e| Error::io(METRICS_CSV, e))?;
        writeln!(self.log, "{}", record.log_line()).map_err(|e| Error::io(METRICS_LOG, e))
    }
}
