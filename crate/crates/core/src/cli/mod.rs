//! Command-line front end. Every subcommand reads a [`RunConfig`] assembled
//! from defaults, an optional config file, `--set key=value` overrides and
//! the dedicated flags, in that order.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration error, 3 data
//! error, 4 numeric failure, 5 verification failure, 6 checkpoint or config
//! shape mismatch.

mod config;

pub use config::{RunConfig, RESOLVED_CONFIG};

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::episodes::{
    generate_synthetic, load_dataset, load_image, write_dataset, ChannelStats, Dataset, Split,
};
use crate::error::{CheckpointError, Error, Result};
use crate::eval::{classify_query, evaluate};
use crate::model::{ModelConfig, ObjectGrid, ParamGroup};
use crate::tensor::gradcheck::{TensorCheck, DEFAULT_STEP};
use crate::tensor::BackwardFault;
use crate::train::{
    check_episode_gradients, train_loop, Checkpoint, BEST_CHECKPOINT, LATEST_CHECKPOINT,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_VERIFICATION: i32 = 5;
pub const EXIT_SHAPE_MISMATCH: i32 = 6;

pub const EVAL_CSV: &str = "eval.csv";
pub const SWEEP_CSV: &str = "sweep_d.csv";
/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "objrel", version, about = "Object-level relation networks for few-shot classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// key = value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Evaluation worker threads; 1 gives bit-reproducible scheduling.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on `data_root`, writing checkpoints and metrics to `out`.
    Train {
        /// Continue from `<out>/latest.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint over `eval_episodes` episodes.
    Eval {
        /// Defaults to `<out>/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Classify query images against a support directory.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// One subdirectory of images per class, equal counts.
        #[arg(long)]
        support: PathBuf,
        queries: Vec<PathBuf>,
    },
    /// Train and evaluate once per object-grid size.
    SweepD {
        #[arg(long, value_delimiter = ',', required = true)]
        d_values: Vec<usize>,
    },
    /// Finite-difference check of every parameter gradient on a micro model.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write the synthetic dataset to `out` in the directory layout.
    Synth {
        /// Replace a non-empty `out` directory.
        #[arg(long)]
        force: bool,
    },
}

impl Cli {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Image { .. } | Error::Io { .. } => EXIT_DATA,
        Error::Checkpoint(CheckpointError::ShapeMismatch { .. }) => EXIT_SHAPE_MISMATCH,
        Error::Checkpoint(_) => EXIT_DATA,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Verification(_) => EXIT_VERIFICATION,
        Error::Shape { .. } | Error::EmptyInput { .. } | Error::Logic(_) => EXIT_INTERNAL,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Results go to `stdout`, diagnostics to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli, stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> Result<()> {
    let cfg = cli.resolve()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} threads: {e}", cfg.threads)))?;
    pool.install(|| match &cli.command {
        Command::Train { resume } => cmd_train(&cfg, *resume, stdout, stderr),
        Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint.as_deref(), stdout),
        Command::Predict {
            checkpoint,
            support,
            queries,
        } => cmd_predict(&cfg, checkpoint.as_deref(), support, queries, stdout),
        Command::SweepD { d_values } => cmd_sweep_d(&cfg, d_values, stdout, stderr),
        Command::Gradcheck { inject_fault } => cmd_gradcheck(
            &cfg,
            inject_fault.then_some(BackwardFault::ReluPassThrough),
            stdout,
        ),
        Command::Synth { force } => cmd_synth(&cfg, *force, stdout),
    })
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Adds rotated classes when configured; the training split's channel
/// statistics are computed after rotation.
fn augment(cfg: &RunConfig, ds: Dataset) -> Result<Dataset> {
    if cfg.rotations.is_empty() {
        return Err(Error::Config("`rotations` must list at least one angle".into()));
    }
    if cfg.rotations == [crate::episodes::Rotation::R0] {
        Ok(ds)
    } else {
        ds.with_rotation_classes(&cfg.rotations)
    }
}

fn standardize(ds: Dataset, stats: Option<&ChannelStats>) -> Result<Dataset> {
    match stats {
        Some(s) => ds.standardized(s),
        None => Ok(ds),
    }
}

/// The configured dataset, or the synthetic one when `data_root` is unset.
fn dataset_or_synthetic(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_root {
        Some(root) => load_dataset(root, &cfg.manifest_path()?, cfg.input_size, cfg.channels),
        None => synthetic(cfg),
    }
}

fn synthetic(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.synth_size != cfg.input_size || cfg.channels != 1 {
        return Err(Error::Config(format!(
            "synthetic images are {0}×{0}×1 but the model expects {1}×{1}×{2}; set synth_size and channels to match",
            cfg.synth_size, cfg.input_size, cfg.channels
        )));
    }
    generate_synthetic(cfg.synth_classes, cfg.synth_images, cfg.synth_size, cfg.seed)?.assign_splits(
        cfg.synth_train,
        cfg.synth_val,
        cfg.synth_test,
    )
}

/// Augments and standardizes, returning the statistics that were applied.
fn prepare(cfg: &RunConfig, ds: Dataset) -> Result<(Dataset, Option<ChannelStats>)> {
    let ds = augment(cfg, ds)?;
    let stats = if cfg.standardize {
        Some(ds.training_stats()?)
    } else {
        None
    };
    let ds = standardize(ds, stats.as_ref())?;
    Ok((ds, stats))
}

fn validation_split<'a>(cfg: &RunConfig, val: &'a Dataset, stderr: &mut (dyn Write + Send)) -> Option<&'a Dataset> {
    if cfg.eval_every == 0 {
        return None;
    }
    if val.len() < cfg.n_way {
        let _ = writeln!(
            stderr,
            "warning: validation split has {} classes, fewer than n_way={}; validation is skipped",
            val.len(),
            cfg.n_way
        );
        return None;
    }
    Some(val)
}

pub fn cmd_train(
    cfg: &RunConfig,
    resume: bool,
    stdout: &mut (dyn Write + Send),
    stderr: &mut (dyn Write + Send),
) -> Result<()> {
    let root = cfg.require_data_root()?;
    let model_cfg = cfg.model_config()?;
    let raw = load_dataset(root, &cfg.manifest_path()?, cfg.input_size, cfg.channels)?;
    let (ds, stats) = prepare(cfg, raw)?;
    let train = ds.split(Split::Train);
    let val = ds.split(Split::Val);
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_file(&cfg.out.join(RESOLVED_CONFIG), &cfg.render())?;

    let tc = cfg.train_config(Some(cfg.out.clone()));
    let start = if resume {
        let cp = Checkpoint::load_expecting(&cfg.out.join(LATEST_CHECKPOINT), &model_cfg)?;
        if cp.stats != stats {
            return Err(Error::Config(
                "checkpoint standardization differs from this dataset and config".into(),
            ));
        }
        cp
    } else {
        Checkpoint::fresh(model_cfg, cfg.seed, tc.adam(), stats)?
    };
    let val = validation_split(cfg, &val, stderr);
    let mut echo_err = None;
    let outcome = train_loop(&tc, start, &train, val, &mut |r| {
        if r.val.is_some() {
            if let Err(e) = writeln!(stdout, "{}", r.log_line()) {
                echo_err = Some(e);
            }
        }
        ControlFlow::Continue(())
    })?;
    if let Some(e) = echo_err {
        return Err(out_err(e));
    }
    let last = outcome.records.last();
    writeln!(
        stdout,
        "trained episodes={} final_loss={} best_val={}",
        outcome.latest.episode,
        last.map_or_else(|| "n/a".to_string(), |r| format!("{:.6}", r.loss)),
        outcome
            .latest
            .best_val
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}")),
    )
    .map_err(out_err)
}

fn load_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> Result<(Checkpoint, ModelConfig)> {
    let model_cfg = cfg.model_config()?;
    let path = path.map_or_else(|| cfg.out.join(BEST_CHECKPOINT), Path::to_path_buf);
    let cp = Checkpoint::load_expecting(&path, &model_cfg)?;
    Ok((cp, model_cfg))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, stdout: &mut (dyn Write + Send)) -> Result<()> {
    let root = cfg.require_data_root()?;
    let (cp, _) = load_checkpoint(cfg, checkpoint)?;
    let raw = load_dataset(root, &cfg.manifest_path()?, cfg.input_size, cfg.channels)?;
    let ds = standardize(augment(cfg, raw)?, cp.stats.as_ref())?;
    let split = ds.split(cfg.eval_split);
    let report = evaluate(&split, &cp.model, &cfg.eval_settings())?;
    write_file(&cfg.out.join(EVAL_CSV), &report.to_csv())?;
    writeln!(stdout, "{}", report.summary()).map_err(out_err)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && crate::episodes::is_png(p))
        .collect();
    files.sort();
    Ok(files)
}

pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    support: &Path,
    queries: &[PathBuf],
    stdout: &mut (dyn Write + Send),
) -> Result<()> {
    let (cp, model_cfg) = load_checkpoint(cfg, checkpoint)?;
    let mut classes: Vec<(String, Vec<PathBuf>)> = Vec::new();
    for entry in fs::read_dir(support).map_err(|e| Error::io(support, e))? {
        let entry = entry.map_err(|e| Error::io(support, e))?;
        if entry.path().is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            classes.push((name, image_files(&entry.path())?));
        }
    }
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Data(format!(
            "support directory {} has no class subdirectories",
            support.display()
        )));
    }
    let counts: Vec<usize> = classes.iter().map(|(_, f)| f.len()).collect();
    if counts[0] == 0 || counts.iter().any(|&n| n != counts[0]) {
        let detail: Vec<String> = classes
            .iter()
            .map(|(n, f)| format!("{n}={}", f.len()))
            .collect();
        return Err(Error::Data(format!(
            "support classes need the same nonzero number of images, found {}",
            detail.join(", ")
        )));
    }

    let load = |path: &Path| -> Result<crate::Tensor> {
        let img = load_image(path, model_cfg.input_size, model_cfg.channels)?;
        match &cp.stats {
            Some(s) => s.apply(&img),
            None => Ok(img),
        }
    };
    let mut scorer = cp.model.scorer()?;
    let mut reps = Vec::with_capacity(classes.len());
    for (i, (_, files)) in classes.iter().enumerate() {
        let grids = files
            .iter()
            .map(|f| scorer.embed(&load(f)?))
            .collect::<Result<Vec<_>>>()?;
        reps.push((i, ObjectGrid::average(&grids)?));
    }
    for q in queries {
        let grid = scorer.embed(&load(q)?)?;
        let p = classify_query(&mut scorer, &reps, &grid)?;
        let scores: Vec<String> = p.scores.iter().map(|s| format!("{s:.6}")).collect();
        writeln!(
            stdout,
            "{}\t{}\t{}",
            q.display(),
            classes[p.class].0,
            scores.join(",")
        )
        .map_err(out_err)?;
    }
    Ok(())
}

/// One row of the d sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub d: usize,
    /// Accuracy and 95% half-width; `None` when `d` was skipped.
    pub result: Option<(f64, f64)>,
    pub note: String,
}

impl SweepRow {
    pub fn csv(&self) -> String {
        match self.result {
            Some((acc, ci)) => format!("{},{acc},{ci},{}", self.d, self.note),
            None => format!("{},,,{}", self.d, self.note.replace(',', ";")),
        }
    }
}

/// Trains a fresh model per `d` and evaluates it on the configured split.
pub fn sweep_d(cfg: &RunConfig, d_values: &[usize], stderr: &mut (dyn Write + Send)) -> Result<Vec<SweepRow>> {
    if d_values.is_empty() {
        return Err(Error::Config("`--d-values` is empty".into()));
    }
    let (ds, stats) = prepare(cfg, dataset_or_synthetic(cfg)?)?;
    let train = ds.split(Split::Train);
    let val = ds.split(Split::Val);
    let test = ds.split(cfg.eval_split);
    let val = validation_split(cfg, &val, stderr);
    let mut rows = Vec::with_capacity(d_values.len());
    for &d in d_values {
        let run = RunConfig { d, ..cfg.clone() };
        let model_cfg = match run.model_config() {
            Ok(m) => m,
            Err(Error::Config(why)) => {
                let _ = writeln!(stderr, "warning: skipping d={d}: {why}");
                rows.push(SweepRow {
                    d,
                    result: None,
                    note: format!("skipped: {why}"),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let tc = run.train_config(None);
        let start = Checkpoint::fresh(model_cfg, run.seed, tc.adam(), stats.clone())?;
        let outcome = train_loop(&tc, start, &train, val, &mut |_| ControlFlow::Continue(()))?;
        let report = evaluate(&test, &outcome.best.model, &run.eval_settings())?;
        rows.push(SweepRow {
            d,
            result: Some((report.mean_accuracy, report.ci95_halfwidth)),
            note: String::new(),
        });
    }
    Ok(rows)
}

pub fn cmd_sweep_d(
    cfg: &RunConfig,
    d_values: &[usize],
    stdout: &mut (dyn Write + Send),
    stderr: &mut (dyn Write + Send),
) -> Result<()> {
    let rows = sweep_d(cfg, d_values, stderr)?;
    let mut csv = String::from("d,accuracy,ci95,note\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    write_file(&cfg.out.join(SWEEP_CSV), &csv)?;
    stdout.write_all(csv.as_bytes()).map_err(out_err)
}

/// Per-group summary of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub tensors: usize,
    pub scalars: usize,
    pub max_relative_error: f64,
    pub refined: usize,
    pub at_kink: usize,
}

/// Micro model: 16×16 inputs, d=2, c=8, on a 2-way 1-shot synthetic episode.
pub fn gradcheck(seed: u64, fault: Option<BackwardFault>) -> Result<Vec<GroupCheck>> {
    let config = ModelConfig::desk(16, 2, 8)?;
    let model = crate::Model::init(config, seed)?;
    // Standardized like training inputs; raw blank pixels with zero biases
    // put ReLU inputs exactly on the kink.
    let ds = generate_synthetic(2, 2, 16, seed)?;
    let ds = ds.standardized(&ds.training_stats()?)?;
    let episode = crate::episodes::sample_episode(&ds, 2, 1, 1, seed)?;
    let checks = check_episode_gradients(&model, &episode, DEFAULT_STEP, fault)?;
    Ok(group_checks(&checks))
}

pub fn group_checks(checks: &[TensorCheck]) -> Vec<GroupCheck> {
    let mut out: Vec<GroupCheck> = Vec::new();
    for c in checks {
        let group = ParamGroup::of(&c.name).expect("model parameters carry a group prefix");
        match out.iter_mut().find(|g| g.group == group) {
            Some(g) => {
                g.tensors += 1;
                g.scalars += c.elements;
                g.max_relative_error = g.max_relative_error.max(c.max_relative_error);
                g.refined += c.refined;
                g.at_kink += c.at_kink;
            }
            None => out.push(GroupCheck {
                group,
                tensors: 1,
                scalars: c.elements,
                max_relative_error: c.max_relative_error,
                refined: c.refined,
                at_kink: c.at_kink,
            }),
        }
    }
    out.sort_by_key(|g| g.group);
    out
}

pub fn cmd_gradcheck(cfg: &RunConfig, fault: Option<BackwardFault>, stdout: &mut (dyn Write + Send)) -> Result<()> {
    let groups = gradcheck(cfg.seed, fault)?;
    let mut failed = Vec::new();
    for g in &groups {
        let ok = g.max_relative_error < GRADCHECK_TOLERANCE;
        writeln!(
            stdout,
            "group={} tensors={} scalars={} max_rel_err={:.3e} refined={} at_kink={} {}",
            g.group.label(),
            g.tensors,
            g.scalars,
            g.max_relative_error,
            g.refined,
            g.at_kink,
            if ok { "ok" } else { "FAIL" }
        )
        .map_err(out_err)?;
        if !ok {
            failed.push(g.group.label());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "gradient check exceeded {GRADCHECK_TOLERANCE:e} in {}",
            failed.join(", ")
        )))
    }
}

pub fn cmd_synth(cfg: &RunConfig, force: bool, stdout: &mut (dyn Write + Send)) -> Result<()> {
    let target = &cfg.out;
    if target.exists() {
        let occupied = fs::read_dir(target)
            .map_err(|e| Error::io(target, e))?
            .next()
            .is_some();
        if occupied {
            if !force {
                return Err(Error::Config(format!(
                    "{} is not empty; pass --force to replace it",
                    target.display()
                )));
            }
            fs::remove_dir_all(target).map_err(|e| Error::io(target, e))?;
        }
    }
    let ds = generate_synthetic(cfg.synth_classes, cfg.synth_images, cfg.synth_size, cfg.seed)?
        .assign_splits(cfg.synth_train, cfg.synth_val, cfg.synth_test)?;
    let written = write_dataset(&ds, target)?;
    writeln!(
        stdout,
        "wrote {written} images in {} classes to {}",
        ds.len(),
        target.display()
    )
    .map_err(out_err)
}
