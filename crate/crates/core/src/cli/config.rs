//! Run configuration: one flat `key = value` file covering data, model,
//! training, evaluation and augmentation. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::episodes::{Rotation, Split, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::eval::{EvalSettings, ShotAggregation};
use crate::model::{
    desk_stack, format_stack, format_widths, parse_stack, parse_widths, CombinationRule, LayerSpec,
    ModelConfig,
};
use crate::train::TrainConfig;

pub const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: Option<PathBuf>,
    /// Defaults to `<data_root>/manifest.tsv`.
    pub manifest: Option<PathBuf>,

    pub input_size: usize,
    pub channels: usize,
    pub d: usize,
    pub c: usize,
    /// `None` derives the two-block desk stack from `input_size`, `d` and `c`.
    pub feature_stack: Option<Vec<LayerSpec>>,
    pub relation_hidden: Vec<usize>,
    pub relation_out: usize,
    pub similarity_hidden: Vec<usize>,
    pub combination: CombinationRule,

    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub episodes: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub eval_every: u64,
    pub val_episodes: usize,
    pub val_q_queries: usize,

    pub eval_episodes: usize,
    pub eval_q_queries: usize,
    pub eval_split: Split,
    pub shot_aggregation: ShotAggregation,

    pub rotations: Vec<Rotation>,
    pub standardize: bool,

    pub synth_classes: usize,
    pub synth_images: usize,
    pub synth_size: usize,
    pub synth_train: usize,
    pub synth_val: usize,
    pub synth_test: usize,

    pub seed: u64,
    /// Worker threads for evaluation; 0 uses every core.
    pub threads: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let e = EvalSettings::default();
        Self {
            data_root: None,
            manifest: None,
            input_size: 16,
            channels: 1,
            d: 2,
            c: 8,
            feature_stack: None,
            relation_hidden: vec![32, 32],
            relation_out: 32,
            similarity_hidden: vec![16],
            combination: CombinationRule::AllPairs,
            n_way: t.n_way,
            k_shot: t.k_shot,
            q_queries: t.q_queries,
            episodes: t.episodes_total,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            eval_every: t.eval_every,
            val_episodes: t.val_episodes,
            val_q_queries: t.val_q_queries,
            eval_episodes: e.episodes,
            eval_q_queries: e.q_queries,
            eval_split: Split::Test,
            shot_aggregation: e.aggregation,
            rotations: Rotation::ALL.to_vec(),
            standardize: true,
            synth_classes: 10,
            synth_images: 20,
            synth_size: 16,
            synth_train: 6,
            synth_val: 2,
            synth_test: 2,
            seed: 0,
            threads: 0,
            out: PathBuf::from("runs"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` = `{value}` is not a valid number")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` = `{value}` is not a boolean"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub const KEYS: [&'static str; 37] = [
        "data_root",
        "manifest",
        "input_size",
        "channels",
        "d",
        "c",
        "feature_stack",
        "relation_hidden",
        "relation_out",
        "similarity_hidden",
        "combination",
        "n_way",
        "k_shot",
        "q_queries",
        "episodes",
        "lr",
        "beta1",
        "beta2",
        "epsilon",
        "eval_every",
        "val_episodes",
        "val_q_queries",
        "eval_episodes",
        "eval_q_queries",
        "eval_split",
        "shot_aggregation",
        "rotations",
        "standardize",
        "synth_classes",
        "synth_images",
        "synth_size",
        "synth_train",
        "synth_val",
        "synth_test",
        "seed",
        "threads",
        "out",
    ];

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data_root" => self.data_root = optional_path(v),
            "manifest" => self.manifest = optional_path(v),
            "input_size" => self.input_size = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "d" => self.d = parse_num(key, v)?,
            "c" => self.c = parse_num(key, v)?,
            "feature_stack" => {
                self.feature_stack = if v == "auto" { None } else { Some(parse_stack(v)?) }
            }
            "relation_hidden" => self.relation_hidden = parse_widths(v)?,
            "relation_out" => self.relation_out = parse_num(key, v)?,
            "similarity_hidden" => self.similarity_hidden = parse_widths(v)?,
            "combination" => self.combination = v.parse()?,
            "n_way" => self.n_way = parse_num(key, v)?,
            "k_shot" => self.k_shot = parse_num(key, v)?,
            "q_queries" => self.q_queries = parse_num(key, v)?,
            "episodes" => self.episodes = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "beta1" => self.beta1 = parse_num(key, v)?,
            "beta2" => self.beta2 = parse_num(key, v)?,
            "epsilon" => self.epsilon = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "val_episodes" => self.val_episodes = parse_num(key, v)?,
            "val_q_queries" => self.val_q_queries = parse_num(key, v)?,
            "eval_episodes" => self.eval_episodes = parse_num(key, v)?,
            "eval_q_queries" => self.eval_q_queries = parse_num(key, v)?,
            "eval_split" => self.eval_split = v.parse().map_err(|_| {
                Error::Config(format!("`eval_split` = `{v}` is not train, val or test"))
            })?,
            "shot_aggregation" => self.shot_aggregation = v.parse()?,
            "rotations" => {
                self.rotations = v
                    .split(',')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "standardize" => self.standardize = parse_bool(key, v)?,
            "synth_classes" => self.synth_classes = parse_num(key, v)?,
            "synth_images" => self.synth_images = parse_num(key, v)?,
            "synth_size" => self.synth_size = parse_num(key, v)?,
            "synth_train" => self.synth_train = parse_num(key, v)?,
            "synth_val" => self.synth_val = parse_num(key, v)?,
            "synth_test" => self.synth_test = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "threads" => self.threads = parse_num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => {
                return Err(Error::Config(format!(
                    "unknown config key `{key}`; known keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Every key with its current value, in [`Self::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let rotations = self
            .rotations
            .iter()
            .map(|r| r.degrees().to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("data_root", path_text(&self.data_root)),
            ("manifest", path_text(&self.manifest)),
            ("input_size", self.input_size.to_string()),
            ("channels", self.channels.to_string()),
            ("d", self.d.to_string()),
            ("c", self.c.to_string()),
            (
                "feature_stack",
                self.feature_stack
                    .as_deref()
                    .map_or_else(|| "auto".to_string(), format_stack),
            ),
            ("relation_hidden", format_widths(&self.relation_hidden)),
            ("relation_out", self.relation_out.to_string()),
            ("similarity_hidden", format_widths(&self.similarity_hidden)),
            ("combination", self.combination.to_string()),
            ("n_way", self.n_way.to_string()),
            ("k_shot", self.k_shot.to_string()),
            ("q_queries", self.q_queries.to_string()),
            ("episodes", self.episodes.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("val_episodes", self.val_episodes.to_string()),
            ("val_q_queries", self.val_q_queries.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("eval_q_queries", self.eval_q_queries.to_string()),
            ("eval_split", self.eval_split.to_string()),
            ("shot_aggregation", self.shot_aggregation.to_string()),
            ("rotations", rotations),
            ("standardize", self.standardize.to_string()),
            ("synth_classes", self.synth_classes.to_string()),
            ("synth_images", self.synth_images.to_string()),
            ("synth_size", self.synth_size.to_string()),
            ("synth_train", self.synth_train.to_string()),
            ("synth_val", self.synth_val.to_string()),
            ("synth_test", self.synth_test.to_string()),
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("out", self.out.display().to_string()),
        ]
    }

    /// Applies the assignments in `text` on top of the current values.
    /// Blank lines and lines starting with `#` are ignored; a key may appear
    /// once.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected `key = value`, got `{line}`", n + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("config key `{key}` is set twice")));
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// The fully resolved configuration as config-file text.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let feature_stack = match &self.feature_stack {
            Some(s) => s.clone(),
            None => desk_stack(self.input_size, self.d, self.c)?,
        };
        let cfg = ModelConfig {
            input_size: self.input_size,
            channels: self.channels,
            d: self.d,
            c: self.c,
            feature_stack,
            relation_hidden: self.relation_hidden.clone(),
            relation_out: self.relation_out,
            similarity_hidden: self.similarity_hidden.clone(),
            combination: self.combination,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_queries: self.q_queries,
            episodes_total: self.episodes,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            eval_every: self.eval_every,
            val_episodes: self.val_episodes,
            val_q_queries: self.val_q_queries,
            seed: self.seed,
            checkpoint_dir,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_queries: self.eval_q_queries,
            episodes: self.eval_episodes,
            seed: self.seed,
            aggregation: self.shot_aggregation,
        }
    }

    /// `data_root`, or a config error naming the key.
    pub fn require_data_root(&self) -> Result<&Path> {
        self.data_root.as_deref().ok_or_else(|| {
            Error::Config("`data_root` is not set; point it at a dataset directory".into())
        })
    }

    pub fn manifest_path(&self) -> Result<PathBuf> {
        match &self.manifest {
            Some(m) => Ok(m.clone()),
            None => Ok(self.require_data_root()?.join(MANIFEST_NAME)),
        }
    }
}
