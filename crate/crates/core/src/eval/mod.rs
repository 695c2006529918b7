//! Nearest-neighbour episode classification and the multi-episode accuracy
//! protocol with normal-approximation confidence intervals.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::episodes::{sample_episode, Dataset, Episode};
use crate::error::{Error, Result};
use crate::model::{Model, ObjectGrid, Scorer};

/// Two-sided 95% quantile of the standard normal.
pub const Z95: f64 = 1.96;

/// Mean of per-episode accuracies with a 95% half-width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub halfwidth: f64,
    /// Set when there is a single sample; the half-width is then reported as
    /// zero although it is undefined.
    pub degenerate: bool,
}

/// `mean ± 1.96·s/√n` with the `n−1` sample standard deviation.
pub fn confidence_interval(values: &[f64]) -> Result<ConfidenceInterval> {
    if values.is_empty() {
        return Err(Error::EmptyInput {
            op: "confidence_interval",
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok(ConfidenceInterval {
            mean,
            halfwidth: 0.0,
            degenerate: true,
        });
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(ConfidenceInterval {
        mean,
        halfwidth: Z95 * var.sqrt() / n.sqrt(),
        degenerate: false,
    })
}

/// Index of the largest score; the lowest index wins ties. NaN never wins.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// How the K shots of a class are combined at test time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ShotAggregation {
    /// Average the K object grids into one representative, then score once.
    #[default]
    MeanRepresentation,
    /// Score every shot separately and average the K scores.
    MeanScore,
}

impl fmt::Display for ShotAggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShotAggregation::MeanRepresentation => "mean_representation",
            ShotAggregation::MeanScore => "mean_score",
        })
    }
}

impl FromStr for ShotAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_representation" => Ok(ShotAggregation::MeanRepresentation),
            "mean_score" => Ok(ShotAggregation::MeanScore),
            _ => Err(Error::Config(format!(
                "unknown shot aggregation `{s}` (expected mean_representation or mean_score)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    /// One score per support representative, in input order.
    pub scores: Vec<f64>,
}

/// Picks the class whose representative scores highest; equal scores go to the
/// lowest class index.
pub fn predict_from_scores(classes: &[usize], scores: Vec<f64>) -> Result<Prediction> {
    if classes.is_empty() {
        return Err(Error::EmptyInput { op: "classify_query" });
    }
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => s > scores[b] || (s == scores[b] && classes[i] < classes[b]),
        };
        if better {
            best = Some(i);
        }
    }
    let best = best.ok_or_else(|| Error::Numeric("every class score is NaN".into()))?;
    Ok(Prediction {
        class: classes[best],
        scores,
    })
}

/// Scores `query` against every `(class, representative)` and returns the
/// best class.
pub fn classify_query(
    scorer: &mut Scorer<'_>,
    support_reps: &[(usize, ObjectGrid)],
    query: &ObjectGrid,
) -> Result<Prediction> {
    let scores = support_reps
        .iter()
        .map(|(_, rep)| scorer.score(rep, query))
        .collect::<Result<Vec<_>>>()?;
    let classes: Vec<usize> = support_reps.iter().map(|(c, _)| *c).collect();
    predict_from_scores(&classes, scores)
}

/// Anything that can label the queries of an episode.
pub trait EpisodeClassifier: Sync {
    /// One predicted episode label per query, in query order.
    fn classify_episode(&self, episode: &Episode, aggregation: ShotAggregation) -> Result<Vec<usize>>;
}

impl EpisodeClassifier for Model {
    fn classify_episode(&self, episode: &Episode, aggregation: ShotAggregation) -> Result<Vec<usize>> {
        let mut scorer = self.scorer()?;
        let shots = (0..episode.n_way)
            .map(|label| {
                episode
                    .shots(label)
                    .iter()
                    .map(|item| scorer.embed(&item.image))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let classes: Vec<usize> = (0..episode.n_way).collect();
        let reps = match aggregation {
            ShotAggregation::MeanRepresentation => shots
                .iter()
                .map(|grids| ObjectGrid::average(grids))
                .collect::<Result<Vec<_>>>()?,
            ShotAggregation::MeanScore => Vec::new(),
        };
        episode
            .query
            .iter()
            .map(|item| {
                let q = scorer.embed(&item.image)?;
                let scores = match aggregation {
                    ShotAggregation::MeanRepresentation => reps
                        .iter()
                        .map(|rep| scorer.score(rep, &q))
                        .collect::<Result<Vec<_>>>()?,
                    ShotAggregation::MeanScore => shots
                        .iter()
                        .map(|grids| {
                            let mut total = 0.0;
                            for g in grids {
                                total += scorer.score(g, &q)?;
                            }
                            Ok(total / grids.len() as f64)
                        })
                        .collect::<Result<Vec<_>>>()?,
                };
                Ok(predict_from_scores(&classes, scores)?.class)
            })
            .collect()
    }
}

/// Predicts the same episode label for every query. On balanced episodes it
/// scores exactly `1/n_way`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConstantClassifier {
    pub label: usize,
}

impl EpisodeClassifier for ConstantClassifier {
    fn classify_episode(&self, episode: &Episode, _: ShotAggregation) -> Result<Vec<usize>> {
        Ok(vec![self.label; episode.query.len()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSettings {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub episodes: usize,
    pub seed: u64,
    pub aggregation: ShotAggregation,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            q_queries: 15,
            episodes: 600,
            seed: 0,
            aggregation: ShotAggregation::MeanRepresentation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub episode_count: usize,
    pub per_episode_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub ci_degenerate: bool,
    pub wall_time: Duration,
}

impl EvalReport {
    /// `acc=<mean> ci95=<halfwidth> episodes=<count>`.
    pub fn summary(&self) -> String {
        format!(
            "acc={:.6} ci95={:.6} episodes={}",
            self.mean_accuracy, self.ci95_halfwidth, self.episode_count
        )
    }

    /// One `episode,accuracy` row per episode. Timing is left out so equal
    /// runs give equal bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,accuracy\n");
        for (i, a) in self.per_episode_accuracy.iter().enumerate() {
            out.push_str(&format!("{i},{a}\n"));
        }
        out
    }
}

/// Per-episode seeds, drawn up front so parallel evaluation sees the same
/// episodes as a serial run.
pub fn episode_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random()).collect()
}

/// Samples `settings.episodes` episodes from `dataset`, classifies every
/// query and aggregates per-episode accuracy. Episodes run on the current
/// rayon pool; results are merged in episode order.
pub fn evaluate<C: EpisodeClassifier + ?Sized>(
    dataset: &Dataset,
    classifier: &C,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if settings.episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let start = Instant::now();
    let accuracies = episode_seeds(settings.seed, settings.episodes)
        .into_par_iter()
        .map(|seed| {
            let ep = sample_episode(
                dataset,
                settings.n_way,
                settings.k_shot,
                settings.q_queries,
                seed,
            )?;
            let predicted = classifier.classify_episode(&ep, settings.aggregation)?;
            if predicted.len() != ep.query.len() {
                return Err(Error::Logic(format!(
                    "classifier returned {} labels for {} queries",
                    predicted.len(),
                    ep.query.len()
                )));
            }
            let correct = predicted
                .iter()
                .zip(&ep.query)
                .filter(|(p, q)| **p == q.label)
                .count();
            Ok(correct as f64 / ep.query.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let ci = confidence_interval(&accuracies)?;
    Ok(EvalReport {
        n_way: settings.n_way,
        k_shot: settings.k_shot,
        q_queries: settings.q_queries,
        episode_count: accuracies.len(),
        per_episode_accuracy: accuracies,
        mean_accuracy: ci.mean,
        ci95_halfwidth: ci.halfwidth,
        ci_degenerate: ci.degenerate,
        wall_time: start.elapsed(),
    })
}

#[cfg(test)]
mod tests;
