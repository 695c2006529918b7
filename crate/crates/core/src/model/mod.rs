//! The relation model: a convolutional object extractor, pairwise object
//! combination, a shared relation MLP, additive aggregation and a sigmoid
//! similarity head.

mod config;
mod grid;
mod params;

pub use config::{
    desk_stack, format_stack, format_widths, infer_stack_output, parse_stack, parse_widths,
    CombinationRule, LayerSpec,
    ModelConfig,
};
pub use grid::ObjectGrid;
pub use params::{ModelParams, ParamGroup};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// An object grid recorded on a graph. `var` has shape `d×d×c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridVar {
    pub var: Var,
    pub d: usize,
    pub c: usize,
}

/// Parameters bound onto one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
}

impl Model {
    /// Fresh model with fan-in scaled uniform weights and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    /// Pairs a config with existing parameters, checking every shape.
    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ModelParams) {
        (self.config, self.params)
    }

    /// Records every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in self.params.iter() {
            let v = if trainable {
                g.param(name, t.clone())?
            } else {
                g.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Runs the feature stack on an `H×W×C` image and exposes the final map
    /// as a `d×d` grid of `c`-channel objects.
    pub fn extract_objects(&self, g: &mut Graph, b: &Bound, image: Var) -> Result<GridVar> {
        let cfg = &self.config;
        let expected = [cfg.input_size, cfg.input_size, cfg.channels];
        if g.value(image).shape() != expected {
            return Err(Error::shape(
                "extract_objects",
                format!("image is {:?}, model expects {expected:?}", g.value(image).shape()),
            ));
        }
        let mut x = image;
        let mut conv = 0;
        for layer in &cfg.feature_stack {
            x = match *layer {
                LayerSpec::Conv {
                    stride, padding, ..
                } => {
                    let k = b.get(&params::conv_kernel(conv));
                    let bias = b.get(&params::conv_bias(conv));
                    conv += 1;
                    let y = g.conv2d(x, k, stride, padding)?;
                    g.bias_add(y, bias)?
                }
                LayerSpec::Relu => g.relu(x),
                LayerSpec::MaxPool { kernel, stride } => g.max_pool2d(x, kernel, stride)?,
                LayerSpec::AvgPool { kernel, stride } => g.avg_pool2d(x, kernel, stride)?,
            };
        }
        let shape = g.value(x).shape();
        if shape != [cfg.d, cfg.d, cfg.c] {
            return Err(Error::Config(format!(
                "feature stack produced {shape:?}, expected {}×{}×{}",
                cfg.d, cfg.d, cfg.c
            )));
        }
        Ok(GridVar {
            var: x,
            d: cfg.d,
            c: cfg.c,
        })
    }

    fn mlp(&self, g: &mut Graph, b: &Bound, prefix: &str, layers: usize, input: Var) -> Result<Var> {
        let mut x = input;
        for i in 0..layers {
            let w = b.get(&format!("{prefix}.fc{i}.weight"));
            let bias = b.get(&format!("{prefix}.fc{i}.bias"));
            x = g.dense(x, w, bias)?;
            if i + 1 < layers {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// Applies the relation MLP to every row of `pairs[P×2c]`, giving `P×c̃`.
    pub fn relate(&self, g: &mut Graph, b: &Bound, pairs: Var) -> Result<Var> {
        let width = 2 * self.config.c;
        match *g.value(pairs).shape() {
            [_, w] if w == width => {}
            ref s => {
                return Err(Error::shape(
                    "relate",
                    format!("pair matrix is {s:?}, rows must have length {width}"),
                ))
            }
        }
        let layers = self.config.relation_widths().len() - 1;
        self.mlp(g, b, params::RELATION, layers, pairs)
    }

    /// Similarity head: MLP then sigmoid, giving a one-element score.
    pub fn similarity(&self, g: &mut Graph, b: &Bound, relation: Var) -> Result<Var> {
        let logit = self.similarity_logit(g, b, relation)?;
        Ok(g.sigmoid(logit))
    }

    /// The similarity head before its sigmoid.
    pub fn similarity_logit(&self, g: &mut Graph, b: &Bound, relation: Var) -> Result<Var> {
        if g.value(relation).shape() != [self.config.relation_out] {
            return Err(Error::shape(
                "similarity",
                format!(
                    "relation vector is {:?}, expected [{}]",
                    g.value(relation).shape(),
                    self.config.relation_out
                ),
            ));
        }
        let layers = self.config.similarity_widths().len() - 1;
        self.mlp(g, b, params::SIMILARITY, layers, relation)
    }

    /// Score in `(0, 1)` that `support` and `query` show the same class.
    pub fn score_pair(
        &self,
        g: &mut Graph,
        b: &Bound,
        support: &GridVar,
        query: &GridVar,
    ) -> Result<Var> {
        let logit = self.score_logit(g, b, support, query)?;
        Ok(g.sigmoid(logit))
    }

    /// [`Model::score_pair`] before the final sigmoid.
    pub fn score_logit(
        &self,
        g: &mut Graph,
        b: &Bound,
        support: &GridVar,
        query: &GridVar,
    ) -> Result<Var> {
        let pairs = combine(g, support, query, self.config.combination)?;
        let relations = self.relate(g, b, pairs)?;
        let m = aggregate(g, relations)?;
        self.similarity_logit(g, b, m)
    }

    /// Forward-only evaluator that reuses one bound graph.
    pub fn scorer(&self) -> Result<Scorer<'_>> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph, false)?;
        let base = graph.len();
        Ok(Scorer {
            model: self,
            graph,
            bound,
            base,
        })
    }
}

/// Concatenates support and query objects pairwise: row `p` of the result is
/// `concat(support_obj(i), query_obj(j))` for the `p`-th pair of `rule`.
pub fn combine(g: &mut Graph, support: &GridVar, query: &GridVar, rule: CombinationRule) -> Result<Var> {
    if support.d != query.d || support.c != query.c {
        return Err(Error::shape(
            "combine",
            format!(
                "grids differ: d={} c={} vs d={} c={}",
                support.d, support.c, query.d, query.c
            ),
        ));
    }
    g.pair_concat(support.var, query.var, &rule.pairs(support.d))
}

/// Element-wise sum of the relation rows of `relations[P×c̃]`.
pub fn aggregate(g: &mut Graph, relations: Var) -> Result<Var> {
    g.sum_rows(relations)
}

/// Element-wise mean of `K` grids of one class.
pub fn average_support(g: &mut Graph, grids: &[GridVar]) -> Result<GridVar> {
    let first = *grids.first().ok_or(Error::EmptyInput {
        op: "average_support",
    })?;
    if grids.iter().any(|x| x.d != first.d || x.c != first.c) {
        return Err(Error::shape("average_support", "grids of different shape"));
    }
    if grids.len() == 1 {
        return Ok(first);
    }
    let vars: Vec<Var> = grids.iter().map(|x| x.var).collect();
    Ok(GridVar {
        var: g.mean_over(&vars)?,
        ..first
    })
}

/// Forward-only evaluation over one graph that is rewound after each call.
pub struct Scorer<'m> {
    model: &'m Model,
    graph: Graph,
    bound: Bound,
    base: usize,
}

impl Scorer<'_> {
    pub fn embed(&mut self, image: &Tensor) -> Result<ObjectGrid> {
        let x = self.graph.constant(image.clone());
        let out = self.model.extract_objects(&mut self.graph, &self.bound, x);
        let grid = out.map(|gv| ObjectGrid::new(gv.d, gv.c, self.graph.value(gv.var).clone()));
        self.graph.truncate(self.base);
        grid?
    }

    pub fn score(&mut self, support: &ObjectGrid, query: &ObjectGrid) -> Result<f64> {
        let s = self.grid_var(support);
        let q = self.grid_var(query);
        let out = self
            .model
            .score_pair(&mut self.graph, &self.bound, &s, &q)
            .map(|v| self.graph.value(v).item());
        self.graph.truncate(self.base);
        out
    }

    fn grid_var(&mut self, grid: &ObjectGrid) -> GridVar {
        GridVar {
            var: self.graph.constant(grid.tensor().clone()),
            d: grid.d(),
            c: grid.c(),
        }
    }
}
