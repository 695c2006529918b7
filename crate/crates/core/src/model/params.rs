use std::collections::BTreeMap;

use rand::Rng;

use super::config::{LayerSpec, ModelConfig};
use crate::error::{CheckpointError, Result};
use crate::tensor::Tensor;

pub(crate) const FEATURE: &str = "feature";
pub(crate) const RELATION: &str = "relation";
pub(crate) const SIMILARITY: &str = "similarity";

pub(crate) fn conv_kernel(i: usize) -> String {
    format!("{FEATURE}.conv{i}.kernel")
}

pub(crate) fn conv_bias(i: usize) -> String {
    format!("{FEATURE}.conv{i}.bias")
}

/// The three trainable stages of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    /// Convolutional object extractor.
    Feature,
    /// Pairwise relation MLP.
    Relation,
    /// Similarity head.
    Similarity,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        match name.split('.').next()? {
            FEATURE => Some(ParamGroup::Feature),
            RELATION => Some(ParamGroup::Relation),
            SIMILARITY => Some(ParamGroup::Similarity),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::Feature => "feature (conv stack)",
            ParamGroup::Relation => "relation (pair MLP)",
            ParamGroup::Similarity => "similarity (head)",
        }
    }
}

/// Parameter name, shape and fan-in, in creation order.
pub(crate) fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    let mut channels = config.channels;
    let mut conv = 0;
    for layer in &config.feature_stack {
        if let LayerSpec::Conv {
            out_channels,
            kernel,
            ..
        } = *layer
        {
            let fan_in = kernel * kernel * channels;
            out.push((conv_kernel(conv), vec![kernel, kernel, channels, out_channels], fan_in));
            out.push((conv_bias(conv), vec![out_channels], fan_in));
            channels = out_channels;
            conv += 1;
        }
    }
    for (prefix, widths) in [
        (RELATION, config.relation_widths()),
        (SIMILARITY, config.similarity_widths()),
    ] {
        for (i, w) in widths.windows(2).enumerate() {
            out.push((format!("{prefix}.fc{i}.weight"), vec![w[0], w[1]], w[0]));
            out.push((format!("{prefix}.fc{i}.bias"), vec![w[1]], w[0]));
        }
    }
    out
}

/// Named parameter tensors of all three stages.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Weights uniform in `±sqrt(3 / fan_in)` (unit-variance preserving for
    /// linear maps), biases zero.
    pub(crate) fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let tensors = layout(config)
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let bound = (3.0 / fan_in as f64).sqrt();
                    Tensor::uniform(&shape, -bound, bound, rng)
                };
                (name, t)
            })
            .collect();
        Self { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Verifies that names and shapes match what `config` needs.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<(), CheckpointError> {
        let expected = layout(config);
        for (name, shape, _) in &expected {
            match self.tensors.get(name) {
                None => {
                    return Err(CheckpointError::Malformed(format!("missing tensor `{name}`")))
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self
            .tensors
            .keys()
            .find(|k| !expected.iter().any(|(n, _, _)| n == *k))
        {
            return Err(CheckpointError::Malformed(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn as_map_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.tensors {
            eat(name.as_bytes());
            for &s in t.shape() {
                eat(&(s as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
