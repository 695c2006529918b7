use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::kernels::window_output;

/// One layer of the convolutional feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
}

impl LayerSpec {
    /// 3×3, stride 1, same padding.
    pub fn conv3(out_channels: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv:{out_channels}:{kernel}:{stride}:{padding}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool { kernel, stride } => write!(f, "maxpool:{kernel}:{stride}"),
            LayerSpec::AvgPool { kernel, stride } => write!(f, "avgpool:{kernel}:{stride}"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or_default();
        let nums = parts
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad number `{p}` in layer `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let bad = || Error::Config(format!("cannot parse layer `{s}`"));
        Ok(match (kind, nums.as_slice()) {
            ("conv", [out, rest @ ..]) if rest.len() <= 3 => LayerSpec::Conv {
                out_channels: *out,
                kernel: rest.first().copied().unwrap_or(3),
                stride: rest.get(1).copied().unwrap_or(1),
                padding: rest.get(2).copied().unwrap_or(1),
            },
            ("relu", []) => LayerSpec::Relu,
            ("maxpool", [k, st]) => LayerSpec::MaxPool { kernel: *k, stride: *st },
            ("avgpool", [k, st]) => LayerSpec::AvgPool { kernel: *k, stride: *st },
            _ => return Err(bad()),
        })
    }
}

/// Parses a whitespace- or comma-separated layer list.
pub fn parse_stack(s: &str) -> Result<Vec<LayerSpec>> {
    s.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect()
}

pub fn format_stack(stack: &[LayerSpec]) -> String {
    stack
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// How objects of a support grid are paired with objects of a query grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CombinationRule {
    /// Every support object with every query object: `d⁴` pairs.
    #[default]
    AllPairs,
    /// Objects at the same grid position: `d²` pairs.
    SameLocation,
}

impl CombinationRule {
    pub fn pair_count(self, d: usize) -> usize {
        match self {
            CombinationRule::AllPairs => d.pow(4),
            CombinationRule::SameLocation => d * d,
        }
    }

    /// Object index pairs, row-major with the support index outermost.
    pub fn pairs(self, d: usize) -> Vec<(u32, u32)> {
        let n = (d * d) as u32;
        match self {
            CombinationRule::AllPairs => (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect(),
            CombinationRule::SameLocation => (0..n).map(|i| (i, i)).collect(),
        }
    }
}

impl fmt::Display for CombinationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombinationRule::AllPairs => "all_pairs",
            CombinationRule::SameLocation => "same_location",
        })
    }
}

impl FromStr for CombinationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_pairs" => Ok(CombinationRule::AllPairs),
            "same_location" => Ok(CombinationRule::SameLocation),
            _ => Err(Error::Config(format!(
                "unknown combination rule `{s}` (expected all_pairs or same_location)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Side length of the square input image, in pixels.
    pub input_size: usize,
    pub channels: usize,
    /// Objects per spatial axis of the final feature map.
    pub d: usize,
    /// Channels per object.
    pub c: usize,
    pub feature_stack: Vec<LayerSpec>,
    pub relation_hidden: Vec<usize>,
    pub relation_out: usize,
    pub similarity_hidden: Vec<usize>,
    pub combination: CombinationRule,
}

impl ModelConfig {
    /// 84×84 grayscale input to a 7×7×64 object grid.
    pub fn omniglot() -> Self {
        Self {
            input_size: 84,
            channels: 1,
            d: 7,
            c: 64,
            feature_stack: four_block_stack(64, LayerSpec::AvgPool { kernel: 3, stride: 3 }),
            relation_hidden: vec![256, 256],
            relation_out: 256,
            similarity_hidden: vec![256],
            combination: CombinationRule::AllPairs,
        }
    }

    /// 224×224 RGB input to a 10×10×64 object grid; the final average pool
    /// is widened to absorb the larger input.
    pub fn mini_imagenet() -> Self {
        Self {
            input_size: 224,
            channels: 3,
            d: 10,
            feature_stack: four_block_stack(64, LayerSpec::AvgPool { kernel: 7, stride: 5 }),
            ..Self::omniglot()
        }
    }

    /// Small grayscale model: two conv-relu-maxpool blocks, then an average
    /// pool that reduces the `input_size/4` grid to `d×d`.
    pub fn desk(input_size: usize, d: usize, c: usize) -> Result<Self> {
        Ok(Self {
            input_size,
            channels: 1,
            d,
            c,
            feature_stack: desk_stack(input_size, d, c)?,
            relation_hidden: vec![32, 32],
            relation_out: 32,
            similarity_hidden: vec![16],
            combination: CombinationRule::AllPairs,
        })
    }

    /// Output shape of the feature stack for this config's input.
    pub fn feature_output(&self) -> Result<[usize; 3]> {
        infer_stack_output(&self.feature_stack, self.input_size, self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.channels == 0 {
            return Err(Error::Config("input_size and channels must be positive".into()));
        }
        if self.d == 0 || self.c == 0 || self.relation_out == 0 {
            return Err(Error::Config("d, c and relation_out must be at least 1".into()));
        }
        if self.relation_hidden.contains(&0) || self.similarity_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        let out = self.feature_output()?;
        if out != [self.d, self.d, self.c] {
            return Err(Error::Config(format!(
                "feature stack produces {}×{}×{} but the config declares d={} c={}",
                out[0], out[1], out[2], self.d, self.c
            )));
        }
        Ok(())
    }

    /// Widths of the relation MLP, input first.
    pub fn relation_widths(&self) -> Vec<usize> {
        let mut w = vec![2 * self.c];
        w.extend(&self.relation_hidden);
        w.push(self.relation_out);
        w
    }

    /// Widths of the similarity head, input first; the last width is 1.
    pub fn similarity_widths(&self) -> Vec<usize> {
        let mut w = vec![self.relation_out];
        w.extend(&self.similarity_hidden);
        w.push(1);
        w
    }
}

/// Writes a width list as `a,b,c`; an empty list is an empty string.
pub fn format_widths(widths: &[usize]) -> String {
    widths.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("`{t}` in width list `{s}` is not an integer")))
        })
        .collect()
}

impl ModelConfig {
    pub const KEYS: [&'static str; 9] = [
        "input_size",
        "channels",
        "d",
        "c",
        "feature_stack",
        "relation_hidden",
        "relation_out",
        "similarity_hidden",
        "combination",
    ];

    /// Every field as a `(key, value)` pair, in [`Self::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_size", self.input_size.to_string()),
            ("channels", self.channels.to_string()),
            ("d", self.d.to_string()),
            ("c", self.c.to_string()),
            ("feature_stack", format_stack(&self.feature_stack)),
            ("relation_hidden", format_widths(&self.relation_hidden)),
            ("relation_out", self.relation_out.to_string()),
            ("similarity_hidden", format_widths(&self.similarity_hidden)),
            ("combination", self.combination.to_string()),
        ]
    }

    /// Inverse of [`Self::to_pairs`]. Every key must be present.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            pairs
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("model config is missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            let v = get(k)?;
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{k}` = `{v}` is not a non-negative integer")))
        };
        Ok(Self {
            input_size: num("input_size")?,
            channels: num("channels")?,
            d: num("d")?,
            c: num("c")?,
            feature_stack: parse_stack(get("feature_stack")?)?,
            relation_hidden: parse_widths(get("relation_hidden")?)?,
            relation_out: num("relation_out")?,
            similarity_hidden: parse_widths(get("similarity_hidden")?)?,
            combination: get("combination")?.trim().parse()?,
        })
    }
}

fn four_block_stack(width: usize, final_pool: LayerSpec) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv3(width),
        LayerSpec::Relu,
        LayerSpec::MaxPool { kernel: 2, stride: 2 },
        LayerSpec::conv3(width),
        LayerSpec::Relu,
        LayerSpec::MaxPool { kernel: 2, stride: 2 },
        LayerSpec::conv3(width),
        LayerSpec::Relu,
        LayerSpec::conv3(width),
        LayerSpec::Relu,
        final_pool,
    ]
}

/// Feature stack for [`ModelConfig::desk`]. Fails when `d` does not divide the
/// post-pooling grid.
pub fn desk_stack(input_size: usize, d: usize, c: usize) -> Result<Vec<LayerSpec>> {
    if input_size < 4 || input_size % 4 != 0 {
        return Err(Error::Config(format!(
            "input_size {input_size} must be a positive multiple of 4"
        )));
    }
    let grid = input_size / 4;
    if d == 0 || d > grid || grid % d != 0 {
        return Err(Error::Config(format!(
            "d={d} is not reachable from a {grid}×{grid} grid by an integer average pool"
        )));
    }
    let mut stack = vec![
        LayerSpec::conv3(c),
        LayerSpec::Relu,
        LayerSpec::MaxPool { kernel: 2, stride: 2 },
        LayerSpec::conv3(c),
        LayerSpec::Relu,
        LayerSpec::MaxPool { kernel: 2, stride: 2 },
    ];
    if grid / d > 1 {
        stack.push(LayerSpec::AvgPool {
            kernel: grid / d,
            stride: grid / d,
        });
    }
    Ok(stack)
}

pub fn infer_stack_output(stack: &[LayerSpec], size: usize, channels: usize) -> Result<[usize; 3]> {
    let (mut h, mut w, mut c) = (size, size, channels);
    for layer in stack {
        let fits = |k: usize, s: usize, p: usize, h: usize, w: usize| {
            window_output(h, k, s, p)
                .zip(window_output(w, k, s, p))
                .ok_or_else(|| Error::Config(format!("layer `{layer}` does not fit a {h}×{w} map")))
        };
        match *layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if out_channels == 0 {
                    return Err(Error::Config(format!("layer `{layer}` has no output channels")));
                }
                (h, w) = fits(kernel, stride, padding, h, w)?;
                c = out_channels;
            }
            LayerSpec::Relu => {}
            LayerSpec::MaxPool { kernel, stride } | LayerSpec::AvgPool { kernel, stride } => {
                (h, w) = fits(kernel, stride, 0, h, w)?;
            }
        }
    }
    Ok([h, w, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omniglot_stack_reaches_seven_by_seven() {
        let cfg = ModelConfig::omniglot();
        assert_eq!(cfg.feature_output().unwrap(), [7, 7, 64]);
        cfg.validate().unwrap();
        assert_eq!(cfg.relation_widths(), vec![128, 256, 256, 256]);
    }

    #[test]
    fn mini_imagenet_stack_reaches_ten_by_ten() {
        let cfg = ModelConfig::mini_imagenet();
        assert_eq!(cfg.feature_output().unwrap(), [10, 10, 64]);
        cfg.validate().unwrap();
    }

    #[test]
    fn desk_stacks() {
        assert_eq!(ModelConfig::desk(16, 4, 8).unwrap().feature_output().unwrap(), [4, 4, 8]);
        assert_eq!(ModelConfig::desk(16, 2, 8).unwrap().feature_output().unwrap(), [2, 2, 8]);
        assert_eq!(ModelConfig::desk(16, 1, 8).unwrap().feature_output().unwrap(), [1, 1, 8]);
        assert_eq!(ModelConfig::desk(8, 2, 8).unwrap().feature_output().unwrap(), [2, 2, 8]);
        assert!(ModelConfig::desk(16, 3, 8).is_err());
        assert!(ModelConfig::desk(18, 1, 8).is_err());
    }

    #[test]
    fn declared_shape_must_match_stack() {
        let mut cfg = ModelConfig::desk(16, 4, 8).unwrap();
        cfg.d = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stack_text_round_trips() {
        let stack = ModelConfig::omniglot().feature_stack;
        assert_eq!(parse_stack(&format_stack(&stack)).unwrap(), stack);
        assert_eq!(
            parse_stack("conv:8, relu maxpool:2:2").unwrap(),
            vec![LayerSpec::conv3(8), LayerSpec::Relu, LayerSpec::MaxPool { kernel: 2, stride: 2 }]
        );
        assert!(parse_stack("conv").is_err());
        assert!(parse_stack("pool:2:2").is_err());
    }

    #[test]
    fn pair_enumeration() {
        assert_eq!(CombinationRule::AllPairs.pairs(7).len(), 2401);
        assert_eq!(CombinationRule::AllPairs.pairs(2)[..3], [(0, 0), (0, 1), (0, 2)]);
        assert_eq!(CombinationRule::SameLocation.pairs(3).len(), 9);
        assert_eq!(CombinationRule::AllPairs.pairs(1), vec![(0, 0)]);
        assert_eq!(CombinationRule::SameLocation.pairs(1), vec![(0, 0)]);
    }
}
