use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::augment::{rotate, Rotation};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }
}

/// One decoded image. `id` is unique within its dataset.
#[derive(Clone, Debug)]
pub struct Image {
    pub id: u64,
    pub source: String,
    pub pixels: Arc<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ClassRecord {
    pub name: String,
    pub split: Split,
    pub images: Vec<Image>,
}

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let c = *image.shape().last().expect("nonempty shape");
        if c != self.mean.len() {
            return Err(Error::Data(format!(
                "standardization has {} channels, image has {c}",
                self.mean.len()
            )));
        }
        let mut out = image.clone();
        for px in out.data_mut().chunks_exact_mut(c) {
            for ((v, m), s) in px.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Labeled images partitioned into train, validation and test classes.
#[derive(Clone, Debug)]
pub struct Dataset {
    classes: Vec<ClassRecord>,
}

impl Dataset {
    /// Checks that class names and image ids are unique and every image has
    /// the same shape.
    pub fn new(classes: Vec<ClassRecord>) -> Result<Self> {
        let mut names = BTreeSet::new();
        let mut ids = BTreeSet::new();
        let mut shape: Option<Vec<usize>> = None;
        for class in &classes {
            if !names.insert(class.name.as_str()) {
                return Err(Error::Data(format!("class `{}` appears twice", class.name)));
            }
            for img in &class.images {
                if !ids.insert(img.id) {
                    return Err(Error::Data(format!("image id {} is not unique", img.id)));
                }
                match &shape {
                    None => shape = Some(img.pixels.shape().to_vec()),
                    Some(s) if s.as_slice() != img.pixels.shape() => {
                        return Err(Error::Data(format!(
                            "image {} has shape {:?}, expected {s:?}",
                            img.source,
                            img.pixels.shape()
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(Self { classes })
    }

    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn image_count(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.classes
            .iter()
            .flat_map(|c| c.images.first())
            .map(|i| i.pixels.shape())
            .next()
    }

    /// The classes of one split.
    pub fn split(&self, split: Split) -> Dataset {
        Dataset {
            classes: self
                .classes
                .iter()
                .filter(|c| c.split == split)
                .cloned()
                .collect(),
        }
    }

    pub fn class_names(&self, split: Split) -> BTreeSet<&str> {
        self.classes
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for c in &self.classes {
            *counts.entry(c.split).or_insert(0) += 1;
        }
        counts
    }

    /// Assigns the first `train` classes to the training split, the next `val`
    /// to validation and the next `test` to testing.
    pub fn assign_splits(mut self, train: usize, val: usize, test: usize) -> Result<Self> {
        if train + val + test != self.classes.len() {
            return Err(Error::Config(format!(
                "split {train}/{val}/{test} does not cover {} classes",
                self.classes.len()
            )));
        }
        for (i, class) in self.classes.iter_mut().enumerate() {
            class.split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
        Ok(self)
    }

    /// Each class becomes one class per rotation, named `<name>@<degrees>`.
    /// The rotated classes stay in the split of their source class.
    pub fn with_rotation_classes(&self, rotations: &[Rotation]) -> Result<Dataset> {
        if rotations.is_empty() {
            return Err(Error::Config("rotation list is empty".into()));
        }
        let next_id = self
            .classes
            .iter()
            .flat_map(|c| c.images.iter().map(|i| i.id))
            .max()
            .map_or(0, |m| m + 1);
        let stride = next_id;
        let mut classes = Vec::with_capacity(self.classes.len() * rotations.len());
        for class in &self.classes {
            for (r, &rotation) in rotations.iter().enumerate() {
                let images = class
                    .images
                    .iter()
                    .map(|img| {
                        Ok(Image {
                            id: img.id + stride * r as u64,
                            source: format!("{}@{}", img.source, rotation.degrees()),
                            pixels: if rotation == Rotation::R0 {
                                Arc::clone(&img.pixels)
                            } else {
                                Arc::new(rotate(&img.pixels, rotation)?)
                            },
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                classes.push(ClassRecord {
                    name: format!("{}@{}", class.name, rotation.degrees()),
                    split: class.split,
                    images,
                });
            }
        }
        Dataset::new(classes)
    }

    /// Mean and population standard deviation of every channel over the
    /// training split. Zero deviations are replaced by one.
    pub fn training_stats(&self) -> Result<ChannelStats> {
        let train: Vec<&Image> = self
            .classes
            .iter()
            .filter(|c| c.split == Split::Train)
            .flat_map(|c| &c.images)
            .collect();
        let first = train
            .first()
            .ok_or_else(|| Error::Data("training split has no images".into()))?;
        let c = *first.pixels.shape().last().expect("nonempty shape");
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for img in &train {
            for px in img.pixels.data().chunks_exact(c) {
                sum.iter_mut().zip(px).for_each(|(s, v)| *s += v);
            }
            count += img.pixels.len() / c;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; c];
        for img in &train {
            for px in img.pixels.data().chunks_exact(c) {
                for ((s, v), m) in sq.iter_mut().zip(px).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn standardized(&self, stats: &ChannelStats) -> Result<Dataset> {
        let classes = self
            .classes
            .iter()
            .map(|class| {
                let images = class
                    .images
                    .iter()
                    .map(|img| {
                        Ok(Image {
                            pixels: Arc::new(stats.apply(&img.pixels)?),
                            ..img.clone()
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ClassRecord {
                    images,
                    ..class.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { classes })
    }

    /// Fails if any class name is shared between splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for c in &self.classes {
            if let Some(prev) = seen.insert(c.name.as_str(), c.split) {
                if prev != c.split {
                    return Err(Error::Data(format!(
                        "class `{}` is in both {prev} and {}",
                        c.name, c.split
                    )));
                }
            }
        }
        Ok(())
    }
}
