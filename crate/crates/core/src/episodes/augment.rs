use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Counter-clockwise rotation by a multiple of 90°.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn degrees(self) -> u32 {
        self.quarter_turns() * 90
    }

    pub fn quarter_turns(self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 1,
            Rotation::R180 => 2,
            Rotation::R270 => 3,
        }
    }

    pub fn from_quarter_turns(turns: u32) -> Self {
        Self::ALL[(turns % 4) as usize]
    }

    /// Group product: applying `self` after `other`.
    pub fn compose(self, other: Rotation) -> Rotation {
        Self::from_quarter_turns(self.quarter_turns() + other.quarter_turns())
    }
}

impl fmt::Display for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.degrees())
    }
}

impl FromStr for Rotation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "0" => Ok(Rotation::R0),
            "90" => Ok(Rotation::R90),
            "180" => Ok(Rotation::R180),
            "270" => Ok(Rotation::R270),
            other => Err(Error::Config(format!(
                "rotation `{other}` is not one of 0, 90, 180, 270"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentationSpec {
    /// Each listed rotation of a class is treated as a separate class.
    pub rotations: Vec<Rotation>,
    pub channel_standardize: bool,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            rotations: vec![Rotation::R0],
            channel_standardize: false,
        }
    }
}

impl AugmentationSpec {
    pub fn rotates(&self) -> bool {
        self.rotations.iter().any(|&r| r != Rotation::R0)
    }
}

/// Rotates an `H×W×C` image counter-clockwise by index permutation. Any
/// non-identity rotation requires a square image.
pub fn rotate(image: &Tensor, rotation: Rotation) -> Result<Tensor> {
    if rotation == Rotation::R0 {
        return Ok(image.clone());
    }
    let [h, w, c] = match *image.shape() {
        [h, w, c] => [h, w, c],
        ref s => return Err(Error::shape("rotate", format!("expected H×W×C, got {s:?}"))),
    };
    if h != w {
        return Err(Error::shape("rotate", format!("{h}×{w} image is not square")));
    }
    let n = h;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = match rotation {
                Rotation::R0 => (y, x),
                Rotation::R90 => (x, n - 1 - y),
                Rotation::R180 => (n - 1 - y, n - 1 - x),
                Rotation::R270 => (n - 1 - x, y),
            };
            out[(y * n + x) * c..][..c].copy_from_slice(&src[(sy * n + sx) * c..][..c]);
        }
    }
    Tensor::new(image.shape(), out)
}
