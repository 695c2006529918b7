use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// A `d×d×c` feature map viewed as `d²` object vectors in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectGrid {
    d: usize,
    c: usize,
    grid: Tensor,
}

impl ObjectGrid {
    pub fn new(d: usize, c: usize, grid: Tensor) -> Result<Self> {
        if grid.shape() != [d, d, c] {
            return Err(Error::shape(
                "object_grid",
                format!("tensor {:?} is not {d}×{d}×{c}", grid.shape()),
            ));
        }
        Ok(Self { d, c, grid })
    }

    /// Rebuilds a grid from its `d²` objects.
    pub fn from_objects(d: usize, c: usize, objects: &[Vec<f64>]) -> Result<Self> {
        if objects.len() != d * d || objects.iter().any(|o| o.len() != c) {
            return Err(Error::shape(
                "object_grid",
                format!("need {} objects of length {c}", d * d),
            ));
        }
        Self::new(d, c, Tensor::new(&[d, d, c], objects.concat())?)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn len(&self) -> usize {
        self.d * self.d
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Object `i` for `i` in `0..d²`.
    pub fn object(&self, i: usize) -> &[f64] {
        &self.grid.data()[i * self.c..(i + 1) * self.c]
    }

    pub fn objects(&self) -> impl Iterator<Item = &[f64]> {
        self.grid.data().chunks_exact(self.c)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.grid
    }

    /// Element-wise mean of equally shaped grids; a single grid is returned
    /// unchanged.
    pub fn average(grids: &[ObjectGrid]) -> Result<ObjectGrid> {
        let first = grids.first().ok_or(Error::EmptyInput {
            op: "average_support",
        })?;
        if grids.iter().any(|x| x.d != first.d || x.c != first.c) {
            return Err(Error::shape("average_support", "grids of different shape"));
        }
        if grids.len() == 1 {
            return Ok(first.clone());
        }
        let mut g = Graph::new();
        let vars: Vec<_> = grids.iter().map(|x| g.constant(x.grid.clone())).collect();
        let mean = g.mean_over(&vars)?;
        Self::new(first.d, first.c, g.value(mean).clone())
    }
}
