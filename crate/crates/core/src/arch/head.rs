//! Quality regression head: the fused `[C, D]` feature laid out on its
//! g x g grid, squeezed by two small convs, then regressed 128 -> 64 -> 1.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::rng::Rng;
use crate::tensor::{ops, Tensor};

pub struct Head {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
    c_in: usize,
    grid: usize,
    fc_in: usize,
}

impl Head {
    /// `c_in` is the MAL channel width, `grid` the LDA grid edge (D = grid^2).
    /// The flattened conv output `c2 * grid^2` must equal `fc_in`.
    pub fn init(
        rng: &mut Rng,
        c_in: usize,
        grid: usize,
        c1: usize,
        c2: usize,
        fc_in: usize,
        fc_hidden: usize,
    ) -> Result<Head> {
        if c2 * grid * grid != fc_in {
            return Err(Error::config(format!(
                "head dimensions inconsistent: {c2} channels on a {grid}x{grid} grid \
                 flatten to {}, but the first FC expects {fc_in}",
                c2 * grid * grid
            )));
        }
        Ok(Head {
            conv1: Conv2d::init(rng, c_in, c1, 1, 1, 0),
            conv2: Conv2d::init(rng, c1, c2, 3, 1, 1),
            fc1: Linear::init(rng, fc_in, fc_hidden),
            // Linear output: Xavier keeps the initial score near zero.
            fc2: Linear::init_xavier(rng, fc_hidden, 1),
            c_in,
            grid,
            fc_in,
        })
    }

    /// `[C, D]` fused opinion feature -> scalar score (rank-0 tensor).
    pub fn forward(&self, fused: &Tensor) -> Result<Tensor> {
        if fused.shape() != [self.c_in, self.grid * self.grid] {
            return Err(Error::dimension(format!(
                "head expects [{},{}], got {:?}",
                self.c_in,
                self.grid * self.grid,
                fused.shape()
            )));
        }
        let grid = ops::reshape(fused, vec![self.c_in, self.grid, self.grid])?;
        let a = ops::gelu(&self.conv1.forward(&grid)?);
        let b = ops::gelu(&self.conv2.forward(&a)?);
        let flat = ops::reshape(&b, vec![1, self.fc_in])?;
        let hidden = ops::gelu(&self.fc1.forward(&flat)?);
        let score = self.fc2.forward(&hidden)?;
        ops::reshape(&score, vec![])
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
        self.fc1.collect_params(&format!("{prefix}.fc1"), out);
        self.fc2.collect_params(&format!("{prefix}.fc2"), out);
    }
}
