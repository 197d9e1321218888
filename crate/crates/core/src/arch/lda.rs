//! Local distortion aware module: unifies one pyramid level to the common
//! `[C_mal, D]` token form.
//!
//! Pipeline per level j: conv1x1 doubling C_j -> 2*C_j, GELU, adaptive
//! average pool to the g x g grid (D = g*g), conv1x1 down to C_mal, flatten
//! the grid into D tokens.

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::rng::Rng;
use crate::tensor::{ops, Tensor};

pub struct Lda {
    expand: Conv2d,
    reduce: Conv2d,
    pub grid: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Lda {
    pub fn init(rng: &mut Rng, c_in: usize, c_out: usize, grid: usize) -> Lda {
        Lda {
            expand: Conv2d::init(rng, c_in, 2 * c_in, 1, 1, 0),
            // No activation after the reduction: Xavier keeps token scale.
            reduce: Conv2d::init_xavier(rng, 2 * c_in, c_out, 1, 1, 0),
            grid,
            c_in,
            c_out,
        }
    }

    /// `[C_j, H, W]` (H, W >= grid) -> `[C_mal, D]`.
    pub fn forward(&self, level: &Tensor) -> Result<Tensor> {
        if level.shape().len() != 3 || level.shape()[0] != self.c_in {
            return Err(Error::dimension(format!(
                "lda expects [{},H,W], got {:?}",
                self.c_in,
                level.shape()
            )));
        }
        let (h, w) = (level.shape()[1], level.shape()[2]);
        if h < self.grid || w < self.grid {
            return Err(Error::dimension(format!(
                "lda needs spatial extent >= {}, got {h}x{w}",
                self.grid
            )));
        }
        let doubled = ops::gelu(&self.expand.forward(level)?);
        let pooled = ops::adaptive_avg_pool2d(&doubled, self.grid, self.grid)?;
        let reduced = self.reduce.forward(&pooled)?;
        ops::reshape(&reduced, vec![self.c_out, self.grid * self.grid])
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.expand.collect_params(&format!("{prefix}.expand"), out);
        self.reduce.collect_params(&format!("{prefix}.reduce"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_trace_and_resolution_invariance() {
        let mut rng = Rng::new(4);
        let lda = Lda::init(&mut rng, 16, 32, 4);
        let a = lda.forward(&Tensor::zeros(vec![16, 32, 32])).unwrap();
        assert_eq!(a.shape(), &[32, 16]);
        let b = lda.forward(&Tensor::zeros(vec![16, 64, 64])).unwrap();
        assert_eq!(b.shape(), &[32, 16]);
    }

    #[test]
    fn intermediate_channels_are_doubled() {
        let mut rng = Rng::new(4);
        let lda = Lda::init(&mut rng, 16, 32, 4);
        assert_eq!(lda.expand.weight.shape(), &[32, 16, 1, 1]);
        assert_eq!(lda.reduce.weight.shape(), &[32, 32, 1, 1]);
    }

    #[test]
    fn too_small_level_is_a_dimension_error() {
        let mut rng = Rng::new(4);
        let lda = Lda::init(&mut rng, 40, 32, 4);
        assert!(matches!(
            lda.forward(&Tensor::zeros(vec![40, 2, 2])),
            Err(Error::Dimension(_))
        ));
    }
}
