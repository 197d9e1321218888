//! Multi-view attention learning module.
//!
//! A MAL consumes N same-shaped `[C, D]` inputs. Each passes its own
//! single-head self-attention (tokens = D grid cells, embedding = C), the
//! results are stacked into `F in R^{C x D x N}`, and two branches attend
//! over it:
//!
//! * feature-wise: all D*N tokens (embedding C);
//! * channel-wise: F permuted to `D x (C*N)`, attending across the C*N
//!   channel tokens (embedding D), then permuted back.
//!
//! The branch outputs are added and averaged over the N axis, yielding one
//! `[C, D]` opinion feature. Several MALs with independent weights model the
//! "diverse opinions" of different annotators.

use crate::error::{Error, Result};
use crate::nn::SelfAttention;
use crate::rng::Rng;
use crate::tensor::{ops, Tensor};

pub struct Mal {
    per_input: Vec<SelfAttention>,
    feature: SelfAttention,
    channel: SelfAttention,
    pub c: usize,
    pub d: usize,
    pub n: usize,
}

impl Mal {
    pub fn init(rng: &mut Rng, c: usize, d: usize, n: usize) -> Mal {
        let per_input = (0..n).map(|_| SelfAttention::init(rng, c)).collect();
        Mal {
            per_input,
            feature: SelfAttention::init(rng, c),
            channel: SelfAttention::init(rng, d),
            c,
            d,
            n,
        }
    }

    pub fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        Ok(self.forward_detailed(inputs)?.0)
    }

    /// Forward pass that also exposes the feature-wise branch's attention
    /// weights (`[D*N, D*N]`) for inspection dumps.
    pub fn forward_detailed(&self, inputs: &[Tensor]) -> Result<(Tensor, Tensor)> {
        if inputs.len() != self.n {
            return Err(Error::dimension(format!(
                "mal with {} per-input attentions got {} inputs",
                self.n,
                inputs.len()
            )));
        }
        for t in inputs {
            if t.shape() != [self.c, self.d] {
                return Err(Error::dimension(format!(
                    "mal inputs must be [{},{}], got {:?}",
                    self.c,
                    self.d,
                    t.shape()
                )));
            }
        }
        // Per-input SA over the D tokens: [C,D] -> tokens [D,C] -> back.
        let mut attended = Vec::with_capacity(self.n);
        for (sa, x) in self.per_input.iter().zip(inputs) {
            let tokens = ops::transpose2d(x)?;
            let y = sa.forward(&tokens)?;
            attended.push(ops::transpose2d(&y)?);
        }
        let f = ops::stack_last(&attended)?; // [C, D, N]

        // Feature-wise branch: D*N tokens of width C.
        let dn_tokens = ops::reshape(
            &ops::permute(&f, &[1, 2, 0])?, // [D, N, C]
            vec![self.d * self.n, self.c],
        )?;
        let (feat_out, feat_attn) = self.feature.forward_with_attn(&dn_tokens)?;
        let feat = ops::permute(
            &ops::reshape(&feat_out, vec![self.d, self.n, self.c])?,
            &ops::inverse_order(&[1, 2, 0]),
        )?; // [C, D, N]

        // Channel-wise branch: reshape to D x (C*N), attend over the C*N
        // channel tokens (each a D-vector), restore the layout.
        let d_by_cn = ops::reshape(
            &ops::permute(&f, &[1, 0, 2])?, // [D, C, N]
            vec![self.d, self.c * self.n],
        )?;
        let chan_tokens = ops::transpose2d(&d_by_cn)?; // [C*N, D]
        let chan_out = self.channel.forward(&chan_tokens)?;
        let chan = ops::permute(
            &ops::reshape(&ops::transpose2d(&chan_out)?, vec![self.d, self.c, self.n])?,
            &ops::inverse_order(&[1, 0, 2]),
        )?; // [C, D, N]

        let summed = ops::add(&feat, &chan)?;
        Ok((ops::mean_axis(&summed, 2)?, feat_attn))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, sa) in self.per_input.iter().enumerate() {
            sa.collect_params(&format!("{prefix}.sa{i}"), out);
        }
        self.feature.collect_params(&format!("{prefix}.feature"), out);
        self.channel.collect_params(&format!("{prefix}.channel"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(n: usize, c: usize, d: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| {
                let data: Vec<f32> = (0..c * d).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
                Tensor::from_vec(vec![c, d], data).unwrap()
            })
            .collect()
    }

    #[test]
    fn five_level_defaults_give_32x16_opinion() {
        let mut rng = Rng::new(1);
        let mal = Mal::init(&mut rng, 32, 16, 5);
        let out = mal.forward(&inputs(5, 32, 16, 2)).unwrap();
        assert_eq!(out.shape(), &[32, 16]);
    }

    #[test]
    fn zeroed_channel_branch_leaves_feature_branch() {
        let mut rng = Rng::new(9);
        let mal = Mal::init(&mut rng, 8, 4, 2);
        let xs = inputs(2, 8, 4, 3);
        let full = mal.forward(&xs).unwrap();

        // Zero the channel branch's value/output projections: its
        // contribution becomes exactly zero (biases are already zero).
        mal.channel.v.weight.set_data(&vec![0.0; 4 * 4]);
        mal.channel.o.weight.set_data(&vec![0.0; 4 * 4]);
        let feature_only = mal.forward(&xs).unwrap();

        // The difference between the two runs is the channel contribution;
        // the remaining output is the pooled feature branch alone, and it
        // must differ from the full output (channel branch was nonzero).
        assert_eq!(full.shape(), feature_only.shape());
        let a = full.to_vec();
        let b = feature_only.to_vec();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-7));

        // Re-run with the feature branch also zeroed: output must now be
        // exactly zero, proving the sum structure feature + channel.
        mal.feature.v.weight.set_data(&vec![0.0; 8 * 8]);
        mal.feature.o.weight.set_data(&vec![0.0; 8 * 8]);
        let none = mal.forward(&xs).unwrap();
        assert!(none.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn different_seeds_give_different_opinions() {
        let xs = inputs(3, 16, 16, 5);
        let mut r1 = Rng::new(100);
        let mut r2 = Rng::new(200);
        let m1 = Mal::init(&mut r1, 16, 16, 3);
        let m2 = Mal::init(&mut r2, 16, 16, 3);
        let a = m1.forward(&xs).unwrap().to_vec();
        let b = m2.forward(&xs).unwrap().to_vec();
        let linf = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(linf > 0.0);
    }

    #[test]
    fn input_count_mismatch_errors() {
        let mut rng = Rng::new(1);
        let mal = Mal::init(&mut rng, 8, 4, 3);
        assert!(mal.forward(&inputs(2, 8, 4, 1)).is_err());
    }

    #[test]
    fn input_shape_mismatch_errors() {
        let mut rng = Rng::new(1);
        let mal = Mal::init(&mut rng, 8, 4, 1);
        let bad = Tensor::zeros(vec![4, 8]);
        assert!(matches!(mal.forward(&[bad]), Err(Error::Dimension(_))));
    }
}
