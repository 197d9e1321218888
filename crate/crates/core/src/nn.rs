//! Trainable layers: convolution, linear, and single-head self-attention.
//!
//! Layers feeding a GELU use Kaiming-uniform fan-in initialization (bound
//! `sqrt(6/fan_in)`); purely linear projections — attention q/k/v/o and
//! output layers with no activation after them — use Xavier-uniform (bound
//! `sqrt(6/(fan_in+fan_out))`) so chained projections keep activations at
//! unit scale instead of doubling variance per layer. Biases start at zero.
//! Every layer exposes its parameters as `(name, tensor)` pairs in a fixed
//! construction order so checkpoints are byte-deterministic.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::ops;
use crate::tensor::Tensor;

fn uniform_init(rng: &mut Rng, shape: Vec<usize>, bound: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::param(shape, data).expect("shape/data constructed together")
}

fn kaiming_uniform(rng: &mut Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    uniform_init(rng, shape, bound)
}

fn xavier_uniform(rng: &mut Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    uniform_init(rng, shape, bound)
}

pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn init(
        rng: &mut Rng,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Conv2d {
        let fan_in = cin * kernel * kernel;
        Conv2d {
            weight: kaiming_uniform(rng, vec![cout, cin, kernel, kernel], fan_in),
            bias: Tensor::param(vec![cout], vec![0.0; cout]).expect("bias shape"),
            stride,
            padding,
        }
    }

    /// Xavier-initialized variant for convs with no activation after them.
    pub fn init_xavier(
        rng: &mut Rng,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Conv2d {
        let k2 = kernel * kernel;
        Conv2d {
            weight: xavier_uniform(rng, vec![cout, cin, kernel, kernel], cin * k2, cout * k2),
            bias: Tensor::param(vec![cout], vec![0.0; cout]).expect("bias shape"),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, &self.weight, self.stride, self.padding)?;
        ops::add_channel_bias(&y, &self.bias)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

pub struct Linear {
    /// Stored `[in, out]` so `tokens[L,in] . weight` applies directly.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: kaiming_uniform(rng, vec![fan_in, fan_out], fan_in),
            bias: Tensor::param(vec![fan_out], vec![0.0; fan_out]).expect("bias shape"),
        }
    }

    /// Xavier-initialized variant for projections with no activation after
    /// them.
    pub fn init_xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: xavier_uniform(rng, vec![fan_in, fan_out], fan_in, fan_out),
            bias: Tensor::param(vec![fan_out], vec![0.0; fan_out]).expect("bias shape"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::matmul(x, &self.weight)?;
        ops::add_row_bias(&y, &self.bias)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Single-head scaled dot-product attention over `[L, E]` token matrices
/// with learned query/key/value/output projections.
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub embed: usize,
}

impl SelfAttention {
    pub fn init(rng: &mut Rng, embed: usize) -> SelfAttention {
        SelfAttention {
            q: Linear::init_xavier(rng, embed, embed),
            k: Linear::init_xavier(rng, embed, embed),
            v: Linear::init_xavier(rng, embed, embed),
            o: Linear::init_xavier(rng, embed, embed),
            embed,
        }
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attn(tokens)?.0)
    }

    /// Returns the output and the `[L, L]` post-softmax attention weights
    /// (row = query, column = key).
    pub fn forward_with_attn(&self, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        if tokens.shape().len() != 2 || tokens.shape()[1] != self.embed {
            return Err(Error::dimension(format!(
                "self-attention over embed {} got tokens of shape {:?}",
                self.embed,
                tokens.shape()
            )));
        }
        let q = self.q.forward(tokens)?;
        let k = self.k.forward(tokens)?;
        let v = self.v.forward(tokens)?;
        let scores = ops::scale(
            &ops::matmul(&q, &ops::transpose2d(&k)?)?,
            1.0 / (self.embed as f32).sqrt(),
        );
        let attn = ops::softmax(&scores, 1)?;
        let mixed = ops::matmul(&attn, &v)?;
        Ok((self.o.forward(&mixed)?, attn))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.q.collect_params(&format!("{prefix}.q"), out);
        self.k.collect_params(&format!("{prefix}.k"), out);
        self.v.collect_params(&format!("{prefix}.v"), out);
        self.o.collect_params(&format!("{prefix}.o"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let mut r1 = Rng::new(9);
        let mut r2 = Rng::new(9);
        let a = Conv2d::init(&mut r1, 4, 8, 3, 1, 1);
        let b = Conv2d::init(&mut r2, 4, 8, 3, 1, 1);
        assert_eq!(a.weight.to_vec(), b.weight.to_vec());
        let bound = (6.0f32 / 36.0).sqrt();
        assert!(a.weight.to_vec().iter().all(|v| v.abs() <= bound));
        assert!(a.bias.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_preserves_shape() {
        let mut rng = Rng::new(3);
        let sa = SelfAttention::init(&mut rng, 8);
        let tokens = Tensor::from_vec(vec![5, 8], (0..40).map(|v| v as f32 * 0.01).collect()).unwrap();
        let out = sa.forward(&tokens).unwrap();
        assert_eq!(out.shape(), &[5, 8]);
    }

    #[test]
    fn single_token_attention_is_projection_chain() {
        // With one key the softmax weight is 1, so out = O(V(x)).
        let mut rng = Rng::new(5);
        let sa = SelfAttention::init(&mut rng, 6);
        let x = Tensor::from_vec(vec![1, 6], vec![0.3, -0.2, 0.9, 0.0, 1.1, -0.7]).unwrap();
        let direct = sa.o.forward(&sa.v.forward(&x).unwrap()).unwrap();
        let attn = sa.forward(&x).unwrap();
        for (a, b) in attn.to_vec().iter().zip(direct.to_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn permuting_tokens_permutes_output_rows() {
        let mut rng = Rng::new(11);
        let sa = SelfAttention::init(&mut rng, 4);
        let rows = [
            vec![0.1f32, 0.2, 0.3, 0.4],
            vec![-0.5, 0.5, 0.0, 1.0],
            vec![0.9, -0.1, 0.2, -0.3],
        ];
        let fwd = |order: &[usize]| -> Vec<f32> {
            let data: Vec<f32> = order.iter().flat_map(|&i| rows[i].clone()).collect();
            let t = Tensor::from_vec(vec![3, 4], data).unwrap();
            sa.forward(&t).unwrap().to_vec()
        };
        let base = fwd(&[0, 1, 2]);
        let swapped = fwd(&[2, 0, 1]);
        for (out_row, src_row) in [(0usize, 2usize), (1, 0), (2, 1)] {
            for e in 0..4 {
                let a = swapped[out_row * 4 + e];
                let b = base[src_row * 4 + e];
                assert!((a - b).abs() < 1e-5, "row {out_row} elem {e}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = Rng::new(2);
        let sa = SelfAttention::init(&mut rng, 8);
        let tokens =
            Tensor::from_vec(vec![6, 8], (0..48).map(|v| (v as f32 * 0.37).sin()).collect()).unwrap();
        let (_, attn) = sa.forward_with_attn(&tokens).unwrap();
        for row in attn.to_vec().chunks(6) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn param_names_are_stable() {
        let mut rng = Rng::new(0);
        let sa = SelfAttention::init(&mut rng, 4);
        let mut ps = Vec::new();
        sa.collect_params("mal0.sa1", &mut ps);
        let names: Vec<&str> = ps.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "mal0.sa1.q.weight",
                "mal0.sa1.q.bias",
                "mal0.sa1.k.weight",
                "mal0.sa1.k.bias",
                "mal0.sa1.v.weight",
                "mal0.sa1.v.bias",
                "mal0.sa1.o.weight",
                "mal0.sa1.o.bias"
            ]
        );
    }
}
