//! Adam with decoupled weight decay, plus the cosine annealing schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer state over a fixed parameter list. Moment buffers are stored in
/// f32 alongside the parameters; the update itself is computed in f64.
pub struct AdamState {
    params: Vec<Tensor>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(params: Vec<Tensor>, lr: f32, weight_decay: f32) -> AdamState {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamState {
            params,
            m,
            v,
            t: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// Applies one update: decoupled weight decay first, then the
    /// bias-corrected Adam step. Gradients are zeroed afterwards.
    pub fn step(&mut self) -> Result<()> {
        for p in &self.params {
            if p.grad().is_none() {
                return Err(Error::contract(format!(
                    "adam step with missing gradient on parameter of shape {:?}",
                    p.shape()
                )));
            }
        }
        self.t += 1;
        let b1 = self.beta1 as f64;
        let b2 = self.beta2 as f64;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.lr as f64;
        let wd = self.weight_decay as f64;
        let eps = self.eps as f64;
        for (i, p) in self.params.iter().enumerate() {
            let grad = p.grad().expect("checked above");
            let mut data = p.to_vec();
            let (ms, vs) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let (x, m, v) = adamw_element(
                    data[j] as f64,
                    grad[j] as f64,
                    ms[j] as f64,
                    vs[j] as f64,
                    lr,
                    wd,
                    b1,
                    b2,
                    bc1,
                    bc2,
                    eps,
                );
                ms[j] = m as f32;
                vs[j] = v as f32;
                data[j] = x as f32;
            }
            p.set_data(&data);
            p.zero_grad();
        }
        Ok(())
    }
}

/// One parameter element's update, in f64: decoupled weight decay, moment
/// updates, bias correction, Adam step. Returns (new value, new m, new v).
#[allow(clippy::too_many_arguments)]
fn adamw_element(
    mut x: f64,
    g: f64,
    m_prev: f64,
    v_prev: f64,
    lr: f64,
    wd: f64,
    b1: f64,
    b2: f64,
    bc1: f64,
    bc2: f64,
    eps: f64,
) -> (f64, f64, f64) {
    x -= lr * wd * x;
    let m = b1 * m_prev + (1.0 - b1) * g;
    let v = b2 * v_prev + (1.0 - b2) * g * g;
    let mhat = m / bc1;
    let vhat = v / bc2;
    x -= lr * mhat / (vhat.sqrt() + eps);
    (x, m, v)
}

/// Cosine annealing with restarts every `period` steps:
/// `lr_min + (lr_max-lr_min)/2 * (1 + cos(pi * (t mod period)/period))`.
pub fn cosine_lr(t: u64, period: u64, lr_max: f32, lr_min: f32) -> f32 {
    assert!(period > 0, "cosine schedule period must be positive");
    let phase = (t % period) as f64 / period as f64;
    let w = 0.5 * (1.0 + (std::f64::consts::PI * phase).cos());
    (lr_min as f64 + (lr_max as f64 - lr_min as f64) * w) as f32
}
