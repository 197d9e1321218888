//! Five-stage convolutional feature pyramid.
//!
//! Each stage halves the spatial extent (conv3x3, stride 2, padding 1, GELU).
//! The teacher configuration adds a global-mixing step per stage: the feature
//! map is pooled to a 4x4 token grid, passed through one single-head
//! self-attention, resampled back to the stage's resolution, and added as a
//! residual. The student omits it, keeping a purely local receptive field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, SelfAttention};
use crate::rng::Rng;
use crate::tensor::{ops, Tensor};

pub const STAGES: usize = 5;

/// Token-grid edge used by the global-mixing attention.
const MIX_GRID: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of the five stages, shallow to deep.
    pub stage_channels: Vec<usize>,
    /// Teacher flag: per-stage token-grid self-attention with residual add.
    pub global_mixing: bool,
    pub input_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![8, 16, 24, 32, 40],
            global_mixing: false,
            input_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != STAGES {
            return Err(Error::config(format!(
                "backbone needs exactly {STAGES} stage channel counts, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.input_channels == 0 {
            return Err(Error::config("backbone channel counts must be positive"));
        }
        Ok(())
    }
}

/// The five stage outputs, shallow to deep; spatial extents strictly
/// decrease (each stage emits ceil(previous/2)).
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

struct Stage {
    conv: Conv2d,
    mix: Option<SelfAttention>,
}

pub struct Backbone {
    pub cfg: BackboneConfig,
    stages: Vec<Stage>,
}

/// Resamples `[C,H,W]` to `[C,outH,outW]` by average-pooling the axes that
/// shrink and nearest-upsampling the ones that grow.
pub fn fit_to_grid(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut t = x.clone();
    if out_h < h || out_w < w {
        t = ops::adaptive_avg_pool2d(&t, out_h.min(h), out_w.min(w))?;
    }
    if out_h > t.shape()[1] || out_w > t.shape()[2] {
        t = ops::upsample_nearest(&t, out_h, out_w)?;
    }
    Ok(t)
}

impl Backbone {
    pub fn init(rng: &mut Rng, cfg: BackboneConfig) -> Result<Backbone> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(STAGES);
        let mut cin = cfg.input_channels;
        for &cout in &cfg.stage_channels {
            let conv = Conv2d::init(rng, cin, cout, 3, 2, 1);
            let mix = cfg
                .global_mixing
                .then(|| SelfAttention::init(rng, cout));
            stages.push(Stage { conv, mix });
            cin = cout;
        }
        Ok(Backbone { cfg, stages })
    }

    pub fn forward(&self, img: &Tensor) -> Result<FeaturePyramid> {
        if img.shape().len() != 3 || img.shape()[0] != self.cfg.input_channels {
            return Err(Error::dimension(format!(
                "backbone expects [{},H,W], got {:?}",
                self.cfg.input_channels,
                img.shape()
            )));
        }
        let (h, w) = (img.shape()[1], img.shape()[2]);
        if h < 32 || w < 32 {
            return Err(Error::dimension(format!(
                "backbone input must be at least 32x32, got {h}x{w}"
            )));
        }
        let mut levels = Vec::with_capacity(STAGES);
        let mut x = img.clone();
        for stage in &self.stages {
            let mut y = ops::gelu(&stage.conv.forward(&x)?);
            if let Some(sa) = &stage.mix {
                y = ops::add(&y, &global_mix(sa, &y)?)?;
            }
            levels.push(y.clone());
            x = y;
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, stage) in self.stages.iter().enumerate() {
            stage.conv.collect_params(&format!("{prefix}.stage{i}.conv"), out);
            if let Some(sa) = &stage.mix {
                sa.collect_params(&format!("{prefix}.stage{i}.mix"), out);
            }
        }
    }
}

/// Pools to the 4x4 token grid, attends across the 16 tokens, and resamples
/// back to the stage resolution.
fn global_mix(sa: &SelfAttention, feat: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let grid = fit_to_grid(feat, MIX_GRID, MIX_GRID)?;
    let tokens = ops::permute(&ops::reshape(&grid, vec![c, MIX_GRID * MIX_GRID])?, &[1, 0])?;
    let mixed = sa.forward(&tokens)?;
    let back = ops::reshape(&ops::permute(&mixed, &[1, 0])?, vec![c, MIX_GRID, MIX_GRID])?;
    fit_to_grid(&back, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn teacher_cfg() -> BackboneConfig {
        BackboneConfig {
            global_mixing: true,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn default_shape_trace_at_64() {
        for cfg in [BackboneConfig::default(), teacher_cfg()] {
            let mut rng = Rng::new(1);
            let bb = Backbone::init(&mut rng, cfg).unwrap();
            let img = Tensor::zeros(vec![3, 64, 64]);
            let pyr = bb.forward(&img).unwrap();
            let shapes: Vec<Vec<usize>> =
                pyr.levels.iter().map(|l| l.shape().to_vec()).collect();
            assert_eq!(
                shapes,
                vec![
                    vec![8, 32, 32],
                    vec![16, 16, 16],
                    vec![24, 8, 8],
                    vec![32, 4, 4],
                    vec![40, 2, 2]
                ]
            );
        }
    }

    #[test]
    fn odd_extents_round_up() {
        let mut rng = Rng::new(1);
        let bb = Backbone::init(&mut rng, BackboneConfig::default()).unwrap();
        let img = Tensor::zeros(vec![3, 33, 45]);
        let pyr = bb.forward(&img).unwrap();
        let (mut h, mut w) = (33usize, 45usize);
        for level in &pyr.levels {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            assert_eq!(&level.shape()[1..], &[h, w]);
        }
    }

    #[test]
    fn zero_image_stays_zero_without_mixing() {
        // Zero biases + zero input: every conv output is zero and GELU(0)=0.
        let mut rng = Rng::new(7);
        let bb = Backbone::init(&mut rng, BackboneConfig::default()).unwrap();
        let pyr = bb.forward(&Tensor::zeros(vec![3, 32, 32])).unwrap();
        for level in &pyr.levels {
            assert!(level.to_vec().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn small_input_is_a_dimension_error() {
        let mut rng = Rng::new(7);
        let bb = Backbone::init(&mut rng, BackboneConfig::default()).unwrap();
        assert!(matches!(
            bb.forward(&Tensor::zeros(vec![3, 31, 64])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn mixing_changes_outputs() {
        let mut rng = Rng::new(3);
        let teacher = Backbone::init(&mut rng, teacher_cfg()).unwrap();
        let mut rng = Rng::new(3);
        let student = Backbone::init(&mut rng, BackboneConfig::default()).unwrap();
        let img = Tensor::from_vec(
            vec![3, 32, 32],
            (0..3 * 32 * 32).map(|v| ((v * 37 % 101) as f32) / 101.0).collect(),
        )
        .unwrap();
        // Shared rng prefix: stage convs are drawn first in both, so the
        // first stage conv weights agree; outputs must still differ.
        let a = teacher.forward(&img).unwrap();
        let b = student.forward(&img).unwrap();
        let da = a.levels[4].to_vec();
        let db = b.levels[4].to_vec();
        assert!(da.iter().zip(&db).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn fit_to_grid_handles_both_directions() {
        let x = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(fit_to_grid(&x, 4, 4).unwrap().shape(), &[1, 4, 4]);
        assert_eq!(fit_to_grid(&x, 1, 1).unwrap().item(), 2.5);
        assert_eq!(fit_to_grid(&x, 2, 2).unwrap().to_vec(), x.to_vec());
        assert_eq!(fit_to_grid(&x, 1, 4).unwrap().shape(), &[1, 1, 4]);
    }
}
