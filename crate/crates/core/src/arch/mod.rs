//! Full teacher/student model: backbone pyramid -> five LDAs -> M opinion
//! MALs -> fusion MAL -> regression head.

pub mod head;
pub mod inspect;
pub mod lda;
pub mod mal;

use serde::{Deserialize, Serialize};

use crate::backbone::{fit_to_grid, Backbone, BackboneConfig, STAGES};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ops, Tensor};
use head::Head;
use lda::Lda;
use mal::Mal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stage_channels: Vec<usize>,
    /// Teacher flag: enables the backbone's per-stage global mixing.
    pub global_mixing: bool,
    /// Common channel width C of every opinion feature.
    pub c_mal: usize,
    /// Token count D per opinion feature; must be a perfect square (g*g).
    pub d: usize,
    /// Number of opinion MALs.
    pub m: usize,
    pub head_c1: usize,
    pub head_c2: usize,
    pub fc_in: usize,
    pub fc_hidden: usize,
    /// Ablation: drop the opinion MALs; the five LDA outputs are averaged
    /// and fed straight to the fusion MAL.
    pub no_mal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: vec![8, 16, 24, 32, 40],
            global_mixing: false,
            c_mal: 32,
            d: 16,
            m: 3,
            head_c1: 16,
            head_c2: 8,
            fc_in: 128,
            fc_hidden: 64,
            no_mal: false,
        }
    }
}

impl ModelConfig {
    pub fn teacher() -> Self {
        ModelConfig {
            global_mixing: true,
            ..ModelConfig::default()
        }
    }

    pub fn student() -> Self {
        ModelConfig::default()
    }

    /// Grid edge g with g*g = D.
    pub fn grid(&self) -> usize {
        (self.d as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let backbone = BackboneConfig {
            stage_channels: self.stage_channels.clone(),
            global_mixing: self.global_mixing,
            input_channels: 3,
        };
        backbone.validate()?;
        let g = self.grid();
        if g == 0 || g * g != self.d {
            return Err(Error::config(format!(
                "token count d={} is not a perfect square",
                self.d
            )));
        }
        if self.m == 0 {
            return Err(Error::config("at least one opinion MAL is required"));
        }
        if self.c_mal == 0 || self.head_c1 == 0 || self.head_c2 == 0 || self.fc_hidden == 0 {
            return Err(Error::config("model widths must be positive"));
        }
        if self.head_c2 * self.d != self.fc_in {
            return Err(Error::config(format!(
                "head flatten width {} does not match fc_in {}",
                self.head_c2 * self.d,
                self.fc_in
            )));
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            stage_channels: self.stage_channels.clone(),
            global_mixing: self.global_mixing,
            input_channels: 3,
        }
    }
}

pub struct IqaModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    ldas: Vec<Lda>,
    opinion_mals: Vec<Mal>,
    fusion: Mal,
    head: Head,
}

impl IqaModel {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<IqaModel> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let backbone = Backbone::init(&mut rng, cfg.backbone())?;
        let g = cfg.grid();
        let ldas: Vec<Lda> = cfg
            .stage_channels
            .iter()
            .map(|&c| Lda::init(&mut rng, c, cfg.c_mal, g))
            .collect();
        let opinion_mals: Vec<Mal> = if cfg.no_mal {
            Vec::new()
        } else {
            (0..cfg.m)
                .map(|_| Mal::init(&mut rng, cfg.c_mal, cfg.d, STAGES))
                .collect()
        };
        let fusion_n = if cfg.no_mal { 1 } else { cfg.m };
        let fusion = Mal::init(&mut rng, cfg.c_mal, cfg.d, fusion_n);
        let head = Head::init(
            &mut rng,
            cfg.c_mal,
            g,
            cfg.head_c1,
            cfg.head_c2,
            cfg.fc_in,
            cfg.fc_hidden,
        )?;
        Ok(IqaModel {
            cfg,
            backbone,
            ldas,
            opinion_mals,
            fusion,
            head,
        })
    }

    /// Unified `[C_mal, D]` features from the five pyramid levels. Levels
    /// smaller than the pooling grid (deep stages of small inputs) are
    /// nearest-upsampled to the grid first.
    fn lda_features(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let pyramid = self.backbone.forward(img)?;
        let g = self.cfg.grid();
        let mut feats = Vec::with_capacity(STAGES);
        for (lda, level) in self.ldas.iter().zip(&pyramid.levels) {
            let (h, w) = (level.shape()[1], level.shape()[2]);
            let level = if h < g || w < g {
                fit_to_grid(level, h.max(g), w.max(g))?
            } else {
                level.clone()
            };
            feats.push(lda.forward(&level)?);
        }
        Ok(feats)
    }

    /// Score plus the opinion features entering fusion (M of them; the
    /// averaged LDA feature for the no-MAL ablation).
    pub fn forward(&self, img: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (score, opinions, _) = self.forward_traced(img, false)?;
        Ok((score, opinions))
    }

    /// As [`IqaModel::forward`], additionally returning each opinion MAL's
    /// feature-wise attention matrix when `trace` is set.
    pub fn forward_traced(
        &self,
        img: &Tensor,
        trace: bool,
    ) -> Result<(Tensor, Vec<Tensor>, Vec<Tensor>)> {
        let lda_feats = self.lda_features(img)?;
        let (opinions, attns) = if self.cfg.no_mal {
            let mut sum = lda_feats[0].clone();
            for f in &lda_feats[1..] {
                sum = ops::add(&sum, f)?;
            }
            (vec![ops::scale(&sum, 1.0 / STAGES as f32)], Vec::new())
        } else {
            let mut opinions = Vec::with_capacity(self.opinion_mals.len());
            let mut attns = Vec::new();
            for mal in &self.opinion_mals {
                if trace {
                    let (op, attn) = mal.forward_detailed(&lda_feats)?;
                    opinions.push(op);
                    attns.push(attn);
                } else {
                    opinions.push(mal.forward(&lda_feats)?);
                }
            }
            (opinions, attns)
        };
        let fused = self.fusion.forward(&opinions)?;
        let score = self.head.forward(&fused)?;
        Ok((score, opinions, attns))
    }

    /// Scalar prediction without graph construction.
    pub fn predict(&self, img: &Tensor) -> Result<f32> {
        crate::tensor::no_grad(|| self.forward(img).map(|(s, _)| s.item()))
    }

    /// Every trainable tensor with its checkpoint name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.backbone.collect_params("backbone", &mut out);
        for (j, lda) in self.ldas.iter().enumerate() {
            lda.collect_params(&format!("lda{j}"), &mut out);
        }
        for (i, mal) in self.opinion_mals.iter().enumerate() {
            mal.collect_params(&format!("mal{i}"), &mut out);
        }
        self.fusion.collect_params("fusion", &mut out);
        self.head.collect_params("head", &mut out);
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            stage_channels: vec![4, 6, 8, 10, 12],
            c_mal: 8,
            d: 4,
            m: 2,
            head_c1: 6,
            head_c2: 4,
            fc_in: 16,
            fc_hidden: 8,
            ..ModelConfig::default()
        }
    }

    fn image(seed: u64, hw: usize) -> Tensor {
        let mut rng = Rng::new(seed);
        let data: Vec<f32> = (0..3 * hw * hw).map(|_| rng.uniform()).collect();
        Tensor::from_vec(vec![3, hw, hw], data).unwrap()
    }

    #[test]
    fn default_shape_contract_at_64() {
        let model = IqaModel::init(ModelConfig::teacher(), 7).unwrap();
        let (score, opinions) = model.forward(&image(1, 64)).unwrap();
        assert!(score.item().is_finite());
        assert_eq!(opinions.len(), 3);
        for op in &opinions {
            assert_eq!(op.shape(), &[32, 16]);
        }
    }

    #[test]
    fn m1_runs_with_single_opinion() {
        let cfg = ModelConfig {
            m: 1,
            ..small_cfg()
        };
        let model = IqaModel::init(cfg, 3).unwrap();
        let (_, opinions) = model.forward(&image(2, 32)).unwrap();
        assert_eq!(opinions.len(), 1);
    }

    #[test]
    fn teacher_student_opinions_share_shape() {
        let t = IqaModel::init(ModelConfig::teacher(), 1).unwrap();
        let s = IqaModel::init(ModelConfig::student(), 2).unwrap();
        let img = image(3, 64);
        let (_, t_ops) = t.forward(&img).unwrap();
        let (_, s_ops) = s.forward(&img).unwrap();
        assert_eq!(t_ops.len(), s_ops.len());
        for (a, b) in t_ops.iter().zip(&s_ops) {
            assert_eq!(a.shape(), b.shape());
        }
    }

    #[test]
    fn forward_is_seed_deterministic() {
        let a = IqaModel::init(small_cfg(), 42).unwrap();
        let b = IqaModel::init(small_cfg(), 42).unwrap();
        let img = image(4, 32);
        assert_eq!(
            a.predict(&img).unwrap().to_bits(),
            b.predict(&img).unwrap().to_bits()
        );
    }

    #[test]
    fn param_count_strictly_increases_with_m() {
        let count = |m: usize| {
            IqaModel::init(
                ModelConfig {
                    m,
                    ..small_cfg()
                },
                0,
            )
            .unwrap()
            .param_count()
        };
        assert!(count(1) < count(2));
        assert!(count(2) < count(3));
    }

    #[test]
    fn fusion_of_identical_opinions_equals_single_input_fusion() {
        // With every per-input SA sharing weights, N identical inputs
        // duplicate each attention key; softmax renormalizes, so the result
        // equals the N=1 case.
        let mut r1 = Rng::new(77);
        let single = Mal::init(&mut r1, 8, 4, 1);
        let mut r2 = Rng::new(78);
        let triple = Mal::init(&mut r2, 8, 4, 3);
        let mut src = Vec::new();
        single.collect_params("x", &mut src);
        let mut dst = Vec::new();
        triple.collect_params("x", &mut dst);
        // Copy: per-input SA weights of the single into all three of the
        // triple, plus feature/channel branches.
        let by_name: std::collections::HashMap<String, Tensor> = src.into_iter().collect();
        for (name, t) in &dst {
            let lookup = if let Some(rest) = name.strip_prefix("x.sa") {
                let dot = rest.find('.').unwrap();
                format!("x.sa0{}", &rest[dot..])
            } else {
                name.clone()
            };
            t.set_data(&by_name[&lookup].to_vec());
        }
        let mut rng = Rng::new(5);
        let feat_data: Vec<f32> = (0..32).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let feat = Tensor::from_vec(vec![8, 4], feat_data).unwrap();
        let one = single.forward(&[feat.clone()]).unwrap().to_vec();
        let three = triple
            .forward(&[feat.clone(), feat.clone(), feat])
            .unwrap()
            .to_vec();
        for (a, b) in one.iter().zip(&three) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn no_mal_variant_averages_lda_features() {
        let cfg = ModelConfig {
            no_mal: true,
            ..small_cfg()
        };
        let model = IqaModel::init(cfg, 5).unwrap();
        let (score, opinions) = model.forward(&image(6, 32)).unwrap();
        assert!(score.item().is_finite());
        assert_eq!(opinions.len(), 1);
        assert_eq!(opinions[0].shape(), &[8, 4]);
        // No opinion MAL parameters present.
        assert!(model.named_params().iter().all(|(n, _)| !n.starts_with("mal")));
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let bad_d = ModelConfig {
            d: 15,
            ..ModelConfig::default()
        };
        assert!(matches!(IqaModel::init(bad_d, 0), Err(Error::Config(_))));
        let bad_m = ModelConfig {
            m: 0,
            ..ModelConfig::default()
        };
        assert!(matches!(IqaModel::init(bad_m, 0), Err(Error::Config(_))));
        let bad_fc = ModelConfig {
            fc_in: 100,
            ..ModelConfig::default()
        };
        assert!(matches!(IqaModel::init(bad_fc, 0), Err(Error::Config(_))));
    }
}
