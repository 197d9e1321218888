//! Teacher training and teacher→student knowledge distillation.
//!
//! The teacher optimizes plain score regression. The student additionally
//! matches the teacher's opinion features: with M opinion features per
//! model, the distillation loss is the mean of the M per-feature MSEs, and
//! the total objective is `l = l_d + alpha * MSE(P, G)` where `P` is the
//! predicted and `G` the labeled score. The teacher is frozen throughout;
//! its opinion features are computed once per training sample and cached.

use serde::{Deserialize, Serialize};

use crate::arch::{IqaModel, ModelConfig};
use crate::error::{Error, Result};
use crate::metrics;
use crate::optim::{cosine_lr, AdamState};
use crate::rng::{derive_seed, Rng};
use crate::synth::Sample;
use crate::tensor::{no_grad, ops, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    /// Cosine annealing restart period, in epochs.
    pub cosine_period: usize,
    pub lr_min: f32,
    /// Weight of the score-regression term in the distillation objective.
    pub alpha: f32,
    /// Random flips during score-regression training. Distillation ignores
    /// it: cached teacher features describe the images as generated.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-5,
            cosine_period: 30,
            lr_min: 0.0,
            alpha: 2.0,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.cosine_period == 0 {
            return Err(Error::config("cosine_period must be at least 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::config(format!(
                "lr_min {} must lie in [0, lr]",
                self.lr_min
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight_decay {} must be >= 0",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Total optimized loss.
    pub l: f64,
    /// Mean opinion-feature MSE (0 when no teacher is involved).
    pub l_d: f64,
    /// Raw score MSE(P, G), before the alpha weight.
    pub score_loss: f64,
    pub val_srcc: f64,
    pub val_plcc: f64,
    pub lr: f32,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Filled by the caller once the final checkpoint has been written.
    pub checkpoint: Option<std::path::PathBuf>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,l,l_d,score_loss,val_srcc,val_plcc,lr";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.l, r.l_d, r.score_loss, r.val_srcc, r.val_plcc, r.lr
            ));
        }
        out
    }

    pub fn final_val_srcc(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.val_srcc)
    }
}

/// Mean over feature pairs of the element-mean squared error. Both sides
/// must carry the same number of equally shaped features.
pub fn loss_distill(teacher_ops: &[Tensor], student_ops: &[Tensor]) -> Result<f32> {
    if teacher_ops.len() != student_ops.len() || teacher_ops.is_empty() {
        return Err(Error::dimension(format!(
            "feature count mismatch: {} vs {}",
            teacher_ops.len(),
            student_ops.len()
        )));
    }
    let mut total = 0.0f64;
    for (t, s) in teacher_ops.iter().zip(student_ops) {
        if t.shape() != s.shape() {
            return Err(Error::dimension(format!(
                "feature shape mismatch: {:?} vs {:?}",
                t.shape(),
                s.shape()
            )));
        }
        let (td, sd) = (t.to_vec(), s.to_vec());
        let sum: f64 = td
            .iter()
            .zip(&sd)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        total += sum / td.len() as f64;
    }
    Ok((total / teacher_ops.len() as f64) as f32)
}

/// Total objective `l = l_d + alpha * (p - g)^2` for a single prediction.
pub fn loss_total(l_d: f32, p: f32, g: f32, alpha: f32) -> f32 {
    l_d + alpha * (p - g) * (p - g)
}

fn sum_tensors(terms: &[Tensor]) -> Result<Tensor> {
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = ops::add(&acc, t)?;
    }
    Ok(acc)
}

enum Objective<'a> {
    /// Plain score regression `MSE(P, G)` — teacher pretraining, and the
    /// direct-training path used by the architecture ablations.
    ScoreOnly,
    /// Distillation against cached teacher opinion features, indexed like
    /// the training set. With `kd` false only `alpha * MSE(P, G)` is
    /// optimized (the no-distillation ablation) but `l_d` is still logged.
    Distill {
        teacher_features: &'a [Vec<Tensor>],
        kd: bool,
    },
}

/// Random view of a training image: independent horizontal/vertical flips.
/// Every statistic the label reflects (noise energy, blur bandwidth, block
/// grid spacing, contrast range) is invariant under mirroring, so the label
/// transfers exactly while each image stops appearing in a single fixed
/// orientation. Crops are deliberately not taken: changing the field of
/// view rescales the frequency content the score depends on.
fn augment_image(img: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let flip_h = rng.below(2) == 1;
    let flip_v = rng.below(2) == 1;
    if !flip_h && !flip_v {
        return Ok(img.clone());
    }
    let src = img.to_vec();
    let mut out = Vec::with_capacity(src.len());
    for cc in 0..c {
        for y in 0..h {
            let sy = if flip_v { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if flip_h { w - 1 - x } else { x };
                out.push(src[(cc * h + sy) * w + sx]);
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

fn run_epochs(
    model: &IqaModel,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    objective: Objective<'_>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("training needs non-empty train and val splits"));
    }
    let params: Vec<Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
    let mut opt = AdamState::new(params, cfg.lr, cfg.weight_decay);
    let mut shuffle_rng = Rng::new(derive_seed(cfg.seed, 0x6f72_6465)); // "orde"
    let mut aug_rng = Rng::new(derive_seed(cfg.seed, 0x6372_6f70)); // "crop"
    let augment = cfg.augment && matches!(objective, Objective::ScoreOnly);
    let val_mos: Vec<f32> = val.iter().map(|s| s.mos).collect();
    let m = model.cfg.m;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        opt.lr = cosine_lr(
            epoch as u64,
            cfg.cosine_period as u64,
            cfg.lr,
            cfg.lr_min,
        );
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let (mut sum_l, mut sum_ld, mut sum_score) = (0.0f64, 0.0f64, 0.0f64);

        for batch in order.chunks(cfg.batch_size) {
            let mut score_terms = Vec::with_capacity(batch.len());
            let mut ld_terms = Vec::with_capacity(batch.len());
            let mut ld_logged = 0.0f64;
            for &idx in batch {
                let sample = &train[idx];
                let image = if augment {
                    augment_image(&sample.image, &mut aug_rng)?
                } else {
                    sample.image.clone()
                };
                let (score, opinions) = model.forward(&image)?;
                score_terms.push(ops::mse(&score, &Tensor::scalar(sample.mos))?);
                if let Objective::Distill {
                    teacher_features,
                    kd,
                } = &objective
                {
                    let cached = &teacher_features[idx];
                    if *kd {
                        let per: Result<Vec<Tensor>> = opinions
                            .iter()
                            .zip(cached)
                            .map(|(s, t)| ops::mse(s, t))
                            .collect();
                        ld_terms.push(ops::scale(&sum_tensors(&per?)?, 1.0 / m as f32));
                    } else {
                        ld_logged += loss_distill(cached, &opinions)? as f64;
                    }
                }
            }
            let inv_b = 1.0 / batch.len() as f32;
            let score_mse = ops::scale(&sum_tensors(&score_terms)?, inv_b);
            let (loss, batch_ld) = match &objective {
                Objective::ScoreOnly => (score_mse.clone(), 0.0),
                Objective::Distill { kd: true, .. } => {
                    let ld = ops::scale(&sum_tensors(&ld_terms)?, inv_b);
                    let ld_value = ld.item() as f64;
                    (
                        ops::add(&ld, &ops::scale(&score_mse, cfg.alpha))?,
                        ld_value,
                    )
                }
                Objective::Distill { kd: false, .. } => (
                    ops::scale(&score_mse, cfg.alpha),
                    ld_logged / batch.len() as f64,
                ),
            };
            let loss_value = loss.item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::contract(format!(
                    "loss became non-finite at epoch {epoch}"
                )));
            }
            loss.backward()?;
            opt.step()?;
            let b = batch.len() as f64;
            sum_l += loss_value * b;
            sum_ld += batch_ld * b;
            sum_score += score_mse.item() as f64 * b;
        }

        let preds: Result<Vec<f32>> = val.iter().map(|s| model.predict(&s.image)).collect();
        let preds = preds?;
        let n = train.len() as f64;
        records.push(EpochRecord {
            epoch,
            l: sum_l / n,
            l_d: sum_ld / n,
            score_loss: sum_score / n,
            val_srcc: metrics::srcc(&preds, &val_mos).unwrap_or(f64::NAN),
            val_plcc: metrics::plcc(&preds, &val_mos).unwrap_or(f64::NAN),
            lr: opt.lr,
        });
    }
    Ok(records)
}

/// Trains a freshly initialized model on score regression alone.
pub fn train_teacher(
    train: &[Sample],
    val: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(IqaModel, TrainReport)> {
    let model = IqaModel::init(model_cfg.clone(), cfg.seed)?;
    let records = run_epochs(&model, train, val, cfg, Objective::ScoreOnly)?;
    Ok((
        model,
        TrainReport {
            records,
            checkpoint: None,
        },
    ))
}

/// Runs every training image through the frozen teacher once and keeps the
/// detached opinion features.
pub fn cache_teacher_features(teacher: &IqaModel, train: &[Sample]) -> Result<Vec<Vec<Tensor>>> {
    no_grad(|| {
        train
            .iter()
            .map(|s| {
                let (_, opinions) = teacher.forward(&s.image)?;
                Ok(opinions.iter().map(|o| o.detach()).collect())
            })
            .collect()
    })
}

fn check_distill_compat(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    if !teacher.global_mixing {
        return Err(Error::config(
            "distillation teacher must be a global-mixing model; \
             this checkpoint holds a student backbone",
        ));
    }
    if student.global_mixing {
        return Err(Error::config(
            "student configuration must not enable global mixing",
        ));
    }
    if student.no_mal {
        return Err(Error::config(
            "a student without opinion MALs has no features to distill; \
             train it directly instead",
        ));
    }
    if teacher.c_mal != student.c_mal || teacher.d != student.d || teacher.m != student.m {
        return Err(Error::config(format!(
            "opinion feature layout mismatch: teacher (c_mal={}, d={}, m={}), \
             student (c_mal={}, d={}, m={})",
            teacher.c_mal, teacher.d, teacher.m, student.c_mal, student.d, student.m
        )));
    }
    Ok(())
}

/// Distills a frozen teacher into a fresh student. Opinion features are
/// matched by index. With `kd` false the same loop trains the student on
/// the alpha-weighted score term alone.
pub fn distill_student(
    teacher: &IqaModel,
    train: &[Sample],
    val: &[Sample],
    student_cfg: &ModelConfig,
    cfg: &TrainConfig,
    kd: bool,
) -> Result<(IqaModel, TrainReport)> {
    check_distill_compat(&teacher.cfg, student_cfg)?;
    let student = IqaModel::init(student_cfg.clone(), cfg.seed)?;
    let cache = cache_teacher_features(teacher, train)?;
    let records = run_epochs(
        &student,
        train,
        val,
        cfg,
        Objective::Distill {
            teacher_features: &cache,
            kd,
        },
    )?;
    Ok((
        student,
        TrainReport {
            records,
            checkpoint: None,
        },
    ))
}
