//! Model inspection: pairwise opinion-feature similarity and per-MAL
//! attention maps.

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};

use super::IqaModel;

/// Cosine similarity in f64; `None` when either vector has zero norm.
fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot / (na.sqrt() * nb.sqrt()))
}

/// Similarity entries are `None` when any probe image produced a zero-norm
/// opinion feature for the pair (undefined rather than NaN).
pub type SimilarityMatrix = Vec<Vec<Option<f32>>>;

fn mean_matrix(per_image: Vec<Vec<Vec<Option<f64>>>>, m: usize) -> SimilarityMatrix {
    let count = per_image.len() as f64;
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let mut sum = 0.0f64;
                    for img in &per_image {
                        sum += img[i][j]?;
                    }
                    Some((sum / count) as f32)
                })
                .collect()
        })
        .collect()
}

/// Mean over the probe batch of pairwise cosine similarity between the
/// model's own flattened opinion features. Diagonal entries are exactly 1.
pub fn self_similarity(model: &IqaModel, probe: &[Tensor]) -> Result<SimilarityMatrix> {
    if probe.is_empty() {
        return Err(Error::config("similarity probe batch is empty"));
    }
    let mut per_image = Vec::with_capacity(probe.len());
    for img in probe {
        let opinions = no_grad(|| model.forward(img))?.1;
        let flat: Vec<Vec<f32>> = opinions.iter().map(|t| t.to_vec()).collect();
        let m = flat.len();
        let mut mat = vec![vec![None; m]; m];
        for i in 0..m {
            for j in i..m {
                let v = if i == j {
                    // cos(x,x) = 1 by definition (still undefined at zero norm).
                    cosine(&flat[i], &flat[i]).map(|_| 1.0)
                } else {
                    cosine(&flat[i], &flat[j])
                };
                mat[i][j] = v;
                mat[j][i] = v;
            }
        }
        per_image.push(mat);
    }
    let m = per_image[0].len();
    Ok(mean_matrix(per_image, m))
}

/// Entry (i, j): mean cosine similarity between teacher opinion i and
/// student opinion j over the probe batch.
pub fn cross_similarity(
    teacher: &IqaModel,
    student: &IqaModel,
    probe: &[Tensor],
) -> Result<SimilarityMatrix> {
    if probe.is_empty() {
        return Err(Error::config("similarity probe batch is empty"));
    }
    let mut per_image = Vec::with_capacity(probe.len());
    for img in probe {
        let t_ops = no_grad(|| teacher.forward(img))?.1;
        let s_ops = no_grad(|| student.forward(img))?.1;
        if t_ops.len() != s_ops.len() {
            return Err(Error::config(format!(
                "teacher has {} opinion features, student {}",
                t_ops.len(),
                s_ops.len()
            )));
        }
        let m = t_ops.len();
        let mut mat = vec![vec![None; m]; m];
        for (i, t) in t_ops.iter().enumerate() {
            let tv = t.to_vec();
            for (j, s) in s_ops.iter().enumerate() {
                mat[i][j] = cosine(&tv, &s.to_vec());
            }
        }
        per_image.push(mat);
    }
    let m = per_image[0].len();
    Ok(mean_matrix(per_image, m))
}

/// One grayscale attention map per opinion MAL, at the input resolution.
pub struct AttentionMaps {
    /// Row-major bytes, one `h*w` buffer per MAL.
    pub maps: Vec<Vec<u8>>,
    pub h: usize,
    pub w: usize,
}

/// Feature-wise attention weights of each opinion MAL, averaged over
/// queries, split into the per-level g x g grids, nearest-upsampled to the
/// input size, averaged across levels, and min-max normalized to 0..=255.
pub fn attention_maps(model: &IqaModel, img: &Tensor) -> Result<AttentionMaps> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let g = model.cfg.grid();
    let d = model.cfg.d;
    let attns = no_grad(|| model.forward_traced(img, true))?.2;
    let mut maps = Vec::with_capacity(attns.len());
    for attn in &attns {
        let l = attn.shape()[0]; // D*N tokens
        let n = l / d;
        let data = attn.to_vec();
        // Mean over queries: per-key weight vector of length D*N.
        let mut key_weight = vec![0.0f64; l];
        for q in 0..l {
            for k in 0..l {
                key_weight[k] += data[q * l + k] as f64;
            }
        }
        // Per level: grid of its D keys, upsampled and averaged.
        let mut acc = vec![0.0f64; h * w];
        for level in 0..n {
            let grid_vals: Vec<f32> = (0..d)
                .map(|di| (key_weight[di * n + level] / l as f64) as f32)
                .collect();
            let grid = Tensor::from_vec(vec![1, g, g], grid_vals)?;
            let up = crate::backbone::fit_to_grid(&grid, h, w)?;
            for (a, &v) in acc.iter_mut().zip(up.data().iter()) {
                *a += v as f64 / n as f64;
            }
        }
        let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let bytes: Vec<u8> = if hi > lo {
            acc.iter()
                .map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
                .collect()
        } else {
            vec![0; h * w]
        };
        maps.push(bytes);
    }
    Ok(AttentionMaps { maps, h, w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ModelConfig;
    use crate::rng::Rng;

    fn model() -> IqaModel {
        let cfg = ModelConfig {
            stage_channels: vec![4, 6, 8, 10, 12],
            c_mal: 8,
            d: 4,
            m: 3,
            head_c1: 6,
            head_c2: 4,
            fc_in: 16,
            fc_hidden: 8,
            ..ModelConfig::default()
        };
        IqaModel::init(cfg, 11).unwrap()
    }

    fn probe(count: usize) -> Vec<Tensor> {
        let mut rng = Rng::new(21);
        (0..count)
            .map(|_| {
                let data: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.uniform()).collect();
                Tensor::from_vec(vec![3, 32, 32], data).unwrap()
            })
            .collect()
    }

    #[test]
    fn self_similarity_has_unit_diagonal_and_symmetry() {
        let m = model();
        let mat = self_similarity(&m, &probe(3)).unwrap();
        assert_eq!(mat.len(), 3);
        for i in 0..3 {
            assert_eq!(mat[i][i], Some(1.0));
            for j in 0..3 {
                let a = mat[i][j].unwrap();
                let b = mat[j][i].unwrap();
                assert!((a - b).abs() < 1e-6);
                assert!(a <= 1.0 + 1e-6 && a >= -1.0 - 1e-6);
            }
        }
    }

    #[test]
    fn cross_similarity_shape_matches_m() {
        let t = model();
        let s = model();
        let mat = cross_similarity(&t, &s, &probe(2)).unwrap();
        assert_eq!(mat.len(), 3);
        assert_eq!(mat[0].len(), 3);
    }

    #[test]
    fn empty_probe_is_a_config_error() {
        let m = model();
        assert!(matches!(
            self_similarity(&m, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_norm_features_are_undefined_not_nan() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), None);
        assert!(cosine(&[1.0, 0.0], &[1.0, 2.0]).is_some());
    }

    #[test]
    fn attention_maps_match_input_size_and_differ() {
        let m = model();
        let img = probe(1).remove(0);
        let maps = attention_maps(&m, &img).unwrap();
        assert_eq!(maps.maps.len(), 3);
        assert_eq!(maps.h, 32);
        assert_eq!(maps.w, 32);
        for map in &maps.maps {
            assert_eq!(map.len(), 32 * 32);
        }
        assert_ne!(maps.maps[0], maps.maps[1]);
    }
}
