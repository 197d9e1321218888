//! Evaluation metrics: Pearson, Spearman, Kendall correlations plus RMSE
//! and MAE. Everything is computed in f64; the correlations error out on
//! degenerate (zero-variance) inputs instead of returning NaN.

use crate::error::{Error, Result};

fn check_lengths(p: &[f32], g: &[f32], min: usize, what: &str) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::dimension(format!(
            "{what}: {} predictions vs {} ground truths",
            p.len(),
            g.len()
        )));
    }
    if p.len() < min {
        return Err(Error::dimension(format!(
            "{what} needs at least {min} pairs, got {}",
            p.len()
        )));
    }
    Ok(())
}

fn pearson_f64(x: &[f64], y: &[f64], what: &str) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::undefined_metric(format!(
            "{what} undefined: zero variance"
        )));
    }
    // Rounding can push the quotient an ulp past the mathematical bounds
    // (e.g. exactly anticorrelated ranks); clamp so callers can rely on
    // [-1, 1].
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Average ranks (1-based); tied values share the mean of their positions.
fn average_ranks(xs: &[f32]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite scores"));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average 1-based rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson linear correlation of the raw values.
pub fn plcc(predictions: &[f32], ground_truths: &[f32]) -> Result<f64> {
    check_lengths(predictions, ground_truths, 2, "plcc")?;
    let x: Vec<f64> = predictions.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = ground_truths.iter().map(|&v| v as f64).collect();
    pearson_f64(&x, &y, "plcc")
}

/// Spearman rank correlation: Pearson over average ranks.
pub fn srcc(predictions: &[f32], ground_truths: &[f32]) -> Result<f64> {
    check_lengths(predictions, ground_truths, 2, "srcc")?;
    let rx = average_ranks(predictions);
    let ry = average_ranks(ground_truths);
    pearson_f64(&rx, &ry, "srcc")
}

/// Kendall tau-b (tie-corrected).
pub fn krcc(predictions: &[f32], ground_truths: &[f32]) -> Result<f64> {
    check_lengths(predictions, ground_truths, 2, "krcc")?;
    let n = predictions.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut tied_x = 0i64; // pairs tied in predictions (both-tied included)
    let mut tied_y = 0i64; // pairs tied in ground truths
    for i in 0..n {
        for j in i + 1..n {
            use std::cmp::Ordering::Equal;
            let dx = predictions[i].partial_cmp(&predictions[j]).expect("finite");
            let dy = ground_truths[i].partial_cmp(&ground_truths[j]).expect("finite");
            if dx == Equal {
                tied_x += 1;
            }
            if dy == Equal {
                tied_y += 1;
            }
            if dx != Equal && dy != Equal {
                if dx == dy {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = (((n0 - tied_x) as f64) * ((n0 - tied_y) as f64)).sqrt();
    if denom == 0.0 {
        return Err(Error::undefined_metric(
            "krcc undefined: a sequence is entirely tied",
        ));
    }
    Ok(((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0))
}

/// Root mean squared error.
pub fn rmse(predictions: &[f32], ground_truths: &[f32]) -> Result<f64> {
    check_lengths(predictions, ground_truths, 1, "rmse")?;
    let n = predictions.len() as f64;
    let mut s = 0.0f64;
    for (&p, &g) in predictions.iter().zip(ground_truths) {
        let d = p as f64 - g as f64;
        s += d * d;
    }
    Ok((s / n).sqrt())
}

/// Mean absolute error.
pub fn mae(predictions: &[f32], ground_truths: &[f32]) -> Result<f64> {
    check_lengths(predictions, ground_truths, 1, "mae")?;
    let n = predictions.len() as f64;
    let s: f64 = predictions
        .iter()
        .zip(ground_truths)
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .sum();
    Ok(s / n)
}

/// All five metrics for one prediction/ground-truth collection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub krcc: f32,
    pub srcc: f32,
    pub plcc: f32,
    pub rmse: f32,
    pub mae: f32,
}

impl MetricsReport {
    pub fn compute(predictions: &[f32], ground_truths: &[f32]) -> Result<MetricsReport> {
        Ok(MetricsReport {
            krcc: krcc(predictions, ground_truths)? as f32,
            srcc: srcc(predictions, ground_truths)? as f32,
            plcc: plcc(predictions, ground_truths)? as f32,
            rmse: rmse(predictions, ground_truths)? as f32,
            mae: mae(predictions, ground_truths)? as f32,
        })
    }

    pub const CSV_HEADER: &'static str = "krcc,srcc,plcc,rmse,mae";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.krcc, self.srcc, self.plcc, self.rmse, self.mae
        )
    }
}
