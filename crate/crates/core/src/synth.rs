//! Procedural image corpus with parametric distortions and an analytic
//! pseudo-MOS, standing in for a human-annotated IQA dataset.
//!
//! Pristine images compose smooth value-noise octaves, linear gradients and
//! a checker pattern. Distortions degrade them with a severity knob in
//! [0,1]; the pseudo-MOS is a monotone function of the severities only, so
//! quality labels are exact and reproducible.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pnm::{read_ppm, write_ppm};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistortionKind {
    GaussianBlur,
    AdditiveNoise,
    BlockAverage,
    ContrastReduce,
}

pub const ALL_KINDS: [DistortionKind; 4] = [
    DistortionKind::GaussianBlur,
    DistortionKind::AdditiveNoise,
    DistortionKind::BlockAverage,
    DistortionKind::ContrastReduce,
];

impl DistortionKind {
    /// Position in the fixed application order used by [`make_dataset`]:
    /// blur, then blocking, then contrast, then noise. Applying noise last
    /// keeps its amplitude readable from the finished image (an earlier
    /// blur or contrast pass would rescale it by an amount the labels
    /// don't know about), and the same goes for the other cues.
    pub fn apply_rank(&self) -> usize {
        match self {
            DistortionKind::GaussianBlur => 0,
            DistortionKind::BlockAverage => 1,
            DistortionKind::ContrastReduce => 2,
            DistortionKind::AdditiveNoise => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistortionKind::GaussianBlur => "gaussian_blur",
            DistortionKind::AdditiveNoise => "additive_noise",
            DistortionKind::BlockAverage => "block_average",
            DistortionKind::ContrastReduce => "contrast_reduce",
        }
    }

    pub fn parse(s: &str) -> Result<DistortionKind> {
        ALL_KINDS
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown distortion kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    /// Severity in [0,1]; 0 is the bit-exact identity.
    pub severity: f32,
}

impl DistortionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity) || !self.severity.is_finite() {
            return Err(Error::config(format!(
                "severity {} outside [0,1]",
                self.severity
            )));
        }
        Ok(())
    }
}

/// `kind:severity;kind:severity` descriptor used in dataset manifests.
pub fn describe_distortions(specs: &[DistortionSpec]) -> String {
    specs
        .iter()
        .map(|s| format!("{}:{}", s.kind.name(), s.severity))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn parse_distortions(text: &str) -> Result<Vec<DistortionSpec>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(';')
        .map(|part| {
            let (kind, sev) = part
                .split_once(':')
                .ok_or_else(|| Error::config(format!("bad distortion descriptor `{part}`")))?;
            let spec = DistortionSpec {
                kind: DistortionKind::parse(kind)?,
                severity: sev
                    .parse::<f32>()
                    .map_err(|_| Error::config(format!("bad severity `{sev}`")))?,
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

pub struct Sample {
    /// `[3,H,W]`, values in [0,1].
    pub image: Tensor,
    pub mos: f32,
    pub seed: u64,
    pub distortions: Vec<DistortionSpec>,
}

/// Bilinearly sampled value-noise layer: a coarse random grid of cell size
/// `scale`, interpolated to h x w.
fn noise_octave(rng: &mut Rng, h: usize, w: usize, scale: usize, amp: f32) -> Vec<f32> {
    let gh = h / scale + 2;
    let gw = w / scale + 2;
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.uniform_in(-amp, amp)).collect();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let fy = y as f32 / scale as f32;
        let y0 = fy as usize;
        let ty = fy - y0 as f32;
        for x in 0..w {
            let fx = x as f32 / scale as f32;
            let x0 = fx as usize;
            let tx = fx - x0 as f32;
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Deterministic pristine image: gradients + shared noise octaves + checker.
///
/// The octave and checker amplitudes are fixed: they carry the fine
/// structure that the distortions erode, and holding them constant keeps
/// severity comparable across samples instead of confounding it with
/// per-image texture strength. Variety comes from the random octave
/// patterns, checker phase/period, and per-channel base and gradients,
/// whose ranges are chosen so values rarely clip at 0 or 1.
pub fn gen_pristine(seed: u64, h: usize, w: usize) -> Tensor {
    assert!(h >= 32 && w >= 32, "pristine images are at least 32x32");
    let mut rng = Rng::new(derive_seed(seed, 0x7072_6973)); // "pris"
    let octaves: Vec<Vec<f32>> = [(32usize, 0.16f32), (16, 0.12), (8, 0.10), (4, 0.08)]
        .iter()
        .map(|&(s, a)| noise_octave(&mut rng, h, w, s, a))
        .collect();
    let period = 8 + rng.below(17); // 8..=24
    let (px, py) = (rng.below(period), rng.below(period));
    let checker_amp = 0.06;
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        let base = rng.uniform_in(0.35, 0.65);
        let gx = rng.uniform_in(-0.18, 0.18);
        let gy = rng.uniform_in(-0.18, 0.18);
        for y in 0..h {
            for x in 0..w {
                let mut v = base + gx * (x as f32 / w as f32) + gy * (y as f32 / h as f32);
                for oct in &octaves {
                    v += oct[y * w + x];
                }
                let cell = ((x + px) / period + (y + py) / period) % 2;
                v += if cell == 0 { checker_amp } else { -checker_amp };
                data[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data).expect("constructed shape")
}

fn reflect(i: isize, n: usize) -> usize {
    // Symmetric reflection: -1 -> 0, -2 -> 1, n -> n-1, n+1 -> n-2.
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_blur(data: &mut [f32], h: usize, w: usize, sigma: f32) {
    let radius = (3.0 * sigma).ceil() as usize;
    if radius == 0 {
        return;
    }
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    for i in -(radius as isize)..=(radius as isize) {
        kernel.push((-(i * i) as f64 / s2).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();

    for plane in data.chunks_mut(h * w) {
        let mut tmp = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - radius as isize, w);
                    acc += k * plane[y * w + sx] as f64;
                }
                tmp[y * w + x] = acc as f32;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - radius as isize, h);
                    acc += k * tmp[sy * w + x] as f64;
                }
                plane[y * w + x] = (acc as f32).clamp(0.0, 1.0);
            }
        }
    }
}

fn block_average(data: &mut [f32], h: usize, w: usize, b: usize) {
    for plane in data.chunks_mut(h * w) {
        for by in (0..h).step_by(b) {
            for bx in (0..w).step_by(b) {
                let (y1, x1) = ((by + b).min(h), (bx + b).min(w));
                let mut acc = 0.0f64;
                for y in by..y1 {
                    for x in bx..x1 {
                        acc += plane[y * w + x] as f64;
                    }
                }
                let mean = (acc / ((y1 - by) * (x1 - bx)) as f64) as f32;
                for y in by..y1 {
                    for x in bx..x1 {
                        plane[y * w + x] = mean;
                    }
                }
            }
        }
    }
}

/// Degrades `img` according to `spec`. Noise draws come from `rng`;
/// severity 0 returns the input bit-exact without consuming draws.
pub fn apply_distortion(img: &Tensor, spec: &DistortionSpec, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let s = spec.severity;
    if s == 0.0 {
        return Ok(img.detach());
    }
    let mut data = img.to_vec();
    match spec.kind {
        DistortionKind::GaussianBlur => gaussian_blur(&mut data, h, w, 4.0 * s),
        DistortionKind::AdditiveNoise => {
            let std = 0.2 * s;
            for v in &mut data {
                *v = (*v + std * rng.normal()).clamp(0.0, 1.0);
            }
        }
        DistortionKind::BlockAverage => {
            let b = 1 + (7.0 * s).round() as usize;
            block_average(&mut data, h, w, b);
        }
        DistortionKind::ContrastReduce => {
            let factor = 1.0 - 0.8 * s;
            for plane in data.chunks_mut(h * w) {
                let mean =
                    (plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64) as f32;
                for v in plane.iter_mut() {
                    *v = (mean + factor * (*v - mean)).clamp(0.0, 1.0);
                }
            }
        }
    }
    Tensor::from_vec(img.shape().to_vec(), data)
}

/// Analytic quality label: `prod_k (1 - 0.9 * s_k^0.8)`, in [0,1], equal to
/// 1 for a pristine image and monotone non-increasing in every severity.
pub fn pseudo_mos(specs: &[DistortionSpec]) -> f32 {
    let mut mos = 1.0f64;
    for spec in specs {
        mos *= 1.0 - 0.9 * (spec.severity as f64).powf(0.8);
    }
    mos as f32
}

/// Generates `n` samples with 1..=3 distinct random distortions each and
/// splits them deterministically: the first `floor(n*split_ratio)` samples
/// (clamped so both sides keep at least 2) train, the rest validate.
///
/// Distortions are applied in the fixed [`DistortionKind::apply_rank`]
/// order regardless of which subset was drawn, so a given severity always
/// leaves the same statistical footprint; with a random order the label
/// would depend on information the image no longer carries.
pub fn make_dataset(
    seed: u64,
    n: usize,
    h: usize,
    w: usize,
    split_ratio: f32,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if n < 4 {
        return Err(Error::config(format!(
            "dataset needs at least 4 samples to split, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::config(format!(
            "split ratio {split_ratio} outside [0,1]"
        )));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let sample_seed = derive_seed(seed, i as u64);
        let image = gen_pristine(sample_seed, h, w);
        let mut rng = Rng::new(derive_seed(sample_seed, 0x6469_7374)); // "dist"
        let mut kinds = ALL_KINDS.to_vec();
        rng.shuffle(&mut kinds);
        let count = 1 + rng.below(3);
        let mut specs: Vec<DistortionSpec> = kinds[..count]
            .iter()
            .map(|&kind| DistortionSpec {
                kind,
                severity: rng.uniform(),
            })
            .collect();
        specs.sort_by_key(|s| s.kind.apply_rank());
        let mut distorted = image;
        for spec in &specs {
            distorted = apply_distortion(&distorted, spec, &mut rng)?;
        }
        samples.push(Sample {
            image: distorted,
            mos: pseudo_mos(&specs),
            seed: sample_seed,
            distortions: specs,
        });
    }
    let n_train = ((n as f64 * split_ratio as f64).floor() as usize).clamp(2, n - 2);
    let val = samples.split_off(n_train);
    Ok((samples, val))
}

/// Simulates capturing the image at `r`x`r`: average-pools down to that
/// resolution, then nearest-upsamples back to the original extent. The
/// output keeps the model's minimum input size while carrying only the
/// information a genuine `r`x`r` capture would.
pub fn reduce_resolution(img: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 {
        return Err(Error::config("target resolution must be positive"));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let small = crate::backbone::fit_to_grid(img, r.min(h), r.min(w))?;
    crate::backbone::fit_to_grid(&small, h, w)
}

pub const MANIFEST: &str = "manifest.csv";

/// Writes both splits as PPM files plus a `manifest.csv` with columns
/// `path,mos,seed,distortions`. Paths are `train_NNNN.ppm` / `val_NNNN.ppm`
/// relative to `dir`.
pub fn save_dataset(dir: &Path, train: &[Sample], val: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("path,mos,seed,distortions\n");
    for (prefix, split) in [("train", train), ("val", val)] {
        for (i, sample) in split.iter().enumerate() {
            let name = format!("{prefix}_{i:04}.ppm");
            write_ppm(&dir.join(&name), &sample.image)?;
            manifest.push_str(&format!(
                "{name},{},{},{}\n",
                sample.mos,
                sample.seed,
                describe_distortions(&sample.distortions)
            ));
        }
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads a directory written by [`save_dataset`]. Images come back 8-bit
/// quantized; labels and provenance are exact.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("path,mos,seed,distortions") => {}
        _ => {
            return Err(Error::format(
                0,
                format!("{}: missing manifest header", manifest_path.display()),
            ))
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::config(format!(
                "manifest line {}: expected 4 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let sample = Sample {
            image: read_ppm(&dir.join(fields[0]))?,
            mos: fields[1]
                .parse()
                .map_err(|_| Error::config(format!("bad mos `{}`", fields[1])))?,
            seed: fields[2]
                .parse()
                .map_err(|_| Error::config(format!("bad seed `{}`", fields[2])))?,
            distortions: parse_distortions(fields[3])?,
        };
        if fields[0].starts_with("train_") {
            train.push(sample);
        } else if fields[0].starts_with("val_") {
            val.push(sample);
        } else {
            return Err(Error::config(format!(
                "manifest path `{}` has no train_/val_ prefix",
                fields[0]
            )));
        }
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("dataset needs both train and val samples"));
    }
    Ok((train, val))
}
