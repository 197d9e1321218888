//! Differentiable tensor primitives.
//!
//! Every op computes its forward value eagerly and registers a backward
//! closure on the output. Reductions (matmul, conv, pooling, softmax sums,
//! means) accumulate in f64 and cast once at the end; the accumulation order
//! is fixed, so results are bit-identical across runs.

use super::Tensor;
use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |_, gy| {
            let g: Vec<f64> = gy.iter().map(|&v| v as f64).collect();
            if pa.requires_grad() {
                pa.accumulate_grad(&g);
            }
            if pb.requires_grad() {
                pb.accumulate_grad(&g);
            }
        }),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |_, gy| {
            if pa.requires_grad() {
                let g: Vec<f64> = gy.iter().map(|&v| v as f64).collect();
                pa.accumulate_grad(&g);
            }
            if pb.requires_grad() {
                let g: Vec<f64> = gy.iter().map(|&v| -(v as f64)).collect();
                pb.accumulate_grad(&g);
            }
        }),
    ))
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data: Vec<f32> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |_, gy| {
            if pa.requires_grad() {
                let bd = pb.data();
                let g: Vec<f64> = gy.iter().zip(bd.iter()).map(|(&v, &w)| v as f64 * w as f64).collect();
                drop(bd);
                pa.accumulate_grad(&g);
            }
            if pb.requires_grad() {
                let ad = pa.data();
                let g: Vec<f64> = gy.iter().zip(ad.iter()).map(|(&v, &w)| v as f64 * w as f64).collect();
                drop(ad);
                pb.accumulate_grad(&g);
            }
        }),
    ))
}

/// Multiplication by a compile-time constant.
pub fn scale(a: &Tensor, c: f32) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|&x| x * c).collect();
    let pa = a.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |_, gy| {
            if pa.requires_grad() {
                let g: Vec<f64> = gy.iter().map(|&v| v as f64 * c as f64).collect();
                pa.accumulate_grad(&g);
            }
        }),
    )
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

/// `a[M,K] . b[K,P] -> [M,P]` with f64 row accumulators.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::dimension(format!(
            "matmul expects rank-2 inputs, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, p) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dimension(format!(
            "matmul inner extents differ: {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0f32; m * p];
    {
        let ad = a.data();
        let bd = b.data();
        let mut acc = vec![0.0f64; p];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for kk in 0..k {
                let aik = ad[i * k + kk] as f64;
                let brow = &bd[kk * p..kk * p + p];
                for (accj, &bv) in acc.iter_mut().zip(brow) {
                    *accj += aik * bv as f64;
                }
            }
            for (o, &v) in out[i * p..i * p + p].iter_mut().zip(&acc) {
                *o = v as f32;
            }
        }
    }
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        vec![m, p],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |_, gy| {
            if pa.requires_grad() {
                // dA[i,kk] = sum_j gy[i,j] * B[kk,j]
                let bd = pb.data();
                let mut da = vec![0.0f64; m * k];
                for i in 0..m {
                    let gyrow = &gy[i * p..i * p + p];
                    for kk in 0..k {
                        let brow = &bd[kk * p..kk * p + p];
                        let mut s = 0.0f64;
                        for (&g, &bv) in gyrow.iter().zip(brow) {
                            s += g as f64 * bv as f64;
                        }
                        da[i * k + kk] = s;
                    }
                }
                drop(bd);
                pa.accumulate_grad(&da);
            }
            if pb.requires_grad() {
                // dB[kk,j] = sum_i A[i,kk] * gy[i,j]
                let ad = pa.data();
                let mut db = vec![0.0f64; k * p];
                for i in 0..m {
                    let gyrow = &gy[i * p..i * p + p];
                    for kk in 0..k {
                        let aik = ad[i * k + kk] as f64;
                        let dbrow = &mut db[kk * p..kk * p + p];
                        for (d, &g) in dbrow.iter_mut().zip(gyrow) {
                            *d += aik * g as f64;
                        }
                    }
                }
                drop(ad);
                pb.accumulate_grad(&db);
            }
        }),
    ))
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Valid output extent range for one spatial axis of a strided
/// cross-correlation: all `o` with `0 <= o*stride + kk - pad < extent`.
fn conv_axis_range(extent: usize, out_extent: usize, stride: usize, pad: usize, kk: usize) -> (usize, usize) {
    let lo = if pad > kk { (pad - kk).div_ceil(stride) } else { 0 };
    let hi_num = extent + pad;
    if hi_num <= kk {
        return (1, 0); // empty
    }
    let hi = ((hi_num - kk - 1) / stride).min(out_extent.saturating_sub(1));
    (lo, hi)
}

/// 2-D cross-correlation, `x[Cin,H,W] * w[Cout,Cin,Kh,Kw] -> [Cout,H',W']`,
/// `H' = (H + 2*pad - Kh)/stride + 1`. Kernel extents are restricted to the
/// sizes the architecture uses (1 or 3).
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if x.shape().len() != 3 || w.shape().len() != 4 {
        return Err(Error::dimension(format!(
            "conv2d expects x[Cin,H,W] and w[Cout,Cin,Kh,Kw], got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (cin, h, wdt) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, cin2, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if cin != cin2 {
        return Err(Error::dimension(format!(
            "conv2d channel mismatch: input {cin}, kernel {cin2}"
        )));
    }
    if !(kh == 1 || kh == 3) || !(kw == 1 || kw == 3) {
        return Err(Error::dimension(format!("conv2d kernel extents must be 1 or 3, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::contract("conv2d stride must be positive"));
    }
    if h + 2 * padding < kh || wdt + 2 * padding < kw {
        return Err(Error::dimension(format!(
            "conv2d output would be empty for input {h}x{wdt}, kernel {kh}x{kw}, padding {padding}"
        )));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wdt + 2 * padding - kw) / stride + 1;

    let mut out = vec![0.0f32; cout * oh * ow];
    {
        let xd = x.data();
        let wd = w.data();
        let mut acc = vec![0.0f64; oh * ow];
        for co in 0..cout {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for ci in 0..cin {
                let xplane = &xd[ci * h * wdt..(ci + 1) * h * wdt];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = conv_axis_range(h, oh, stride, padding, ky);
                    for kx in 0..kw {
                        let wv = wd[((co * cin + ci) * kh + ky) * kw + kx] as f64;
                        let (ox_lo, ox_hi) = conv_axis_range(wdt, ow, stride, padding, kx);
                        if oy_lo > oy_hi || ox_lo > ox_hi {
                            continue;
                        }
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - padding;
                            let xrow = &xplane[iy * wdt..iy * wdt + wdt];
                            let arow = &mut acc[oy * ow..oy * ow + ow];
                            for ox in ox_lo..=ox_hi {
                                let ix = ox * stride + kx - padding;
                                arow[ox] += wv * xrow[ix] as f64;
                            }
                        }
                    }
                }
            }
            for (o, &v) in out[co * oh * ow..(co + 1) * oh * ow].iter_mut().zip(&acc) {
                *o = v as f32;
            }
        }
    }

    let (px, pw) = (x.clone(), w.clone());
    Ok(Tensor::from_op(
        vec![cout, oh, ow],
        out,
        vec![x.clone(), w.clone()],
        Box::new(move |_, gy| {
            if pw.requires_grad() {
                // dW[co,ci,ky,kx] = sum_{oy,ox} gy[co,oy,ox] * x[ci,iy,ix]
                let xd = px.data();
                let mut dw = vec![0.0f64; cout * cin * kh * kw];
                for co in 0..cout {
                    let gyp = &gy[co * oh * ow..(co + 1) * oh * ow];
                    for ci in 0..cin {
                        let xplane = &xd[ci * h * wdt..(ci + 1) * h * wdt];
                        for ky in 0..kh {
                            let (oy_lo, oy_hi) = conv_axis_range(h, oh, stride, padding, ky);
                            for kx in 0..kw {
                                let (ox_lo, ox_hi) = conv_axis_range(wdt, ow, stride, padding, kx);
                                if oy_lo > oy_hi || ox_lo > ox_hi {
                                    continue;
                                }
                                let mut s = 0.0f64;
                                for oy in oy_lo..=oy_hi {
                                    let iy = oy * stride + ky - padding;
                                    for ox in ox_lo..=ox_hi {
                                        let ix = ox * stride + kx - padding;
                                        s += gyp[oy * ow + ox] as f64 * xplane[iy * wdt + ix] as f64;
                                    }
                                }
                                dw[((co * cin + ci) * kh + ky) * kw + kx] = s;
                            }
                        }
                    }
                }
                drop(xd);
                pw.accumulate_grad(&dw);
            }
            if px.requires_grad() {
                // dX[ci,iy,ix] += w[co,ci,ky,kx] * gy[co,oy,ox]
                let wd = pw.data();
                let mut dx = vec![0.0f64; cin * h * wdt];
                for co in 0..cout {
                    let gyp = &gy[co * oh * ow..(co + 1) * oh * ow];
                    for ci in 0..cin {
                        let dxplane = &mut dx[ci * h * wdt..(ci + 1) * h * wdt];
                        for ky in 0..kh {
                            let (oy_lo, oy_hi) = conv_axis_range(h, oh, stride, padding, ky);
                            for kx in 0..kw {
                                let wv = wd[((co * cin + ci) * kh + ky) * kw + kx] as f64;
                                let (ox_lo, ox_hi) = conv_axis_range(wdt, ow, stride, padding, kx);
                                if oy_lo > oy_hi || ox_lo > ox_hi {
                                    continue;
                                }
                                for oy in oy_lo..=oy_hi {
                                    let iy = oy * stride + ky - padding;
                                    for ox in ox_lo..=ox_hi {
                                        let ix = ox * stride + kx - padding;
                                        dxplane[iy * wdt + ix] += wv * gyp[oy * ow + ox] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
                drop(wd);
                px.accumulate_grad(&dx);
            }
        }),
    ))
}

/// Adds a per-channel bias to a `[C,H,W]` map.
pub fn add_channel_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 3 || b.shape().len() != 1 || b.shape()[0] != x.shape()[0] {
        return Err(Error::dimension(format!(
            "add_channel_bias: x {:?} incompatible with bias {:?}",
            x.shape(),
            b.shape()
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plane = h * w;
    let mut data = x.to_vec();
    {
        let bd = b.data();
        for ci in 0..c {
            let bv = bd[ci];
            for v in &mut data[ci * plane..(ci + 1) * plane] {
                *v += bv;
            }
        }
    }
    let (px, pb) = (x.clone(), b.clone());
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone(), b.clone()],
        Box::new(move |_, gy| {
            if px.requires_grad() {
                let g: Vec<f64> = gy.iter().map(|&v| v as f64).collect();
                px.accumulate_grad(&g);
            }
            if pb.requires_grad() {
                let mut db = vec![0.0f64; c];
                for ci in 0..c {
                    let mut s = 0.0f64;
                    for &v in &gy[ci * plane..(ci + 1) * plane] {
                        s += v as f64;
                    }
                    db[ci] = s;
                }
                pb.accumulate_grad(&db);
            }
        }),
    ))
}

/// Adds a bias vector to every row of an `[L,E]` token matrix.
pub fn add_row_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || b.shape().len() != 1 || b.shape()[0] != x.shape()[1] {
        return Err(Error::dimension(format!(
            "add_row_bias: x {:?} incompatible with bias {:?}",
            x.shape(),
            b.shape()
        )));
    }
    let (l, e) = (x.shape()[0], x.shape()[1]);
    let mut data = x.to_vec();
    {
        let bd = b.data();
        for row in data.chunks_mut(e) {
            for (v, &bv) in row.iter_mut().zip(bd.iter()) {
                *v += bv;
            }
        }
    }
    let (px, pb) = (x.clone(), b.clone());
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone(), b.clone()],
        Box::new(move |_, gy| {
            if px.requires_grad() {
                let g: Vec<f64> = gy.iter().map(|&v| v as f64).collect();
                px.accumulate_grad(&g);
            }
            if pb.requires_grad() {
                let mut db = vec![0.0f64; e];
                for row in 0..l {
                    for (d, &g) in db.iter_mut().zip(&gy[row * e..row * e + e]) {
                        *d += g as f64;
                    }
                }
                pb.accumulate_grad(&db);
            }
        }),
    ))
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// GELU with the exact normal CDF: `x * Phi(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    let data: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| {
            let v = v as f64;
            (v * std_normal_cdf(v)) as f32
        })
        .collect();
    let px = x.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |_, gy| {
            if px.requires_grad() {
                let xd = px.data();
                let g: Vec<f64> = gy
                    .iter()
                    .zip(xd.iter())
                    .map(|(&gv, &xv)| {
                        let xv = xv as f64;
                        gv as f64 * (std_normal_cdf(xv) + xv * std_normal_pdf(xv))
                    })
                    .collect();
                drop(xd);
                px.accumulate_grad(&g);
            }
        }),
    )
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Lane decomposition for reductions along one axis.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    (outer, axis_len, inner)
}

/// Numerically-stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape().len() {
        return Err(Error::dimension(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let (outer, n, inner) = lanes(x.shape(), axis);
    let mut data = vec![0.0f32; x.numel()];
    {
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for t in 0..n {
                    mx = mx.max(xd[base + t * inner] as f64);
                }
                let mut denom = 0.0f64;
                for t in 0..n {
                    denom += ((xd[base + t * inner] as f64) - mx).exp();
                }
                for t in 0..n {
                    data[base + t * inner] =
                        ((((xd[base + t * inner] as f64) - mx).exp()) / denom) as f32;
                }
            }
        }
    }
    let px = x.clone();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |out, gy| {
            if px.requires_grad() {
                // ds_t = s_t * (gy_t - sum_u s_u gy_u)
                let mut g = vec![0.0f64; gy.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = 0.0f64;
                        for t in 0..n {
                            let idx = base + t * inner;
                            dot += out[idx] as f64 * gy[idx] as f64;
                        }
                        for t in 0..n {
                            let idx = base + t * inner;
                            g[idx] = out[idx] as f64 * (gy[idx] as f64 - dot);
                        }
                    }
                }
                px.accumulate_grad(&g);
            }
        }),
    ))
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

fn pool_bins(extent: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| (i * extent / out, (i + 1) * extent / out))
        .collect()
}

/// Adaptive average pooling of `[C,H,W]` down to `[C,outH,outW]`. Bin `i`
/// along an axis spans `floor(i*H/outH) .. floor((i+1)*H/outH)`; the bins
/// partition the input, so the global mean is preserved when they are equal
/// sized. Output extents must not exceed the input's.
pub fn adaptive_avg_pool2d(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if x.shape().len() != 3 {
        return Err(Error::dimension(format!(
            "adaptive_avg_pool2d expects [C,H,W], got {:?}",
            x.shape()
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::dimension(format!(
            "adaptive_avg_pool2d: output {out_h}x{out_w} invalid for input {h}x{w}"
        )));
    }
    let ybins = pool_bins(h, out_h);
    let xbins = pool_bins(w, out_w);
    let mut data = vec![0.0f32; c * out_h * out_w];
    {
        let xd = x.data();
        for ci in 0..c {
            let plane = &xd[ci * h * w..(ci + 1) * h * w];
            for (oy, &(y0, y1)) in ybins.iter().enumerate() {
                for (ox, &(x0, x1)) in xbins.iter().enumerate() {
                    let mut s = 0.0f64;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            s += plane[iy * w + ix] as f64;
                        }
                    }
                    data[(ci * out_h + oy) * out_w + ox] =
                        (s / ((y1 - y0) * (x1 - x0)) as f64) as f32;
                }
            }
        }
    }
    let px = x.clone();
    let (yb, xb) = (ybins, xbins);
    Ok(Tensor::from_op(
        vec![c, out_h, out_w],
        data,
        vec![x.clone()],
        Box::new(move |_, gy| {
            if px.requires_grad() {
                let mut dx = vec![0.0f64; c * h * w];
                for ci in 0..c {
                    let dplane = &mut dx[ci * h * w..(ci + 1) * h * w];
                    for (oy, &(y0, y1)) in yb.iter().enumerate() {
                        for (ox, &(x0, x1)) in xb.iter().enumerate() {
                            let g = gy[(ci * out_h + oy) * out_w + ox] as f64
                                / ((y1 - y0) * (x1 - x0)) as f64;
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    dplane[iy * w + ix] += g;
                                }
                            }
                        }
                    }
                }
                px.accumulate_grad(&dx);
            }
        }),
    ))
}

/// Nearest-neighbour upsampling of `[C,H,W]` to `[C,outH,outW]`,
/// `outH >= H`, `outW >= W`. Source index is `floor(i*H/outH)`.
pub fn upsample_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if x.shape().len() != 3 {
        return Err(Error::dimension(format!(
            "upsample_nearest expects [C,H,W], got {:?}",
            x.shape()
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if out_h < h || out_w < w {
        return Err(Error::dimension(format!(
            "upsample_nearest: output {out_h}x{out_w} smaller than input {h}x{w}"
        )));
    }
    let ysrc: Vec<usize> = (0..out_h).map(|i| i * h / out_h).collect();
    let xsrc: Vec<usize> = (0..out_w).map(|i| i * w / out_w).collect();
    let mut data = vec![0.0f32; c * out_h * out_w];
    {
        let xd = x.data();
        for ci in 0..c {
            let plane = &xd[ci * h * w..(ci + 1) * h * w];
            for (oy, &iy) in ysrc.iter().enumerate() {
                for (ox, &ix) in xsrc.iter().enumerate() {
                    data[(ci * out_h + oy) * out_w + ox] = plane[iy * w + ix];
                }
            }
        }
    }
    let px = x.clone();
    Ok(Tensor::from_op(
        vec![c, out_h, out_w],
        data,
        vec![x.clone()],
        Box::new(move |_, gy| {
            if px.requires_grad() {
                let mut dx = vec![0.0f64; c * h * w];
                for ci in 0..c {
                    let dplane = &mut dx[ci * h * w..(ci + 1) * h * w];
                    for (oy, &iy) in ysrc.iter().enumerate() {
                        for (ox, &ix) in xsrc.iter().enumerate() {
                            dplane[iy * w + ix] += gy[(ci * out_h + oy) * out_w + ox] as f64;
                        }
                    }
                }
                px.accumulate_grad(&dx);
            }
        }),
    ))
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

/// Reinterprets the row-major data under a new shape.
pub fn reshape(x: &Tensor, new_shape: Vec<usize>) -> Result<Tensor> {
    let n: usize = new_shape.iter().product();
    if n != x.numel() {
        return Err(Error::dimension(format!(
            "reshape {:?} -> {:?}: element counts differ",
            x.shape(),
            new_shape
        )));
    }
    let px = x.clone();
    Ok(Tensor::from_op(
        new_shape,
        x.to_vec(),
        vec![x.clone()],
        Box::new(move |_, gy| {
            if px.requires_grad() {
                let g: Vec<f64> = gy.iter().map(|&v| v as f64).collect();
                px.accumulate_grad(&g);
            }
        }),
    ))
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_raw(shape: &[usize], data: &[f32], order: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let out_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![0.0f32; data.len()];
    // Gather: out[i0,..,ik] = in[i applied through order].
    for (oi, o) in out.iter_mut().enumerate() {
        let mut rem = oi;
        let mut src = 0;
        for (axis, &os) in out_strides.iter().enumerate() {
            let coord = rem / os;
            rem %= os;
            src += coord * in_strides[order[axis]];
        }
        *o = data[src];
    }
    (out_shape, out)
}

pub fn inverse_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

/// Axis permutation: output axis `k` is input axis `order[k]`.
pub fn permute(x: &Tensor, order: &[usize]) -> Result<Tensor> {
    let rank = x.shape().len();
    let mut seen = vec![false; rank];
    if order.len() != rank || order.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::dimension(format!(
            "permute order {:?} is not a permutation of 0..{rank}",
            order
        )));
    }
    let (out_shape, out) = permute_raw(x.shape(), &x.data(), order);
    let px = x.clone();
    let inv = inverse_order(order);
    Ok(Tensor::from_op(
        out_shape.clone(),
        out,
        vec![x.clone()],
        Box::new(move |_, gy| {
            if px.requires_grad() {
                let (_, gperm) = permute_raw(&out_shape, gy, &inv);
                let g: Vec<f64> = gperm.iter().map(|&v| v as f64).collect();
                px.accumulate_grad(&g);
            }
        }),
    ))
}

/// `[M,N] -> [N,M]`.
pub fn transpose2d(x: &Tensor) -> Result<Tensor> {
    permute(x, &[1, 0])
}

/// Stacks same-shaped tensors along a new trailing axis.
pub fn stack_last(xs: &[Tensor]) -> Result<Tensor> {
    let n = xs.len();
    if n == 0 {
        return Err(Error::dimension("stack_last of zero tensors"));
    }
    let base_shape = xs[0].shape().to_vec();
    for t in xs {
        if t.shape() != base_shape.as_slice() {
            return Err(Error::dimension(format!(
                "stack_last: shapes {:?} and {:?} differ",
                base_shape,
                t.shape()
            )));
        }
    }
    let per = xs[0].numel();
    let mut shape = base_shape;
    shape.push(n);
    let mut data = vec![0.0f32; per * n];
    for (i, t) in xs.iter().enumerate() {
        for (j, &v) in t.data().iter().enumerate() {
            data[j * n + i] = v;
        }
    }
    let parents: Vec<Tensor> = xs.to_vec();
    let captured = parents.clone();
    Ok(Tensor::from_op(
        shape,
        data,
        parents,
        Box::new(move |_, gy| {
            for (i, t) in captured.iter().enumerate() {
                if t.requires_grad() {
                    let g: Vec<f64> = (0..per).map(|j| gy[j * n + i] as f64).collect();
                    t.accumulate_grad(&g);
                }
            }
        }),
    ))
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// Mean of all elements, as a rank-0 scalar.
pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.numel();
    let mut s = 0.0f64;
    for &v in x.data().iter() {
        s += v as f64;
    }
    let px = x.clone();
    Tensor::from_op(
        vec![],
        vec![(s / n as f64) as f32],
        vec![x.clone()],
        Box::new(move |_, gy| {
            if px.requires_grad() {
                let g = gy[0] as f64 / n as f64;
                px.accumulate_grad(&vec![g; n]);
            }
        }),
    )
}

/// Mean along `axis`, removing it from the shape.
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape().len() {
        return Err(Error::dimension(format!(
            "mean_axis axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let (outer, n, inner) = lanes(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    out_shape.remove(axis);
    let mut data = vec![0.0f32; outer * inner];
    {
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut s = 0.0f64;
                for t in 0..n {
                    s += xd[base + t * inner] as f64;
                }
                data[o * inner + i] = (s / n as f64) as f32;
            }
        }
    }
    let px = x.clone();
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![x.clone()],
        Box::new(move |_, gy| {
            if px.requires_grad() {
                let mut g = vec![0.0f64; px.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = gy[o * inner + i] as f64 / n as f64;
                        let base = o * n * inner + i;
                        for t in 0..n {
                            g[base + t * inner] = gv;
                        }
                    }
                }
                px.accumulate_grad(&g);
            }
        }),
    ))
}

/// Mean squared error between same-shaped tensors, as a scalar graph node.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = sub(a, b)?;
    Ok(mean_all(&mul(&d, &d)?))
}
