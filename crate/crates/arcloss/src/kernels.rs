//! Raw forward/backward math for the network layers.
//!
//! Convolution runs per image as `W_flat (c_out, c_in*kh*kw) @ col (c_in*kh*kw,
//! oh*ow)`, which lands directly in NCHW order. Images are processed in
//! parallel with disjoint output slices, so results do not depend on thread
//! count.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv_dims(x: &Tensor, kernel: &Tensor, padding: Padding) -> Result<ConvDims> {
    let (n, c_in, h, w) = x.dims4()?;
    if kernel.rank() != 4 {
        return Err(Error::Shape(format!("conv kernel must be 4-d, got {:?}", kernel.shape)));
    }
    let (c_out, kc, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]);
    if kc != c_in {
        return Err(Error::Shape(format!(
            "conv channel mismatch: input has {c_in}, kernel expects {kc}"
        )));
    }
    if !((kh == 3 && kw == 3) || (kh == 1 && kw == 1)) {
        return Err(Error::Shape(format!("conv kernel must be 3x3 or 1x1, got {kh}x{kw}")));
    }
    let pad = match padding {
        Padding::Same => (kh - 1) / 2,
        Padding::Valid => 0,
    };
    let (oh, ow) = (h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("conv input {h}x{w} too small for {kh}x{kw} valid")));
    }
    Ok(ConvDims { n, c_in, h, w, c_out, kh, kw, pad, oh, ow })
}

/// col[(ci*kh + ki)*kw + kj][oy*ow + ox] = img[ci][oy + ki - pad][ox + kj - pad]
fn im2col(img: &[f64], d: &ConvDims, col: &mut [f64]) {
    let (h, w, oh, ow) = (d.h, d.w, d.oh, d.ow);
    col.fill(0.0);
    for ci in 0..d.c_in {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let r = (ci * d.kh + ki) * d.kw + kj;
                let crow = &mut col[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    // valid ox range: 0 <= ox + kj - pad < w
                    let lo = d.pad.saturating_sub(kj);
                    let hi = (w + d.pad - kj).min(ow);
                    if lo >= hi {
                        continue;
                    }
                    let src = iy as usize * w + lo + kj - d.pad;
                    crow[oy * ow + lo..oy * ow + hi]
                        .copy_from_slice(&plane[src..src + hi - lo]);
                }
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`].
fn col2im(col: &[f64], d: &ConvDims, img: &mut [f64]) {
    let (h, w, oh, ow) = (d.h, d.w, d.oh, d.ow);
    for ci in 0..d.c_in {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let r = (ci * d.kh + ki) * d.kw + kj;
                let crow = &col[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let lo = d.pad.saturating_sub(kj);
                    let hi = (w + d.pad - kj).min(ow);
                    if lo >= hi {
                        continue;
                    }
                    let dst = iy as usize * w + lo + kj - d.pad;
                    let src = &crow[oy * ow + lo..oy * ow + hi];
                    for (p, s) in plane[dst..dst + hi - lo].iter_mut().zip(src) {
                        *p += s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor, kernel: &Tensor, bias: &Tensor, padding: Padding) -> Result<Tensor> {
    let d = conv_dims(x, kernel, padding)?;
    if bias.numel() != d.c_out {
        return Err(Error::Shape(format!(
            "conv bias has {} entries, want {}",
            bias.numel(),
            d.c_out
        )));
    }
    let ckk = d.c_in * d.kh * d.kw;
    let (ohw, chw_in, chw_out) = (d.oh * d.ow, d.c_in * d.h * d.w, d.c_out * d.oh * d.ow);
    let mut out = vec![0.0f64; d.n * chw_out];
    out.par_chunks_mut(chw_out).enumerate().for_each(|(im, oslice)| {
        let img = &x.data[im * chw_in..(im + 1) * chw_in];
        let mut col = vec![0.0f64; ckk * ohw];
        im2col(img, &d, &mut col);
        let prod = linalg::matmul_serial(&kernel.data, &col, d.c_out, ckk, ohw);
        for co in 0..d.c_out {
            let b = bias.data[co];
            for (o, p) in oslice[co * ohw..(co + 1) * ohw].iter_mut().zip(&prod[co * ohw..]) {
                *o = p + b;
            }
        }
    });
    Tensor::from_vec(&[d.n, d.c_out, d.oh, d.ow], out)
}

/// Returns (d_input, d_kernel, d_bias).
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    padding: Padding,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = conv_dims(x, kernel, padding)?;
    let ckk = d.c_in * d.kh * d.kw;
    let (ohw, chw_in, chw_out) = (d.oh * d.ow, d.c_in * d.h * d.w, d.c_out * d.oh * d.ow);
    let wt = linalg::transpose(&kernel.data, d.c_out, ckk);

    let mut dx = vec![0.0f64; d.n * chw_in];
    // per-image kernel grads, reduced afterwards in index order
    let mut dw_parts: Vec<Vec<f64>> = Vec::with_capacity(d.n);
    dx.par_chunks_mut(chw_in)
        .enumerate()
        .map(|(im, dxi)| {
            let g = &grad_out.data[im * chw_out..(im + 1) * chw_out];
            // d_col = W^T @ g  -> col2im
            let dcol = linalg::matmul_serial(&wt, g, ckk, d.c_out, ohw);
            col2im(&dcol, &d, dxi);
            // dW += g @ col^T
            let img = &x.data[im * chw_in..(im + 1) * chw_in];
            let mut col = vec![0.0f64; ckk * ohw];
            im2col(img, &d, &mut col);
            linalg::matmul_nt(g, &col, d.c_out, ckk, ohw)
        })
        .collect_into_vec(&mut dw_parts);

    let mut dw = vec![0.0f64; d.c_out * ckk];
    for part in &dw_parts {
        for (a, b) in dw.iter_mut().zip(part) {
            *a += b;
        }
    }
    let mut db = vec![0.0f64; d.c_out];
    for im in 0..d.n {
        let g = &grad_out.data[im * chw_out..(im + 1) * chw_out];
        for co in 0..d.c_out {
            db[co] += g[co * ohw..(co + 1) * ohw].iter().sum::<f64>();
        }
    }
    Ok((
        Tensor::from_vec(&x.shape, dx)?,
        Tensor::from_vec(&kernel.shape, dw)?,
        Tensor::from_vec(&[d.c_out], db)?,
    ))
}

pub fn maxpool2x2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool2x2 needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f64; n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];
    for nc in 0..n * c {
        let plane = &x.data[nc * h * w..(nc + 1) * h * w];
        let base = nc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                // row-major scan; strict > keeps the first index on ties
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (oy * 2 + dy) * w + ox * 2 + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[nc * oh * ow + oy * ow + ox] = best;
                arg[nc * oh * ow + oy * ow + ox] = base + best_idx;
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, arg))
}

pub fn maxpool2x2_backward(grad_out: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (g, &idx) in grad_out.data.iter().zip(argmax) {
        dx.data[idx] += g;
    }
    dx
}

pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = vec![0.0f64; n * c];
    for nc in 0..n * c {
        out[nc] = x.data[nc * hw..(nc + 1) * hw].iter().sum::<f64>() / hw as f64;
    }
    Tensor::from_vec(&[n, c], out)
}

pub fn global_avg_pool_backward(grad_out: &Tensor, input_shape: &[usize]) -> Tensor {
    let hw = input_shape[2] * input_shape[3];
    let mut dx = Tensor::zeros(input_shape);
    for (nc, g) in grad_out.data.iter().enumerate() {
        let v = g / hw as f64;
        dx.data[nc * hw..(nc + 1) * hw].fill(v);
    }
    dx
}

pub fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let (wd, out_dim) = weight.dims2()?;
    if d != wd {
        return Err(Error::Shape(format!("dense input dim {d} vs weight rows {wd}")));
    }
    if bias.numel() != out_dim {
        return Err(Error::Shape(format!("dense bias {} vs outputs {out_dim}", bias.numel())));
    }
    let mut out = linalg::matmul(&x.data, &weight.data, n, d, out_dim);
    for row in out.chunks_mut(out_dim) {
        for (o, b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Tensor::from_vec(&[n, out_dim], out)
}

/// Returns (d_input, d_weight, d_bias).
pub fn dense_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = x.dims2()?;
    let (_, out_dim) = weight.dims2()?;
    let wt = linalg::transpose(&weight.data, d, out_dim);
    let dx = linalg::matmul(&grad_out.data, &wt, n, out_dim, d);
    let dw = linalg::matmul_tn(&x.data, &grad_out.data, n, d, out_dim);
    let mut db = vec![0.0f64; out_dim];
    for row in grad_out.data.chunks(out_dim) {
        for (a, g) in db.iter_mut().zip(row) {
            *a += g;
        }
    }
    Ok((
        Tensor::from_vec(&[n, d], dx)?,
        Tensor::from_vec(&[d, out_dim], dw)?,
        Tensor::from_vec(&[out_dim], db)?,
    ))
}

pub fn leaky_relu_forward(x: &Tensor, alpha: f64) -> Tensor {
    let data = x.data.iter().map(|&v| if v > 0.0 { v } else { alpha * v }).collect();
    Tensor { shape: x.shape.clone(), data }
}

/// Subgradient at exactly zero is alpha.
pub fn leaky_relu_backward(x: &Tensor, grad_out: &Tensor, alpha: f64) -> Tensor {
    let data = x
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { alpha * g })
        .collect();
    Tensor { shape: x.shape.clone(), data }
}

/// Per-channel stats over (N, H, W) of an NCHW tensor.
pub struct BnForward {
    pub y: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, the value folded into running stats.
    pub batch_var_unbiased: Vec<f64>,
}

pub fn batchnorm_forward_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<BnForward> {
    let (n, c, h, w) = x.dims4()?;
    if n < 2 {
        return Err(Error::Config("batch norm in train mode needs batch size >= 2".into()));
    }
    check_bn_params(c, gamma, beta)?;
    let (hw, chw) = (h * w, c * h * w);
    let m = (n * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0;
        for im in 0..n {
            s += x.data[im * chw + ch * hw..im * chw + (ch + 1) * hw].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for im in 0..n {
            v += x.data[im * chw + ch * hw..im * chw + (ch + 1) * hw]
                .iter()
                .map(|&a| (a - mu) * (a - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0f64; x.numel()];
    let mut y = vec![0.0f64; x.numel()];
    apply_bn(&x.data, &mut xhat, &mut y, &mean, &inv_std, &gamma.data, &beta.data, n, c, hw);
    let bessel = m / (m - 1.0);
    Ok(BnForward {
        y: Tensor::from_vec(&x.shape, y)?,
        xhat: Tensor::from_vec(&x.shape, xhat)?,
        inv_std,
        batch_mean: mean,
        batch_var_unbiased: var.iter().map(|&v| v * bessel).collect(),
    })
}

pub fn batchnorm_forward_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    check_bn_params(c, gamma, beta)?;
    let hw = h * w;
    let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0f64; x.numel()];
    let mut y = vec![0.0f64; x.numel()];
    apply_bn(&x.data, &mut xhat, &mut y, running_mean, &inv_std, &gamma.data, &beta.data, n, c, hw);
    Ok((Tensor::from_vec(&x.shape, y)?, Tensor::from_vec(&x.shape, xhat)?, inv_std))
}

fn check_bn_params(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::Shape(format!(
            "batch norm gamma/beta must have {c} entries, got {}/{}",
            gamma.numel(),
            beta.numel()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn apply_bn(
    x: &[f64],
    xhat: &mut [f64],
    y: &mut [f64],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
    _n: usize,
    c: usize,
    hw: usize,
) {
    let chw = c * hw;
    y.par_chunks_mut(chw)
        .zip(xhat.par_chunks_mut(chw))
        .enumerate()
        .for_each(|(im, (yc, xc))| {
            for ch in 0..c {
                let (mu, istd, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                let src = &x[im * chw + ch * hw..im * chw + (ch + 1) * hw];
                let xrow = &mut xc[ch * hw..(ch + 1) * hw];
                let yrow = &mut yc[ch * hw..(ch + 1) * hw];
                for i in 0..hw {
                    let xh = (src[i] - mu) * istd;
                    xrow[i] = xh;
                    yrow[i] = g * xh + b;
                }
            }
        });
}

/// Train-mode backward: gradient flows through the batch statistics.
/// Returns (dx, dgamma, dbeta).
pub fn batchnorm_backward_train(
    grad_out: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = grad_out.dims4()?;
    let (hw, chw) = (h * w, c * h * w);
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for ch in 0..c {
        let (mut sg, mut sgx) = (0.0, 0.0);
        for im in 0..n {
            let off = im * chw + ch * hw;
            for i in 0..hw {
                let g = grad_out.data[off + i];
                sg += g;
                sgx += g * xhat.data[off + i];
            }
        }
        dbeta[ch] = sg;
        dgamma[ch] = sgx;
    }
    let mut dx = vec![0.0f64; grad_out.numel()];
    dx.par_chunks_mut(chw).enumerate().for_each(|(im, dxc)| {
        for ch in 0..c {
            let scale = gamma.data[ch] * inv_std[ch];
            let (mg, mgx) = (dbeta[ch] / m, dgamma[ch] / m);
            let off = im * chw + ch * hw;
            let row = &mut dxc[ch * hw..(ch + 1) * hw];
            for i in 0..hw {
                row[i] = scale * (grad_out.data[off + i] - mg - xhat.data[off + i] * mgx);
            }
        }
    });
    Ok((
        Tensor::from_vec(&grad_out.shape, dx)?,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}

/// Eval-mode backward: running stats are constants, the op is per-channel affine.
pub fn batchnorm_backward_eval(
    grad_out: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = grad_out.dims4()?;
    let (hw, chw) = (h * w, c * h * w);
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut dx = vec![0.0f64; grad_out.numel()];
    for im in 0..n {
        for ch in 0..c {
            let off = im * chw + ch * hw;
            let scale = gamma.data[ch] * inv_std[ch];
            for i in 0..hw {
                let g = grad_out.data[off + i];
                dbeta[ch] += g;
                dgamma[ch] += g * xhat.data[off + i];
                dx[off + i] = scale * g;
            }
        }
    }
    Ok((
        Tensor::from_vec(&grad_out.shape, dx)?,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}

/// Row softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if c < 2 {
        return Err(Error::Shape(format!("softmax needs >= 2 classes, got {c}")));
    }
    let mut out = vec![0.0f64; n * c];
    for (orow, xrow) in out.chunks_mut(c).zip(logits.data.chunks(c)) {
        let mx = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, &x) in orow.iter_mut().zip(xrow) {
            *o = (x - mx).exp();
            s += *o;
        }
        for o in orow.iter_mut() {
            *o /= s;
        }
    }
    Tensor::from_vec(&[n, c], out)
}

pub fn softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let c = probs.shape[1];
    let mut dx = vec![0.0f64; probs.numel()];
    for ((drow, prow), grow) in
        dx.chunks_mut(c).zip(probs.data.chunks(c)).zip(grad_out.data.chunks(c))
    {
        let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
        for i in 0..c {
            drow[i] = prow[i] * (grow[i] - dot);
        }
    }
    Tensor { shape: probs.shape.clone(), data: dx }
}

/// Mean negative log-likelihood via log-sum-exp; also returns softmax probs
/// for the backward pass.
pub fn cross_entropy_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Contract(format!("label {bad} out of range [0, {c})")));
    }
    let mut probs = vec![0.0f64; n * c];
    let mut loss = 0.0;
    for (i, (prow, xrow)) in probs.chunks_mut(c).zip(logits.data.chunks(c)).enumerate() {
        let mx = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (p, &x) in prow.iter_mut().zip(xrow) {
            *p = (x - mx).exp();
            s += *p;
        }
        let lse = mx + s.ln();
        loss += lse - xrow[labels[i]];
        for p in prow.iter_mut() {
            *p /= s;
        }
    }
    Ok((loss / n as f64, Tensor::from_vec(&[n, c], probs)?))
}

pub fn cross_entropy_backward(probs: &Tensor, labels: &[usize], upstream: f64) -> Tensor {
    let (n, c) = (probs.shape[0], probs.shape[1]);
    let scale = upstream / n as f64;
    let mut dx = probs.data.clone();
    for (i, row) in dx.chunks_mut(c).enumerate() {
        row[labels[i]] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Tensor { shape: probs.shape.clone(), data: dx }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct 6-loop convolution, the independent reference.
    fn conv_naive(x: &Tensor, k: &Tensor, b: &Tensor, padding: Padding) -> Tensor {
        let d = conv_dims(x, k, padding).unwrap();
        let mut out = Tensor::zeros(&[d.n, d.c_out, d.oh, d.ow]);
        for im in 0..d.n {
            for co in 0..d.c_out {
                for oy in 0..d.oh {
                    for ox in 0..d.ow {
                        let mut s = b.data[co];
                        for ci in 0..d.c_in {
                            for ky in 0..d.kh {
                                for kx in 0..d.kw {
                                    let iy = oy as isize + ky as isize - d.pad as isize;
                                    let ix = ox as isize + kx as isize - d.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((im * d.c_in + ci) * d.h + iy as usize) * d.w
                                        + ix as usize];
                                    let kv = k.data[((co * d.c_in + ci) * d.kh + ky) * d.kw + kx];
                                    s += xv * kv;
                                }
                            }
                        }
                        out.data[((im * d.c_out + co) * d.oh + oy) * d.ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_valid_sums_window() {
        let x = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &k, &b, Padding::Valid).unwrap();
        assert_eq!(y.shape, vec![1, 1, 1, 1]);
        assert_eq!(y.data[0], 9.0);
    }

    #[test]
    fn conv_same_preserves_spatial_dims() {
        let x = Tensor::filled(&[1, 1, 4, 4], 0.5);
        let k = Tensor::filled(&[2, 1, 3, 3], 0.1);
        let b = Tensor::zeros(&[2]);
        let y = conv2d_forward(&x, &k, &b, Padding::Same).unwrap();
        assert_eq!(y.shape, vec![1, 2, 4, 4]);
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 3, 8, 8], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        for (pad, k) in [
            (Padding::Same, rand_tensor(&[4, 3, 3, 3], &mut rng)),
            (Padding::Valid, rand_tensor(&[4, 3, 3, 3], &mut rng)),
            (Padding::Same, rand_tensor(&[4, 3, 1, 1], &mut rng)),
        ] {
            let got = conv2d_forward(&x, &k, &b, pad).unwrap();
            let want = conv_naive(&x, &k, &b, pad);
            assert_eq!(got.shape, want.shape);
            for (g, w) in got.data.iter().zip(&want.data) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let k = Tensor::zeros(&[2, 4, 3, 3]);
        let b = Tensor::zeros(&[2]);
        assert!(conv2d_forward(&x, &k, &b, Padding::Same).is_err());
    }

    #[test]
    fn maxpool_picks_max_and_routes_grad_to_argmax() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.data, vec![4.0]);
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let dx = maxpool2x2_backward(&g, &arg, &x.shape);
        assert_eq!(dx.data, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_first_index_tie_break() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let (_, arg) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        assert!(maxpool2x2_forward(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn maxpool_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[1, 2, 6, 6], &mut rng);
        let (y, _) = maxpool2x2_forward(&x).unwrap();
        for nc in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut want = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            want = want.max(x.data[nc * 36 + (oy * 2 + dy) * 6 + ox * 2 + dx]);
                        }
                    }
                    assert_eq!(y.data[nc * 9 + oy * 3 + ox], want);
                }
            }
        }
    }

    #[test]
    fn gap_means_and_spreads_grad() {
        let x = Tensor::filled(&[1, 1, 6, 6], 1.0);
        assert_eq!(global_avg_pool_forward(&x).unwrap().data, vec![1.0]);
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool_forward(&x).unwrap().data, vec![2.5]);
        let g = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let dx = global_avg_pool_backward(&g, &[1, 1, 2, 2]);
        assert!(dx.data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn dense_identity_and_bias_cases() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b0 = Tensor::zeros(&[3]);
        assert_eq!(dense_forward(&x, &eye, &b0).unwrap().data, x.data);

        let w0 = Tensor::zeros(&[3, 2]);
        let b = Tensor::from_vec(&[2], vec![7.0, -1.0]).unwrap();
        assert_eq!(dense_forward(&x, &w0, &b).unwrap().data, vec![7.0, -1.0, 7.0, -1.0]);
    }

    #[test]
    fn dense_matches_naive_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[4, 5], &mut rng);
        let w = rand_tensor(&[5, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let y = dense_forward(&x, &w, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = b.data[j];
                for p in 0..5 {
                    s += x.data[i * 5 + p] * w.data[p * 3 + j];
                }
                assert!((y.data[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_rejects_dim_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 2]);
        let b = Tensor::zeros(&[2]);
        assert!(dense_forward(&x, &w, &b).is_err());
    }

    #[test]
    fn leaky_relu_values_and_slope() {
        let x = Tensor::from_vec(&[3], vec![2.0, -2.0, 0.0]).unwrap();
        let y = leaky_relu_forward(&x, 0.1);
        assert_eq!(y.data, vec![2.0, -0.2, 0.0]);
        let g = Tensor::filled(&[3], 1.0);
        let dx = leaky_relu_backward(&x, &g, 0.1);
        assert_eq!(dx.data, vec![1.0, 0.1, 0.1]);
    }

    #[test]
    fn batchnorm_train_normalizes_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[4, 3, 5, 5], &mut rng);
        let gamma = Tensor::filled(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let f = batchnorm_forward_train(&x, &gamma, &beta, 1e-5).unwrap();
        for ch in 0..3 {
            let mut vals = Vec::new();
            for im in 0..4 {
                vals.extend_from_slice(&f.y.data[im * 75 + ch * 25..im * 75 + (ch + 1) * 25]);
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn batchnorm_affine_params_scale_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[4, 2, 3, 3], &mut rng);
        let g1 = Tensor::filled(&[2], 1.0);
        let b0 = Tensor::zeros(&[2]);
        let base = batchnorm_forward_train(&x, &g1, &b0, 1e-5).unwrap();
        let g2 = Tensor::filled(&[2], 2.0);
        let b3 = Tensor::filled(&[2], 3.0);
        let scaled = batchnorm_forward_train(&x, &g2, &b3, 1e-5).unwrap();
        for (s, b) in scaled.y.data.iter().zip(&base.y.data) {
            assert!((s - (2.0 * b + 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_rejects_batch_of_one_in_train() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let g = Tensor::filled(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        assert!(batchnorm_forward_train(&x, &g, &b, 1e-5).is_err());
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let x = Tensor::zeros(&[1, 10]);
        let p = softmax_rows(&x).unwrap();
        for v in &p.data {
            assert!((v - 0.1).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&[5, 7], &mut rng);
        let shifted =
            Tensor::from_vec(&[5, 7], x.data.iter().map(|v| v + 123.456).collect()).unwrap();
        let (pa, pb) = (softmax_rows(&x).unwrap(), softmax_rows(&shifted).unwrap());
        for (a, b) in pa.data.iter().zip(&pb.data) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in pa.data.chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let x = Tensor::zeros(&[3, 10]);
        let (loss, _) = cross_entropy_forward(&x, &[0, 5, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_correct_prediction() {
        let mut x = Tensor::zeros(&[1, 10]);
        x.data[3] = 50.0;
        let (loss, _) = cross_entropy_forward(&x, &[3]).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
    }

    #[test]
    fn cross_entropy_matches_direct_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[6, 4], &mut rng);
        let labels = [0usize, 3, 1, 2, 2, 0];
        let (loss, _) = cross_entropy_forward(&x, &labels).unwrap();
        let p = softmax_rows(&x).unwrap();
        let want = -(0..6).map(|i| p.data[i * 4 + labels[i]].ln()).sum::<f64>() / 6.0;
        assert!((loss - want).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(cross_entropy_forward(&x, &[0, 3]).is_err());
    }
}
