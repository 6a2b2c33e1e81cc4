//! Heavy differentiable kernels: 2D/4D convolution, group normalization,
//! bilinear resampling, support pooling, masked cosine correlation, softmax
//! and cross-entropy.
//!
//! Forward code is shared between the graph ops and the plain (non-graph)
//! call sites in the pipeline, so the inference path and the training path
//! cannot drift apart.

use ndarray::IxDyn;

use super::{Graph, NodeId, Tensor};

// ---------------------------------------------------------------------------
// 2D convolution (same padding, stride 1, optional channel groups)
// ---------------------------------------------------------------------------

/// x: (H, W, Ci), w: (kh, kw, Co, Ci/groups), b: (Co) -> (H, W, Co)
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, groups: usize) -> Tensor {
    let (h, wd, ci) = dims3(x);
    let ws = w.shape();
    let (kh, kw, co, cig) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(ci % groups, 0, "in channels not divisible by groups");
    assert_eq!(co % groups, 0, "out channels not divisible by groups");
    assert_eq!(cig, ci / groups, "kernel in-channel slice mismatch");
    assert!(kh % 2 == 1 && kw % 2 == 1, "kernels must be odd");
    let (ph, pw) = (kh / 2, kw / 2);
    let co_per_g = co / groups;

    let xs = x.as_slice().unwrap();
    let wsl = w.as_slice().unwrap();
    let bs = b.as_slice().unwrap();
    let mut out = vec![0.0; h * wd * co];
    for y in 0..h {
        for xp in 0..wd {
            let o_base = (y * wd + xp) * co;
            for cout in 0..co {
                let g = cout / co_per_g;
                let mut acc = bs[cout];
                for dy in 0..kh {
                    let iy = y as isize + dy as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..kw {
                        let ix = xp as isize + dx as isize - pw as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let x_base = ((iy as usize) * wd + ix as usize) * ci + g * cig;
                        let w_base = ((dy * kw + dx) * co + cout) * cig;
                        for c in 0..cig {
                            acc += xs[x_base + c] * wsl[w_base + c];
                        }
                    }
                }
                out[o_base + cout] = acc;
            }
        }
    }
    Tensor::from_shape_vec(IxDyn(&[h, wd, co]), out).unwrap()
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    groups: usize,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (h, wd, ci) = dims3(x);
    let ws = w.shape();
    let (kh, kw, co, cig) = (ws[0], ws[1], ws[2], ws[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let co_per_g = co / groups;

    let xs = x.as_slice().unwrap();
    let wsl = w.as_slice().unwrap();
    let gs = gout.as_slice().unwrap();
    let mut dx = vec![0.0; h * wd * ci];
    let mut dw = vec![0.0; kh * kw * co * cig];
    let mut db = vec![0.0; co];
    for y in 0..h {
        for xp in 0..wd {
            let o_base = (y * wd + xp) * co;
            for cout in 0..co {
                let g = cout / co_per_g;
                let go = gs[o_base + cout];
                db[cout] += go;
                for dy in 0..kh {
                    let iy = y as isize + dy as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dxk in 0..kw {
                        let ix = xp as isize + dxk as isize - pw as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let x_base = ((iy as usize) * wd + ix as usize) * ci + g * cig;
                        let w_base = ((dy * kw + dxk) * co + cout) * cig;
                        for c in 0..cig {
                            dx[x_base + c] += go * wsl[w_base + c];
                            dw[w_base + c] += go * xs[x_base + c];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_shape_vec(x.raw_dim(), dx).unwrap(),
        Tensor::from_shape_vec(w.raw_dim(), dw).unwrap(),
        Tensor::from_shape_vec(IxDyn(&[co]), db).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// Center-pivot 4D convolution
// ---------------------------------------------------------------------------

/// Output spatial extent under same-style padding with stride.
pub fn strided_out(extent: usize, stride: usize) -> usize {
    (extent + stride - 1) / stride
}

/// x: (Hq, Wq, Hs, Ws, Ci); wq: (kq, kq, Co, Ci); ws: (ks, ks, Co, Ci);
/// b: (Co). The query part convolves over the query axes with the support
/// coordinates held at the kernel center; the support part is symmetric.
/// Strides apply per coordinate pair.
pub fn conv4d_cp_forward(
    x: &Tensor,
    wq: &Tensor,
    ws: &Tensor,
    b: &Tensor,
    stride_q: usize,
    stride_s: usize,
) -> Tensor {
    let sh = x.shape();
    let (hq, wqd, hs, wsd, ci) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let kq = wq.shape()[0];
    let ks = ws.shape()[0];
    let co = wq.shape()[2];
    assert_eq!(ws.shape()[2], co);
    assert_eq!(wq.shape()[3], ci);
    assert_eq!(ws.shape()[3], ci);
    assert!(kq % 2 == 1 && ks % 2 == 1, "kernels must be odd");
    let (pq, ps) = (kq / 2, ks / 2);
    let (ohq, owq, ohs, ows) = (
        strided_out(hq, stride_q),
        strided_out(wqd, stride_q),
        strided_out(hs, stride_s),
        strided_out(wsd, stride_s),
    );

    let xs = x.as_slice().unwrap();
    let wqs = wq.as_slice().unwrap();
    let wss = ws.as_slice().unwrap();
    let bs = b.as_slice().unwrap();
    let mut out = vec![0.0; ohq * owq * ohs * ows * co];

    let xi = |yq: usize, xq: usize, ys: usize, xsp: usize| -> usize {
        (((yq * wqd + xq) * hs + ys) * wsd + xsp) * ci
    };

    let mut o = 0;
    for oyq in 0..ohq {
        let cyq = oyq * stride_q;
        for oxq in 0..owq {
            let cxq = oxq * stride_q;
            for oys in 0..ohs {
                let cys = oys * stride_s;
                for oxs in 0..ows {
                    let cxs = oxs * stride_s;
                    for cout in 0..co {
                        let mut acc = bs[cout];
                        // query-plane taps, support held at center
                        for dy in 0..kq {
                            let iy = cyq as isize + dy as isize - pq as isize;
                            if iy < 0 || iy >= hq as isize {
                                continue;
                            }
                            for dx in 0..kq {
                                let ix = cxq as isize + dx as isize - pq as isize;
                                if ix < 0 || ix >= wqd as isize {
                                    continue;
                                }
                                let xb = xi(iy as usize, ix as usize, cys, cxs);
                                let wb = ((dy * kq + dx) * co + cout) * ci;
                                for c in 0..ci {
                                    acc += xs[xb + c] * wqs[wb + c];
                                }
                            }
                        }
                        // support-plane taps, query held at center
                        for dy in 0..ks {
                            let iy = cys as isize + dy as isize - ps as isize;
                            if iy < 0 || iy >= hs as isize {
                                continue;
                            }
                            for dx in 0..ks {
                                let ix = cxs as isize + dx as isize - ps as isize;
                                if ix < 0 || ix >= wsd as isize {
                                    continue;
                                }
                                let xb = xi(cyq, cxq, iy as usize, ix as usize);
                                let wb = ((dy * ks + dx) * co + cout) * ci;
                                for c in 0..ci {
                                    acc += xs[xb + c] * wss[wb + c];
                                }
                            }
                        }
                        out[o + cout] = acc;
                    }
                    o += co;
                }
            }
        }
    }
    Tensor::from_shape_vec(IxDyn(&[ohq, owq, ohs, ows, co]), out).unwrap()
}

#[allow(clippy::too_many_arguments)]
fn conv4d_cp_backward(
    x: &Tensor,
    wq: &Tensor,
    ws: &Tensor,
    stride_q: usize,
    stride_s: usize,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let sh = x.shape();
    let (hq, wqd, hs, wsd, ci) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let kq = wq.shape()[0];
    let ks = ws.shape()[0];
    let co = wq.shape()[2];
    let (pq, ps) = (kq / 2, ks / 2);
    let os = gout.shape();
    let (ohq, owq, ohs, ows) = (os[0], os[1], os[2], os[3]);

    let xs = x.as_slice().unwrap();
    let wqs = wq.as_slice().unwrap();
    let wss = ws.as_slice().unwrap();
    let gs = gout.as_slice().unwrap();
    let mut dx = vec![0.0; xs.len()];
    let mut dwq = vec![0.0; wqs.len()];
    let mut dws = vec![0.0; wss.len()];
    let mut db = vec![0.0; co];

    let xi = |yq: usize, xq: usize, ys: usize, xsp: usize| -> usize {
        (((yq * wqd + xq) * hs + ys) * wsd + xsp) * ci
    };

    let mut o = 0;
    for oyq in 0..ohq {
        let cyq = oyq * stride_q;
        for oxq in 0..owq {
            let cxq = oxq * stride_q;
            for oys in 0..ohs {
                let cys = oys * stride_s;
                for oxs in 0..ows {
                    let cxs = oxs * stride_s;
                    for cout in 0..co {
                        let go = gs[o + cout];
                        if go == 0.0 {
                            continue;
                        }
                        db[cout] += go;
                        for dy in 0..kq {
                            let iy = cyq as isize + dy as isize - pq as isize;
                            if iy < 0 || iy >= hq as isize {
                                continue;
                            }
                            for dxk in 0..kq {
                                let ix = cxq as isize + dxk as isize - pq as isize;
                                if ix < 0 || ix >= wqd as isize {
                                    continue;
                                }
                                let xb = xi(iy as usize, ix as usize, cys, cxs);
                                let wb = ((dy * kq + dxk) * co + cout) * ci;
                                for c in 0..ci {
                                    dx[xb + c] += go * wqs[wb + c];
                                    dwq[wb + c] += go * xs[xb + c];
                                }
                            }
                        }
                        for dy in 0..ks {
                            let iy = cys as isize + dy as isize - ps as isize;
                            if iy < 0 || iy >= hs as isize {
                                continue;
                            }
                            for dxk in 0..ks {
                                let ix = cxs as isize + dxk as isize - ps as isize;
                                if ix < 0 || ix >= wsd as isize {
                                    continue;
                                }
                                let xb = xi(cyq, cxq, iy as usize, ix as usize);
                                let wb = ((dy * ks + dxk) * co + cout) * ci;
                                for c in 0..ci {
                                    dx[xb + c] += go * wss[wb + c];
                                    dws[wb + c] += go * xs[xb + c];
                                }
                            }
                        }
                    }
                    o += co;
                }
            }
        }
    }
    (
        Tensor::from_shape_vec(x.raw_dim(), dx).unwrap(),
        Tensor::from_shape_vec(wq.raw_dim(), dwq).unwrap(),
        Tensor::from_shape_vec(ws.raw_dim(), dws).unwrap(),
        Tensor::from_shape_vec(IxDyn(&[co]), db).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// Group normalization (last axis = channels, normalized over everything else
// within the channel group)
// ---------------------------------------------------------------------------

pub fn group_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let shape = x.shape().to_vec();
    let c = *shape.last().expect("rank >= 1");
    assert_eq!(c % groups, 0, "channels not divisible by groups");
    let cg = c / groups;
    let sites = x.len() / c;
    let n = (sites * cg) as f64;

    let xs = x.as_slice().unwrap();
    let gs = gamma.as_slice().unwrap();
    let bs = beta.as_slice().unwrap();
    let mut mean = vec![0.0; groups];
    let mut rstd = vec![0.0; groups];
    for g in 0..groups {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for s in 0..sites {
            for k in 0..cg {
                let v = xs[s * c + g * cg + k];
                sum += v;
                sumsq += v * v;
            }
        }
        let mu = sum / n;
        let var = (sumsq / n - mu * mu).max(0.0);
        mean[g] = mu;
        rstd[g] = 1.0 / (var + eps).sqrt();
    }
    let mut out = vec![0.0; xs.len()];
    for s in 0..sites {
        for ch in 0..c {
            let g = ch / cg;
            let xhat = (xs[s * c + ch] - mean[g]) * rstd[g];
            out[s * c + ch] = xhat * gs[ch] + bs[ch];
        }
    }
    (Tensor::from_shape_vec(x.raw_dim(), out).unwrap(), mean, rstd)
}

fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    groups: usize,
    mean: &[f64],
    rstd: &[f64],
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let shape = x.shape().to_vec();
    let c = *shape.last().unwrap();
    let cg = c / groups;
    let sites = x.len() / c;
    let n = (sites * cg) as f64;

    let xs = x.as_slice().unwrap();
    let gms = gamma.as_slice().unwrap();
    let gs = gout.as_slice().unwrap();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = vec![0.0; xs.len()];

    for g in 0..groups {
        // first pass: per-group means of dxhat and dxhat*xhat
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for s in 0..sites {
            for k in 0..cg {
                let ch = g * cg + k;
                let i = s * c + ch;
                let xhat = (xs[i] - mean[g]) * rstd[g];
                let dxhat = gs[i] * gms[ch];
                m1 += dxhat;
                m2 += dxhat * xhat;
                dgamma[ch] += gs[i] * xhat;
                dbeta[ch] += gs[i];
            }
        }
        m1 /= n;
        m2 /= n;
        for s in 0..sites {
            for k in 0..cg {
                let ch = g * cg + k;
                let i = s * c + ch;
                let xhat = (xs[i] - mean[g]) * rstd[g];
                let dxhat = gs[i] * gms[ch];
                dx[i] = rstd[g] * (dxhat - m1 - xhat * m2);
            }
        }
    }
    (
        Tensor::from_shape_vec(x.raw_dim(), dx).unwrap(),
        Tensor::from_shape_vec(IxDyn(&[c]), dgamma).unwrap(),
        Tensor::from_shape_vec(IxDyn(&[c]), dbeta).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// Bilinear resampling over the first two axes
// ---------------------------------------------------------------------------

struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

/// Half-pixel-center tap table for resizing `src` samples to `dst` samples.
fn taps(src: usize, dst: usize) -> Taps {
    let scale = src as f64 / dst as f64;
    let mut lo = Vec::with_capacity(dst);
    let mut hi = Vec::with_capacity(dst);
    let mut frac = Vec::with_capacity(dst);
    for d in 0..dst {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let l = s.floor() as usize;
        let h = (l + 1).min(src - 1);
        lo.push(l);
        hi.push(h);
        frac.push(s - l as f64);
    }
    Taps { lo, hi, frac }
}

/// Resize (h, w, rest...) to (oh, ow, rest...) with bilinear interpolation.
/// Rank-2 inputs are treated as having a trailing extent-1 axis.
pub fn resize_bilinear_forward(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let shape = x.shape().to_vec();
    assert!(shape.len() >= 2, "resize needs rank >= 2");
    let (h, w) = (shape[0], shape[1]);
    let rest: usize = shape[2..].iter().product::<usize>().max(1);
    let ty = taps(h, oh);
    let tx = taps(w, ow);

    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0; oh * ow * rest];
    for y in 0..oh {
        let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
        for xp in 0..ow {
            let (x0, x1, fx) = (tx.lo[xp], tx.hi[xp], tx.frac[xp]);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let b00 = (y0 * w + x0) * rest;
            let b01 = (y0 * w + x1) * rest;
            let b10 = (y1 * w + x0) * rest;
            let b11 = (y1 * w + x1) * rest;
            let ob = (y * ow + xp) * rest;
            for r in 0..rest {
                out[ob + r] = w00 * xs[b00 + r]
                    + w01 * xs[b01 + r]
                    + w10 * xs[b10 + r]
                    + w11 * xs[b11 + r];
            }
        }
    }
    let mut oshape = vec![oh, ow];
    oshape.extend_from_slice(&shape[2..]);
    Tensor::from_shape_vec(IxDyn(&oshape), out).unwrap()
}

fn resize_bilinear_backward(in_shape: &[usize], gout: &Tensor) -> Tensor {
    let (h, w) = (in_shape[0], in_shape[1]);
    let rest: usize = in_shape[2..].iter().product::<usize>().max(1);
    let os = gout.shape();
    let (oh, ow) = (os[0], os[1]);
    let ty = taps(h, oh);
    let tx = taps(w, ow);

    let gs = gout.as_slice().unwrap();
    let mut dx = vec![0.0; h * w * rest];
    for y in 0..oh {
        let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
        for xp in 0..ow {
            let (x0, x1, fx) = (tx.lo[xp], tx.hi[xp], tx.frac[xp]);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let b00 = (y0 * w + x0) * rest;
            let b01 = (y0 * w + x1) * rest;
            let b10 = (y1 * w + x0) * rest;
            let b11 = (y1 * w + x1) * rest;
            let ob = (y * ow + xp) * rest;
            for r in 0..rest {
                let g = gs[ob + r];
                dx[b00 + r] += w00 * g;
                dx[b01 + r] += w01 * g;
                dx[b10 + r] += w10 * g;
                dx[b11 + r] += w11 * g;
            }
        }
    }
    Tensor::from_shape_vec(IxDyn(in_shape), dx).unwrap()
}

// ---------------------------------------------------------------------------
// Mean over support axes: (hq, wq, hs, ws, c) -> (hq, wq, c)
// ---------------------------------------------------------------------------

pub fn mean_support_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (hq, wq, hs, ws, c) = (s[0], s[1], s[2], s[3], s[4]);
    let xs = x.as_slice().unwrap();
    let inv = 1.0 / (hs * ws) as f64;
    let mut out = vec![0.0; hq * wq * c];
    for q in 0..hq * wq {
        let ob = q * c;
        for sp in 0..hs * ws {
            let xb = (q * hs * ws + sp) * c;
            for k in 0..c {
                out[ob + k] += xs[xb + k];
            }
        }
        for k in 0..c {
            out[ob + k] *= inv;
        }
    }
    Tensor::from_shape_vec(IxDyn(&[hq, wq, c]), out).unwrap()
}

// ---------------------------------------------------------------------------
// Clamped cosine correlation: q (hq, wq, c) x s (hs, ws, c)
//                         -> (hq, wq, hs, ws, 1)
// ---------------------------------------------------------------------------

const NORM_EPS: f64 = 1e-12;

fn vector_norms(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let c = s[2];
    let sites = s[0] * s[1];
    let ts = t.as_slice().unwrap();
    (0..sites)
        .map(|i| ts[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

pub fn cosine_corr_forward(q: &Tensor, s: &Tensor) -> Tensor {
    let qs = q.shape();
    let ss = s.shape();
    assert_eq!(qs[2], ss[2], "cosine channel mismatch");
    let c = qs[2];
    let (hq, wq, hs, ws) = (qs[0], qs[1], ss[0], ss[1]);
    let nq = vector_norms(q);
    let ns = vector_norms(s);
    let qd = q.as_slice().unwrap();
    let sd = s.as_slice().unwrap();
    let mut out = vec![0.0; hq * wq * hs * ws];
    for i in 0..hq * wq {
        if nq[i] < NORM_EPS {
            continue;
        }
        for j in 0..hs * ws {
            if ns[j] < NORM_EPS {
                continue;
            }
            let mut dot = 0.0;
            for k in 0..c {
                dot += qd[i * c + k] * sd[j * c + k];
            }
            let cos = dot / (nq[i] * ns[j]);
            if cos > 0.0 {
                out[i * hs * ws + j] = cos;
            }
        }
    }
    Tensor::from_shape_vec(IxDyn(&[hq, wq, hs, ws, 1]), out).unwrap()
}

fn cosine_corr_backward(q: &Tensor, s: &Tensor, gout: &Tensor) -> (Tensor, Tensor) {
    let qs = q.shape();
    let ss = s.shape();
    let c = qs[2];
    let (hq, wq, hs, ws) = (qs[0], qs[1], ss[0], ss[1]);
    let nq = vector_norms(q);
    let ns = vector_norms(s);
    let qd = q.as_slice().unwrap();
    let sd = s.as_slice().unwrap();
    let gs = gout.as_slice().unwrap();
    let mut dq = vec![0.0; qd.len()];
    let mut ds = vec![0.0; sd.len()];
    for i in 0..hq * wq {
        if nq[i] < NORM_EPS {
            continue;
        }
        for j in 0..hs * ws {
            if ns[j] < NORM_EPS {
                continue;
            }
            let g = gs[i * hs * ws + j];
            if g == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for k in 0..c {
                dot += qd[i * c + k] * sd[j * c + k];
            }
            let denom = nq[i] * ns[j];
            let cos = dot / denom;
            if cos <= 0.0 {
                continue;
            }
            let inv_nq2 = 1.0 / (nq[i] * nq[i]);
            let inv_ns2 = 1.0 / (ns[j] * ns[j]);
            for k in 0..c {
                dq[i * c + k] += g * (sd[j * c + k] / denom - cos * qd[i * c + k] * inv_nq2);
                ds[j * c + k] += g * (qd[i * c + k] / denom - cos * sd[j * c + k] * inv_ns2);
            }
        }
    }
    (
        Tensor::from_shape_vec(q.raw_dim(), dq).unwrap(),
        Tensor::from_shape_vec(s.raw_dim(), ds).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// Softmax over the last axis, and mean cross-entropy against a binary target
// ---------------------------------------------------------------------------

pub fn softmax_last_forward(x: &Tensor) -> Tensor {
    let shape = x.shape().to_vec();
    let c = *shape.last().unwrap();
    let sites = x.len() / c;
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0; xs.len()];
    for sidx in 0..sites {
        let row = &xs[sidx * c..(sidx + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..c {
            let e = (row[k] - m).exp();
            out[sidx * c + k] = e;
            z += e;
        }
        for k in 0..c {
            out[sidx * c + k] /= z;
        }
    }
    Tensor::from_shape_vec(x.raw_dim(), out).unwrap()
}

const LOG_EPS: f64 = 1e-12;

/// Mean two-class cross-entropy of softmax outputs against a {0,1} target.
/// probs: (H, W, 2) with channel 1 = foreground; target: (H, W).
pub fn ce_mean_forward(probs: &Tensor, target: &Tensor) -> f64 {
    let ps = probs.shape();
    assert_eq!(ps.len(), 3);
    assert_eq!(ps[2], 2, "two-class probabilities expected");
    assert_eq!(&ps[..2], target.shape(), "prediction/target resolution mismatch");
    let (h, w) = (ps[0], ps[1]);
    let pd = probs.as_slice().unwrap();
    let td = target.as_slice().unwrap();
    let mut acc = 0.0;
    for s in 0..h * w {
        let t = if td[s] >= 0.5 { 1 } else { 0 };
        acc -= (pd[s * 2 + t] + LOG_EPS).ln();
    }
    acc / (h * w) as f64
}

// ---------------------------------------------------------------------------
// Graph wrappers
// ---------------------------------------------------------------------------

impl Graph {
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, groups: usize) -> NodeId {
        let value = conv2d_forward(self.value(x), self.value(w), self.value(b), groups);
        self.push(
            value,
            Some(Box::new(move |graph, _, g, sink| {
                let (dx, dw, db) =
                    conv2d_backward(graph.value(x), graph.value(w), groups, g);
                sink.add(x, dx);
                sink.add(w, dw);
                sink.add(b, db);
            })),
            None,
        )
    }

    pub fn conv4d_cp(
        &mut self,
        x: NodeId,
        wq: NodeId,
        ws: NodeId,
        b: NodeId,
        stride_q: usize,
        stride_s: usize,
    ) -> NodeId {
        let value = conv4d_cp_forward(
            self.value(x),
            self.value(wq),
            self.value(ws),
            self.value(b),
            stride_q,
            stride_s,
        );
        self.push(
            value,
            Some(Box::new(move |graph, _, g, sink| {
                let (dx, dwq, dws, db) = conv4d_cp_backward(
                    graph.value(x),
                    graph.value(wq),
                    graph.value(ws),
                    stride_q,
                    stride_s,
                    g,
                );
                sink.add(x, dx);
                sink.add(wq, dwq);
                sink.add(ws, dws);
                sink.add(b, db);
            })),
            None,
        )
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> NodeId {
        let (value, mean, rstd) =
            group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups, eps);
        self.push(
            value,
            Some(Box::new(move |graph, _, g, sink| {
                let (dx, dgamma, dbeta) = group_norm_backward(
                    graph.value(x),
                    graph.value(gamma),
                    groups,
                    &mean,
                    &rstd,
                    g,
                );
                sink.add(x, dx);
                sink.add(gamma, dgamma);
                sink.add(beta, dbeta);
            })),
            None,
        )
    }

    pub fn resize_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let in_shape = self.value(x).shape().to_vec();
        if in_shape[0] == oh && in_shape[1] == ow {
            // identity resize still gets a pass-through node for uniformity
            let value = self.value(x).clone();
            return self.push(
                value,
                Some(Box::new(move |_, _, g, sink| sink.add(x, g.clone()))),
                None,
            );
        }
        let value = resize_bilinear_forward(self.value(x), oh, ow);
        self.push(
            value,
            Some(Box::new(move |_, _, g, sink| {
                sink.add(x, resize_bilinear_backward(&in_shape, g));
            })),
            None,
        )
    }

    pub fn mean_support(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).shape().to_vec();
        let value = mean_support_forward(self.value(x));
        self.push(
            value,
            Some(Box::new(move |_, _, g, sink| {
                let (hq, wq, hs, ws, c) = (s[0], s[1], s[2], s[3], s[4]);
                let gs = g.as_slice().unwrap();
                let inv = 1.0 / (hs * ws) as f64;
                let mut dx = vec![0.0; hq * wq * hs * ws * c];
                for q in 0..hq * wq {
                    for sp in 0..hs * ws {
                        let xb = (q * hs * ws + sp) * c;
                        for k in 0..c {
                            dx[xb + k] = gs[q * c + k] * inv;
                        }
                    }
                }
                sink.add(x, Tensor::from_shape_vec(IxDyn(&[hq, wq, hs, ws, c]), dx).unwrap());
            })),
            None,
        )
    }

    pub fn cosine_corr(&mut self, q: NodeId, s: NodeId) -> NodeId {
        let value = cosine_corr_forward(self.value(q), self.value(s));
        self.push(
            value,
            Some(Box::new(move |graph, _, g, sink| {
                let (dq, ds) = cosine_corr_backward(graph.value(q), graph.value(s), g);
                sink.add(q, dq);
                sink.add(s, ds);
            })),
            None,
        )
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let value = softmax_last_forward(self.value(x));
        self.push(
            value,
            Some(Box::new(move |graph, me, g, sink| {
                let p = graph.value(me).as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let shape = graph.value(me).shape();
                let c = *shape.last().unwrap();
                let sites = p.len() / c;
                let mut dx = vec![0.0; p.len()];
                for sidx in 0..sites {
                    let b = sidx * c;
                    let mut dot = 0.0;
                    for k in 0..c {
                        dot += gs[b + k] * p[b + k];
                    }
                    for k in 0..c {
                        dx[b + k] = p[b + k] * (gs[b + k] - dot);
                    }
                }
                sink.add(x, Tensor::from_shape_vec(graph.value(me).raw_dim(), dx).unwrap());
            })),
            None,
        )
    }

    /// Mean two-class cross-entropy against a constant binary target.
    pub fn ce_mean(&mut self, probs: NodeId, target: &Tensor) -> NodeId {
        let loss = ce_mean_forward(self.value(probs), target);
        let target = target.clone();
        let value = Tensor::from_elem(IxDyn(&[]), loss);
        self.push(
            value,
            Some(Box::new(move |graph, _, g, sink| {
                let gv = g.first().copied().unwrap_or(0.0);
                let p = graph.value(probs).as_slice().unwrap();
                let td = target.as_slice().unwrap();
                let sites = td.len();
                let inv = 1.0 / sites as f64;
                let mut dp = vec![0.0; p.len()];
                for s in 0..sites {
                    let t = if td[s] >= 0.5 { 1 } else { 0 };
                    dp[s * 2 + t] = -gv * inv / (p[s * 2 + t] + LOG_EPS);
                }
                sink.add(probs, Tensor::from_shape_vec(graph.value(probs).raw_dim(), dp).unwrap());
            })),
            None,
        )
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected rank 3, got {s:?}");
    (s[0], s[1], s[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, ParamStore};
    use crate::gradcheck::check_all_params;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// FD-check a scalar function of several named tensors.
    fn fd_check(store: ParamStore, build: impl Fn(&mut Graph, &ParamStore) -> crate::autodiff::NodeId) {
        let mut g = Graph::new();
        let loss = build(&mut g, &store);
        let grads = g.backward(loss, store.len());
        let reports = check_all_params(&store, &grads, 1e-5, 1e-7, |s| {
            let mut g = Graph::new();
            let l = build(&mut g, s);
            *g.value(l).first().unwrap()
        });
        for r in &reports {
            assert!(
                r.max_rel_err <= 1e-4,
                "param {} rel err {} over {} entries",
                r.name,
                r.max_rel_err,
                r.checked
            );
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.register("x", seeded(&[5, 4, 4], &mut rng));
        store.register("w", seeded(&[3, 3, 6, 4], &mut rng));
        store.register("b", seeded(&[6], &mut rng));
        fd_check(store, |g, s| {
            let x = g.param(s, s.id("x").unwrap());
            let w = g.param(s, s.id("w").unwrap());
            let b = g.param(s, s.id("b").unwrap());
            let y = g.conv2d(x, w, b, 1);
            let y = g.tanh(y);
            g.sum_all(y)
        });
    }

    #[test]
    fn grouped_conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        store.register("x", seeded(&[4, 4, 6], &mut rng));
        store.register("w", seeded(&[3, 3, 6, 2], &mut rng));
        store.register("b", seeded(&[6], &mut rng));
        fd_check(store, |g, s| {
            let x = g.param(s, s.id("x").unwrap());
            let w = g.param(s, s.id("w").unwrap());
            let b = g.param(s, s.id("b").unwrap());
            let y = g.conv2d(x, w, b, 3);
            let y = g.sigmoid(y);
            g.sum_all(y)
        });
    }

    #[test]
    fn conv4d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        store.register("x", seeded(&[4, 3, 4, 3, 2], &mut rng));
        store.register("wq", seeded(&[3, 3, 3, 2], &mut rng));
        store.register("ws", seeded(&[3, 3, 3, 2], &mut rng));
        store.register("b", seeded(&[3], &mut rng));
        fd_check(store, |g, s| {
            let x = g.param(s, s.id("x").unwrap());
            let wq = g.param(s, s.id("wq").unwrap());
            let ws = g.param(s, s.id("ws").unwrap());
            let b = g.param(s, s.id("b").unwrap());
            let y = g.conv4d_cp(x, wq, ws, b, 1, 2);
            let y = g.tanh(y);
            g.sum_all(y)
        });
    }

    #[test]
    fn group_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        store.register("x", seeded(&[3, 3, 8], &mut rng));
        store.register("gamma", seeded(&[8], &mut rng));
        store.register("beta", seeded(&[8], &mut rng));
        fd_check(store, |g, s| {
            let x = g.param(s, s.id("x").unwrap());
            let gamma = g.param(s, s.id("gamma").unwrap());
            let beta = g.param(s, s.id("beta").unwrap());
            let y = g.group_norm(x, gamma, beta, 4, 1e-5);
            let y = g.tanh(y);
            g.sum_all(y)
        });
    }

    #[test]
    fn resize_and_pool_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParamStore::new();
        store.register("x", seeded(&[3, 3, 2, 2, 2], &mut rng));
        fd_check(store, |g, s| {
            let x = g.param(s, s.id("x").unwrap());
            let up = g.resize_bilinear(x, 5, 6);
            let pooled = g.mean_support(up);
            let y = g.tanh(pooled);
            g.sum_all(y)
        });
    }

    #[test]
    fn cosine_corr_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut store = ParamStore::new();
        store.register("q", seeded(&[2, 3, 4], &mut rng));
        store.register("s", seeded(&[3, 2, 4], &mut rng));
        fd_check(store, |g, st| {
            let q = g.param(st, st.id("q").unwrap());
            let s = g.param(st, st.id("s").unwrap());
            let c = g.cosine_corr(q, s);
            let y = g.tanh(c);
            g.sum_all(y)
        });
    }

    #[test]
    fn softmax_ce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        store.register("x", seeded(&[4, 4, 2], &mut rng));
        let target = Tensor::from_shape_vec(
            IxDyn(&[4, 4]),
            (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect(),
        )
        .unwrap();
        fd_check(store, move |g, s| {
            let x = g.param(s, s.id("x").unwrap());
            let p = g.softmax_last(x);
            g.ce_mean(p, &target)
        });
    }

    #[test]
    fn gelu_and_mask_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut store = ParamStore::new();
        store.register("f", seeded(&[3, 3, 4], &mut rng));
        store.register("m", seeded(&[3, 3], &mut rng));
        fd_check(store, |g, s| {
            let f = g.param(s, s.id("f").unwrap());
            let m = g.param(s, s.id("m").unwrap());
            let masked = g.mul_mask(f, m);
            let y = g.gelu(masked);
            g.sum_all(y)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = seeded(&[5, 5, 2], &mut rng);
        let p = softmax_last_forward(&x);
        for site in p.as_slice().unwrap().chunks(2) {
            assert!((site[0] + site[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_output_extents() {
        assert_eq!(strided_out(16, 2), 8);
        assert_eq!(strided_out(5, 2), 3);
        assert_eq!(strided_out(1, 2), 1);
        assert_eq!(strided_out(7, 1), 7);
    }
}
