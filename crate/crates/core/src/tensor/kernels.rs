//! Raw numeric kernels shared by the tape ops. Everything here is
//! single-threaded with a fixed reduction order, so results are bitwise
//! reproducible on a given machine.

use super::{broadcast_shape, numel, strides, Result, Tensor, TensorError};

/// `c = a·b + beta·c` where `a` is `[m,k]` (or `[k,m]` when `trans_a`) and
/// `b` is `[k,n]` (or `[n,k]` when `trans_b`), all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer lengths are checked above and the strides address exactly
    // the m×k, k×n and m×n row-major (or transposed) blocks.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatmulPlan {
    out_shape: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    /// (out batch, a batch, b batch) offsets in matrices.
    pairs: Vec<(usize, usize, usize)>,
}

fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = if ba.is_empty() && bb.is_empty() {
        vec![]
    } else if ba.is_empty() {
        bb.to_vec()
    } else if bb.is_empty() {
        ba.to_vec()
    } else {
        broadcast_shape(ba, bb).ok_or_else(mismatch)?
    };
    let nb = numel(&batch);
    let sa = batch_strides(ba, &batch);
    let sb = batch_strides(bb, &batch);
    let mut pairs = Vec::with_capacity(nb);
    let mut idx = vec![0usize; batch.len()];
    for o in 0..nb {
        let ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        pairs.push((o, ia, ib));
        for ax in (0..batch.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < batch[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        out_shape,
        m,
        k,
        n,
        pairs,
    })
}

fn batch_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(src);
    let off = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < off || src[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = plan_matmul(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0; numel(&plan.out_shape)];
    if b.ndim() == 2 {
        // Fold every batch axis of `a` into the row dimension.
        let rows = a.len() / k;
        gemm(rows, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    } else {
        for &(o, ia, ib) in &plan.pairs {
            gemm(
                m,
                k,
                n,
                &a.data()[ia * m * k..],
                false,
                &b.data()[ib * k * n..],
                false,
                0.0,
                &mut out[o * m * n..(o + 1) * m * n],
            );
        }
    }
    Tensor::new(&plan.out_shape, out)
}

/// Gradients of `a·b` given the upstream gradient `dy`; only the requested
/// sides are computed.
pub fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    dy: &Tensor,
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let plan = plan_matmul(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut da = need_a.then(|| Tensor::zeros(a.shape()));
    let mut db = need_b.then(|| Tensor::zeros(b.shape()));
    if b.ndim() == 2 {
        let rows = a.len() / k;
        if let Some(da) = da.as_mut() {
            gemm(rows, n, k, dy.data(), false, b.data(), true, 0.0, da.data_mut());
        }
        if let Some(db) = db.as_mut() {
            gemm(k, rows, n, a.data(), true, dy.data(), false, 0.0, db.data_mut());
        }
    } else {
        for &(o, ia, ib) in &plan.pairs {
            let g = &dy.data()[o * m * n..(o + 1) * m * n];
            if let Some(da) = da.as_mut() {
                let dst = &mut da.data_mut()[ia * m * k..(ia + 1) * m * k];
                gemm(m, n, k, g, false, &b.data()[ib * k * n..], true, 1.0, dst);
            }
            if let Some(db) = db.as_mut() {
                let dst = &mut db.data_mut()[ib * k * n..(ib + 1) * k * n];
                gemm(k, m, n, &a.data()[ia * m * k..], true, g, false, 1.0, dst);
            }
        }
    }
    Ok((da, db))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    /// `x` is `[B,C,H,W]` or `[C,H,W]`; `w` is `[O,C,kh,kw]`.
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, c_in, h, wd) = match *x {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "conv2d",
                    detail: format!("input must be [C,H,W] or [B,C,H,W], got {x:?}"),
                })
            }
        };
        let [c_out, wc, kh, kw] = *w else {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: format!("weight must be [O,C,kh,kw], got {w:?}"),
            });
        };
        if wc != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * pad,
                    wd + 2 * pad
                ),
            });
        }
        Ok(ConvGeometry {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Gather one image `[C,H,W]` into columns `[C·kh·kw, H'·W']`.
fn im2col(g: &ConvGeometry, img: &[f64], cols: &mut [f64]) {
    let so = g.spatial_out();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * so..(row + 1) * so];
                for oi in 0..g.h_out {
                    let y = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.w_out..(oi + 1) * g.w_out];
                    if y < 0 || y >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.h + y as usize) * g.w..][..g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let x = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if x < 0 || x >= g.w as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, cols: &[f64], img: &mut [f64]) {
    let so = g.spatial_out();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * so..(row + 1) * so];
                for oi in 0..g.h_out {
                    let y = (oi * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + y as usize) * g.w..][..g.w];
                    for oj in 0..g.w_out {
                        let x = (oj * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            dst[x as usize] += src[oi * g.w_out + oj];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![g.c_out],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let so = g.spatial_out();
    let img_len = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; g.patch_len() * so];
    let mut out = vec![0.0; g.batch * g.c_out * so];
    for bi in 0..g.batch {
        im2col(&g, &x.data()[bi * img_len..(bi + 1) * img_len], &mut cols);
        let dst = &mut out[bi * g.c_out * so..(bi + 1) * g.c_out * so];
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_exact_mut(so).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        gemm(g.c_out, g.patch_len(), so, w.data(), false, &cols, false, 1.0, dst);
    }
    let shape = if x.ndim() == 3 {
        vec![g.c_out, g.h_out, g.w_out]
    } else {
        vec![g.batch, g.c_out, g.h_out, g.w_out]
    };
    Tensor::new(&shape, out)
}

/// Returns `(dx, dw, dbias)`; `dx` only when `need_x`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let so = g.spatial_out();
    let pl = g.patch_len();
    let img_len = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; pl * so];
    let mut dcols = vec![0.0; pl * so];
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[g.c_out]);
    for bi in 0..g.batch {
        let gy = &dy.data()[bi * g.c_out * so..(bi + 1) * g.c_out * so];
        for (o, chunk) in gy.chunks_exact(so).enumerate() {
            db.data_mut()[o] += chunk.iter().sum::<f64>();
        }
        im2col(&g, &x.data()[bi * img_len..(bi + 1) * img_len], &mut cols);
        gemm(g.c_out, so, pl, gy, false, &cols, true, 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            gemm(pl, g.c_out, so, w.data(), true, gy, false, 0.0, &mut dcols);
            col2im_add(&g, &dcols, &mut dx.data_mut()[bi * img_len..(bi + 1) * img_len]);
        }
    }
    Ok((dx, dw, db))
}

/// Normalization statistics saved for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, NormCache)> {
    let d = *x.shape().last().unwrap();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(TensorError::ShapeMismatch {
            op: "layernorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        NormCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward(cache: &NormCache, gamma: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let d = gamma.len();
    let rows = dy.len() / d;
    let mut dx = Tensor::zeros(dy.shape());
    let mut dg = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let xh = cache.xhat.data();
    let mut g = vec![0.0; d];
    for r in 0..rows {
        let gy = &dy.data()[r * d..(r + 1) * d];
        let xr = &xh[r * d..(r + 1) * d];
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..d {
            g[j] = gy[j] * gamma.data()[j];
            mean_g += g[j];
            mean_gx += g[j] * xr[j];
            dg.data_mut()[j] += gy[j] * xr[j];
            dbeta.data_mut()[j] += gy[j];
        }
        mean_g /= d as f64;
        mean_gx /= d as f64;
        let is = cache.inv_std[r];
        let out = &mut dx.data_mut()[r * d..(r + 1) * d];
        for j in 0..d {
            out[j] = is * (g[j] - mean_g - xr[j] * mean_gx);
        }
    }
    (dx, dg, dbeta)
}

/// Per-channel batch statistics of `[B,C,H,W]`: `(mean, biased var)`.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = *x.shape() else {
        panic!("channel_stats expects [B,C,H,W], got {:?}", x.shape())
    };
    let hw = h * w;
    let count = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += x.data()[(bi * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
        let mu = s / count;
        let mut v = 0.0;
        for bi in 0..b {
            v += x.data()[(bi * c + ch) * hw..][..hw]
                .iter()
                .map(|t| (t - mu) * (t - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / count;
    }
    (mean, var)
}

/// Normalize `[B,C,H,W]` per channel with the given statistics, then apply the affine map.
pub fn batchnorm_apply(
    x: &Tensor,
    mean: &[f64],
    var: &[f64],
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let [b, c, h, w] = *x.shape() else {
        return Err(TensorError::InvalidArgument {
            op: "batchnorm2d",
            detail: format!("expects [B,C,H,W], got {:?}", x.shape()),
        });
    };
    if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm2d",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let hw = h * w;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + hw {
                let v = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = v;
                y[i] = g * v + bt;
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        NormCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`. `batch_stats` selects whether the
/// statistics depended on `x` (training) or were constants (eval).
pub fn batchnorm_backward(
    cache: &NormCache,
    gamma: &Tensor,
    dy: &Tensor,
    batch_stats: bool,
) -> (Tensor, Tensor, Tensor) {
    let [b, c, h, w] = *dy.shape() else {
        unreachable!("batchnorm grad shape")
    };
    let hw = h * w;
    let count = (b * hw) as f64;
    let xh = cache.xhat.data();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dg = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dyx = 0.0;
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                sum_dy += dy.data()[i];
                sum_dyx += dy.data()[i] * xh[i];
            }
        }
        dg.data_mut()[ch] = sum_dyx;
        dbeta.data_mut()[ch] = sum_dy;
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        let (mg, mgx) = (sum_dy / count, sum_dyx / count);
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                dx.data_mut()[i] = if batch_stats {
                    scale * (dy.data()[i] - mg - xh[i] * mgx)
                } else {
                    scale * dy.data()[i]
                };
            }
        }
    }
    (dx, dg, dbeta)
}

/// Row-wise softmax over the last axis, max-subtracted.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Row-wise log-sum-exp over the last axis; shape drops the last axis
/// (a vector input yields shape `[1]`).
pub fn logsumexp_last(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap();
    let vals: Vec<f64> = x
        .data()
        .chunks_exact(d)
        .map(|row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
        })
        .collect();
    let shape = if x.ndim() == 1 {
        vec![1]
    } else {
        x.shape()[..x.ndim() - 1].to_vec()
    };
    Tensor::new(&shape, vals).expect("logsumexp shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
