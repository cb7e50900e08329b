//! Raw numeric kernels behind the tape ops: im2col + GEMM convolutions,
//! pooling, and row-wise softmax. No shape validation here — callers check.

use crate::tensor::{Element, Tensor};

pub fn conv1d_out_len(l: usize, k: usize, stride: usize, pad: usize) -> usize {
    (l + 2 * pad - k) / stride + 1
}

/// Gather x[n] (C_in x L) into columns (C_in*k x L_out) for one sample.
fn im2col_1d<E: Element>(
    x: &[E],
    c_in: usize,
    l: usize,
    k: usize,
    stride: usize,
    pad: usize,
    col: &mut [E],
) {
    let l_out = conv1d_out_len(l, k, stride, pad);
    for ci in 0..c_in {
        let xrow = &x[ci * l..(ci + 1) * l];
        for kk in 0..k {
            let crow = &mut col[(ci * k + kk) * l_out..(ci * k + kk + 1) * l_out];
            if stride == 1 {
                // source index = t + kk - pad; contiguous run clipped to [0, l)
                let off = kk as isize - pad as isize;
                let t0 = ((-off).max(0) as usize).min(l_out);
                let t1 = ((l as isize - off).max(0) as usize).min(l_out);
                crow[..t0].iter_mut().for_each(|v| *v = E::zero());
                crow[t1..].iter_mut().for_each(|v| *v = E::zero());
                if t1 > t0 {
                    let s0 = (t0 as isize + off) as usize;
                    crow[t0..t1].copy_from_slice(&xrow[s0..s0 + (t1 - t0)]);
                }
            } else {
                for (t, c) in crow.iter_mut().enumerate() {
                    let src = (t * stride + kk) as isize - pad as isize;
                    *c = if src >= 0 && (src as usize) < l {
                        xrow[src as usize]
                    } else {
                        E::zero()
                    };
                }
            }
        }
    }
}

/// Scatter-add columns back into dx[n] — adjoint of im2col_1d.
fn col2im_1d<E: Element>(
    col: &[E],
    c_in: usize,
    l: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [E],
) {
    let l_out = conv1d_out_len(l, k, stride, pad);
    for ci in 0..c_in {
        let xrow = &mut dx[ci * l..(ci + 1) * l];
        for kk in 0..k {
            let crow = &col[(ci * k + kk) * l_out..(ci * k + kk + 1) * l_out];
            for (t, &c) in crow.iter().enumerate() {
                let src = (t * stride + kk) as isize - pad as isize;
                if src >= 0 && (src as usize) < l {
                    xrow[src as usize] = xrow[src as usize] + c;
                }
            }
        }
    }
}

/// x: [N, C_in, L], w: [C_out, C_in, k], b: [C_out] -> [N, C_out, L_out]
pub fn conv1d_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let (n, c_in, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let l_out = conv1d_out_len(l, k, stride, pad);
    let ck = c_in * k;
    let mut y = Tensor::zeros(&[n, c_out, l_out]);
    let mut col = vec![E::zero(); ck * l_out];
    for ni in 0..n {
        im2col_1d(
            &x.data()[ni * c_in * l..(ni + 1) * c_in * l],
            c_in,
            l,
            k,
            stride,
            pad,
            &mut col,
        );
        let yn = &mut y.data_mut()[ni * c_out * l_out..(ni + 1) * c_out * l_out];
        E::gemm(
            c_out,
            ck,
            l_out,
            E::one(),
            w.data(),
            ck as isize,
            1,
            &col,
            l_out as isize,
            1,
            E::zero(),
            yn,
            l_out as isize,
            1,
        );
        for co in 0..c_out {
            let bias = b.data()[co];
            for v in &mut yn[co * l_out..(co + 1) * l_out] {
                *v = *v + bias;
            }
        }
    }
    y
}

/// Gradients of conv1d. `dx` is skipped when `need_dx` is false (leaf inputs).
pub fn conv1d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    g: &Tensor<E>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor<E>>, Tensor<E>, Tensor<E>) {
    let (n, c_in, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let l_out = conv1d_out_len(l, k, stride, pad);
    let ck = c_in * k;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[c_out]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = vec![E::zero(); ck * l_out];
    let mut dcol = vec![E::zero(); ck * l_out];
    for ni in 0..n {
        let gn = &g.data()[ni * c_out * l_out..(ni + 1) * c_out * l_out];
        for co in 0..c_out {
            let s: E = gn[co * l_out..(co + 1) * l_out].iter().copied().sum();
            db.data_mut()[co] = db.data_mut()[co] + s;
        }
        im2col_1d(
            &x.data()[ni * c_in * l..(ni + 1) * c_in * l],
            c_in,
            l,
            k,
            stride,
            pad,
            &mut col,
        );
        // dw += g_n (C_out x L_out) . col^T (L_out x ck)
        E::gemm(
            c_out,
            l_out,
            ck,
            E::one(),
            gn,
            l_out as isize,
            1,
            &col,
            1,
            l_out as isize,
            E::one(),
            dw.data_mut(),
            ck as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            // dcol = w^T (ck x C_out) . g_n (C_out x L_out)
            E::gemm(
                ck,
                c_out,
                l_out,
                E::one(),
                w.data(),
                1,
                ck as isize,
                gn,
                l_out as isize,
                1,
                E::zero(),
                &mut dcol,
                l_out as isize,
                1,
            );
            col2im_1d(
                &dcol,
                c_in,
                l,
                k,
                stride,
                pad,
                &mut dx.data_mut()[ni * c_in * l..(ni + 1) * c_in * l],
            );
        }
    }
    (dx, dw, db)
}

pub fn conv2d_out_hw(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    (
        (h + 2 * pad - k) / stride + 1,
        (w + 2 * pad - k) / stride + 1,
    )
}

fn im2col_2d<E: Element>(
    x: &[E],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    col: &mut [E],
) {
    let (h_out, w_out) = conv2d_out_hw(h, w, k, stride, pad);
    let hw_out = h_out * w_out;
    for ci in 0..c_in {
        let xmap = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let crow =
                    &mut col[(ci * k * k + ky * k + kx) * hw_out..(ci * k * k + ky * k + kx + 1) * hw_out];
                for oy in 0..h_out {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    let dest = &mut crow[oy * w_out..(oy + 1) * w_out];
                    if sy < 0 || sy as usize >= h {
                        dest.iter_mut().for_each(|v| *v = E::zero());
                        continue;
                    }
                    let srow = &xmap[sy as usize * w..(sy as usize + 1) * w];
                    if stride == 1 {
                        let off = kx as isize - pad as isize;
                        let t0 = ((-off).max(0) as usize).min(w_out);
                        let t1 = ((w as isize - off).max(0) as usize).min(w_out);
                        dest[..t0].iter_mut().for_each(|v| *v = E::zero());
                        dest[t1..].iter_mut().for_each(|v| *v = E::zero());
                        if t1 > t0 {
                            let s0 = (t0 as isize + off) as usize;
                            dest[t0..t1].copy_from_slice(&srow[s0..s0 + (t1 - t0)]);
                        }
                    } else {
                        for (ox, d) in dest.iter_mut().enumerate() {
                            let sx = (ox * stride + kx) as isize - pad as isize;
                            *d = if sx >= 0 && (sx as usize) < w {
                                srow[sx as usize]
                            } else {
                                E::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im_2d<E: Element>(
    col: &[E],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [E],
) {
    let (h_out, w_out) = conv2d_out_hw(h, w, k, stride, pad);
    let hw_out = h_out * w_out;
    for ci in 0..c_in {
        let xmap = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let crow =
                    &col[(ci * k * k + ky * k + kx) * hw_out..(ci * k * k + ky * k + kx + 1) * hw_out];
                for oy in 0..h_out {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy as usize >= h {
                        continue;
                    }
                    let srow = &mut xmap[sy as usize * w..(sy as usize + 1) * w];
                    for (ox, &c) in crow[oy * w_out..(oy + 1) * w_out].iter().enumerate() {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx >= 0 && (sx as usize) < w {
                            srow[sx as usize] = srow[sx as usize] + c;
                        }
                    }
                }
            }
        }
    }
}

/// x: [N, C_in, H, W], w: [C_out, C_in, k, k], b: [C_out] -> [N, C_out, H', W']
pub fn conv2d_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let (h_out, w_out) = conv2d_out_hw(h, wd, k, stride, pad);
    let hw_out = h_out * w_out;
    let ckk = c_in * k * k;
    let mut y = Tensor::zeros(&[n, c_out, h_out, w_out]);
    let mut col = vec![E::zero(); ckk * hw_out];
    for ni in 0..n {
        im2col_2d(
            &x.data()[ni * c_in * h * wd..(ni + 1) * c_in * h * wd],
            c_in,
            h,
            wd,
            k,
            stride,
            pad,
            &mut col,
        );
        let yn = &mut y.data_mut()[ni * c_out * hw_out..(ni + 1) * c_out * hw_out];
        E::gemm(
            c_out,
            ckk,
            hw_out,
            E::one(),
            w.data(),
            ckk as isize,
            1,
            &col,
            hw_out as isize,
            1,
            E::zero(),
            yn,
            hw_out as isize,
            1,
        );
        for co in 0..c_out {
            let bias = b.data()[co];
            for v in &mut yn[co * hw_out..(co + 1) * hw_out] {
                *v = *v + bias;
            }
        }
    }
    y
}

pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    g: &Tensor<E>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor<E>>, Tensor<E>, Tensor<E>) {
    let (n, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let (h_out, w_out) = conv2d_out_hw(h, wd, k, stride, pad);
    let hw_out = h_out * w_out;
    let ckk = c_in * k * k;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[c_out]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = vec![E::zero(); ckk * hw_out];
    let mut dcol = vec![E::zero(); ckk * hw_out];
    for ni in 0..n {
        let gn = &g.data()[ni * c_out * hw_out..(ni + 1) * c_out * hw_out];
        for co in 0..c_out {
            let s: E = gn[co * hw_out..(co + 1) * hw_out].iter().copied().sum();
            db.data_mut()[co] = db.data_mut()[co] + s;
        }
        im2col_2d(
            &x.data()[ni * c_in * h * wd..(ni + 1) * c_in * h * wd],
            c_in,
            h,
            wd,
            k,
            stride,
            pad,
            &mut col,
        );
        E::gemm(
            c_out,
            hw_out,
            ckk,
            E::one(),
            gn,
            hw_out as isize,
            1,
            &col,
            1,
            hw_out as isize,
            E::one(),
            dw.data_mut(),
            ckk as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            E::gemm(
                ckk,
                c_out,
                hw_out,
                E::one(),
                w.data(),
                1,
                ckk as isize,
                gn,
                hw_out as isize,
                1,
                E::zero(),
                &mut dcol,
                hw_out as isize,
                1,
            );
            col2im_2d(
                &dcol,
                c_in,
                h,
                wd,
                k,
                stride,
                pad,
                &mut dx.data_mut()[ni * c_in * h * wd..(ni + 1) * c_in * h * wd],
            );
        }
    }
    (dx, dw, db)
}

/// Max-pool k x k, stride k. Returns (y, argmax) with argmax holding the
/// linear index into x of each window's first maximal element.
pub fn maxpool2d_forward<E: Element>(x: &Tensor<E>, k: usize) -> (Tensor<E>, Vec<u32>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (h_out, w_out) = (h / k, w / k);
    let mut y = Tensor::zeros(&[n, c, h_out, w_out]);
    let mut argmax = vec![0u32; n * c * h_out * w_out];
    let xd = x.data();
    let yd = y.data_mut();
    for nc in 0..n * c {
        let base = nc * h * w;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best = xd[base + oy * k * w + ox * k];
                let mut best_idx = base + oy * k * w + ox * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * k + ky) * w + ox * k + kx;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = nc * h_out * w_out + oy * w_out + ox;
                yd[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
    (y, argmax)
}

/// Per-channel batch mean and biased variance of an [N,C,H*W] buffer,
/// accumulated in f64 regardless of element type.
pub fn bn_batch_stats<E: Element>(xd: &[E], n: usize, c: usize, hw: usize) -> (Vec<E>, Vec<E>) {
    let m = (n * hw) as f64;
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for ci in 0..c {
        let mut acc = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for &v in &xd[base..base + hw] {
                acc += v.to_real();
            }
        }
        let mu = acc / m;
        let mut vacc = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for &v in &xd[base..base + hw] {
                let d = v.to_real() - mu;
                vacc += d * d;
            }
        }
        mean[ci] = E::from_real(mu);
        var[ci] = E::from_real(vacc / m);
    }
    (mean, var)
}

/// Normalize with the given per-channel moments, apply ReLU, then max-pool
/// k x k (stride k) in a single sweep, never materializing the intermediate
/// maps. Returns (pooled, argmax) with argmax holding the linear index into x
/// of each window's first maximal post-activation element — identical values
/// and tie-breaking to running the three steps separately.
pub fn bn_relu_pool_apply<E: Element>(
    x: &Tensor<E>,
    gamma: &[E],
    beta: &[E],
    mean: &[E],
    invstd: &[E],
    k: usize,
) -> (Tensor<E>, Vec<u32>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (h_out, w_out) = (h / k, w / k);
    let mut y = Tensor::zeros(&[n, c, h_out, w_out]);
    let mut argmax = vec![0u32; n * c * h_out * w_out];
    let xd = x.data();
    let yd = y.data_mut();
    for nc in 0..n * c {
        let ci = nc % c;
        let (g, b, mu, is) = (gamma[ci], beta[ci], mean[ci], invstd[ci]);
        let act = |i: usize| {
            let v = g * (xd[i] - mu) * is + b;
            if v > E::zero() {
                v
            } else {
                E::zero()
            }
        };
        let base = nc * h * w;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best = act(base + oy * k * w + ox * k);
                let mut best_idx = base + oy * k * w + ox * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * k + ky) * w + ox * k + kx;
                        let v = act(idx);
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = nc * h_out * w_out + oy * w_out + ox;
                yd[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
    (y, argmax)
}

/// Channel sums of the pool-scattered, ReLU-gated upstream gradient:
/// (sum g, sum g*xhat, per-cell gate bytes). Shared by the train- and
/// eval-mode backward passes of the fused normalize/activate/pool op.
#[allow(clippy::too_many_arguments)]
pub fn bn_relu_pool_sums<E: Element>(
    xd: &[E],
    gp: &[E],
    argmax: &[u32],
    gamma: &[E],
    beta: &[E],
    mean: &[E],
    invstd: &[E],
    c: usize,
    hw_out: usize,
) -> (Vec<E>, Vec<E>, Vec<u8>) {
    let mut sum_g = vec![E::zero(); c];
    let mut sum_gx = vec![E::zero(); c];
    let mut gate = vec![0u8; gp.len()];
    for nc in 0..gp.len() / hw_out {
        let ci = nc % c;
        let (g, b, mu, is) = (gamma[ci], beta[ci], mean[ci], invstd[ci]);
        for o in nc * hw_out..(nc + 1) * hw_out {
            let xhat = (xd[argmax[o] as usize] - mu) * is;
            if g * xhat + b > E::zero() {
                gate[o] = 1;
                sum_g[ci] = sum_g[ci] + gp[o];
                sum_gx[ci] = sum_gx[ci] + gp[o] * xhat;
            }
        }
    }
    (sum_g, sum_gx, gate)
}

/// Train-mode dx of the fused normalize/activate/pool op, accumulated into
/// gx: the dense batch-statistics coupling term over every position plus the
/// sparse gated pool-scatter term.
#[allow(clippy::too_many_arguments)]
pub fn bn_relu_pool_dx_train<E: Element>(
    xd: &[E],
    gp: &[E],
    argmax: &[u32],
    gate: &[u8],
    gamma: &[E],
    mean: &[E],
    invstd: &[E],
    n: usize,
    c: usize,
    hw: usize,
    hw_out: usize,
    sum_g: &[E],
    sum_gx: &[E],
    gx: &mut [E],
) {
    let m = E::from_real((n * hw) as f64);
    for nc in 0..n * c {
        let ci = nc % c;
        let (mu, is) = (mean[ci], invstd[ci]);
        let coeff = gamma[ci] * is / m;
        let (sg, sgx) = (sum_g[ci], sum_gx[ci]);
        let base = nc * hw;
        for i in base..base + hw {
            let xhat = (xd[i] - mu) * is;
            gx[i] = gx[i] - coeff * (sg + xhat * sgx);
        }
        for o in nc * hw_out..(nc + 1) * hw_out {
            if gate[o] == 1 {
                let a = argmax[o] as usize;
                gx[a] = gx[a] + coeff * m * gp[o];
            }
        }
    }
}

/// Row-wise softmax over the last axis, in place. `row` is the axis length.
pub fn softmax_rows<E: Element>(data: &mut [E], row: usize) {
    for r in data.chunks_exact_mut(row) {
        let mut mx = r[0];
        for &v in r.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = E::zero();
        for v in r.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in r.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Row-wise log-softmax over the last axis, in place.
pub fn log_softmax_rows<E: Element>(data: &mut [E], row: usize) {
    for r in data.chunks_exact_mut(row) {
        let mut mx = r[0];
        for &v in r.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = E::zero();
        for v in r.iter() {
            sum = sum + (*v - mx).exp();
        }
        let lse = mx + sum.ln();
        for v in r.iter_mut() {
            *v = *v - lse;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<E: Element>(shape: &[usize], v: Vec<f64>) -> Tensor<E> {
        Tensor::new(shape, v.into_iter().map(E::from_real).collect()).unwrap()
    }

    #[test]
    fn conv1d_direct_summation() {
        // x=[1,2,3,4], w=[1,0,-1] -> [1-3, 2-4] = [-2,-2]
        let x = t::<f64>(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let w = t::<f64>(&[1, 1, 3], vec![1.0, 0.0, -1.0]);
        let b = Tensor::zeros(&[1]);
        let y = conv1d_forward(&x, &w, &b, 1, 0);
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.data(), &[-2.0, -2.0]);
    }

    #[test]
    fn conv1d_delta_kernel_is_identity() {
        let x = t::<f64>(&[1, 1, 5], vec![0.5, -1.0, 2.0, 3.5, -0.25]);
        let w = t::<f64>(&[1, 1, 3], vec![0.0, 1.0, 0.0]);
        let b = Tensor::zeros(&[1]);
        let y = conv1d_forward(&x, &w, &b, 1, 1);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_trivial_kernels() {
        // 1x1 kernel of value 2 doubles everything.
        let x = t::<f64>(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let w = t::<f64>(&[1, 1, 1, 1], vec![2.0]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 1, 0);
        for (yi, xi) in y.data().iter().zip(x.data()) {
            assert_eq!(*yi, xi * 2.0);
        }
        // all-ones 3x3 input, all-ones 2x2 kernel -> 2x2 of 4s
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d_forward(&x, &w, &b, 1, 0);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_backward_matches_direct_summation_on_small_case() {
        // Verify dw by brute force: dL/dw[kk] = sum_t x[t*stride+kk-p]*g[t].
        let x = t::<f64>(&[1, 1, 5], vec![0.3, -0.7, 1.1, 0.9, -0.2]);
        let w = t::<f64>(&[1, 1, 3], vec![0.5, -0.25, 0.75]);
        let g = t::<f64>(&[1, 1, 3], vec![1.0, -2.0, 0.5]);
        let (dx, dw, db) = conv1d_backward(&x, &w, &g, 1, 0, true);
        // dw[kk] = sum_t g[t] * x[t+kk]
        for kk in 0..3 {
            let want: f64 = (0..3).map(|t| g.data()[t] * x.data()[t + kk]).sum();
            assert!((dw.data()[kk] - want).abs() < 1e-12);
        }
        assert!((db.data()[0] - (-0.5)).abs() < 1e-12);
        // dx[i] = sum_{t,kk: t+kk=i} g[t]*w[kk]
        let dx = dx.unwrap();
        for i in 0..5 {
            let mut want = 0.0;
            for tt in 0..3 {
                for kk in 0..3 {
                    if tt + kk == i {
                        want += g.data()[tt] * w.data()[kk];
                    }
                }
            }
            assert!((dx.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_single_window() {
        let x = t::<f64>(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2d_forward(&x, 2);
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn maxpool_tie_takes_first_in_scan_order() {
        let x = t::<f64>(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]);
        let (_, arg) = maxpool2d_forward(&x, 2);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn softmax_rows_basics() {
        let mut d = vec![0.0f64, 0.0, 0.0];
        softmax_rows(&mut d, 3);
        for v in &d {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let mut d = vec![1000.0f64, 1000.0];
        softmax_rows(&mut d, 2);
        assert!((d[0] - 0.5).abs() < 1e-12 && d[0].is_finite());
        let mut d = vec![1.0f64, 2.0, 3.0];
        softmax_rows(&mut d, 3);
        let want = [0.09003057, 0.24472847, 0.66524096];
        for (a, b) in d.iter().zip(want) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
