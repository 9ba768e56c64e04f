//! Raw numeric kernels behind the tape ops.
//!
//! Everything here is a pure function of its inputs with a fixed
//! accumulation order, so gradients and training runs are bit-reproducible.
//! Convolutions go through per-image im2col + matmul; the matmul is a plain
//! ikj loop that the compiler vectorizes well enough for desk scale.

use alloc::vec;
use alloc::vec::Vec;

/// out[m,n] = a[m,k] @ b[k,n]
pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[n,m] = a[m,n]^T
pub fn transpose(a: &[f64], m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

pub fn relu(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

/// 1.0 where x > 0 else 0.0 (a.e. derivative of relu).
pub fn relu_mask(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > 0.0 { 1.0 } else { 0.0 };
    }
}

/// Row-stable softmax: out_row = exp(x - max(x)) / Σ.
/// Handles logits up to |x| ~ 700 without overflow.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = libm::exp(v - m);
            *o = e;
            z += e;
        }
        let inv = 1.0 / z;
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
}

/// Row-stable log-softmax: out_row = x - (max + ln Σ exp(x - max)).
pub fn log_softmax_rows(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in xr {
            z += libm::exp(v - m);
        }
        let lse = m + libm::log(z);
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

pub fn col_sum(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    out.fill(0.0);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        for (o, &v) in out.iter_mut().zip(xr) {
            *o += v;
        }
    }
}

pub fn row_sum(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        out[r] = x[r * cols..(r + 1) * cols].iter().sum();
    }
}

/// out[r, c] = x[r, c] * s[r]
pub fn row_scale(x: &[f64], s: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let f = s[r];
        let xr = &x[r * cols..(r + 1) * cols];
        let or = &mut out[r * cols..(r + 1) * cols];
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v * f;
        }
    }
}

/// Gather rows: out[i, :] = x[idx[i], :]
pub fn gather_rows(x: &[f64], cols: usize, idx: &[usize], out: &mut [f64]) {
    for (i, &r) in idx.iter().enumerate() {
        out[i * cols..(i + 1) * cols].copy_from_slice(&x[r * cols..(r + 1) * cols]);
    }
}

/// Scatter-add rows: out[idx[i], :] += x[i, :]
pub fn scatter_rows_add(x: &[f64], cols: usize, idx: &[usize], out: &mut [f64]) {
    for (i, &r) in idx.iter().enumerate() {
        let src = &x[i * cols..(i + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

/// Argmax with ties broken by the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    let mut bv = xs[0];
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > bv {
            bv = v;
            best = i;
        }
    }
    best
}

// ── Convolution (stride 1, square kernel, zero padding) ──────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad - self.k + 1
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad - self.k + 1
    }
    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// cols[p, c*k*k] for one image x[c_in, h, w]; p = oh * out_w + ow.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow, kk) = (g.out_h(), g.out_w(), g.k);
    let patch = g.patch();
    cols.fill(0.0);
    for p_oh in 0..oh {
        for p_ow in 0..ow {
            let p = p_oh * ow + p_ow;
            let dst = &mut cols[p * patch..(p + 1) * patch];
            let mut q = 0;
            for c in 0..g.c_in {
                let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
                for ky in 0..kk {
                    let iy = (p_oh + ky) as isize - g.pad as isize;
                    for kx in 0..kk {
                        let ix = (p_ow + kx) as isize - g.pad as isize;
                        if iy >= 0 && iy < g.h as isize && ix >= 0 && ix < g.w as isize {
                            dst[q] = plane[iy as usize * g.w + ix as usize];
                        }
                        q += 1;
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter cols back into an image, accumulating overlaps.
fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow, kk) = (g.out_h(), g.out_w(), g.k);
    let patch = g.patch();
    x.fill(0.0);
    for p_oh in 0..oh {
        for p_ow in 0..ow {
            let p = p_oh * ow + p_ow;
            let src = &cols[p * patch..(p + 1) * patch];
            let mut q = 0;
            for c in 0..g.c_in {
                let base = c * g.h * g.w;
                for ky in 0..kk {
                    let iy = (p_oh + ky) as isize - g.pad as isize;
                    for kx in 0..kk {
                        let ix = (p_ow + kx) as isize - g.pad as isize;
                        if iy >= 0 && iy < g.h as isize && ix >= 0 && ix < g.w as isize {
                            x[base + iy as usize * g.w + ix as usize] += src[q];
                        }
                        q += 1;
                    }
                }
            }
        }
    }
}

/// Forward conv: x[n, c_in, h, w], weight[c_out, c_in, k, k] -> [n, c_out, oh, ow].
/// Images are processed one at a time to bound scratch memory.
pub fn conv2d(x: &[f64], weight: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (p_cnt, patch) = (oh * ow, g.patch());
    let img = g.c_in * g.h * g.w;
    let oimg = g.c_out * p_cnt;

    // weight transposed to [patch, c_out] so fwd is cols @ wt.
    let mut wt = vec![0.0; patch * g.c_out];
    transpose(weight, g.c_out, patch, &mut wt);

    let mut cols = vec![0.0; p_cnt * patch];
    let mut out_po = vec![0.0; p_cnt * g.c_out];
    for i in 0..g.n {
        im2col(&x[i * img..(i + 1) * img], g, &mut cols);
        matmul(&cols, p_cnt, patch, &wt, g.c_out, &mut out_po);
        // out_po[p, oc] -> out[i, oc, p]
        let o = &mut out[i * oimg..(i + 1) * oimg];
        for p in 0..p_cnt {
            for oc in 0..g.c_out {
                o[oc * p_cnt + p] = out_po[p * g.c_out + oc];
            }
        }
    }
}

/// Gradients of conv2d w.r.t. input and weight given d_out[n, c_out, oh, ow].
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    d_out: &[f64],
    g: &ConvGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (p_cnt, patch) = (oh * ow, g.patch());
    let img = g.c_in * g.h * g.w;
    let oimg = g.c_out * p_cnt;

    let mut dx = dx;
    let mut dw = dw;
    if let Some(d) = dw.as_deref_mut() {
        d.fill(0.0);
    }

    let mut cols = vec![0.0; p_cnt * patch];
    let mut go_po = vec![0.0; p_cnt * g.c_out];
    let mut go_op = vec![0.0; g.c_out * p_cnt];
    let mut dcols = vec![0.0; p_cnt * patch];
    let mut dw_img = vec![0.0; g.c_out * patch];

    for i in 0..g.n {
        let go = &d_out[i * oimg..(i + 1) * oimg];
        // go[oc, p] -> go_po[p, oc]
        for oc in 0..g.c_out {
            for p in 0..p_cnt {
                go_po[p * g.c_out + oc] = go[oc * p_cnt + p];
            }
        }
        if let Some(d) = dx.as_deref_mut() {
            // dcols = go_po @ weight2d   ([p, oc] @ [oc, patch])
            matmul(&go_po, p_cnt, g.c_out, weight, patch, &mut dcols);
            col2im(&dcols, g, &mut d[i * img..(i + 1) * img]);
        }
        if let Some(d) = dw.as_deref_mut() {
            // dw += go^T(as [oc, p]) @ cols ([p, patch])
            im2col(&x[i * img..(i + 1) * img], g, &mut cols);
            go_op.copy_from_slice(go);
            matmul(&go_op, g.c_out, p_cnt, &cols, patch, &mut dw_img);
            for (a, &b) in d.iter_mut().zip(&dw_img) {
                *a += b;
            }
        }
    }
}

/// y[n, c, p] = x[n, c, p] + b[c]
pub fn add_channel_bias(x: &[f64], b: &[f64], n: usize, c: usize, plane: usize, out: &mut [f64]) {
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let bv = b[ch];
            for o in 0..plane {
                out[base + o] = x[base + o] + bv;
            }
        }
    }
}

pub fn channel_bias_grad(d_out: &[f64], n: usize, c: usize, plane: usize, db: &mut [f64]) {
    db.fill(0.0);
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            db[ch] += d_out[base..base + plane].iter().sum::<f64>();
        }
    }
}

// ── Instance normalization (affine, per sample-channel stats) ────────

pub fn instance_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    eps: f64,
    out: &mut [f64],
) {
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let xs = &x[base..base + plane];
            let mean = xs.iter().sum::<f64>() / plane as f64;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            let (gm, bt) = (gamma[ch], beta[ch]);
            let os = &mut out[base..base + plane];
            for (o, &v) in os.iter_mut().zip(xs) {
                *o = gm * (v - mean) * inv + bt;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn instance_norm_backward(
    x: &[f64],
    gamma: &[f64],
    d_out: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    eps: f64,
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    dgamma.fill(0.0);
    dbeta.fill(0.0);
    let m = plane as f64;
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let xs = &x[base..base + plane];
            let gs = &d_out[base..base + plane];
            let mean = xs.iter().sum::<f64>() / m;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let inv = 1.0 / libm::sqrt(var + eps);

            // x̂ statistics needed by the standard norm backward.
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for (&gv, &xv) in gs.iter().zip(xs) {
                let xh = (xv - mean) * inv;
                sum_g += gv;
                sum_gx += gv * xh;
            }
            dbeta[ch] += sum_g;
            dgamma[ch] += sum_gx;

            let gm = gamma[ch];
            let ds = &mut dx[base..base + plane];
            for ((d, &gv), &xv) in ds.iter_mut().zip(gs).zip(xs) {
                let xh = (xv - mean) * inv;
                *d = gm * inv * (gv - sum_g / m - xh * sum_gx / m);
            }
        }
    }
}

// ── 2x2 average pooling, stride 2, floor semantics ───────────────────

pub fn avgpool2(x: &[f64], n: usize, c: usize, h: usize, w: usize, out: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for i in 0..n {
        for ch in 0..c {
            let src = &x[(i * c + ch) * h * w..];
            let dst = &mut out[(i * c + ch) * oh * ow..(i * c + ch) * oh * ow + oh * ow];
            for y in 0..oh {
                for xcol in 0..ow {
                    let s = src[2 * y * w + 2 * xcol]
                        + src[2 * y * w + 2 * xcol + 1]
                        + src[(2 * y + 1) * w + 2 * xcol]
                        + src[(2 * y + 1) * w + 2 * xcol + 1];
                    dst[y * ow + xcol] = 0.25 * s;
                }
            }
        }
    }
}

pub fn avgpool2_backward(d_out: &[f64], n: usize, c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    dx.fill(0.0);
    for i in 0..n {
        for ch in 0..c {
            let src = &d_out[(i * c + ch) * oh * ow..(i * c + ch) * oh * ow + oh * ow];
            let dst = &mut dx[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            for y in 0..oh {
                for xcol in 0..ow {
                    let g = 0.25 * src[y * ow + xcol];
                    dst[2 * y * w + 2 * xcol] += g;
                    dst[2 * y * w + 2 * xcol + 1] += g;
                    dst[(2 * y + 1) * w + 2 * xcol] += g;
                    dst[(2 * y + 1) * w + 2 * xcol + 1] += g;
                }
            }
        }
    }
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        out[i * num_classes + l] = 1.0;
    }
    out
}
