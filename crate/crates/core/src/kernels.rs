//! Raw numeric kernels behind the tape primitives.
//!
//! Convolutions use circular (wrap-around) padding so that every forward
//! kernel has an exact adjoint; this is what makes the frame analysis /
//! synthesis pair and all spectral-norm arguments hold to float precision.
//! Every kernel sums each output element in a fixed order, so results are
//! identical at any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Work threshold below which the channel-parallel loops stay sequential.
const PAR_THRESHOLD: usize = 1 << 20;

fn conv_dims(x: &Tensor, k: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize, usize)> {
    let (xd, kd) = (x.dims(), k.dims());
    if xd.len() != 3 || kd.len() != 4 {
        return Err(Error::shape(op, format!("input {xd:?}, kernels {kd:?}")));
    }
    let (c_in, h, w) = (xd[0], xd[1], xd[2]);
    let (c_out, kc, kh, kw) = (kd[0], kd[1], kd[2], kd[3]);
    if kc != c_in {
        return Err(Error::shape(
            op,
            format!("kernel expects {kc} input channels, input has {c_in}"),
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(op, format!("kernel must be odd square, got {kh}x{kw}")));
    }
    Ok((c_in, h, w, c_out, kh))
}

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Accumulate `out[j] += kv * xrow[(j + off) mod w]` over the full row.
#[inline]
fn add_shifted_row(out: &mut [f64], xrow: &[f64], off: usize, kv: f64) {
    let w = out.len();
    let split = w - off;
    for j in 0..split {
        out[j] += kv * xrow[j + off];
    }
    for j in split..w {
        out[j] += kv * xrow[j + off - w];
    }
}

/// `sum_j grow[j] * xrow[(j + off) mod w]`.
#[inline]
fn dot_shifted_row(grow: &[f64], xrow: &[f64], off: usize) -> f64 {
    let w = grow.len();
    let split = w - off;
    let mut acc = 0.0;
    for j in 0..split {
        acc += grow[j] * xrow[j + off];
    }
    for j in split..w {
        acc += grow[j] * xrow[j + off - w];
    }
    acc
}

/// Circular 2D convolution:
/// `out[o,i,j] = sum_{c,a,b} k[o,c,a,b] * x[c, (i+a-r) mod H, (j+b-r) mod W]`.
pub fn conv2d(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (c_in, h, w, c_out, ks) = conv_dims(x, k, "conv2d")?;
    let r = ks / 2;
    let plane = h * w;
    let xd = x.data();
    let kd = k.data();
    let work = c_out * c_in * ks * ks * plane;

    let compute_channel = |o: usize| -> Vec<f64> {
        let mut out = vec![0.0; plane];
        for c in 0..c_in {
            let xc = &xd[c * plane..(c + 1) * plane];
            for a in 0..ks {
                for b in 0..ks {
                    let kv = kd[((o * c_in + c) * ks + a) * ks + b];
                    let off = wrap(b as isize - r as isize, w);
                    for i in 0..h {
                        let ii = wrap(i as isize + a as isize - r as isize, h);
                        add_shifted_row(
                            &mut out[i * w..(i + 1) * w],
                            &xc[ii * w..(ii + 1) * w],
                            off,
                            kv,
                        );
                    }
                }
            }
        }
        out
    };

    let planes: Vec<Vec<f64>> = if work >= PAR_THRESHOLD {
        (0..c_out).into_par_iter().map(compute_channel).collect()
    } else {
        (0..c_out).map(compute_channel).collect()
    };
    Tensor::new(vec![c_out, h, w], planes.concat())
}

/// Exact adjoint of [`conv2d`] with the same kernel bank:
/// `out[c,i,j] = sum_{o,a,b} k[o,c,a,b] * y[o, (i-a+r) mod H, (j-b+r) mod W]`.
pub fn conv2d_adjoint(y: &Tensor, k: &Tensor) -> Result<Tensor> {
    let kd_dims = k.dims();
    if kd_dims.len() != 4 {
        return Err(Error::shape("conv2d_adjoint", format!("kernels {kd_dims:?}")));
    }
    let (c_out, c_in, ks) = (kd_dims[0], kd_dims[1], kd_dims[2]);
    let yd_dims = y.dims();
    if yd_dims.len() != 3 || yd_dims[0] != c_out {
        return Err(Error::shape(
            "conv2d_adjoint",
            format!("grad {yd_dims:?} does not match {c_out} kernel outputs"),
        ));
    }
    if ks != kd_dims[3] || ks % 2 == 0 {
        return Err(Error::shape("conv2d_adjoint", "kernel must be odd square"));
    }
    let (h, w) = (yd_dims[1], yd_dims[2]);
    let r = ks / 2;
    let plane = h * w;
    let yd = y.data();
    let kd = k.data();
    let work = c_out * c_in * ks * ks * plane;

    let compute_channel = |c: usize| -> Vec<f64> {
        let mut out = vec![0.0; plane];
        for o in 0..c_out {
            let yo = &yd[o * plane..(o + 1) * plane];
            for a in 0..ks {
                for b in 0..ks {
                    let kv = kd[((o * c_in + c) * ks + a) * ks + b];
                    let off = wrap(r as isize - b as isize, w);
                    for i in 0..h {
                        let ii = wrap(i as isize - a as isize + r as isize, h);
                        add_shifted_row(
                            &mut out[i * w..(i + 1) * w],
                            &yo[ii * w..(ii + 1) * w],
                            off,
                            kv,
                        );
                    }
                }
            }
        }
        out
    };

    let planes: Vec<Vec<f64>> = if work >= PAR_THRESHOLD {
        (0..c_in).into_par_iter().map(compute_channel).collect()
    } else {
        (0..c_in).map(compute_channel).collect()
    };
    Tensor::new(vec![c_in, h, w], planes.concat())
}

/// Kernel gradient of [`conv2d`]:
/// `dk[o,c,a,b] = sum_{i,j} g[o,i,j] * x[c, (i+a-r) mod H, (j+b-r) mod W]`.
pub fn conv2d_grad_kernels(x: &Tensor, g: &Tensor, ks: usize) -> Result<Tensor> {
    let (xd_dims, gd_dims) = (x.dims(), g.dims());
    if xd_dims.len() != 3 || gd_dims.len() != 3 || xd_dims[1..] != gd_dims[1..] {
        return Err(Error::shape(
            "conv2d_grad_kernels",
            format!("input {xd_dims:?}, grad {gd_dims:?}"),
        ));
    }
    let (c_in, h, w) = (xd_dims[0], xd_dims[1], xd_dims[2]);
    let c_out = gd_dims[0];
    let r = ks / 2;
    let plane = h * w;
    let xd = x.data();
    let gd = g.data();
    let work = c_out * c_in * ks * ks * plane;

    let compute_out = |o: usize| -> Vec<f64> {
        let go = &gd[o * plane..(o + 1) * plane];
        let mut dk = vec![0.0; c_in * ks * ks];
        for c in 0..c_in {
            let xc = &xd[c * plane..(c + 1) * plane];
            for a in 0..ks {
                for b in 0..ks {
                    let off = wrap(b as isize - r as isize, w);
                    let mut acc = 0.0;
                    for i in 0..h {
                        let ii = wrap(i as isize + a as isize - r as isize, h);
                        acc += dot_shifted_row(
                            &go[i * w..(i + 1) * w],
                            &xc[ii * w..(ii + 1) * w],
                            off,
                        );
                    }
                    dk[(c * ks + a) * ks + b] = acc;
                }
            }
        }
        dk
    };

    let chunks: Vec<Vec<f64>> = if work >= PAR_THRESHOLD {
        (0..c_out).into_par_iter().map(compute_out).collect()
    } else {
        (0..c_out).map(compute_out).collect()
    };
    Tensor::new(vec![c_out, c_in, ks, ks], chunks.concat())
}

/// Circular stride-2 convolution used by the prompt encoder. Output dims are
/// `ceil(H/2) x ceil(W/2)`.
pub fn conv2d_stride2(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (c_in, h, w, c_out, ks) = conv_dims(x, k, "conv2d_stride2")?;
    let r = ks / 2;
    let (ho, wo) = ((h + 1) / 2, (w + 1) / 2);
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        for c in 0..c_in {
            let xc = &xd[c * h * w..(c + 1) * h * w];
            for a in 0..ks {
                for b in 0..ks {
                    let kv = kd[((o * c_in + c) * ks + a) * ks + b];
                    for io in 0..ho {
                        let ii = wrap((2 * io + a) as isize - r as isize, h);
                        let orow = &mut out[(o * ho + io) * wo..(o * ho + io + 1) * wo];
                        let xrow = &xc[ii * w..(ii + 1) * w];
                        for (jo, ov) in orow.iter_mut().enumerate() {
                            let jj = wrap((2 * jo + b) as isize - r as isize, w);
                            *ov += kv * xrow[jj];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, ho, wo], out)
}

/// Input gradient of [`conv2d_stride2`].
pub fn conv2d_stride2_grad_input(g: &Tensor, k: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let kd_dims = k.dims();
    let (c_out, c_in, ks) = (kd_dims[0], kd_dims[1], kd_dims[2]);
    let r = ks / 2;
    let (ho, wo) = ((h + 1) / 2, (w + 1) / 2);
    if g.dims() != [c_out, ho, wo] {
        return Err(Error::shape(
            "conv2d_stride2_grad_input",
            format!("grad {:?} vs expected [{c_out}, {ho}, {wo}]", g.dims()),
        ));
    }
    let gd = g.data();
    let kd = k.data();
    let mut out = vec![0.0; c_in * h * w];
    for c in 0..c_in {
        let oc = &mut out[c * h * w..(c + 1) * h * w];
        for o in 0..c_out {
            let go = &gd[o * ho * wo..(o + 1) * ho * wo];
            for a in 0..ks {
                for b in 0..ks {
                    let kv = kd[((o * c_in + c) * ks + a) * ks + b];
                    for io in 0..ho {
                        let ii = wrap((2 * io + a) as isize - r as isize, h);
                        for jo in 0..wo {
                            let jj = wrap((2 * jo + b) as isize - r as isize, w);
                            oc[ii * w + jj] += kv * go[io * wo + jo];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_in, h, w], out)
}

/// Kernel gradient of [`conv2d_stride2`].
pub fn conv2d_stride2_grad_kernels(x: &Tensor, g: &Tensor, ks: usize) -> Result<Tensor> {
    let (c_in, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (c_out, ho, wo) = (g.dims()[0], g.dims()[1], g.dims()[2]);
    if (ho, wo) != ((h + 1) / 2, (w + 1) / 2) {
        return Err(Error::shape(
            "conv2d_stride2_grad_kernels",
            format!("grad {:?} inconsistent with input {:?}", g.dims(), x.dims()),
        ));
    }
    let r = ks / 2;
    let xd = x.data();
    let gd = g.data();
    let mut dk = vec![0.0; c_out * c_in * ks * ks];
    for o in 0..c_out {
        let go = &gd[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..c_in {
            let xc = &xd[c * h * w..(c + 1) * h * w];
            for a in 0..ks {
                for b in 0..ks {
                    let mut acc = 0.0;
                    for io in 0..ho {
                        let ii = wrap((2 * io + a) as isize - r as isize, h);
                        for jo in 0..wo {
                            let jj = wrap((2 * jo + b) as isize - r as isize, w);
                            acc += go[io * wo + jo] * xc[ii * w + jj];
                        }
                    }
                    dk[((o * c_in + c) * ks + a) * ks + b] = acc;
                }
            }
        }
    }
    Tensor::new(vec![c_out, c_in, ks, ks], dk)
}

/// `sign(u) * max(|u| - e, 0)` elementwise; `e` must be nonnegative.
pub fn soft_threshold(u: &Tensor, e: &Tensor) -> Result<Tensor> {
    if !u.same_dims(e) {
        return Err(Error::shape(
            "soft_threshold",
            format!("u {:?} vs e {:?}", u.dims(), e.dims()),
        ));
    }
    if e.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Argument("soft_threshold: negative threshold".into()));
    }
    let data = u
        .data()
        .iter()
        .zip(e.data())
        .map(|(&uv, &ev)| uv.signum() * (uv.abs() - ev).max(0.0))
        .collect();
    Tensor::new(u.dims().to_vec(), data)
}

/// Unnormalized 2D DFT of a real `C x H x W` tensor, packed as `2C x H x W`
/// with the C real planes first, then the C imaginary planes. Satisfies
/// Parseval: `||x||^2 == ||dft2(x)||^2 / (H*W)`.
pub fn dft2(x: &Tensor) -> Result<Tensor> {
    let d = x.dims();
    if d.len() != 3 {
        return Err(Error::shape("dft2", format!("{d:?}")));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let plane = h * w;
    let (tw_h, tw_w) = (twiddles(h), twiddles(w));
    let mut out = vec![0.0; 2 * c * plane];
    for ch in 0..c {
        let xc = &x.data()[ch * plane..(ch + 1) * plane];
        let (re, im) = dft2_plane(xc, h, w, &tw_h, &tw_w);
        out[ch * plane..(ch + 1) * plane].copy_from_slice(&re);
        out[(c + ch) * plane..(c + ch + 1) * plane].copy_from_slice(&im);
    }
    Tensor::new(vec![2 * c, h, w], out)
}

/// Real part of the normalized inverse 2D DFT of a packed `2C x H x W`
/// spectrum; inverts [`dft2`] exactly on real inputs.
pub fn idft2(x: &Tensor) -> Result<Tensor> {
    let d = x.dims();
    if d.len() != 3 || d[0] % 2 != 0 {
        return Err(Error::shape("idft2", format!("{d:?}")));
    }
    let (c2, h, w) = (d[0], d[1], d[2]);
    let c = c2 / 2;
    let plane = h * w;
    let (tw_h, tw_w) = (twiddles(h), twiddles(w));
    let mut out = vec![0.0; c * plane];
    for ch in 0..c {
        let re = &x.data()[ch * plane..(ch + 1) * plane];
        let im = &x.data()[(c + ch) * plane..(c + ch + 1) * plane];
        let res = idft2_plane(re, im, h, w, &tw_h, &tw_w);
        out[ch * plane..(ch + 1) * plane].copy_from_slice(&res);
    }
    Tensor::new(vec![c, h, w], out)
}

fn twiddles(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut cos = Vec::with_capacity(n * n);
    let mut sin = Vec::with_capacity(n * n);
    for k in 0..n {
        for j in 0..n {
            let ang = -2.0 * std::f64::consts::PI * ((k * j) % n) as f64 / n as f64;
            cos.push(ang.cos());
            sin.push(ang.sin());
        }
    }
    (cos, sin)
}

fn dft2_plane(
    x: &[f64],
    h: usize,
    w: usize,
    tw_h: &(Vec<f64>, Vec<f64>),
    tw_w: &(Vec<f64>, Vec<f64>),
) -> (Vec<f64>, Vec<f64>) {
    // Rows first (real input), then columns (complex).
    let mut re1 = vec![0.0; h * w];
    let mut im1 = vec![0.0; h * w];
    for i in 0..h {
        let row = &x[i * w..(i + 1) * w];
        for kw in 0..w {
            let (cs, sn) = (&tw_w.0[kw * w..], &tw_w.1[kw * w..]);
            let mut ar = 0.0;
            let mut ai = 0.0;
            for j in 0..w {
                ar += row[j] * cs[j];
                ai += row[j] * sn[j];
            }
            re1[i * w + kw] = ar;
            im1[i * w + kw] = ai;
        }
    }
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for kh in 0..h {
        let (cs, sn) = (&tw_h.0[kh * h..], &tw_h.1[kh * h..]);
        for kw in 0..w {
            let mut ar = 0.0;
            let mut ai = 0.0;
            for i in 0..h {
                let (xr, xi) = (re1[i * w + kw], im1[i * w + kw]);
                ar += xr * cs[i] - xi * sn[i];
                ai += xr * sn[i] + xi * cs[i];
            }
            re[kh * w + kw] = ar;
            im[kh * w + kw] = ai;
        }
    }
    (re, im)
}

fn idft2_plane(
    re: &[f64],
    im: &[f64],
    h: usize,
    w: usize,
    tw_h: &(Vec<f64>, Vec<f64>),
    tw_w: &(Vec<f64>, Vec<f64>),
) -> Vec<f64> {
    // Conjugate twiddles give the +i kernel; normalize by H*W at the end.
    let mut re1 = vec![0.0; h * w];
    let mut im1 = vec![0.0; h * w];
    for n in 0..h {
        let (cs, sn) = (&tw_h.0[n * h..], &tw_h.1[n * h..]);
        for kw in 0..w {
            let mut ar = 0.0;
            let mut ai = 0.0;
            for kh in 0..h {
                let (xr, xi) = (re[kh * w + kw], im[kh * w + kw]);
                ar += xr * cs[kh] + xi * sn[kh];
                ai += -xr * sn[kh] + xi * cs[kh];
            }
            re1[n * w + kw] = ar;
            im1[n * w + kw] = ai;
        }
    }
    let scale = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; h * w];
    for n in 0..h {
        for m in 0..w {
            let (cs, sn) = (&tw_w.0[m * w..], &tw_w.1[m * w..]);
            let mut ar = 0.0;
            for kw in 0..w {
                ar += re1[n * w + kw] * cs[kw] + im1[n * w + kw] * sn[kw];
            }
            out[n * w + m] = ar * scale;
        }
    }
    out
}

/// Plain matrix product `a (m x k) * b (k x n)` into `(m x n)`.
pub fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `a^T (k x m, stored m x k) * b (m x n)` into `(k x n)`.
pub fn mat_tmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `a (m x k) * b^T (n x k)` into `(m x n)`.
pub fn mat_mul_tb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}
