//! Fan-beam geometry: Siddon system matrix, exact adjoint, filtered
//! back-projection, and spectral estimates of `P^T P`.
//!
//! The projector is precomputed as an explicit sparse matrix of ray-pixel
//! intersection lengths (mm). Forward and transpose application share the
//! same stored weights, which keeps <Px, y> == <x, P^T y> at float
//! precision and makes the projector usable as a differentiable primitive.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::LinearMap;
use crate::tensor::Tensor;
use rand::Rng;

/// Fan-beam acquisition description. Distances in mm; equiangular views
/// over [0, 360) degrees; flat detector with equispaced bins.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometrySpec {
    /// Image side in pixels (square image).
    pub n: usize,
    /// Pixel pitch (mm).
    pub pixel_size: f64,
    /// Full view count over the whole turn.
    pub n_views_full: usize,
    /// Detector bin count.
    pub n_bins: usize,
    /// Source to rotation-center distance (mm).
    pub d_so: f64,
    /// Rotation center to detector distance (mm).
    pub d_od: f64,
    /// Detector bin pitch (mm).
    pub bin_size: f64,
}

impl GeometrySpec {
    /// Desk-scale default: 64 px at 1 mm, 360 views, 95 bins. Source and
    /// detector distances follow a real rig; the bin pitch is chosen so the
    /// fan covers the image's inscribed circle.
    pub fn desk_default() -> Self {
        GeometrySpec {
            n: 64,
            pixel_size: 1.0,
            n_views_full: 360,
            n_bins: 95,
            d_so: 220.798,
            d_od: 197.247,
            bin_size: 1.35,
        }
    }

    /// Small geometry for tests: bin pitch derived so the fan covers the
    /// inscribed circle with ~5% margin.
    pub fn small(n: usize, n_views_full: usize, n_bins: usize) -> Self {
        let mut spec = GeometrySpec {
            n,
            pixel_size: 1.0,
            n_views_full,
            n_bins,
            ..GeometrySpec::desk_default()
        };
        let r = 1.05 * spec.inscribed_radius();
        let u = r * (spec.d_so + spec.d_od) / (spec.d_so * spec.d_so - r * r).sqrt();
        spec.bin_size = 2.0 * u / (n_bins.saturating_sub(1).max(1) as f64);
        spec
    }

    pub fn inscribed_radius(&self) -> f64 {
        0.5 * self.n as f64 * self.pixel_size
    }

    /// Radius of the circle covered by the fan (tangent radius of the
    /// outermost ray).
    pub fn tangent_radius(&self) -> f64 {
        let u = 0.5 * (self.n_bins as f64 - 1.0) * self.bin_size;
        let total = self.d_so + self.d_od;
        self.d_so * u / (total * total + u * u).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0
            || self.n_views_full == 0
            || self.n_bins == 0
            || self.pixel_size <= 0.0
            || self.d_so <= 0.0
            || self.d_od <= 0.0
            || self.bin_size <= 0.0
        {
            return Err(Error::Argument("geometry: all sizes must be positive".into()));
        }
        let half_diag = self.inscribed_radius() * std::f64::consts::SQRT_2;
        if self.d_so <= half_diag {
            return Err(Error::Argument(
                "geometry: source must lie outside the image".into(),
            ));
        }
        if self.tangent_radius() + 1e-9 < self.inscribed_radius() {
            return Err(Error::Argument(format!(
                "geometry: fan covers radius {:.3} mm but the inscribed circle has {:.3} mm",
                self.tangent_radius(),
                self.inscribed_radius()
            )));
        }
        Ok(())
    }

    /// View angle of view index `v` (radians).
    pub fn view_angle(&self, v: usize) -> f64 {
        2.0 * PI * v as f64 / self.n_views_full as f64
    }

    /// Source position and detector bin center for (view, bin).
    fn ray_endpoints(&self, view: usize, bin: usize) -> ([f64; 2], [f64; 2]) {
        let theta = self.view_angle(view);
        let (c, s) = (theta.cos(), theta.sin());
        let src = [self.d_so * c, self.d_so * s];
        let u = (bin as f64 - 0.5 * (self.n_bins as f64 - 1.0)) * self.bin_size;
        let det = [-self.d_od * c - u * s, -self.d_od * s + u * c];
        (src, det)
    }
}

/// Uniform stride-subsampled view indices.
pub fn subsample_views(np_full: usize, np_sparse: usize) -> Result<Vec<usize>> {
    if np_sparse == 0 || np_full % np_sparse != 0 {
        return Err(Error::Argument(format!(
            "{np_sparse} views do not evenly divide {np_full}"
        )));
    }
    let stride = np_full / np_sparse;
    Ok((0..np_sparse).map(|i| i * stride).collect())
}

/// Precomputed sparse projector rows of (pixel, intersection length).
pub struct SparseOperator {
    pub spec: GeometrySpec,
    pub views: Vec<usize>,
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<u64>,
    cols: Vec<u32>,
    weights: Vec<f64>,
    // Transpose index over the same weights, for deterministic
    // column-parallel adjoint application.
    t_offsets: Vec<u64>,
    t_rows: Vec<u32>,
    t_weights: Vec<f64>,
}

/// Siddon walk: intersection lengths of one ray with the pixel grid.
fn trace_ray(spec: &GeometrySpec, src: [f64; 2], det: [f64; 2]) -> Vec<(u32, f64)> {
    let n = spec.n;
    let ps = spec.pixel_size;
    let half = 0.5 * n as f64 * ps;
    let dir = [det[0] - src[0], det[1] - src[1]];
    let len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();

    // Slab intersection with the image square.
    let mut tmin: f64 = 0.0;
    let mut tmax: f64 = 1.0;
    for axis in 0..2 {
        if dir[axis].abs() < 1e-12 {
            if src[axis] <= -half || src[axis] >= half {
                return Vec::new();
            }
        } else {
            let t1 = (-half - src[axis]) / dir[axis];
            let t2 = (half - src[axis]) / dir[axis];
            tmin = tmin.max(t1.min(t2));
            tmax = tmax.min(t1.max(t2));
        }
    }
    if tmin >= tmax {
        return Vec::new();
    }

    // Grid-line crossing parameters, then cells from segment midpoints.
    let mut ts = Vec::with_capacity(2 * n + 4);
    ts.push(tmin);
    ts.push(tmax);
    for axis in 0..2 {
        if dir[axis].abs() < 1e-12 {
            continue;
        }
        for k in 0..=n {
            let t = (-half + k as f64 * ps - src[axis]) / dir[axis];
            if t > tmin && t < tmax {
                ts.push(t);
            }
        }
    }
    ts.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());

    let mut out: Vec<(u32, f64)> = Vec::with_capacity(ts.len());
    for pair in ts.windows(2) {
        let dt = pair[1] - pair[0];
        if dt * len <= 1e-12 {
            continue;
        }
        let tm = 0.5 * (pair[0] + pair[1]);
        let x = src[0] + tm * dir[0];
        let y = src[1] + tm * dir[1];
        let j = (((x + half) / ps).floor() as isize).clamp(0, n as isize - 1) as u32;
        let i = (((y + half) / ps).floor() as isize).clamp(0, n as isize - 1) as u32;
        let col = i * n as u32 + j;
        let w = dt * len;
        match out.last_mut() {
            Some((c, acc)) if *c == col => *acc += w,
            _ => out.push((col, w)),
        }
    }
    out
}

/// Build the sparse projector for a view subset.
pub fn build_operator(spec: &GeometrySpec, views: &[usize]) -> Result<SparseOperator> {
    spec.validate()?;
    if views.is_empty() {
        return Err(Error::Argument("build_operator: no views selected".into()));
    }
    if views.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument(
            "build_operator: views must be strictly increasing".into(),
        ));
    }
    if *views.last().unwrap() >= spec.n_views_full {
        return Err(Error::Argument("build_operator: view index out of range".into()));
    }

    let nb = spec.n_bins;
    let rows: Vec<Vec<(u32, f64)>> = views
        .par_iter()
        .flat_map_iter(|&v| {
            (0..nb).map(move |b| (v, b))
        })
        .map(|(v, b)| {
            let (src, det) = spec.ray_endpoints(v, b);
            trace_ray(spec, src, det)
        })
        .collect();

    let n_rows = views.len() * nb;
    let n_cols = spec.n * spec.n;
    let mut row_offsets = Vec::with_capacity(n_rows + 1);
    row_offsets.push(0u64);
    let mut cols = Vec::new();
    let mut weights = Vec::new();
    for row in &rows {
        for &(c, w) in row {
            cols.push(c);
            weights.push(w);
        }
        row_offsets.push(cols.len() as u64);
    }

    let mut op = SparseOperator {
        spec: spec.clone(),
        views: views.to_vec(),
        n_rows,
        n_cols,
        row_offsets,
        cols,
        weights,
        t_offsets: Vec::new(),
        t_rows: Vec::new(),
        t_weights: Vec::new(),
    };
    op.build_transpose_index();
    Ok(op)
}

impl SparseOperator {
    fn build_transpose_index(&mut self) {
        let mut counts = vec![0u64; self.n_cols + 1];
        for &c in &self.cols {
            counts[c as usize + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        self.t_offsets = counts.clone();
        self.t_rows = vec![0; self.cols.len()];
        self.t_weights = vec![0.0; self.cols.len()];
        let mut cursor = counts;
        for row in 0..self.n_rows {
            let (a, b) = (
                self.row_offsets[row] as usize,
                self.row_offsets[row + 1] as usize,
            );
            for idx in a..b {
                let c = self.cols[idx] as usize;
                let at = cursor[c] as usize;
                self.t_rows[at] = row as u32;
                self.t_weights[at] = self.weights[idx];
                cursor[c] += 1;
            }
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    pub fn row(&self, row: usize) -> (&[u32], &[f64]) {
        let (a, b) = (
            self.row_offsets[row] as usize,
            self.row_offsets[row + 1] as usize,
        );
        (&self.cols[a..b], &self.weights[a..b])
    }

    pub fn sino_dims(&self) -> [usize; 2] {
        [self.views.len(), self.spec.n_bins]
    }

    pub fn image_dims(&self) -> [usize; 2] {
        [self.spec.n, self.spec.n]
    }

    fn apply_forward(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols);
        debug_assert_eq!(out.len(), self.n_rows);
        out.par_iter_mut().enumerate().for_each(|(row, o)| {
            let (a, b) = (
                self.row_offsets[row] as usize,
                self.row_offsets[row + 1] as usize,
            );
            let mut acc = 0.0;
            for idx in a..b {
                acc += self.weights[idx] * x[self.cols[idx] as usize];
            }
            *o = acc;
        });
    }

    fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.n_rows);
        debug_assert_eq!(out.len(), self.n_cols);
        out.par_iter_mut().enumerate().for_each(|(col, o)| {
            let (a, b) = (
                self.t_offsets[col] as usize,
                self.t_offsets[col + 1] as usize,
            );
            let mut acc = 0.0;
            for idx in a..b {
                acc += self.t_weights[idx] * y[self.t_rows[idx] as usize];
            }
            *o = acc;
        });
    }
}

impl LinearMap for SparseOperator {
    fn in_len(&self) -> usize {
        self.n_cols
    }

    fn out_len(&self) -> usize {
        self.n_rows
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.apply_forward(x, out);
    }

    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        self.apply_transpose(y, out);
    }
}

/// `y = P x`.
pub fn project(op: &SparseOperator, x: &Tensor) -> Result<Tensor> {
    if x.dims() != op.image_dims() {
        return Err(Error::shape(
            "project",
            format!("image {:?} vs {:?}", x.dims(), op.image_dims()),
        ));
    }
    let mut out = vec![0.0; op.n_rows];
    op.apply_forward(x.data(), &mut out);
    Tensor::new(op.sino_dims().to_vec(), out)
}

/// `x = P^T y` over the same stored weights.
pub fn backproject(op: &SparseOperator, y: &Tensor) -> Result<Tensor> {
    if y.dims() != op.sino_dims() {
        return Err(Error::shape(
            "backproject",
            format!("sinogram {:?} vs {:?}", y.dims(), op.sino_dims()),
        ));
    }
    let mut out = vec![0.0; op.n_cols];
    op.apply_transpose(y.data(), &mut out);
    Tensor::new(op.image_dims().to_vec(), out)
}

// ---------------------------------------------------------------------------
// Filtered back-projection
// ---------------------------------------------------------------------------

/// In-place iterative radix-2 complex FFT (sign = -1 forward, +1 inverse;
/// inverse is unnormalized).
fn fft(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 0..n {
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
        let mut m = n >> 1;
        while m >= 1 && j & m != 0 {
            j ^= m;
            m >>= 1;
        }
        j |= m;
    }
    let mut step = 1;
    while step < n {
        let theta = sign * PI / step as f64;
        let (wr, wi) = (theta.cos(), theta.sin());
        let mut group = 0;
        while group < n {
            let (mut cr, mut ci) = (1.0, 0.0);
            for k in 0..step {
                let a = group + k;
                let b = a + step;
                let tr = cr * re[b] - ci * im[b];
                let ti = cr * im[b] + ci * re[b];
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            group += 2 * step;
        }
        step *= 2;
    }
}

/// Band-limited ramp (Ram-Lak) impulse response sampled at pitch `delta`,
/// laid out for circular convolution of period `npad`.
fn ramp_kernel(npad: usize, delta: f64) -> Vec<f64> {
    let mut h = vec![0.0; npad];
    h[0] = 1.0 / (4.0 * delta * delta);
    for m in 1..npad / 2 + 1 {
        let v = if m % 2 == 1 {
            -1.0 / (PI * PI * (m * m) as f64 * delta * delta)
        } else {
            0.0
        };
        h[m] = v;
        h[npad - m] = v;
    }
    h
}

/// Fan-beam weighted FBP without the final nonnegativity clip.
///
/// Cosine pre-weighting on the virtual detector, Ram-Lak filtering per view
/// via DFT with zero padding to the next power of two >= 2*Nb, then
/// distance-weighted backprojection scaled by the angular step.
pub fn fbp_raw(y: &Tensor, spec: &GeometrySpec, views: &[usize]) -> Result<Tensor> {
    let nb = spec.n_bins;
    if y.dims() != [views.len(), nb] {
        return Err(Error::shape(
            "fbp",
            format!("sinogram {:?} vs [{}, {nb}]", y.dims(), views.len()),
        ));
    }
    y.check_finite("fbp input")?;
    let n = spec.n;
    let d = spec.d_so;
    // Virtual detector through the rotation center.
    let delta = spec.bin_size * d / (d + spec.d_od);
    let npad = (2 * nb).next_power_of_two();

    let mut hr = ramp_kernel(npad, delta);
    let mut hi = vec![0.0; npad];
    fft(&mut hr, &mut hi, -1.0);

    // Filter every view: q = delta * IFFT(FFT(weighted) .* FFT(h)).
    let np = views.len();
    let mut filtered = vec![0.0; np * nb];
    for (vi, frow) in filtered.chunks_mut(nb).enumerate() {
        let mut re = vec![0.0; npad];
        let mut im = vec![0.0; npad];
        for b in 0..nb {
            let s = (b as f64 - 0.5 * (nb as f64 - 1.0)) * delta;
            let w = d / (d * d + s * s).sqrt();
            re[b] = y.data()[vi * nb + b] * w;
        }
        fft(&mut re, &mut im, -1.0);
        for k in 0..npad {
            let (a, b) = (re[k], im[k]);
            re[k] = a * hr[k] - b * hi[k];
            im[k] = a * hi[k] + b * hr[k];
        }
        fft(&mut re, &mut im, 1.0);
        let scale = delta / npad as f64;
        for b in 0..nb {
            frow[b] = re[b] * scale;
        }
    }

    // Distance-weighted backprojection over the selected views. The 1/2
    // accounts for every ray being covered twice over a full turn.
    let dbeta = 2.0 * PI / np as f64;
    let half = 0.5 * n as f64 * spec.pixel_size;
    let mut out = vec![0.0; n * n];
    let angles: Vec<(f64, f64)> = views
        .iter()
        .map(|&v| {
            let t = spec.view_angle(v);
            (t.cos(), t.sin())
        })
        .collect();
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let yy = -half + (i as f64 + 0.5) * spec.pixel_size;
        for (j, px) in row.iter_mut().enumerate() {
            let xx = -half + (j as f64 + 0.5) * spec.pixel_size;
            let mut acc = 0.0;
            for (vi, &(c, s)) in angles.iter().enumerate() {
                let along = xx * c + yy * s;
                let perp = -xx * s + yy * c;
                let u = d - along;
                if u <= 1e-6 {
                    continue;
                }
                let sd = d * perp / u;
                let fb = sd / delta + 0.5 * (nb as f64 - 1.0);
                if fb < 0.0 || fb > (nb - 1) as f64 {
                    continue;
                }
                let b0 = fb.floor() as usize;
                let b1 = (b0 + 1).min(nb - 1);
                let frac = fb - b0 as f64;
                let q = filtered[vi * nb + b0] * (1.0 - frac) + filtered[vi * nb + b1] * frac;
                acc += q * (d * d) / (u * u);
            }
            *px = 0.5 * acc * dbeta;
        }
    });
    Tensor::new(vec![n, n], out)
}

/// Fan-beam FBP; output clipped to [0, +inf).
pub fn fbp(y: &Tensor, spec: &GeometrySpec, views: &[usize]) -> Result<Tensor> {
    Ok(fbp_raw(y, spec, views)?.map(|v| v.max(0.0)))
}

// ---------------------------------------------------------------------------
// Spectrum of P^T P
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SpectrumEstimate {
    /// Largest eigenvalue of `P^T P` (power iteration).
    pub zeta_hat: f64,
    /// Smallest Ritz value of a Lanczos run on `P^T P`.
    pub epsilon_hat: f64,
    /// Set when `epsilon_hat < 1e-8 * zeta_hat` (numerically singular).
    pub degenerate: bool,
    pub power_iters: usize,
}

/// Eigenvalues of a symmetric tridiagonal matrix (implicit-shift QL).
fn tridiag_eigenvalues(diag: &[f64], off: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut d = diag.to_vec();
    let mut e = vec![0.0; n];
    e[..n - 1].copy_from_slice(&off[..n.saturating_sub(1)]);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 50 {
                break;
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            let sign_r = if g >= 0.0 { r } else { -r };
            g = d[m] - d[l] + e[l] / (g + sign_r);
            let (mut s, mut c) = (1.0, 1.0);
            let mut p = 0.0;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                f = 0.0;
                let _ = f;
            }
            if e[m.min(n - 1)] == 0.0 && m > l {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    d
}

/// Power iteration for the top eigenvalue and a reorthogonalized Lanczos run
/// for the smallest Ritz value of `P^T P`.
pub fn estimate_spectrum(op: &SparseOperator, iters: usize, seed: u64) -> Result<SpectrumEstimate> {
    if iters < 50 {
        return Err(Error::Argument("estimate_spectrum: iters must be >= 50".into()));
    }
    if op.weights.iter().all(|&w| w == 0.0) || op.nnz() == 0 {
        return Err(Error::Argument("estimate_spectrum: zero operator".into()));
    }
    let n = op.n_cols;
    let mut rng = rng::stream(seed, "spectrum.power");
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);

    let mut sino = vec![0.0; op.n_rows];
    let mut img = vec![0.0; n];
    let apply_ata = |v: &[f64], sino: &mut [f64], img: &mut [f64]| {
        op.apply_forward(v, sino);
        op.apply_transpose(sino, img);
    };

    let mut zeta = 0.0;
    let mut power_iters = 0;
    for it in 0..iters {
        apply_ata(&v, &mut sino, &mut img);
        let lambda: f64 = v.iter().zip(&img).map(|(a, b)| a * b).sum();
        let wnorm = img.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wnorm == 0.0 {
            return Err(Error::Argument("estimate_spectrum: operator annihilated the iterate".into()));
        }
        for (vi, wi) in v.iter_mut().zip(&img) {
            *vi = wi / wnorm;
        }
        power_iters = it + 1;
        if it > 0 && (lambda - zeta).abs() <= 1e-8 * lambda.abs().max(1e-300) {
            zeta = lambda;
            break;
        }
        zeta = lambda;
    }

    // Lanczos with full reorthogonalization for the low end.
    let m = iters.min(200).min(n);
    let mut rng = rng::stream(seed, "spectrum.lanczos");
    let mut q: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    q.iter_mut().for_each(|x| *x /= qn);
    let mut basis: Vec<Vec<f64>> = vec![q.clone()];
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    let mut w = vec![0.0; n];
    for j in 0..m {
        apply_ata(&basis[j], &mut sino, &mut w);
        let alpha: f64 = basis[j].iter().zip(&w).map(|(a, b)| a * b).sum();
        alphas.push(alpha);
        for (wi, qi) in w.iter_mut().zip(&basis[j]) {
            *wi -= alpha * qi;
        }
        if j > 0 {
            let beta_prev = betas[j - 1];
            for (wi, qi) in w.iter_mut().zip(&basis[j - 1]) {
                *wi -= beta_prev * qi;
            }
        }
        // Full reorthogonalization keeps the small Ritz values honest.
        for b in &basis {
            let proj: f64 = b.iter().zip(&w).map(|(a, c)| a * c).sum();
            for (wi, bi) in w.iter_mut().zip(b) {
                *wi -= proj * bi;
            }
        }
        let beta = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if j + 1 == m || beta < 1e-14 * zeta.abs().max(1.0) {
            break;
        }
        betas.push(beta);
        let next: Vec<f64> = w.iter().map(|x| x / beta).collect();
        basis.push(next);
    }
    let eigs = tridiag_eigenvalues(&alphas, &betas);
    let mut eps = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    if eps < 0.0 {
        // P^T P is PSD; tiny negative Ritz values are roundoff.
        eps = 0.0;
    }
    let degenerate = eps < 1e-8 * zeta;
    Ok(SpectrumEstimate {
        zeta_hat: zeta,
        epsilon_hat: eps,
        degenerate,
        power_iters,
    })
}

/// Step size `1 / zeta_hat` for the gradient half-step.
pub fn default_eta(op: &SparseOperator, seed: u64) -> Result<f64> {
    let s = estimate_spectrum(op, 200, seed)?;
    Ok(1.0 / s.zeta_hat)
}

// ---------------------------------------------------------------------------
// Operator cache (LIPO) and geometry config files
// ---------------------------------------------------------------------------

pub const LIPO_MAGIC: &[u8; 4] = b"LIPO";
pub const LIPO_VERSION: u32 = 1;

/// Persist the operator: spec fields, the view list, then CSR arrays
/// (u64 row offsets, u32 cols, f32 weights), all little-endian.
pub fn write_operator(path: &Path, op: &SparseOperator) -> Result<()> {
    let mut b: Vec<u8> = Vec::new();
    b.extend_from_slice(LIPO_MAGIC);
    b.extend_from_slice(&LIPO_VERSION.to_le_bytes());
    b.extend_from_slice(&(op.spec.n as u32).to_le_bytes());
    b.extend_from_slice(&op.spec.pixel_size.to_le_bytes());
    b.extend_from_slice(&(op.spec.n_views_full as u32).to_le_bytes());
    b.extend_from_slice(&(op.spec.n_bins as u32).to_le_bytes());
    b.extend_from_slice(&op.spec.d_so.to_le_bytes());
    b.extend_from_slice(&op.spec.d_od.to_le_bytes());
    b.extend_from_slice(&op.spec.bin_size.to_le_bytes());
    b.extend_from_slice(&(op.views.len() as u32).to_le_bytes());
    for &v in &op.views {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &o in &op.row_offsets {
        b.extend_from_slice(&o.to_le_bytes());
    }
    for &c in &op.cols {
        b.extend_from_slice(&c.to_le_bytes());
    }
    for &w in &op.weights {
        b.extend_from_slice(&(w as f32).to_le_bytes());
    }
    fs::write(path, b).map_err(|e| Error::io(path, e))
}

pub fn read_operator(path: &Path) -> Result<SparseOperator> {
    let bytes = crate::io::read_bytes(path)?;
    let mut r = crate::io::ByteReader::new(&bytes, path);
    if r.take(4)? != LIPO_MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    if r.u32()? != LIPO_VERSION {
        return Err(r.corrupt("unsupported version"));
    }
    let n = r.u32()? as usize;
    let pixel_size = r.f64()?;
    let n_views_full = r.u32()? as usize;
    let n_bins = r.u32()? as usize;
    let d_so = r.f64()?;
    let d_od = r.f64()?;
    let bin_size = r.f64()?;
    let spec = GeometrySpec {
        n,
        pixel_size,
        n_views_full,
        n_bins,
        d_so,
        d_od,
        bin_size,
    };
    let nviews = r.u32()? as usize;
    let mut views = Vec::with_capacity(nviews);
    for _ in 0..nviews {
        views.push(r.u32()? as usize);
    }
    let n_rows = nviews * n_bins;
    let mut row_offsets = Vec::with_capacity(n_rows + 1);
    for _ in 0..=n_rows {
        row_offsets.push(r.u64()?);
    }
    let nnz = *row_offsets.last().unwrap() as usize;
    let mut cols = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        cols.push(r.u32()?);
    }
    let mut weights = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        weights.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64);
    }
    if !r.is_empty() {
        return Err(r.corrupt("trailing bytes"));
    }
    let mut op = SparseOperator {
        spec,
        views,
        n_rows,
        n_cols: n * n,
        row_offsets,
        cols,
        weights,
        t_offsets: Vec::new(),
        t_rows: Vec::new(),
        t_weights: Vec::new(),
    };
    op.build_transpose_index();
    Ok(op)
}

/// Parse a geometry key=value config (missing keys take desk defaults).
pub fn spec_from_kv(map: &std::collections::BTreeMap<String, String>) -> Result<GeometrySpec> {
    let kv = crate::io::KvMap(map);
    let d = GeometrySpec::desk_default();
    let spec = GeometrySpec {
        n: kv.get_usize("n", d.n)?,
        pixel_size: kv.get_f64("pixel_size", d.pixel_size)?,
        n_views_full: kv.get_usize("n_views_full", d.n_views_full)?,
        n_bins: kv.get_usize("n_bins", d.n_bins)?,
        d_so: kv.get_f64("d_so", d.d_so)?,
        d_od: kv.get_f64("d_od", d.d_od)?,
        bin_size: kv.get_f64("bin_size", d.bin_size)?,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn spec_kv_pairs(spec: &GeometrySpec) -> Vec<(String, String)> {
    vec![
        ("n".into(), spec.n.to_string()),
        ("pixel_size".into(), spec.pixel_size.to_string()),
        ("n_views_full".into(), spec.n_views_full.to_string()),
        ("n_bins".into(), spec.n_bins.to_string()),
        ("d_so".into(), spec.d_so.to_string()),
        ("d_od".into(), spec.d_od.to_string()),
        ("bin_size".into(), spec.bin_size.to_string()),
    ]
}

/// Load an operator either from a `.lipo` cache or by building it from a
/// geometry config file.
pub fn operator_from_path(path: &Path, views: &[usize]) -> Result<Arc<SparseOperator>> {
    if path.extension().and_then(|e| e.to_str()) == Some("lipo") {
        let op = read_operator(path)?;
        if op.views != views {
            return Err(Error::Argument(format!(
                "operator cache {} holds views {:?}, wanted {:?}",
                path.display(),
                op.views,
                views
            )));
        }
        return Ok(Arc::new(op));
    }
    let map = crate::io::read_kv_file(path)?;
    let spec = spec_from_kv(&map)?;
    Ok(Arc::new(build_operator(&spec, views)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GeometrySpec {
        GeometrySpec::small(16, 24, 23)
    }

    #[test]
    fn desk_default_covers_inscribed_circle() {
        let spec = GeometrySpec::desk_default();
        spec.validate().unwrap();
        assert!(spec.tangent_radius() >= spec.inscribed_radius());
    }

    #[test]
    fn subsample_views_examples() {
        let v = subsample_views(360, 60).unwrap();
        assert_eq!(v.len(), 60);
        assert_eq!(v[0], 0);
        assert_eq!(v[1], 6);
        assert_eq!(*v.last().unwrap(), 354);
        assert_eq!(subsample_views(360, 90).unwrap()[1], 4);
        assert!(subsample_views(360, 7).is_err());
    }

    #[test]
    fn projector_is_linear_and_zero_on_zero() {
        let spec = small_spec();
        let views: Vec<usize> = (0..spec.n_views_full).collect();
        let op = build_operator(&spec, &views).unwrap();
        let zero = Tensor::zeros(&[16, 16]);
        assert_eq!(project(&op, &zero).unwrap().norm(), 0.0);

        let mut rng = crate::rng::stream(3, "lin");
        let x = Tensor::new(
            vec![16, 16],
            (0..256).map(|_| rng.gen::<f64>()).collect(),
        )
        .unwrap();
        let y1 = project(&op, &x).unwrap();
        let mut x2 = x.clone();
        x2.scale_in_place(2.0);
        let y2 = project(&op, &x2).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn projector_adjoint_identity() {
        let spec = small_spec();
        let views = subsample_views(spec.n_views_full, 12).unwrap();
        let op = build_operator(&spec, &views).unwrap();
        for seed in 0..20 {
            let mut rng = crate::rng::stream(seed, "adj");
            let x = Tensor::new(
                vec![16, 16],
                (0..256).map(|_| rng.gen::<f64>() - 0.5).collect(),
            )
            .unwrap();
            let y = Tensor::new(
                op.sino_dims().to_vec(),
                (0..op.n_rows()).map(|_| rng.gen::<f64>() - 0.5).collect(),
            )
            .unwrap();
            let lhs = project(&op, &x).unwrap().dot(&y);
            let rhs = x.dot(&backproject(&op, &y).unwrap());
            assert!(((lhs - rhs) / lhs.abs().max(1e-30)).abs() < 1e-12);
        }
    }

    #[test]
    fn central_ray_row_sum_matches_ray_march() {
        let spec = GeometrySpec::desk_default();
        let views = vec![0usize];
        let op = build_operator(&spec, &views).unwrap();
        // Central bin of view 0.
        let bin = spec.n_bins / 2;
        let (cols, weights) = op.row(bin);
        assert!(!cols.is_empty());
        let row_sum: f64 = weights.iter().sum();

        // Dense ray-marching oracle with 1e4 samples along the ray.
        let (src, det) = spec.ray_endpoints(0, bin);
        let steps = 10_000;
        let dir = [det[0] - src[0], det[1] - src[1]];
        let len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
        let half = 0.5 * spec.n as f64 * spec.pixel_size;
        let mut inside = 0usize;
        for s in 0..steps {
            let t = (s as f64 + 0.5) / steps as f64;
            let x = src[0] + t * dir[0];
            let y = src[1] + t * dir[1];
            if x.abs() < half && y.abs() < half {
                inside += 1;
            }
        }
        let chord = len * inside as f64 / steps as f64;
        assert!(
            ((row_sum - chord) / chord).abs() < 1e-3,
            "row sum {row_sum} vs chord {chord}"
        );
    }

    #[test]
    fn view_subsets_stack_row_wise() {
        let spec = small_spec();
        let a = build_operator(&spec, &[0, 4]).unwrap();
        let b = build_operator(&spec, &[2, 9]).unwrap();
        let joint = build_operator(&spec, &[0, 2, 4, 9]).unwrap();
        let nb = spec.n_bins;
        // Rows of the union operator equal rows of the part operators.
        for (part, part_view_pos, joint_view_pos) in
            [(&a, 0, 0), (&b, 0, 1), (&a, 1, 2), (&b, 1, 3)]
        {
            for bin in 0..nb {
                let (c1, w1) = part.row(part_view_pos * nb + bin);
                let (c2, w2) = joint.row(joint_view_pos * nb + bin);
                assert_eq!(c1, c2);
                assert_eq!(w1, w2);
            }
        }
    }

    #[test]
    fn removing_views_restricts_rows_of_projection() {
        let spec = small_spec();
        let full_views: Vec<usize> = (0..spec.n_views_full).collect();
        let full = build_operator(&spec, &full_views).unwrap();
        let sub_views = subsample_views(spec.n_views_full, 6).unwrap();
        let sub = build_operator(&spec, &sub_views).unwrap();
        let mut rng = crate::rng::stream(9, "subset");
        let x = Tensor::new(
            vec![16, 16],
            (0..256).map(|_| rng.gen::<f64>()).collect(),
        )
        .unwrap();
        let yf = project(&full, &x).unwrap();
        let ys = project(&sub, &x).unwrap();
        let nb = spec.n_bins;
        for (si, &v) in sub_views.iter().enumerate() {
            for b in 0..nb {
                assert_eq!(ys.data()[si * nb + b], yf.data()[v * nb + b]);
            }
        }
    }

    #[test]
    fn spectrum_on_diagonal_operator_is_analytic() {
        // P = diag(1,2,3,4) as a sparse operator over a fake 2x2 "image".
        let spec = GeometrySpec::small(2, 4, 1);
        let mut op = SparseOperator {
            spec,
            views: vec![0, 1, 2, 3],
            n_rows: 4,
            n_cols: 4,
            row_offsets: vec![0, 1, 2, 3, 4],
            cols: vec![0, 1, 2, 3],
            weights: vec![1.0, 2.0, 3.0, 4.0],
            t_offsets: Vec::new(),
            t_rows: Vec::new(),
            t_weights: Vec::new(),
        };
        op.build_transpose_index();
        let s = estimate_spectrum(&op, 500, 1).unwrap();
        assert!((s.zeta_hat - 16.0).abs() < 1e-6);
        assert!((s.epsilon_hat - 1.0).abs() < 1e-6);
        assert!(!s.degenerate);

        // Identity case.
        op.weights = vec![1.0; 4];
        op.build_transpose_index();
        let s = estimate_spectrum(&op, 500, 1).unwrap();
        assert!((s.zeta_hat - 1.0).abs() < 1e-9);
        assert!((s.epsilon_hat - 1.0).abs() < 1e-9);
    }

    #[test]
    fn spectrum_is_seed_reproducible() {
        let spec = small_spec();
        let views = subsample_views(spec.n_views_full, 8).unwrap();
        let op = build_operator(&spec, &views).unwrap();
        let a = estimate_spectrum(&op, 300, 42).unwrap();
        let b = estimate_spectrum(&op, 300, 42).unwrap();
        assert_eq!(a.zeta_hat, b.zeta_hat);
        assert_eq!(a.epsilon_hat, b.epsilon_hat);
    }

    #[test]
    fn zero_operator_is_error() {
        let spec = GeometrySpec::small(2, 4, 1);
        let mut op = SparseOperator {
            spec,
            views: vec![0],
            n_rows: 1,
            n_cols: 4,
            row_offsets: vec![0, 0],
            cols: vec![],
            weights: vec![],
            t_offsets: Vec::new(),
            t_rows: Vec::new(),
            t_weights: Vec::new(),
        };
        op.build_transpose_index();
        assert!(estimate_spectrum(&op, 100, 1).is_err());
    }

    #[test]
    fn operator_cache_roundtrip() {
        let spec = small_spec();
        let views = subsample_views(spec.n_views_full, 6).unwrap();
        let op = build_operator(&spec, &views).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("op.lipo");
        write_operator(&path, &op).unwrap();
        let back = read_operator(&path).unwrap();
        assert_eq!(back.views, op.views);
        assert_eq!(back.n_rows(), op.n_rows());
        assert_eq!(back.nnz(), op.nnz());
        for (a, b) in op.weights.iter().zip(&back.weights) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn fbp_zero_and_linearity() {
        let spec = small_spec();
        let views: Vec<usize> = (0..spec.n_views_full).collect();
        let zero = Tensor::zeros(&[views.len(), spec.n_bins]);
        let img = fbp(&zero, &spec, &views).unwrap();
        assert_eq!(img.norm(), 0.0);

        let mut rng = crate::rng::stream(4, "fbplin");
        let y = Tensor::new(
            vec![views.len(), spec.n_bins],
            (0..views.len() * spec.n_bins)
                .map(|_| rng.gen::<f64>())
                .collect(),
        )
        .unwrap();
        let r1 = fbp_raw(&y, &spec, &views).unwrap();
        let mut y3 = y.clone();
        y3.scale_in_place(3.0);
        let r3 = fbp_raw(&y3, &spec, &views).unwrap();
        for (a, b) in r1.data().iter().zip(r3.data()) {
            assert!((3.0 * a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn fbp_disk_roundtrip_recovers_center_value() {
        let spec = GeometrySpec::desk_default();
        let n = spec.n;
        let views: Vec<usize> = (0..spec.n_views_full).collect();
        let op = build_operator(&spec, &views).unwrap();
        // Centered uniform disk, radius n/4 pixels, value 0.5.
        let mut disk = Tensor::zeros(&[n, n]);
        let half = n as f64 / 2.0;
        let radius = n as f64 / 4.0;
        for i in 0..n {
            for j in 0..n {
                let y = i as f64 + 0.5 - half;
                let x = j as f64 + 0.5 - half;
                if (x * x + y * y).sqrt() <= radius {
                    disk.data_mut()[i * n + j] = 0.5;
                }
            }
        }
        let sino = project(&op, &disk).unwrap();
        let rec = fbp(&sino, &spec, &views).unwrap();
        // Mean inside radius n/8 within 10% of 0.5.
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            for j in 0..n {
                let y = i as f64 + 0.5 - half;
                let x = j as f64 + 0.5 - half;
                if (x * x + y * y).sqrt() <= n as f64 / 8.0 {
                    sum += rec.data()[i * n + j];
                    count += 1;
                }
            }
        }
        let mean = sum / count as f64;
        assert!(
            (mean - 0.5).abs() <= 0.05,
            "disk center mean {mean} not within 10% of 0.5"
        );

        // Sanity floor: full-view noiseless FBP of the disk reaches 25 dB.
        let mse = rec
            .data()
            .iter()
            .zip(disk.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / (n * n) as f64;
        let psnr = -10.0 * mse.log10();
        assert!(psnr >= 25.0, "disk FBP psnr {psnr:.2} dB");
    }
}
