//! Global blur-kernel estimation from the neural average and the blurry input.
//!
//! Solves `min_k sum_i |k * a_i - b_i|^2 + lambda |k|_1` on a square support,
//! where `a_i` are thresholded derivative-filtered versions of the sharp
//! estimate and `b_i` the same filters applied to the blurry image.
//!
//! Each `a_i` is zeroed within half the support of the image border, so
//! `k * a_i` never leaves the image and the normal matrix is exactly the
//! autocorrelation of the `a_i` restricted to support offsets. The quadratic
//! HQS step is then solved by conjugate gradients with FFT matrix-vector
//! products on a small grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{fft2_inplace, fft2_real, ifft2_real, Complex64};
use crate::image::{BlurKernel, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Odd side length of the kernel support.
    pub support: usize,
    /// Regularisation weights relative to the feature energy, ascending.
    pub lambdas: Vec<f64>,
    /// First and last coupling weight as multiples of lambda; doubled per outer iteration.
    pub beta_start: f64,
    pub beta_end: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub gradient_keep_fraction: f64,
    /// Chebyshev radius by which the kept locations are grown.
    pub mask_dilation: usize,
    /// Taps below this fraction of the peak are removed.
    pub cleanup_floor: f64,
    /// 8-connected components holding less than this fraction of the mass are removed.
    pub min_component_mass: f64,
    /// Restrict the blurry-side features to the (dilated) pixels kept on the sharp side.
    pub mask_targets: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            support: 51,
            lambdas: (0..5).map(|i| 10f64.powf(-4.0 + 0.75 * i as f64)).collect(),
            beta_start: 1e-2,
            beta_end: 1e2,
            cg_iters: 100,
            cg_tol: 1e-8,
            gradient_keep_fraction: 0.02,
            mask_dilation: 3,
            cleanup_floor: 1.0 / 20.0,
            min_component_mass: 0.02,
            mask_targets: false,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.support % 2 == 0 || self.support == 0 {
            return Err(Error::InvalidArgument(format!("support {} must be odd", self.support)));
        }
        if self.lambdas.is_empty()
            || self.lambdas.iter().any(|&l| !(l > 0.0))
            || self.lambdas.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::InvalidArgument("lambdas must be positive and ascending".into()));
        }
        if !(self.beta_start > 0.0 && self.beta_end >= self.beta_start) {
            return Err(Error::InvalidArgument("beta schedule must be positive and increasing".into()));
        }
        if !(self.gradient_keep_fraction > 0.0 && self.gradient_keep_fraction <= 1.0) {
            return Err(Error::InvalidArgument("gradient_keep_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// First and second directional derivatives of a unit Gaussian at eight
/// orientations `k pi / 8`, each 7x7 and zero-mean.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub filters: Vec<DerivativeFilter>,
}

/// A small signed filter (derivative filters are not blur kernels).
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeFilter {
    pub size: usize,
    pub taps: Vec<f64>,
}

impl FeatureBank {
    pub fn gaussian_derivatives() -> Self {
        let size = 7;
        let c = (size / 2) as f64;
        let sigma2: f64 = 1.0;
        let mut filters = Vec::with_capacity(16);
        for order in [1, 2] {
            for k in 0..8 {
                let theta = k as f64 * std::f64::consts::PI / 8.0;
                let (s, co) = theta.sin_cos();
                let mut taps: Vec<f64> = (0..size * size)
                    .map(|i| {
                        let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
                        let u = x * co + y * s;
                        let g = (-(x * x + y * y) / (2.0 * sigma2)).exp();
                        if order == 1 {
                            -u / sigma2 * g
                        } else {
                            (u * u / (sigma2 * sigma2) - 1.0 / sigma2) * g
                        }
                    })
                    .collect();
                let mean = taps.iter().sum::<f64>() / taps.len() as f64;
                taps.iter_mut().for_each(|t| *t -= mean);
                filters.push(DerivativeFilter { size, taps });
            }
        }
        Self { filters }
    }

    fn apply(&self, img: &Image) -> Vec<Image> {
        self.filters.par_iter().map(|f| filter_same(img, f)).collect()
    }
}

/// Same-size filtering with symmetric padding, using the convolution
/// convention of [`convolve`].
fn filter_same(img: &Image, f: &DerivativeFilter) -> Image {
    let s = f.size;
    let p = img.pad_reflect(s / 2);
    let (w, h) = (img.width(), img.height());
    let pw = p.width();
    let pd = p.data();
    let mut out = vec![0.0; w * h];
    for a in 0..s {
        for b in 0..s {
            let t = f.taps[a * s + b];
            let (dr, dc) = (s - 1 - a, s - 1 - b);
            for i in 0..h {
                let src = &pd[(i + dr) * pw + dc..(i + dr) * pw + dc + w];
                for (o, v) in out[i * w..(i + 1) * w].iter_mut().zip(src) {
                    *o += t * v;
                }
            }
        }
    }
    Image::new(w, h, out).expect("finite input")
}

/// Keeps the `fraction` largest-magnitude pixels of `img` and zeroes the
/// rest. Ties are broken by pixel index, so exactly `round(fraction * n)`
/// pixels survive (fewer if the image has fewer non-zero pixels).
pub fn keep_strongest(img: &Image, fraction: f64) -> Image {
    let data = img.data();
    let n = data.len();
    let keep = ((fraction * n as f64).round() as usize).min(n);
    let mut out = vec![0.0; n];
    if keep > 0 {
        let mut idx: Vec<usize> = (0..n).collect();
        let cmp = |&i: &usize, &j: &usize| data[j].abs().total_cmp(&data[i].abs()).then(i.cmp(&j));
        if keep < n {
            idx.select_nth_unstable_by(keep - 1, cmp);
        }
        for &i in &idx[..keep] {
            out[i] = data[i];
        }
    }
    Image::new(img.width(), img.height(), out).expect("finite input")
}

/// Filters `x_n` with every filter of the bank and keeps the strongest
/// responses of each, grown by `dilation` pixels.
pub fn threshold_features(x_n: &Image, bank: &FeatureBank, keep_fraction: f64, dilation: usize) -> Vec<Image> {
    bank.apply(x_n)
        .iter()
        .map(|f| apply_mask(f, &strong_mask(f, keep_fraction, dilation)))
        .collect()
}

/// Locations of the strongest `keep_fraction` of `feature`, grown by
/// `dilation` pixels (Chebyshev distance).
pub fn strong_mask(feature: &Image, keep_fraction: f64, dilation: usize) -> Vec<bool> {
    let kept = keep_strongest(feature, keep_fraction);
    let (w, h) = (feature.width(), feature.height());
    let mut mask = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            if kept.get(r, c) != 0.0 {
                for rr in r.saturating_sub(dilation)..(r + dilation + 1).min(h) {
                    mask[rr * w + c.saturating_sub(dilation)..rr * w + (c + dilation + 1).min(w)].fill(true);
                }
            }
        }
    }
    mask
}

fn apply_mask(img: &Image, mask: &[bool]) -> Image {
    Image::new(
        img.width(),
        img.height(),
        img.data().iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect(),
    )
    .expect("finite input")
}

fn zero_border(img: &Image, border: usize) -> Image {
    let (w, h) = (img.width(), img.height());
    Image::from_fn(w, h, |r, c| {
        if r < border || c < border || r + border >= h || c + border >= w {
            0.0
        } else {
            img.get(r, c)
        }
    })
}

/// Normal equations `M k = c` of the data term on the kernel support,
/// with `M` applied through FFTs of the feature autocorrelation.
pub struct KernelSystem {
    support: usize,
    grid: usize,
    autocorr_otf: Vec<Complex64>,
    rhs: Vec<f64>,
    b_energy: f64,
    /// `R(0)`, the diagonal of `M`.
    diag: f64,
}

impl KernelSystem {
    /// Builds the system from masked features `a` and targets `b`.
    pub fn new(a: &[Image], b: &[Image], support: usize) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::ShapeMismatch("need one target per feature image".into()));
        }
        let (w, h) = (a[0].width(), a[0].height());
        if a.iter().chain(b).any(|im| im.width() != w || im.height() != h) {
            return Err(Error::ShapeMismatch("feature images differ in size".into()));
        }
        let half = support / 2;
        if w <= 2 * half + 1 || h <= 2 * half + 1 {
            return Err(Error::InvalidArgument(format!(
                "image {w}x{h} too small for a {support}x{support} kernel"
            )));
        }
        let a: Vec<Image> = a.iter().map(|im| zero_border(im, half)).collect();
        let mut power = vec![0.0; w * h];
        let mut cross = vec![Complex64::new(0.0, 0.0); w * h];
        let mut b_energy = 0.0;
        for (ai, bi) in a.iter().zip(b) {
            let af = fft2_real(ai.data(), w, h);
            let bf = fft2_real(bi.data(), w, h);
            for ((p, c), (x, y)) in power.iter_mut().zip(cross.iter_mut()).zip(af.iter().zip(&bf)) {
                *p += x.norm_sqr();
                *c += x.conj() * y;
            }
            b_energy += bi.data().iter().map(|v| v * v).sum::<f64>();
        }
        let power: Vec<Complex64> = power.into_iter().map(|p| Complex64::new(p, 0.0)).collect();
        let autocorr = ifft2_real(&power, w, h);
        let cross = ifft2_real(&cross, w, h);
        let diag = autocorr[0];
        if !(diag > 0.0) {
            return Err(Error::InsufficientTexture);
        }

        // R(d) for |d| <= support - 1 on a periodic grid large enough that
        // those lags do not alias.
        let lag = 2 * half;
        let grid = (2 * lag + 1).next_multiple_of(4);
        let mut r = vec![0.0; grid * grid];
        for dy in -(lag as isize)..=lag as isize {
            for dx in -(lag as isize)..=lag as isize {
                let src = dy.rem_euclid(h as isize) as usize * w + dx.rem_euclid(w as isize) as usize;
                let dst = dy.rem_euclid(grid as isize) as usize * grid + dx.rem_euclid(grid as isize) as usize;
                r[dst] = autocorr[src];
            }
        }
        let autocorr_otf = fft2_real(&r, grid, grid);
        let mut rhs = vec![0.0; support * support];
        for i in 0..support {
            for j in 0..support {
                let (dy, dx) = (i as isize - half as isize, j as isize - half as isize);
                rhs[i * support + j] = cross[dy.rem_euclid(h as isize) as usize * w + dx.rem_euclid(w as isize) as usize];
            }
        }
        Ok(Self {
            support,
            grid,
            autocorr_otf,
            rhs,
            b_energy,
            diag,
        })
    }

    pub fn support(&self) -> usize {
        self.support
    }

    /// The feature energy `R(0)`, which sets the scale of lambda.
    pub fn scale(&self) -> f64 {
        self.diag
    }

    /// `M k` for a kernel stored row-major on the support.
    pub fn apply(&self, k: &[f64]) -> Vec<f64> {
        let (s, g) = (self.support, self.grid);
        let half = (s / 2) as isize;
        let mut buf = vec![Complex64::new(0.0, 0.0); g * g];
        for i in 0..s {
            for j in 0..s {
                let r = (i as isize - half).rem_euclid(g as isize) as usize;
                let c = (j as isize - half).rem_euclid(g as isize) as usize;
                buf[r * g + c] = Complex64::new(k[i * s + j], 0.0);
            }
        }
        fft2_inplace(&mut buf, g, g, false);
        for (v, o) in buf.iter_mut().zip(&self.autocorr_otf) {
            *v *= o;
        }
        let out = ifft2_real(&buf, g, g);
        let mut res = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..s {
                let r = (i as isize - half).rem_euclid(g as isize) as usize;
                let c = (j as isize - half).rem_euclid(g as isize) as usize;
                res[i * s + j] = out[r * g + c];
            }
        }
        res
    }

    /// Unregularised cost `sum_i |k * a_i - b_i|^2 = k'Mk - 2c'k + |b|^2`.
    pub fn cost(&self, k: &[f64]) -> f64 {
        let mk = self.apply(k);
        dot(k, &mk) - 2.0 * dot(&self.rhs, k) + self.b_energy
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients for `(M + beta I) x = rhs`, warm-started at `x`.
/// Every iterate lowers the quadratic, so an early stop never increases it.
fn cg_solve(sys: &KernelSystem, beta: f64, rhs: &[f64], x: &mut [f64], iters: usize, tol: f64) {
    let op = |v: &[f64]| -> Vec<f64> { sys.apply(v).iter().zip(v).map(|(m, v)| m + beta * v).collect() };
    let ax = op(x);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let stop = tol * tol * dot(rhs, rhs).max(f64::MIN_POSITIVE);
    for _ in 0..iters {
        if rr <= stop {
            break;
        }
        let ap = op(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let ratio = rr_new / rr;
        rr = rr_new;
        for i in 0..p.len() {
            p[i] = r[i] + ratio * p[i];
        }
    }
}

/// Surrogate values around one outer HQS iteration at coupling `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HqsStep {
    pub beta: f64,
    pub before: f64,
    pub after: f64,
}

fn surrogate(sys: &KernelSystem, k: &[f64], g: &[f64], lambda: f64, beta: f64) -> f64 {
    let l1: f64 = g.iter().map(|v| v.abs()).sum();
    let coupling: f64 = k.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum();
    sys.cost(k) + lambda * l1 + beta * coupling
}

/// Sparse HQS variable `g` (before clipping and cleanup) and the quadratic
/// variable `k` after the last iteration. `lambda` is absolute.
pub fn solve_l1_raw(sys: &KernelSystem, lambda: f64, cfg: &EstimatorConfig) -> (Vec<f64>, Vec<f64>) {
    let (g, k, _) = solve_l1_traced(sys, lambda, cfg);
    (g, k)
}

/// As [`solve_l1_raw`], also returning the surrogate trace.
pub fn solve_l1_traced(sys: &KernelSystem, lambda: f64, cfg: &EstimatorConfig) -> (Vec<f64>, Vec<f64>, Vec<HqsStep>) {
    let s = sys.support();
    let mut k = vec![0.0; s * s];
    k[s * s / 2] = 1.0;
    let mut g = k.clone();
    let mut trace = Vec::new();
    let mut beta = cfg.beta_start * lambda;
    while beta <= cfg.beta_end * lambda * (1.0 + 1e-12) {
        let before = surrogate(sys, &k, &g, lambda, beta);
        let rhs: Vec<f64> = sys.rhs.iter().zip(&g).map(|(c, g)| c + beta * g).collect();
        cg_solve(sys, beta, &rhs, &mut k, cfg.cg_iters, cfg.cg_tol);
        let t = lambda / (2.0 * beta);
        for (gi, &ki) in g.iter_mut().zip(&k) {
            *gi = ki.signum() * (ki.abs() - t).max(0.0);
        }
        trace.push(HqsStep {
            beta,
            before,
            after: surrogate(sys, &k, &g, lambda, beta),
        });
        beta *= 2.0;
    }
    (g, k, trace)
}

/// Clips negatives, drops taps below `floor * max` and small 8-connected
/// components, and normalises. `None` if nothing survives.
pub fn cleanup_kernel(taps: &[f64], size: usize, floor: f64, min_component_mass: f64) -> Option<BlurKernel> {
    let mut k: Vec<f64> = taps.iter().map(|&v| v.max(0.0)).collect();
    let peak = k.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return None;
    }
    k.iter_mut().for_each(|v| {
        if *v < floor * peak {
            *v = 0.0
        }
    });
    let total: f64 = k.iter().sum();
    let mut label = vec![usize::MAX; size * size];
    let mut components: Vec<(Vec<usize>, f64)> = Vec::new();
    for start in 0..size * size {
        if k[start] == 0.0 || label[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut stack = vec![start];
        let mut members = Vec::new();
        let mut mass = 0.0;
        label[start] = id;
        while let Some(p) = stack.pop() {
            members.push(p);
            mass += k[p];
            let (r, c) = ((p / size) as isize, (p % size) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= size as isize || nc >= size as isize {
                        continue;
                    }
                    let q = nr as usize * size + nc as usize;
                    if k[q] > 0.0 && label[q] == usize::MAX {
                        label[q] = id;
                        stack.push(q);
                    }
                }
            }
        }
        components.push((members, mass));
    }
    for (members, mass) in &components {
        if *mass < min_component_mass * total {
            for &p in members {
                k[p] = 0.0;
            }
        }
    }
    BlurKernel::normalized(size, k).ok()
}

/// Solves for one lambda (relative to the system scale) and cleans up.
pub fn solve_kernel_l1(sys: &KernelSystem, lambda_rel: f64, cfg: &EstimatorConfig) -> Result<BlurKernel> {
    let (raw, k) = solve_l1_raw(sys, lambda_rel * sys.scale(), cfg);
    if let Some(kernel) = cleanup_kernel(&raw, sys.support(), cfg.cleanup_floor, cfg.min_component_mass) {
        return Ok(kernel);
    }
    // Everything was shrunk away: fall back to the single strongest tap.
    let (best, peak) = k
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    if !(peak > 0.0) {
        return Err(Error::InsufficientTexture);
    }
    let mut taps = vec![0.0; k.len()];
    taps[best] = 1.0;
    BlurKernel::new(sys.support(), taps)
}

/// Builds the kernel system from a sharp estimate and the blurry image.
pub fn kernel_system(x_n: &Image, y: &Image, cfg: &EstimatorConfig) -> Result<KernelSystem> {
    cfg.validate()?;
    if x_n.width() != y.width() || x_n.height() != y.height() {
        return Err(Error::ShapeMismatch(format!(
            "sharp estimate {}x{} vs blurry {}x{}",
            x_n.width(),
            x_n.height(),
            y.width(),
            y.height()
        )));
    }
    let bank = FeatureBank::gaussian_derivatives();
    let features = bank.apply(x_n);
    let masks: Vec<Vec<bool>> = features
        .iter()
        .map(|f| strong_mask(f, cfg.gradient_keep_fraction, cfg.mask_dilation))
        .collect();
    let a: Vec<Image> = features.iter().zip(&masks).map(|(f, m)| apply_mask(f, m)).collect();
    if a.iter().all(|im| im.data().iter().all(|&v| v == 0.0)) {
        return Err(Error::InsufficientTexture);
    }
    let mut b = bank.apply(y);
    if cfg.mask_targets {
        for (bi, m) in b.iter_mut().zip(&masks) {
            *bi = apply_mask(bi, m);
        }
    }
    KernelSystem::new(&a, &b, cfg.support)
}

/// Per-lambda outcome of [`estimate_kernel_report`].
#[derive(Debug, Clone)]
pub struct Candidate {
    pub lambda_rel: f64,
    pub kernel: Option<BlurKernel>,
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub kernel: BlurKernel,
    pub selected: usize,
    pub candidates: Vec<Candidate>,
}

/// Estimates the kernel relating `x_n` to `y`.
pub fn estimate_kernel(x_n: &Image, y: &Image, cfg: &EstimatorConfig) -> Result<BlurKernel> {
    Ok(estimate_kernel_report(x_n, y, cfg)?.kernel)
}

/// Runs every lambda and keeps the candidate with the lowest unregularised cost.
pub fn estimate_kernel_report(x_n: &Image, y: &Image, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    let sys = kernel_system(x_n, y, cfg)?;
    let candidates: Vec<Candidate> = cfg
        .lambdas
        .par_iter()
        .map(|&lambda_rel| {
            let kernel = solve_kernel_l1(&sys, lambda_rel, cfg).ok();
            let cost = kernel.as_ref().map_or(f64::INFINITY, |k| sys.cost(k.taps()));
            Candidate {
                lambda_rel,
                kernel,
                cost,
            }
        })
        .collect();
    let selected = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.kernel.is_some())
        .min_by(|a, b| a.1.cost.total_cmp(&b.1.cost))
        .map(|(i, _)| i)
        .ok_or(Error::InsufficientTexture)?;
    debug_assert!(candidates.iter().all(|c| candidates[selected].cost <= c.cost));
    Ok(EstimateReport {
        kernel: candidates[selected].kernel.clone().expect("selected candidate exists"),
        selected,
        candidates,
    })
}

/// Normalised cross-correlation of two kernels, both centred on a common
/// canvas (mean-subtracted, zero lag).
pub fn kernel_ncc(a: &BlurKernel, b: &BlurKernel) -> f64 {
    let size = a.size().max(b.size());
    let a = a.embed(size).expect("embedding into a larger canvas");
    let b = b.embed(size).expect("embedding into a larger canvas");
    let n = (size * size) as f64;
    let (ma, mb) = (1.0 / n, 1.0 / n);
    let mut num = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.taps().iter().zip(b.taps()) {
        num += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    num / (va * vb).sqrt()
}

/// Convenience for tests and tools: `f * img` for a bank filter.
pub fn apply_filter(img: &Image, f: &DerivativeFilter) -> Image {
    filter_same(img, f)
}
