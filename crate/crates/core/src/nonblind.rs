//! Non-blind deconvolution by half-quadratic splitting.
//!
//! Minimises `|k * x - y|^2 / (2 sigma^2) + weight * sum_d phi(D_d x)` over the
//! horizontal and vertical forward differences `D_d`, with `phi(t) = t^2`
//! (closed form) or `phi(t) = |t|^(2/3)` (HQS with per-pixel shrinkage).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{fft2_real, ifft2_real, Complex64};
use crate::image::{BlurKernel, Image};

/// Exponent of the hyper-Laplacian prior.
pub const ALPHA: f64 = 2.0 / 3.0;
const SHRINK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    L2,
    Hyperlap,
}

impl std::str::FromStr for Prior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Prior::L2),
            "hyperlap" => Ok(Prior::Hyperlap),
            _ => Err(Error::InvalidArgument(format!("unknown prior {s:?} (l2 | hyperlap)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Symmetric padding by the kernel size, solved circularly, cropped back.
    Reflect,
    /// The image is treated as periodic.
    Circular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconvConfig {
    pub prior: Prior,
    /// Noise standard deviation of `y`.
    pub sigma: f64,
    /// Prior weight.
    pub weight: f64,
    /// Outer HQS iterations (hyper-Laplacian only).
    pub iters: usize,
    /// First coupling weight, as a multiple of `weight`.
    pub beta_start: f64,
    pub beta_rate: f64,
    pub boundary: Boundary,
}

impl Default for DeconvConfig {
    fn default() -> Self {
        Self {
            prior: Prior::Hyperlap,
            sigma: 0.01,
            weight: 10.0,
            iters: 8,
            beta_start: 1.0,
            beta_rate: 2.0 * std::f64::consts::SQRT_2,
            boundary: Boundary::Reflect,
        }
    }
}

impl DeconvConfig {
    pub fn l2(sigma: f64, weight: f64) -> Self {
        Self {
            prior: Prior::L2,
            sigma,
            weight,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.weight >= 0.0) || !(self.beta_start > 0.0) || !(self.beta_rate >= 1.0) {
            return Err(Error::InvalidArgument("weight >= 0, beta_start > 0, beta_rate >= 1 required".into()));
        }
        Ok(())
    }
}

/// DFT of `k` placed on a `width`x`height` periodic grid with its centre
/// tap at the origin, so multiplying by it convolves without shifting.
pub fn kernel_otf(k: &BlurKernel, width: usize, height: usize) -> Vec<Complex64> {
    let s = k.size();
    let c = (s / 2) as isize;
    let mut buf = vec![0.0; width * height];
    for a in 0..s {
        for b in 0..s {
            let r = (a as isize - c).rem_euclid(height as isize) as usize;
            let col = (b as isize - c).rem_euclid(width as isize) as usize;
            buf[r * width + col] += k.get(a, b);
        }
    }
    fft2_real(&buf, width, height)
}

/// Spectra of the forward differences `x[r][c+1] - x[r][c]` and
/// `x[r+1][c] - x[r][c]` on a periodic grid.
fn difference_otfs(width: usize, height: usize) -> [Vec<Complex64>; 2] {
    let mut dh = vec![0.0; width * height];
    let mut dv = vec![0.0; width * height];
    dh[0] = -1.0;
    dh[(width - 1) % width] += 1.0;
    dv[0] = -1.0;
    dv[((height - 1) % height) * width] += 1.0;
    [fft2_real(&dh, width, height), fft2_real(&dv, width, height)]
}

fn gradients(x: &[f64], w: usize, h: usize) -> [Vec<f64>; 2] {
    let mut gh = vec![0.0; w * h];
    let mut gv = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let v = x[r * w + c];
            gh[r * w + c] = x[r * w + (c + 1) % w] - v;
            gv[r * w + c] = x[((r + 1) % h) * w + c] - v;
        }
    }
    [gh, gv]
}

fn circular_blur(x: &[f64], otf: &[Complex64], w: usize, h: usize) -> Vec<f64> {
    let spec: Vec<Complex64> = fft2_real(x, w, h).iter().zip(otf).map(|(a, b)| a * b).collect();
    ifft2_real(&spec, w, h)
}

/// Minimiser of `weight |t|^alpha + (beta / 2) (t - v)^2`.
///
/// The stationarity condition for `u = |t| > 0` is
/// `h(u) = weight alpha u^(alpha-1) + beta (u - |v|) = 0`. `h` is convex with
/// its minimum at `u*`; a non-zero minimiser is the larger root, which lies in
/// `[u*, |v|]` and is found by safeguarded Newton. It is kept only if it beats
/// `t = 0`.
pub fn shrink(v: f64, weight: f64, beta: f64, alpha: f64) -> f64 {
    if weight == 0.0 {
        return v;
    }
    let a = v.abs();
    if a == 0.0 {
        return 0.0;
    }
    let hfun = |u: f64| weight * alpha * u.powf(alpha - 1.0) + beta * (u - a);
    let dh = |u: f64| weight * alpha * (alpha - 1.0) * u.powf(alpha - 2.0) + beta;
    let u_star = (weight * alpha * (1.0 - alpha) / beta).powf(1.0 / (2.0 - alpha));
    if u_star >= a || hfun(u_star) > 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (u_star, a);
    let mut u = a;
    for _ in 0..100 {
        let f = hfun(u);
        if f > 0.0 {
            hi = u;
        } else {
            lo = u;
        }
        let mut next = u - f / dh(u);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - u).abs() <= SHRINK_TOL * a.max(1.0) {
            u = next;
            break;
        }
        u = next;
    }
    let cost = |t: f64| weight * t.abs().powf(alpha) + 0.5 * beta * (t - a).powi(2);
    if cost(u) < cost(0.0) {
        u * v.signum()
    } else {
        0.0
    }
}

/// Surrogate value before and after one outer HQS iteration, at that
/// iteration's coupling weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HqsStep {
    pub beta: f64,
    pub before: f64,
    pub after: f64,
}

struct Problem {
    w: usize,
    h: usize,
    y: Vec<f64>,
    k_otf: Vec<Complex64>,
    d_otf: [Vec<Complex64>; 2],
    data_scale: f64,
}

impl Problem {
    fn surrogate(&self, x: &[f64], aux: &[Vec<f64>; 2], weight: f64, beta: f64) -> f64 {
        let kx = circular_blur(x, &self.k_otf, self.w, self.h);
        let data: f64 = kx.iter().zip(&self.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * self.data_scale;
        let g = gradients(x, self.w, self.h);
        let mut prior = 0.0;
        let mut coupling = 0.0;
        for d in 0..2 {
            for (gi, wi) in g[d].iter().zip(&aux[d]) {
                prior += wi.abs().powf(ALPHA);
                coupling += (gi - wi).powi(2);
            }
        }
        data + weight * prior + 0.5 * beta * coupling
    }

    /// Exact minimiser over x of the surrogate (l2 prior when `aux` is None).
    fn solve_x(&self, weight: f64, beta: f64, aux: Option<&[Vec<f64>; 2]>) -> Vec<f64> {
        let two_s = 2.0 * self.data_scale;
        let yf = fft2_real(&self.y, self.w, self.h);
        let auxf = aux.map(|a| [fft2_real(&a[0], self.w, self.h), fft2_real(&a[1], self.w, self.h)]);
        let spec: Vec<Complex64> = (0..self.w * self.h)
            .map(|i| {
                let k = self.k_otf[i];
                let dd = self.d_otf[0][i].norm_sqr() + self.d_otf[1][i].norm_sqr();
                let (num, den) = match &auxf {
                    None => (k.conj() * yf[i] * two_s, k.norm_sqr() * two_s + 2.0 * weight * dd),
                    Some(a) => (
                        k.conj() * yf[i] * two_s + (self.d_otf[0][i].conj() * a[0][i] + self.d_otf[1][i].conj() * a[1][i]) * beta,
                        k.norm_sqr() * two_s + beta * dd,
                    ),
                };
                if den == 0.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    num / den
                }
            })
            .collect();
        ifft2_real(&spec, self.w, self.h)
    }
}

/// Deconvolves `y` with the known kernel `k`.
pub fn deconvolve(y: &Image, k: &BlurKernel, cfg: &DeconvConfig) -> Result<Image> {
    Ok(deconvolve_traced(y, k, cfg)?.0)
}

/// As [`deconvolve`], also returning the per-iteration HQS surrogate values.
pub fn deconvolve_traced(y: &Image, k: &BlurKernel, cfg: &DeconvConfig) -> Result<(Image, Vec<HqsStep>)> {
    cfg.validate()?;
    if y.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite input image".into()));
    }
    let pad = match cfg.boundary {
        Boundary::Reflect => k.size(),
        Boundary::Circular => 0,
    };
    let work = if pad > 0 { y.pad_reflect(pad) } else { y.clone() };
    let (w, h) = (work.width(), work.height());
    let problem = Problem {
        w,
        h,
        y: work.into_data(),
        k_otf: kernel_otf(k, w, h),
        d_otf: difference_otfs(w, h),
        data_scale: 1.0 / (2.0 * cfg.sigma * cfg.sigma),
    };
    let mut trace = Vec::new();
    let x = match cfg.prior {
        Prior::L2 => problem.solve_x(cfg.weight, 0.0, None),
        Prior::Hyperlap => {
            let mut x = problem.y.clone();
            let mut aux = gradients(&x, w, h);
            for t in 0..cfg.iters {
                let beta = cfg.weight * cfg.beta_start * cfg.beta_rate.powi(t as i32);
                let before = problem.surrogate(&x, &aux, cfg.weight, beta);
                let g = gradients(&x, w, h);
                for d in 0..2 {
                    aux[d] = g[d].iter().map(|&v| shrink(v, cfg.weight, beta, ALPHA)).collect();
                }
                x = if beta > 0.0 {
                    problem.solve_x(cfg.weight, beta, Some(&aux))
                } else {
                    problem.solve_x(0.0, 0.0, None)
                };
                let after = problem.surrogate(&x, &aux, cfg.weight, beta);
                trace.push(HqsStep { beta, before, after });
            }
            x
        }
    };
    let full = Image::new(w, h, x)?;
    let out = if pad > 0 {
        full.crop(pad, pad, y.width(), y.height())?
    } else {
        full
    };
    Ok((out, trace))
}
