//! Random motion-blur kernels: a Catmull-Rom spline through a handful of
//! random control points, rasterised and given random per-pixel weights, then
//! shifted so its centre of mass sits on the canvas centre.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::BlurKernel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSynthConfig {
    pub grid_sizes: Vec<usize>,
    pub control_points: usize,
    pub value_mean: f64,
    pub value_std: f64,
    /// Odd side length of the output kernel.
    pub canvas: usize,
    pub max_retries: usize,
}

impl Default for KernelSynthConfig {
    fn default() -> Self {
        Self {
            grid_sizes: vec![8, 16, 24],
            control_points: 6,
            value_mean: 1.0,
            value_std: 0.5,
            canvas: 25,
            max_retries: 1000,
        }
    }
}

impl KernelSynthConfig {
    /// Defaults with a 51x51 canvas, used for evaluation kernels.
    pub fn evaluation() -> Self {
        Self {
            canvas: 51,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let max_grid = self.grid_sizes.iter().copied().max().unwrap_or(0);
        if self.grid_sizes.is_empty() || self.grid_sizes.contains(&0) {
            return Err(Error::InvalidArgument("grid sizes must be non-empty and positive".into()));
        }
        if self.canvas % 2 == 0 || self.canvas < max_grid + 1 {
            return Err(Error::InvalidArgument(format!(
                "canvas {} must be odd and at least {}",
                self.canvas,
                max_grid + 1
            )));
        }
        if self.control_points < 1 || !(self.value_std >= 0.0) {
            return Err(Error::InvalidArgument("bad control point count or value std".into()));
        }
        Ok(())
    }
}

/// Relative coverage above which a pixel counts as lying on the path.
const TOUCH_THRESHOLD: f64 = 0.05;
/// Maximum distance between consecutive spline samples, in pixels.
const MAX_STEP: f64 = 0.5;

fn catmull_rom(p0: (f64, f64), p1: (f64, f64), p2: (f64, f64), p3: (f64, f64), t: f64) -> (f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    let f = |a: f64, b: f64, c: f64, d: f64| {
        0.5 * (2.0 * b + (c - a) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (3.0 * b - a - 3.0 * c + d) * t3)
    };
    (f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1))
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Samples the interpolating spline densely enough that consecutive samples
/// are less than half a pixel apart.
pub fn spline_samples(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    if points.len() < 2 {
        return points.to_vec();
    }
    let n = points.len();
    let at = |i: isize| points[i.clamp(0, n as isize - 1) as usize];
    let mut out = vec![points[0]];
    for seg in 0..n - 1 {
        let i = seg as isize;
        let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
        let mut steps = ((dist(p0, p1) + dist(p1, p2) + dist(p2, p3)) * 2.0).ceil().max(1.0) as usize;
        loop {
            let seg_pts: Vec<(f64, f64)> = (1..=steps)
                .map(|s| catmull_rom(p0, p1, p2, p3, s as f64 / steps as f64))
                .collect();
            let mut prev = p1;
            let ok = seg_pts.iter().all(|&q| {
                let d = dist(prev, q);
                prev = q;
                d < MAX_STEP
            });
            if ok {
                out.extend(seg_pts);
                break;
            }
            steps *= 2;
        }
    }
    out
}

/// Rasterises a path with bilinear splats; returns the touched pixels as
/// `(row, col)` pairs in row-major order.
fn touched_pixels(samples: &[(f64, f64)]) -> Vec<(i64, i64)> {
    if samples.is_empty() {
        return Vec::new();
    }
    let min_r = samples.iter().map(|p| p.0.floor() as i64).min().expect("non-empty");
    let min_c = samples.iter().map(|p| p.1.floor() as i64).min().expect("non-empty");
    let max_r = samples.iter().map(|p| p.0.floor() as i64).max().expect("non-empty") + 1;
    let max_c = samples.iter().map(|p| p.1.floor() as i64).max().expect("non-empty") + 1;
    let h = (max_r - min_r + 1) as usize;
    let w = (max_c - min_c + 1) as usize;
    let mut cov = vec![0.0; h * w];
    for &(r, c) in samples {
        let (r0, c0) = (r.floor(), c.floor());
        let (fr, fc) = (r - r0, c - c0);
        let (ir, ic) = ((r0 as i64 - min_r) as usize, (c0 as i64 - min_c) as usize);
        cov[ir * w + ic] += (1.0 - fr) * (1.0 - fc);
        cov[ir * w + ic + 1] += (1.0 - fr) * fc;
        cov[(ir + 1) * w + ic] += fr * (1.0 - fc);
        cov[(ir + 1) * w + ic + 1] += fr * fc;
    }
    let peak = cov.iter().copied().fold(0.0, f64::max);
    let mut out = Vec::new();
    for (i, &v) in cov.iter().enumerate() {
        if v > TOUCH_THRESHOLD * peak {
            out.push(((i / w) as i64 + min_r, (i % w) as i64 + min_c));
        }
    }
    out
}

/// Builds a centred kernel from explicit control points. Returns `None` when
/// the random values leave no mass or the centred support leaves the canvas;
/// callers resample in that case.
pub fn kernel_from_control_points<R: Rng + ?Sized>(
    points: &[(f64, f64)],
    rng: &mut R,
    cfg: &KernelSynthConfig,
) -> Result<Option<BlurKernel>> {
    let normal = Normal::new(cfg.value_mean, cfg.value_std)
        .map_err(|e| Error::InvalidArgument(format!("value distribution: {e}")))?;
    let pixels = touched_pixels(&spline_samples(points));
    let values: Vec<f64> = pixels.iter().map(|_| normal.sample(rng).max(0.0)).collect();
    let mass: f64 = values.iter().sum();
    if mass <= 0.0 {
        return Ok(None);
    }
    let com_r = pixels.iter().zip(&values).map(|(p, v)| p.0 as f64 * v).sum::<f64>() / mass;
    let com_c = pixels.iter().zip(&values).map(|(p, v)| p.1 as f64 * v).sum::<f64>() / mass;
    let center = ((cfg.canvas - 1) / 2) as f64;
    let shift_r = (center - com_r).round() as i64;
    let shift_c = (center - com_c).round() as i64;
    let size = cfg.canvas as i64;
    let mut taps = vec![0.0; cfg.canvas * cfg.canvas];
    for (&(r, c), &v) in pixels.iter().zip(&values) {
        if v == 0.0 {
            continue;
        }
        let (rr, cc) = (r + shift_r, c + shift_c);
        if rr < 0 || cc < 0 || rr >= size || cc >= size {
            return Ok(None);
        }
        taps[(rr * size + cc) as usize] += v / mass;
    }
    // Renormalise to absorb rounding in the division above.
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    Ok(Some(BlurKernel::new(cfg.canvas, taps)?))
}

/// Draws one kernel from a `grid_size`x`grid_size` control grid.
pub fn sample_kernel<R: Rng + ?Sized>(rng: &mut R, cfg: &KernelSynthConfig, grid_size: usize) -> Result<BlurKernel> {
    cfg.validate()?;
    if !cfg.grid_sizes.contains(&grid_size) {
        return Err(Error::InvalidArgument(format!(
            "grid size {grid_size} not in {:?}",
            cfg.grid_sizes
        )));
    }
    let g = grid_size as f64;
    for _ in 0..cfg.max_retries {
        let points: Vec<(f64, f64)> = (0..cfg.control_points)
            .map(|_| (rng.random::<f64>() * g, rng.random::<f64>() * g))
            .collect();
        if let Some(k) = kernel_from_control_points(&points, rng, cfg)? {
            return Ok(k);
        }
    }
    Err(Error::SynthesisFailed(cfg.max_retries))
}

/// `n` kernels, an equal number from every grid size (round-robin order).
///
/// Each kernel gets its own seed drawn from `rng`, so the result does not
/// depend on the number of worker threads.
pub fn batch_kernels<R: RngCore + ?Sized>(rng: &mut R, cfg: &KernelSynthConfig, n: usize) -> Result<Vec<BlurKernel>> {
    cfg.validate()?;
    let sizes = &cfg.grid_sizes;
    if n % sizes.len() != 0 {
        return Err(Error::InvalidArgument(format!(
            "{n} kernels cannot be split evenly over {} grid sizes",
            sizes.len()
        )));
    }
    let seeds: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
    seeds
        .into_par_iter()
        .enumerate()
        .map(|(i, seed)| sample_kernel(&mut ChaCha8Rng::seed_from_u64(seed), cfg, sizes[i % sizes.len()]))
        .collect()
}

/// Integer shift that brings the centre of mass nearest the canvas centre.
pub fn recenter(k: &BlurKernel) -> BlurKernel {
    let s = k.size();
    let (cr, cc) = k.center_of_mass();
    let center = ((s - 1) / 2) as f64;
    let dr = (center - cr).round() as i64;
    let dc = (center - cc).round() as i64;
    if dr == 0 && dc == 0 {
        return k.clone();
    }
    let mut taps = vec![0.0; s * s];
    for r in 0..s as i64 {
        for c in 0..s as i64 {
            let v = k.get(r as usize, c as usize);
            let (rr, cc) = (r + dr, c + dc);
            if v != 0.0 && rr >= 0 && cc >= 0 && rr < s as i64 && cc < s as i64 {
                taps[(rr * s as i64 + cc) as usize] = v;
            }
        }
    }
    BlurKernel::normalized(s, taps).expect("shifted kernel keeps mass")
}

/// Side length of the bounding box of the non-zero taps.
pub fn support_extent(k: &BlurKernel) -> usize {
    let s = k.size();
    let (mut r0, mut r1, mut c0, mut c1) = (s, 0, s, 0);
    for r in 0..s {
        for c in 0..s {
            if k.get(r, c) > 0.0 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 > r1 {
        return 0;
    }
    (r1 - r0 + 1).max(c1 - c0 + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_invariants(k: &BlurKernel) {
        assert!(k.taps().iter().all(|&t| t >= 0.0));
        assert!((k.taps().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let (r, c) = k.center_of_mass();
        let center = ((k.size() - 1) / 2) as f64;
        assert!((r - center).abs() <= 0.5 + 1e-12 && (c - center).abs() <= 0.5 + 1e-12);
    }

    #[test]
    fn sampled_kernels_are_valid() {
        let cfg = KernelSynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &g in &[8, 16, 24] {
            for _ in 0..50 {
                check_invariants(&sample_kernel(&mut rng, &cfg, g).unwrap());
            }
        }
    }

    #[test]
    fn coincident_points_give_center_delta() {
        let cfg = KernelSynthConfig::default();
        let pts = vec![(3.0, 5.0); 6];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = loop {
            if let Some(k) = kernel_from_control_points(&pts, &mut rng, &cfg).unwrap() {
                break k;
            }
        };
        assert_eq!(k, BlurKernel::delta(25));
    }

    #[test]
    fn spline_samples_are_dense() {
        let pts = [(0.0, 0.0), (7.5, 1.0), (2.0, 6.0), (7.9, 7.9), (0.1, 4.0), (5.0, 0.0)];
        let s = spline_samples(&pts);
        assert!(s.windows(2).all(|w| dist(w[0], w[1]) < MAX_STEP));
        // Interpolating: every control point is on the path.
        for p in pts {
            assert!(s.iter().any(|&q| dist(p, q) < 1e-12));
        }
    }

    #[test]
    fn batch_split_and_determinism() {
        let cfg = KernelSynthConfig::default();
        let a = batch_kernels(&mut ChaCha8Rng::seed_from_u64(3), &cfg, 6).unwrap();
        let b = batch_kernels(&mut ChaCha8Rng::seed_from_u64(3), &cfg, 6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(batch_kernels(&mut ChaCha8Rng::seed_from_u64(3), &cfg, 7).is_err());
    }

    #[test]
    fn recentering_is_idempotent() {
        let cfg = KernelSynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let k = sample_kernel(&mut rng, &cfg, 16).unwrap();
            assert_eq!(recenter(&k), k);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = KernelSynthConfig::default();
        cfg.canvas = 24;
        assert!(cfg.validate().is_err());
        cfg.canvas = 23;
        assert!(cfg.validate().is_err());
        let cfg = KernelSynthConfig::default();
        assert!(sample_kernel(&mut ChaCha8Rng::seed_from_u64(0), &cfg, 10).is_err());
    }
}
