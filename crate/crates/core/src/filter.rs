//! Frequency-domain restoration filters: application to a 65x65 observation,
//! the per-pixel MSE loss, its gradient with respect to the packed filter, and
//! the Wiener filter as a reference predictor.

use crate::bands::{OUT_PATCH, PATCH};
use crate::error::{Error, Result};
use crate::fourier::{
    dft2, fft2_real, half_plane_indices, idft2, unpack, Complex64, Freq, PackedSpectrum, Spectrum,
};

/// Number of unique complex filter coefficients for a 65x65 patch.
pub const HALF_LEN: usize = (PATCH * PATCH - 1) / 2;
const OUT_OFFSET: usize = (PATCH - OUT_PATCH) / 2;

/// A restoration filter with its DC gain pinned to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPrediction {
    g: PackedSpectrum,
}

impl FilterPrediction {
    /// Builds a filter from its canonical half plane; DC is set to 1.
    pub fn from_half(size: usize, half: Vec<Complex64>) -> Result<Self> {
        Ok(Self {
            g: PackedSpectrum::new(size, 1.0, half)?,
        })
    }

    /// Builds a 65x65 filter from `2 * 2112` interleaved `(re, im)` values.
    pub fn from_interleaved(values: &[f64]) -> Result<Self> {
        if values.len() != 2 * HALF_LEN {
            return Err(Error::ShapeMismatch(format!(
                "expected {} filter values, got {}",
                2 * HALF_LEN,
                values.len()
            )));
        }
        let half = values.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
        Self::from_half(PATCH, half)
    }

    /// Keeps every frequency unchanged.
    pub fn identity(size: usize) -> Self {
        Self::from_half(size, vec![Complex64::new(1.0, 0.0); (size * size - 1) / 2]).expect("odd size")
    }

    /// Keeps only DC: the output is the patch mean.
    pub fn keep_dc(size: usize) -> Self {
        Self::from_half(size, vec![Complex64::default(); (size * size - 1) / 2]).expect("odd size")
    }

    pub fn packed(&self) -> &PackedSpectrum {
        &self.g
    }

    pub fn size(&self) -> usize {
        self.g.size()
    }

    pub fn full(&self) -> Spectrum {
        unpack(&self.g)
    }
}

fn crop_center(full: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(OUT_PATCH * OUT_PATCH);
    for r in OUT_OFFSET..OUT_OFFSET + OUT_PATCH {
        out.extend_from_slice(&full[r * PATCH + OUT_OFFSET..r * PATCH + OUT_OFFSET + OUT_PATCH]);
    }
    out
}

/// Filters a 65x65 observation and returns the central 33x33 restoration.
pub fn apply_filter(g: &FilterPrediction, y_patch: &[f64]) -> Result<Vec<f64>> {
    let y = dft2(y_patch, PATCH)?;
    apply_filter_spectrum(g, &y)
}

/// [`apply_filter`] given the observation's spectrum.
pub fn apply_filter_spectrum(g: &FilterPrediction, y: &Spectrum) -> Result<Vec<f64>> {
    if g.size() != PATCH || y.size() != PATCH {
        return Err(Error::ShapeMismatch("filter and patch must be 65x65".into()));
    }
    let (full, _imag) = idft2(&g.full().multiply(y)?);
    Ok(crop_center(&full))
}

/// Mean squared error over a 33x33 patch.
pub fn loss(estimate: &[f64], target: &[f64]) -> Result<f64> {
    let n = OUT_PATCH * OUT_PATCH;
    if estimate.len() != n || target.len() != n {
        return Err(Error::ShapeMismatch("loss expects 33x33 patches".into()));
    }
    Ok(estimate
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64)
}

/// Gradient of `loss(apply_filter(g, y), target)` with respect to the
/// interleaved `(re, im)` half-plane coefficients of `g`. DC is not a
/// parameter and receives no gradient.
///
/// With `R` the zero-padded pixel gradient and `F = DFT(R)`, each canonical
/// frequency gets `(dL/dre + i dL/dim) = (2 / N^2) conj(Y[z]) F[z]`; the factor
/// two collects the contribution of the conjugate partner.
pub fn filter_gradient(y: &Spectrum, estimate: &[f64], target: &[f64], out: &mut [f64]) -> Result<f64> {
    let l = loss(estimate, target)?;
    if out.len() != 2 * HALF_LEN || y.size() != PATCH {
        return Err(Error::ShapeMismatch("gradient buffer must hold 4224 values".into()));
    }
    let n_out = (OUT_PATCH * OUT_PATCH) as f64;
    let mut padded = vec![0.0; PATCH * PATCH];
    for r in 0..OUT_PATCH {
        for c in 0..OUT_PATCH {
            let i = r * OUT_PATCH + c;
            padded[(r + OUT_OFFSET) * PATCH + c + OUT_OFFSET] = 2.0 * (estimate[i] - target[i]) / n_out;
        }
    }
    let f = fft2_real(&padded, PATCH, PATCH);
    let scale = 2.0 / (PATCH * PATCH) as f64;
    for (k, z) in half_plane_indices(PATCH).into_iter().enumerate() {
        let idx = wrap(z.0) * PATCH + wrap(z.1);
        let gz = y.as_fft_order()[idx].conj() * f[idx] * scale;
        out[2 * k] = gz.re;
        out[2 * k + 1] = gz.im;
    }
    Ok(l)
}

#[inline]
fn wrap(z: i32) -> usize {
    z.rem_euclid(PATCH as i32) as usize
}

/// A Wiener filter together with the frequencies where it was undefined.
#[derive(Debug, Clone)]
pub struct WienerFilter {
    pub filter: FilterPrediction,
    /// Frequencies where both `|K|^2 S` and `sigma^2` vanished; set to zero.
    pub zeroed: Vec<Freq>,
}

/// `G[z] = conj(K[z]) S[z] / (|K[z]|^2 S[z] + sigma^2)`, with DC pinned to one.
///
/// `profile` is the per-sample power spectrum (DFT of the autocorrelation) in
/// FFT order, so it is directly comparable with the noise variance.
pub fn wiener_coefficients(k: &Spectrum, profile: &[f64], sigma: f64) -> Result<WienerFilter> {
    let n = k.size();
    if profile.len() != n * n {
        return Err(Error::ShapeMismatch("spectral profile size".into()));
    }
    if !(sigma >= 0.0) || profile.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::InvalidArgument("profile and sigma must be non-negative".into()));
    }
    let s2 = sigma * sigma;
    let mut zeroed = Vec::new();
    let mut half = Vec::with_capacity((n * n - 1) / 2);
    for z in half_plane_indices(n) {
        let kz = k.coeff(z);
        let s = profile[(z.0.rem_euclid(n as i32) as usize) * n + z.1.rem_euclid(n as i32) as usize];
        let den = kz.norm_sqr() * s + s2;
        if den == 0.0 {
            zeroed.push(z);
            half.push(Complex64::default());
        } else {
            half.push(kz.conj() * (s / den));
        }
    }
    Ok(WienerFilter {
        filter: FilterPrediction::from_half(n, half)?,
        zeroed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_patch(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * n).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn identity_filter_crops() {
        let y = random_patch(PATCH, 1);
        let out = apply_filter(&FilterPrediction::identity(PATCH), &y).unwrap();
        for (a, b) in out.iter().zip(crop_center(&y)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn keep_dc_gives_mean() {
        let y = random_patch(PATCH, 2);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let out = apply_filter(&FilterPrediction::keep_dc(PATCH), &y).unwrap();
        assert!(out.iter().all(|v| (v - mean).abs() < 1e-12));
    }

    #[test]
    fn phase_ramp_shifts() {
        use std::f64::consts::PI;
        let y = random_patch(PATCH, 3);
        let half = half_plane_indices(PATCH)
            .into_iter()
            .map(|z| Complex64::from_polar(1.0, -2.0 * PI * z.0 as f64 / PATCH as f64))
            .collect();
        let g = FilterPrediction::from_half(PATCH, half).unwrap();
        let out = apply_filter(&g, &y).unwrap();
        // Shift theorem: multiplying by e^{-2 pi i z1 / N} delays rows by one.
        let shifted: Vec<f64> = (0..PATCH * PATCH)
            .map(|i| y[((i / PATCH + PATCH - 1) % PATCH) * PATCH + i % PATCH])
            .collect();
        for (a, b) in out.iter().zip(crop_center(&shifted)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_values() {
        let x = random_patch(OUT_PATCH, 4);
        assert_eq!(loss(&x, &x).unwrap(), 0.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        assert!((loss(&shifted, &x).unwrap() - 0.01).abs() < 1e-15);
        let y = random_patch(OUT_PATCH, 5);
        let mut oracle = 0.0;
        for i in 0..x.len() {
            oracle += (x[i] - y[i]).powi(2);
        }
        assert!((loss(&x, &y).unwrap() - oracle / 1089.0).abs() < 1e-12);
        assert!(loss(&x[..10], &y[..10]).is_err());
    }

    #[test]
    fn filter_gradient_matches_finite_differences() {
        let y = random_patch(PATCH, 6);
        let target = random_patch(OUT_PATCH, 7);
        let ys = dft2(&y, PATCH).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vals: Vec<f64> = (0..2 * HALF_LEN).map(|_| rng.random::<f64>() * 0.2 - 0.1).collect();
        let g = FilterPrediction::from_interleaved(&vals).unwrap();
        let est = apply_filter_spectrum(&g, &ys).unwrap();
        let mut grad = vec![0.0; 2 * HALF_LEN];
        filter_gradient(&ys, &est, &target, &mut grad).unwrap();
        let h = 1e-4;
        for &i in &[0usize, 1, 17, 64, 65, 1000, 2111 * 2, 4223] {
            let mut p = vals.clone();
            p[i] += h;
            let lp = loss(&apply_filter_spectrum(&FilterPrediction::from_interleaved(&p).unwrap(), &ys).unwrap(), &target).unwrap();
            p[i] -= 2.0 * h;
            let lm = loss(&apply_filter_spectrum(&FilterPrediction::from_interleaved(&p).unwrap(), &ys).unwrap(), &target).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * fd.abs().max(1e-8), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn zero_residual_zero_gradient() {
        let y = random_patch(PATCH, 9);
        let ys = dft2(&y, PATCH).unwrap();
        let est = apply_filter_spectrum(&FilterPrediction::identity(PATCH), &ys).unwrap();
        let mut grad = vec![1.0; 2 * HALF_LEN];
        let l = filter_gradient(&ys, &est, &est, &mut grad).unwrap();
        assert_eq!(l, 0.0);
        assert!(grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wiener_inverse_and_denoiser() {
        let n = 9;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut kp = vec![0.0; n * n];
        kp[0] = 0.7;
        kp[1] = 0.2;
        kp[n] = 0.1;
        let k = dft2(&kp, n).unwrap();
        let s: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>() + 0.1).collect();
        let w = wiener_coefficients(&k, &s, 0.0).unwrap();
        let g = w.filter.full();
        for z in half_plane_indices(n) {
            assert!((g.coeff(z) * k.coeff(z) - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }

        let mut dp = vec![0.0; n * n];
        dp[0] = 1.0;
        let delta = dft2(&dp, n).unwrap();
        let w = wiener_coefficients(&delta, &s, 0.3).unwrap();
        for (i, z) in half_plane_indices(n).into_iter().enumerate() {
            let sz = s[(z.0.rem_euclid(9) as usize) * n + z.1.rem_euclid(9) as usize];
            let gz = w.filter.packed().half()[i];
            assert!((gz.re - sz / (sz + 0.09)).abs() < 1e-12 && gz.im.abs() < 1e-15);
            assert!(gz.re <= 1.0);
        }
    }

    #[test]
    fn wiener_flags_undefined_frequencies() {
        let n = 5;
        let k = Spectrum::from_fft_order(n, vec![Complex64::default(); n * n]).unwrap();
        let w = wiener_coefficients(&k, &vec![1.0; n * n], 0.0).unwrap();
        assert_eq!(w.zeroed.len(), 12);
        assert!(w.filter.packed().half().iter().all(|c| c.norm() == 0.0));
        assert!(wiener_coefficients(&k, &vec![1.0; n * n], -1.0).is_err());
    }
}
