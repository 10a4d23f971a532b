//! Two-dimensional DFTs on odd square grids, frequency indexing and
//! conjugate-symmetric half-plane packing.
//!
//! Conventions used throughout the crate:
//!
//! * The forward transform is unnormalised, `X[z] = sum_n x[n] e^{-2 pi i z.n / N}`,
//!   and the inverse carries the `1/N^2` factor.
//! * `n = (n1, n2)` is `(row, column)` with the origin at the top-left pixel.
//! * Frequencies `z = (z1, z2)` take values in `[-(N-1)/2, (N-1)/2]`; `z1` pairs
//!   with the row index.
//! * The canonical half plane holds `z` iff `z1 > 0`, or `z1 = 0` and `z2 > 0`,
//!   enumerated row-major (`z1` outer, ascending; `z2` inner, ascending).

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

pub use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};

/// A frequency index `(z1, z2)`.
pub type Freq = (i32, i32);

type PlanKey = (usize, bool);

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<Mutex<HashMap<PlanKey, Arc<dyn Fft<f64>>>>> = OnceLock::new();
    let plans = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = plans.lock().expect("fft plan cache poisoned");
    guard
        .entry((len, inverse))
        .or_insert_with(|| {
            let dir = if inverse {
                FftDirection::Inverse
            } else {
                FftDirection::Forward
            };
            FftPlanner::new().plan_fft(len, dir)
        })
        .clone()
}

/// In-place unnormalised 2-D FFT of a row-major `width`x`height` buffer.
pub fn fft2_inplace(buf: &mut [Complex64], width: usize, height: usize, inverse: bool) {
    assert_eq!(buf.len(), width * height);
    let rows = plan(width, inverse);
    let mut scratch = vec![Complex64::default(); rows.get_inplace_scratch_len()];
    for row in buf.chunks_exact_mut(width) {
        rows.process_with_scratch(row, &mut scratch);
    }
    let cols = plan(height, inverse);
    let mut column = vec![Complex64::default(); height];
    scratch.resize(cols.get_inplace_scratch_len(), Complex64::default());
    for c in 0..width {
        for r in 0..height {
            column[r] = buf[r * width + c];
        }
        cols.process_with_scratch(&mut column, &mut scratch);
        for r in 0..height {
            buf[r * width + c] = column[r];
        }
    }
}

/// Forward FFT of a real rectangular buffer.
pub fn fft2_real(data: &[f64], width: usize, height: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_inplace(&mut buf, width, height, false);
    buf
}

/// Inverse FFT returning the real part, normalised by `1/(width*height)`.
pub fn ifft2_real(spec: &[Complex64], width: usize, height: usize) -> Vec<f64> {
    let mut buf = spec.to_vec();
    fft2_inplace(&mut buf, width, height, true);
    let scale = 1.0 / (width * height) as f64;
    buf.iter().map(|c| c.re * scale).collect()
}

#[inline]
fn wrap(z: i32, n: usize) -> usize {
    z.rem_euclid(n as i32) as usize
}

/// The full complex DFT of an odd `N`x`N` real patch, stored in FFT order.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    size: usize,
    coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn from_fft_order(size: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        check_odd(size)?;
        if coeffs.len() != size * size {
            return Err(Error::ShapeMismatch(format!(
                "spectrum has {} coefficients, expected {}",
                coeffs.len(),
                size * size
            )));
        }
        Ok(Self { size, coeffs })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn half_width(&self) -> i32 {
        (self.size as i32 - 1) / 2
    }

    /// Coefficients in FFT storage order (`index = (z1 mod N) * N + (z2 mod N)`).
    pub fn as_fft_order(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn as_fft_order_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    #[inline]
    pub fn coeff(&self, z: Freq) -> Complex64 {
        self.coeffs[wrap(z.0, self.size) * self.size + wrap(z.1, self.size)]
    }

    #[inline]
    pub fn set_coeff(&mut self, z: Freq, v: Complex64) {
        let i = wrap(z.0, self.size) * self.size + wrap(z.1, self.size);
        self.coeffs[i] = v;
    }

    /// Largest `|X[z] - conj(X[-z])|` over the grid.
    pub fn symmetry_defect(&self) -> f64 {
        let h = self.half_width();
        let mut worst = 0.0f64;
        for z1 in -h..=h {
            for z2 in -h..=h {
                let d = (self.coeff((z1, z2)) - self.coeff((-z1, -z2)).conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }

    /// Pointwise product with another spectrum of the same size.
    pub fn multiply(&self, other: &Spectrum) -> Result<Spectrum> {
        if self.size != other.size {
            return Err(Error::ShapeMismatch(format!("{} vs {}", self.size, other.size)));
        }
        Ok(Spectrum {
            size: self.size,
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b).collect(),
        })
    }
}

fn check_odd(n: usize) -> Result<()> {
    if n % 2 == 0 {
        return Err(Error::InvalidArgument(format!("DFT size {n} must be odd")));
    }
    Ok(())
}

/// Unnormalised forward DFT of a row-major `N`x`N` patch, `N` odd.
pub fn dft2(patch: &[f64], n: usize) -> Result<Spectrum> {
    check_odd(n)?;
    if patch.len() != n * n {
        return Err(Error::ShapeMismatch(format!(
            "patch has {} values, expected {}",
            patch.len(),
            n * n
        )));
    }
    let mut coeffs = fft2_real(patch, n, n);
    // A real input has an exactly Hermitian spectrum; mirror the canonical
    // half so that floating-point noise does not break the symmetry.
    coeffs[0].im = 0.0;
    for z in half_plane_indices(n) {
        let v = coeffs[wrap(z.0, n) * n + wrap(z.1, n)];
        coeffs[wrap(-z.0, n) * n + wrap(-z.1, n)] = v.conj();
    }
    Ok(Spectrum { size: n, coeffs })
}

/// Inverse DFT; returns the real part and the largest discarded imaginary magnitude.
pub fn idft2(spec: &Spectrum) -> (Vec<f64>, f64) {
    let n = spec.size;
    let mut buf = spec.coeffs.clone();
    fft2_inplace(&mut buf, n, n, true);
    let scale = 1.0 / (n * n) as f64;
    let mut max_imag = 0.0f64;
    let out = buf
        .iter()
        .map(|c| {
            max_imag = max_imag.max((c.im * scale).abs());
            c.re * scale
        })
        .collect();
    (out, max_imag)
}

/// Canonical half-plane frequencies of an `N`x`N` grid, `(N^2 - 1) / 2` of them.
pub fn half_plane_indices(n: usize) -> Vec<Freq> {
    let h = (n as i32 - 1) / 2;
    let mut out = Vec::with_capacity((n * n - 1) / 2);
    for z1 in 0..=h {
        for z2 in -h..=h {
            if z1 > 0 || z2 > 0 {
                out.push((z1, z2));
            }
        }
    }
    out
}

/// Whether `z` is the canonical member of its conjugate pair.
#[inline]
pub fn is_canonical(z: Freq) -> bool {
    z.0 > 0 || (z.0 == 0 && z.1 > 0)
}

/// Frequencies with `lo < max(|z1|, |z2|) <= hi`, row-major. `lo = 0` also
/// includes the DC term so that a low-pass band is the full square.
pub fn band_indices(n: usize, lo: usize, hi: usize) -> Result<Vec<Freq>> {
    let h = (n.saturating_sub(1)) / 2;
    if lo >= hi || hi > h {
        return Err(Error::InvalidArgument(format!(
            "band ({lo}, {hi}] invalid for N = {n}"
        )));
    }
    let (lo, hi) = (lo as i32, hi as i32);
    let mut out = Vec::new();
    for z1 in -hi..=hi {
        for z2 in -hi..=hi {
            let m = z1.abs().max(z2.abs());
            if m <= hi && (m > lo || (lo == 0 && m == 0)) {
                out.push((z1, z2));
            }
        }
    }
    Ok(out)
}

/// The unique part of a conjugate-symmetric spectrum: a real DC term plus the
/// canonical half plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSpectrum {
    size: usize,
    dc: f64,
    half: Vec<Complex64>,
}

impl PackedSpectrum {
    pub fn new(size: usize, dc: f64, half: Vec<Complex64>) -> Result<Self> {
        check_odd(size)?;
        if half.len() != (size * size - 1) / 2 {
            return Err(Error::ShapeMismatch(format!(
                "half plane has {} values, expected {}",
                half.len(),
                (size * size - 1) / 2
            )));
        }
        Ok(Self { size, dc, half })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dc(&self) -> f64 {
        self.dc
    }

    pub fn half(&self) -> &[Complex64] {
        &self.half
    }

    pub fn half_mut(&mut self) -> &mut [Complex64] {
        &mut self.half
    }
}

/// Tolerance for [`pack`], relative to the largest coefficient magnitude.
pub const SYMMETRY_TOL: f64 = 1e-9;

pub fn pack(s: &Spectrum) -> Result<PackedSpectrum> {
    let scale = s.coeffs.iter().map(|c| c.norm()).fold(1.0f64, f64::max);
    let defect = s.symmetry_defect();
    if defect > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(defect));
    }
    let half = half_plane_indices(s.size).into_iter().map(|z| s.coeff(z)).collect();
    Ok(PackedSpectrum {
        size: s.size,
        dc: s.coeff((0, 0)).re,
        half,
    })
}

pub fn unpack(p: &PackedSpectrum) -> Spectrum {
    let n = p.size;
    let mut coeffs = vec![Complex64::default(); n * n];
    coeffs[0] = Complex64::new(p.dc, 0.0);
    for (z, &v) in half_plane_indices(n).iter().zip(&p.half) {
        coeffs[wrap(z.0, n) * n + wrap(z.1, n)] = v;
        coeffs[wrap(-z.0, n) * n + wrap(-z.1, n)] = v.conj();
    }
    Spectrum { size: n, coeffs }
}

/// Direct-summation DFT, `O(N^4)`. Test oracle only.
#[cfg(test)]
pub(crate) fn naive_dft2(patch: &[f64], n: usize) -> Vec<Complex64> {
    use std::f64::consts::PI;
    let h = (n as i32 - 1) / 2;
    let mut out = vec![Complex64::default(); n * n];
    for z1 in -h..=h {
        for z2 in -h..=h {
            let mut acc = Complex64::default();
            for n1 in 0..n {
                for n2 in 0..n {
                    let phase = -2.0 * PI * ((z1 as f64) * n1 as f64 + (z2 as f64) * n2 as f64) / n as f64;
                    acc += Complex64::from_polar(patch[n1 * n + n2], phase);
                }
            }
            out[wrap(z1, n) * n + wrap(z2, n)] = acc;
        }
    }
    out
}
