//! Whole-image restoration: run the network on overlapping 65x65 patches and
//! blend the 33x33 outputs with a Hann window.

use rayon::prelude::*;

use crate::bands::{OUT_PATCH, PATCH};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::net::NetworkWeights;

/// Largest stride for which neighbouring outputs still overlap.
pub const MAX_STRIDE: usize = 16;
const PAD: usize = PATCH / 2;
const CHUNK: usize = 64;
const CHUNKS_PER_ROUND: usize = 32;

/// Hann window of length `n` without the zero end points:
/// `w[i] = sin^2(pi (i + 1) / (n + 1))`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (std::f64::consts::PI * (i + 1) as f64 / (n + 1) as f64).sin().powi(2))
        .collect()
}

/// Patch origins `0, stride, 2 stride, ...` along an axis of padded length
/// `len`, with the last origin clamped so the final patch is flush with the end.
pub fn patch_anchors(len: usize, stride: usize) -> Vec<usize> {
    let last = len - PATCH;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().expect("at least one anchor") != last {
        out.push(last);
    }
    out
}

/// Restores `y` with `w` at the given patch stride.
pub fn restore(y: &Image, w: &NetworkWeights, stride: usize) -> Result<Image> {
    restore_with(y, stride, |patches| w.restore_patches(patches))
}

/// Restoration with an arbitrary batch patch restorer mapping 65x65 inputs
/// to 33x33 outputs.
pub fn restore_with<F>(y: &Image, stride: usize, restorer: F) -> Result<Image>
where
    F: Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>> + Sync,
{
    if !(1..=MAX_STRIDE).contains(&stride) {
        return Err(Error::InvalidArgument(format!("stride {stride} outside [1, {MAX_STRIDE}]")));
    }
    let (h, wd) = (y.height(), y.width());
    if h < OUT_PATCH || wd < OUT_PATCH {
        return Err(Error::InvalidArgument(format!("image {wd}x{h} smaller than {OUT_PATCH}x{OUT_PATCH}")));
    }
    let padded = y.pad_reflect(PAD);
    let rows = patch_anchors(padded.height(), stride);
    let cols = patch_anchors(padded.width(), stride);
    let anchors: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();

    let hann = hann_window(OUT_PATCH);
    let mut num = vec![0.0; h * wd];
    let mut den = vec![0.0; h * wd];
    let off = (PATCH - OUT_PATCH) / 2;
    for round in anchors.chunks(CHUNK * CHUNKS_PER_ROUND) {
        let outputs: Vec<Vec<Vec<f64>>> = round
            .par_chunks(CHUNK)
            .map(|chunk| {
                let patches: Vec<Vec<f64>> = chunk
                    .iter()
                    .map(|&(r, c)| padded.crop(r, c, PATCH, PATCH).map(Image::into_data))
                    .collect::<Result<_>>()?;
                restorer(&patches)
            })
            .collect::<Result<_>>()?;
        for (&(r, c), out) in round.iter().zip(outputs.iter().flatten()) {
            if out.len() != OUT_PATCH * OUT_PATCH {
                return Err(Error::ShapeMismatch(format!("restorer returned {} values", out.len())));
            }
            // Output pixel (i, j) sits at padded (r + off + i, c + off + j).
            for i in 0..OUT_PATCH {
                let Some(row) = (r + off + i).checked_sub(PAD).filter(|&v| v < h) else {
                    continue;
                };
                for j in 0..OUT_PATCH {
                    let Some(col) = (c + off + j).checked_sub(PAD).filter(|&v| v < wd) else {
                        continue;
                    };
                    let wt = hann[i] * hann[j];
                    num[row * wd + col] += wt * out[i * OUT_PATCH + j];
                    den[row * wd + col] += wt;
                }
            }
        }
    }
    assert!(den.iter().all(|&d| d > 0.0), "every pixel is covered for stride <= {MAX_STRIDE}");
    Image::new(wd, h, num.iter().zip(&den).map(|(n, d)| n / d).collect())
}
