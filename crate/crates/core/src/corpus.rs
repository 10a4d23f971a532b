//! Sharp-image sources: image directories, and a procedural dead-leaves
//! generator used when no photographs are at hand.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, BlurKernel, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLeavesConfig {
    pub min_radius: f64,
    pub max_radius: f64,
    /// Upper bound on the number of discs drawn.
    pub max_leaves: usize,
    /// Per-axis supersampling factor used for anti-aliasing.
    pub supersample: usize,
    /// Peak amplitude of the linear shading inside each disc.
    pub shading: f64,
}

impl Default for DeadLeavesConfig {
    fn default() -> Self {
        Self {
            min_radius: 1.5,
            max_radius: 60.0,
            max_leaves: 200_000,
            supersample: 2,
            shading: 0.15,
        }
    }
}

/// Occluding discs with power-law radii (density proportional to r^-3),
/// drawn front to back until the canvas is covered. The result has the
/// scale-invariant edge statistics of natural photographs.
pub fn dead_leaves<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, cfg: &DeadLeavesConfig) -> Image {
    let ss = cfg.supersample.max(1);
    let (w, h) = (width * ss, height * ss);
    let mut canvas = vec![0.0; w * h];
    let mut covered = vec![false; w * h];
    let mut remaining = w * h;
    let (a, b) = (cfg.min_radius.powi(-2), cfg.max_radius.powi(-2));
    for _ in 0..cfg.max_leaves {
        if remaining == 0 {
            break;
        }
        let r = (a - rng.random::<f64>() * (a - b)).powf(-0.5) * ss as f64;
        let cy = rng.random::<f64>() * h as f64;
        let cx = rng.random::<f64>() * w as f64;
        let base = rng.random_range(0.05..0.95);
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let amp = cfg.shading * rng.random::<f64>();
        let (gy, gx) = (theta.sin() * amp / r, theta.cos() * amp / r);
        let r0 = (cy - r).floor().max(0.0) as usize;
        let r1 = ((cy + r).ceil() as usize).min(h);
        let c0 = (cx - r).floor().max(0.0) as usize;
        let c1 = ((cx + r).ceil() as usize).min(w);
        for row in r0..r1 {
            let dy = row as f64 + 0.5 - cy;
            for col in c0..c1 {
                let i = row * w + col;
                let dx = col as f64 + 0.5 - cx;
                if covered[i] || dx * dx + dy * dy > r * r {
                    continue;
                }
                covered[i] = true;
                remaining -= 1;
                canvas[i] = (base + gy * dy + gx * dx).clamp(0.0, 1.0);
            }
        }
    }
    let fill = 0.5;
    let norm = (ss * ss) as f64;
    Image::from_fn(width, height, |r, c| {
        let mut acc = 0.0;
        for dr in 0..ss {
            for dc in 0..ss {
                let i = (r * ss + dr) * w + c * ss + dc;
                acc += if covered[i] { canvas[i] } else { fill };
            }
        }
        acc / norm
    })
}

/// Uniformly placed square crops, `n` in total, drawn from random images.
pub fn random_crops<R: Rng + ?Sized>(rng: &mut R, images: &[Image], n: usize, side: usize) -> Result<Vec<Image>> {
    let usable: Vec<&Image> = images.iter().filter(|im| im.width() >= side && im.height() >= side).collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument(format!("no image is at least {side}x{side}")));
    }
    (0..n)
        .map(|_| {
            let im = usable[rng.random_range(0..usable.len())];
            let row = rng.random_range(0..=im.height() - side);
            let col = rng.random_range(0..=im.width() - side);
            im.crop(row, col, side, side)
        })
        .collect()
}

fn sorted_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::unreadable(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| exts.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Every readable image in `dir`, sorted by file name.
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, Image)>> {
    let dir = dir.as_ref();
    let files = sorted_files(dir, &["png", "pgm", "ppm", "pnm"])?;
    if files.is_empty() {
        return Err(Error::unreadable(dir, "no images found"));
    }
    files
        .into_iter()
        .map(|p| {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            Ok((name, load_image(&p)?))
        })
        .collect()
}

/// Every `*.txt` kernel in `dir`, sorted by file name.
pub fn load_kernel_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, BlurKernel)>> {
    let dir = dir.as_ref();
    let files = sorted_files(dir, &["txt"])?;
    if files.is_empty() {
        return Err(Error::unreadable(dir, "no kernels found"));
    }
    files
        .into_iter()
        .map(|p| {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("kernel").to_string();
            Ok((name, BlurKernel::load(&p)?))
        })
        .collect()
}
