//! Grayscale images, blur kernels, file I/O and direct spatial convolution.
//!
//! Images are single-channel, row-major `f64` buffers with intensities nominally
//! in `[0, 1]`. Colour inputs are reduced to luminance on load.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use image::{DynamicImage, ImageError};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A single-channel image stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "image data has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Copies the `w`x`h` window whose top-left corner is at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, w: usize, h: usize) -> Result<Image> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {}x{} at ({},{}) exceeds {}x{} image",
                w, h, row, col, self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for r in row..row + h {
            let start = r * self.width + col;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Ok(Image {
            width: w,
            height: h,
            data,
        })
    }

    /// Pads by `pad` pixels on every side using symmetric reflection
    /// (the edge pixel is repeated: `-1 -> 0`, `-2 -> 1`).
    pub fn pad_reflect(&self, pad: usize) -> Image {
        let w = self.width + 2 * pad;
        let h = self.height + 2 * pad;
        Image::from_fn(w, h, |r, c| {
            let sr = reflect_index(r as isize - pad as isize, self.height);
            let sc = reflect_index(c as isize - pad as isize, self.width);
            self.get(sr, sc)
        })
    }

    /// Circular shift: output(r, c) = input(r - dy, c - dx) modulo the size.
    pub fn shift_circular(&self, dy: isize, dx: isize) -> Image {
        let h = self.height as isize;
        let w = self.width as isize;
        Image::from_fn(self.width, self.height, |r, c| {
            let sr = (r as isize - dy).rem_euclid(h) as usize;
            let sc = (c as isize - dx).rem_euclid(w) as usize;
            self.get(sr, sc)
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mean squared difference against an image of the same size.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(s / self.data.len() as f64)
    }
}

/// Maps an arbitrary index into `[0, n)` by symmetric reflection.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// A square, odd-sized, non-negative, unit-sum blur kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    size: usize,
    taps: Vec<f64>,
}

impl BlurKernel {
    /// Validates a kernel: odd size, taps non-negative and summing to 1 within 1e-9.
    pub fn new(size: usize, taps: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || size == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {size} must be odd")));
        }
        if taps.len() != size * size {
            return Err(Error::ShapeMismatch(format!(
                "kernel has {} taps, expected {}",
                taps.len(),
                size * size
            )));
        }
        if taps.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
            return Err(Error::InvalidArgument("kernel taps must be finite and >= 0".into()));
        }
        let sum: f64 = taps.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("kernel sums to {sum}, not 1")));
        }
        Ok(Self { size, taps })
    }

    /// Clips negative taps to zero and rescales to unit sum.
    pub fn normalized(size: usize, mut taps: Vec<f64>) -> Result<Self> {
        for t in taps.iter_mut() {
            if !t.is_finite() {
                return Err(Error::InvalidArgument("kernel taps must be finite".into()));
            }
            if *t < 0.0 {
                *t = 0.0;
            }
        }
        let sum: f64 = taps.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidArgument("kernel has zero mass".into()));
        }
        taps.iter_mut().for_each(|t| *t /= sum);
        Self::new(size, taps)
    }

    /// Unit impulse at the centre of a `size`x`size` canvas.
    pub fn delta(size: usize) -> Self {
        let mut taps = vec![0.0; size * size];
        taps[(size / 2) * size + size / 2] = 1.0;
        Self { size, taps }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.taps[row * self.size + col]
    }

    /// Value-weighted centre of mass as `(row, col)`.
    pub fn center_of_mass(&self) -> (f64, f64) {
        let mut r = 0.0;
        let mut c = 0.0;
        for (i, &t) in self.taps.iter().enumerate() {
            r += t * (i / self.size) as f64;
            c += t * (i % self.size) as f64;
        }
        (r, c)
    }

    /// Embeds the kernel centred in a larger odd canvas.
    pub fn embed(&self, size: usize) -> Result<Self> {
        if size < self.size || size % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot embed {} kernel into {} canvas",
                self.size, size
            )));
        }
        let off = (size - self.size) / 2;
        let mut taps = vec![0.0; size * size];
        for r in 0..self.size {
            for c in 0..self.size {
                taps[(r + off) * size + c + off] = self.get(r, c);
            }
        }
        Ok(Self { size, taps })
    }

    /// Kernel rotated by 180 degrees.
    pub fn flipped(&self) -> Self {
        Self {
            size: self.size,
            taps: self.taps.iter().rev().copied().collect(),
        }
    }

    /// Text format: a `W H` line followed by `W*H` whitespace-separated reals.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.size, self.size);
        for r in 0..self.size {
            let row: Vec<String> = (0..self.size)
                .map(|c| format!("{:.17e}", self.get(r, c)))
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut next_dim = |name: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::BadKernel(format!("missing {name}")))?
                .parse::<usize>()
                .map_err(|e| Error::BadKernel(format!("bad {name}: {e}")))
        };
        let w = next_dim("width")?;
        let h = next_dim("height")?;
        if w != h || w % 2 == 0 {
            return Err(Error::BadKernel(format!("kernel must be square and odd, got {w}x{h}")));
        }
        let taps: Vec<f64> = tokens
            .map(|t| t.parse::<f64>().map_err(|e| Error::BadKernel(format!("bad tap {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if taps.len() != w * h {
            return Err(Error::BadKernel(format!("expected {} taps, found {}", w * h, taps.len())));
        }
        if taps.iter().any(|&t| t < 0.0) {
            return Err(Error::BadKernel("negative tap".into()));
        }
        Self::normalized(w, taps).map_err(|e| Error::BadKernel(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::unreadable(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Boundary handling for [`convolve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Only output pixels whose kernel footprint lies fully inside the image.
    Valid,
    /// Symmetric-reflection padding, output cropped to the input size.
    SameReflect,
}

/// Discrete 2-D convolution `(x * k)[n] = sum_m k[m] x[n - m]`.
///
/// Zero taps are skipped, so sparse motion kernels are cheap.
pub fn convolve(x: &Image, k: &BlurKernel, mode: ConvMode) -> Result<Image> {
    let s = k.size();
    match mode {
        ConvMode::Valid => {
            if x.width() < s || x.height() < s {
                return Err(Error::KernelTooLarge {
                    kernel: s,
                    width: x.width(),
                    height: x.height(),
                });
            }
            Ok(convolve_valid(x, k))
        }
        ConvMode::SameReflect => {
            let padded = x.pad_reflect(s / 2);
            Ok(convolve_valid(&padded, k))
        }
    }
}

fn convolve_valid(x: &Image, k: &BlurKernel) -> Image {
    let s = k.size();
    let ow = x.width() - s + 1;
    let oh = x.height() - s + 1;
    let mut out = vec![0.0; ow * oh];
    let xw = x.width();
    let xd = x.data();
    for a in 0..s {
        for b in 0..s {
            let t = k.get(a, b);
            if t == 0.0 {
                continue;
            }
            // out[i][j] += t * x[i + s-1-a][j + s-1-b]
            let dr = s - 1 - a;
            let dc = s - 1 - b;
            for i in 0..oh {
                let src = &xd[(i + dr) * xw + dc..(i + dr) * xw + dc + ow];
                let dst = &mut out[i * ow..(i + 1) * ow];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += t * v;
                }
            }
        }
    }
    Image {
        width: ow,
        height: oh,
        data: out,
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every pixel. Values are not clipped.
pub fn add_gaussian_noise<R: Rng + ?Sized>(x: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    Ok(Image {
        width: x.width,
        height: x.height,
        data: x.data.iter().map(|&v| v + normal.sample(rng)).collect(),
    })
}

/// Loads a PGM (P5, 8/16-bit) or PNG image as luminance in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::unreadable(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| match e {
        ImageError::Unsupported(u) => Error::unreadable(path, format!("unsupported format: {u}")),
        other => Error::unreadable(path, other),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLumaA8(b) => b.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        DynamicImage::ImageLumaA16(b) => b.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
        DynamicImage::ImageRgb8(b) => b.pixels().map(|p| luminance(p.0.map(|v| v as f64 / 255.0))).collect(),
        DynamicImage::ImageRgba8(b) => b
            .pixels()
            .map(|p| luminance([p.0[0], p.0[1], p.0[2]].map(|v| v as f64 / 255.0)))
            .collect(),
        DynamicImage::ImageRgb16(b) => b.pixels().map(|p| luminance(p.0.map(|v| v as f64 / 65535.0))).collect(),
        DynamicImage::ImageRgba16(b) => b
            .pixels()
            .map(|p| luminance([p.0[0], p.0[1], p.0[2]].map(|v| v as f64 / 65535.0)))
            .collect(),
        DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_) => {
            return Err(Error::UnsupportedBitDepth(32))
        }
        _ => return Err(Error::unreadable(path, "unsupported pixel layout")),
    };
    Image::new(w, h, data)
}

fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Writes a binary 16-bit PGM (P5, maxval 65535). Values are clamped to `[0, 1]`.
pub fn save_pgm16(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(img.data.len() * 2 + 32);
    write!(buf, "P5\n{} {}\n65535\n", img.width, img.height)?;
    for &v in &img.data {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Saves by extension: `.png` as 16-bit grayscale PNG, anything else as 16-bit PGM.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("png"))
        .unwrap_or(false);
    if !is_png {
        return save_pgm16(img, path);
    }
    let raw: Vec<u16> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| Error::ShapeMismatch("png buffer".into()))?;
    buf.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(())
}
