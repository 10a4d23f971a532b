//! C ABI for blurnet.
//!
//! Images are row-major `double` buffers of `width * height` luminance
//! values; kernels are square row-major tap arrays. Every function returns a
//! [`BlurnetStatus`]; on failure [`blurnet_last_error`] describes the cause.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use blurnet::image::{BlurKernel, Image};
use blurnet::kernel_est::{estimate_kernel, EstimatorConfig};
use blurnet::kernel_synth::{sample_kernel, KernelSynthConfig};
use blurnet::net::{read_weights, NetworkWeights};
use blurnet::nonblind::{deconvolve, DeconvConfig, Prior};
use blurnet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlurnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    BadFormat = 4,
    ShapeMismatch = 5,
    InsufficientTexture = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// Prior used by [`blurnet_deconvolve`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlurnetPrior {
    L2 = 0,
    HyperLaplacian = 1,
}

/// Trained network weights.
pub struct BlurnetWeights {
    inner: NetworkWeights,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(BlurnetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnreadableFile { .. } | Error::Io(_) => BlurnetStatus::Io,
            Error::BadWeights(_) | Error::BadKernel(_) | Error::UnsupportedBitDepth(_) => BlurnetStatus::BadFormat,
            Error::ShapeMismatch(_) | Error::KernelTooLarge { .. } => BlurnetStatus::ShapeMismatch,
            Error::InsufficientTexture => BlurnetStatus::InsufficientTexture,
            Error::InvalidArgument(_) | Error::TooFewSamples { .. } => BlurnetStatus::InvalidArgument,
            _ => BlurnetStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: BlurnetStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BlurnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            BlurnetStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BlurnetStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(BlurnetStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `data` must point to `width * height` readable doubles.
unsafe fn read_image(data: *const f64, width: usize, height: usize, name: &str) -> Result<Image, Failure> {
    non_null(data, name)?;
    let n = width
        .checked_mul(height)
        .filter(|&n| n > 0)
        .ok_or_else(|| fail(BlurnetStatus::InvalidArgument, format!("{name}: empty or oversized image")))?;
    Ok(Image::new(width, height, std::slice::from_raw_parts(data, n).to_vec())?)
}

/// # Safety
/// `out` must point to `values.len()` writable doubles.
unsafe fn write_out(values: &[f64], out: *mut f64) {
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
}

/// # Safety
/// `out`, when non-null, must point to `capacity` writable doubles.
unsafe fn write_kernel(k: &BlurKernel, out: *mut f64, capacity: usize, out_size: *mut usize) -> Result<(), Failure> {
    non_null(out_size, "out_size")?;
    *out_size = k.size();
    let need = k.size() * k.size();
    if out.is_null() || capacity < need {
        return Err(fail(BlurnetStatus::BufferTooSmall, format!("kernel needs {need} doubles, got {capacity}")));
    }
    write_out(k.taps(), out);
    Ok(())
}

/// Message for the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn blurnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn blurnet_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version has no interior NUL"),
    };
    VERSION.as_ptr()
}

/// Loads a weights file. On success `*out` owns a handle that must be
/// released with [`blurnet_weights_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn blurnet_weights_load(path: *const c_char, out: *mut *mut BlurnetWeights) -> BlurnetStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(BlurnetStatus::InvalidArgument, "path is not UTF-8"))?;
        let inner = read_weights(path)?;
        *out = Box::into_raw(Box::new(BlurnetWeights { inner }));
        Ok(())
    })
}

/// Releases a handle from [`blurnet_weights_load`]. Null is ignored.
///
/// # Safety
/// `w` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn blurnet_weights_free(w: *mut BlurnetWeights) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Computes the initial estimate of a blurry image by patch-wise
/// restoration at the given stride (1..=16). `out` receives
/// `width * height` values.
///
/// # Safety
/// `y` and `out` must each hold `width * height` doubles; `w` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn blurnet_restore(
    w: *const BlurnetWeights,
    y: *const f64,
    width: usize,
    height: usize,
    stride: usize,
    out: *mut f64,
) -> BlurnetStatus {
    guard(|| {
        non_null(w, "weights")?;
        non_null(out, "out")?;
        let y = read_image(y, width, height, "y")?;
        let x = blurnet::restore::restore(&y, &(*w).inner, stride)?;
        write_out(x.data(), out);
        Ok(())
    })
}

/// Estimates the blur kernel relating a sharp estimate `x` to the blurry `y`
/// (both `width * height`) on a `support x support` canvas with default
/// settings. Writes `support^2` taps to `out` and the side length to `*out_size`.
///
/// # Safety
/// `x` and `y` must hold `width * height` doubles, `out` `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn blurnet_estimate_kernel(
    x: *const f64,
    y: *const f64,
    width: usize,
    height: usize,
    support: usize,
    out: *mut f64,
    capacity: usize,
    out_size: *mut usize,
) -> BlurnetStatus {
    guard(|| {
        let x = read_image(x, width, height, "x")?;
        let y = read_image(y, width, height, "y")?;
        let cfg = EstimatorConfig {
            support,
            ..EstimatorConfig::default()
        };
        let k = estimate_kernel(&x, &y, &cfg)?;
        write_kernel(&k, out, capacity, out_size)
    })
}

/// Deconvolves `y` with a known `ksize x ksize` kernel. `iters` is the number
/// of outer iterations for the hyper-Laplacian prior (ignored for L2).
///
/// # Safety
/// `y` and `out` must hold `width * height` doubles, `taps` `ksize^2` doubles.
#[no_mangle]
pub unsafe extern "C" fn blurnet_deconvolve(
    y: *const f64,
    width: usize,
    height: usize,
    taps: *const f64,
    ksize: usize,
    prior: BlurnetPrior,
    sigma: f64,
    weight: f64,
    iters: usize,
    out: *mut f64,
) -> BlurnetStatus {
    guard(|| {
        non_null(taps, "taps")?;
        non_null(out, "out")?;
        let y = read_image(y, width, height, "y")?;
        let n = ksize.checked_mul(ksize).unwrap_or(0);
        let k = BlurKernel::new(ksize, std::slice::from_raw_parts(taps, n).to_vec())?;
        let cfg = DeconvConfig {
            prior: match prior {
                BlurnetPrior::L2 => Prior::L2,
                BlurnetPrior::HyperLaplacian => Prior::Hyperlap,
            },
            sigma,
            weight,
            iters,
            ..DeconvConfig::default()
        };
        let x = deconvolve(&y, &k, &cfg)?;
        write_out(x.data(), out);
        Ok(())
    })
}

/// Samples a random motion-blur kernel on a `canvas x canvas` grid from a
/// spline through control points on a `grid x grid` lattice.
///
/// # Safety
/// `out` must hold `capacity` doubles and `out_size` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn blurnet_sample_kernel(
    seed: u64,
    grid: usize,
    canvas: usize,
    out: *mut f64,
    capacity: usize,
    out_size: *mut usize,
) -> BlurnetStatus {
    guard(|| {
        let cfg = KernelSynthConfig {
            grid_sizes: vec![grid],
            canvas,
            ..KernelSynthConfig::default()
        };
        cfg.validate()?;
        let k = sample_kernel(&mut ChaCha8Rng::seed_from_u64(seed), &cfg, grid)?;
        write_kernel(&k, out, capacity, out_size)
    })
}
