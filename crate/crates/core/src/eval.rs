//! Error-ratio scoring and the end-to-end benchmark.
//!
//! A restoration is scored by `r = mse(est) / mse(oracle)`, where the oracle
//! deconvolves the same observation with the true kernel. Both MSEs ignore a
//! 50 pixel border and take the best integer alignment.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{add_gaussian_noise, convolve, BlurKernel, ConvMode, Image};
use crate::kernel_est::{estimate_kernel, EstimatorConfig};
use crate::net::NetworkWeights;
use crate::nonblind::{deconvolve, DeconvConfig};
use crate::restore::restore;
use crate::trainer::substream;

pub const BORDER: usize = 50;
pub const DEFAULT_MAX_SHIFT: usize = 10;
pub const SUCCESS_RATIO: f64 = 5.0;

const STREAM_NOISE: u64 = 0x6e6f_6973_65;

/// Smallest MSE over integer shifts `(dx, dy)` in `[-max_shift, max_shift]^2`,
/// comparing `est(r + dy, c + dx)` with `gt(r, c)` on the interior of `gt`.
/// Returns the MSE and the minimising `(dx, dy)`; ties keep the first shift in
/// row-major order.
pub fn aligned_mse(est: &Image, gt: &Image, max_shift: usize) -> Result<(f64, (isize, isize))> {
    if est.width() != gt.width() || est.height() != gt.height() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            est.width(),
            est.height(),
            gt.width(),
            gt.height()
        )));
    }
    let margin = BORDER + max_shift;
    let (w, h) = (gt.width(), gt.height());
    if w <= 2 * margin || h <= 2 * margin {
        return Err(Error::InvalidArgument(format!(
            "image {w}x{h} too small for a {BORDER} px border and {max_shift} px alignment"
        )));
    }
    let m = max_shift as isize;
    let n = ((w - 2 * BORDER) * (h - 2 * BORDER)) as f64;
    let mut best = (f64::INFINITY, (0, 0));
    for dy in -m..=m {
        for dx in -m..=m {
            let mut s = 0.0;
            for r in BORDER..h - BORDER {
                let er = (r as isize + dy) as usize;
                for c in BORDER..w - BORDER {
                    let d = est.get(er, (c as isize + dx) as usize) - gt.get(r, c);
                    s += d * d;
                }
            }
            let mse = s / n;
            if mse < best.0 {
                best = (mse, (dx, dy));
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mse: f64,
    pub oracle_mse: f64,
    pub r: f64,
    pub success: bool,
    /// Alignment `(dx, dy)` of the estimate.
    pub shift: (isize, isize),
}

/// Scores `est` against an already computed known-kernel restoration.
pub fn score(est: &Image, oracle: &Image, gt: &Image, max_shift: usize) -> Result<EvalResult> {
    let (mse, shift) = aligned_mse(est, gt, max_shift)?;
    let (oracle_mse, _) = aligned_mse(oracle, gt, max_shift)?;
    if oracle_mse == 0.0 {
        return Err(Error::DegenerateOracle);
    }
    let r = mse / oracle_mse;
    Ok(EvalResult {
        mse,
        oracle_mse,
        r,
        success: r <= SUCCESS_RATIO,
        shift,
    })
}

/// Error ratio of `est` against deconvolving `y` with the true kernel.
pub fn error_ratio(
    est: &Image,
    y: &Image,
    k_gt: &BlurKernel,
    gt: &Image,
    deconv: &DeconvConfig,
    max_shift: usize,
) -> Result<EvalResult> {
    let oracle = deconvolve(y, k_gt, deconv)?;
    score(est, &oracle, gt, max_shift)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub noise_sigma: f64,
    pub stride: usize,
    pub max_shift: usize,
    pub seed: u64,
    pub estimator: EstimatorConfig,
    pub deconv: DeconvConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.01,
            stride: 4,
            max_shift: DEFAULT_MAX_SHIFT,
            seed: 0,
            estimator: EstimatorConfig::default(),
            deconv: DeconvConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NeuralAvg,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NeuralAvg => "neural_avg",
        }
    }
}

/// One CSV row. A failed pair has `r = NaN`, `success = false` and a
/// non-empty `error`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub image: String,
    pub kernel: String,
    pub r: f64,
    pub success: bool,
    pub shift_x: isize,
    pub shift_y: isize,
    pub mse: f64,
    pub oracle_mse: f64,
    pub variant: Variant,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variant: Variant,
    pub pairs: usize,
    pub failures: usize,
    pub mean_r: f64,
    pub p95_r: f64,
    pub max_r: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub summaries: Vec<Summary>,
}

impl BenchmarkReport {
    pub fn summary(&self, variant: Variant) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<BenchmarkRow>> {
        let mut rd = csv::Reader::from_path(path.as_ref()).map_err(csv_err)?;
        rd.deserialize().map(|r| r.map_err(csv_err)).collect()
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Nearest-rank percentile of a sorted slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank - 1]
}

/// Mean, 95th percentile, max and success rate over the rows of `variant`.
/// Failed pairs count as unsuccessful and are excluded from the r statistics.
pub fn summarize(rows: &[BenchmarkRow], variant: Variant) -> Summary {
    let rows: Vec<&BenchmarkRow> = rows.iter().filter(|r| r.variant == variant).collect();
    let mut rs: Vec<f64> = rows.iter().filter(|r| r.error.is_empty()).map(|r| r.r).collect();
    rs.sort_by(f64::total_cmp);
    let (mean_r, p95_r, max_r) = if rs.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        (rs.iter().sum::<f64>() / rs.len() as f64, percentile(&rs, 95.0), rs[rs.len() - 1])
    };
    let successes = rows.iter().filter(|r| r.success).count();
    Summary {
        variant,
        pairs: rows.len(),
        failures: rows.len() - rs.len(),
        mean_r,
        p95_r,
        max_r,
        success_rate: if rows.is_empty() { f64::NAN } else { successes as f64 / rows.len() as f64 },
    }
}

/// Runs the benchmark with the network restorer.
pub fn run_benchmark(
    images: &[(String, Image)],
    kernels: &[(String, BlurKernel)],
    weights: &NetworkWeights,
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    run_benchmark_with(images, kernels, cfg, |y| restore(y, weights, cfg.stride))
}

/// Runs the benchmark with an arbitrary first stage producing the initial
/// estimate from the blurry observation.
pub fn run_benchmark_with<F>(
    images: &[(String, Image)],
    kernels: &[(String, BlurKernel)],
    cfg: &BenchmarkConfig,
    initial: F,
) -> Result<BenchmarkReport>
where
    F: Fn(&Image) -> Result<Image> + Sync,
{
    if images.is_empty() || kernels.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one image and one kernel".into()));
    }
    cfg.estimator.validate()?;
    cfg.deconv.validate()?;
    let pairs: Vec<(usize, usize)> = (0..images.len()).flat_map(|i| (0..kernels.len()).map(move |j| (i, j))).collect();
    let results: Vec<[Result<EvalResult>; 2]> = pairs
        .par_iter()
        .map(|&(i, j)| evaluate_pair(&images[i].1, &kernels[j].1, cfg, &initial, i as u64, j as u64))
        .collect();

    let mut rows = Vec::with_capacity(2 * pairs.len());
    for (&(i, j), res) in pairs.iter().zip(results) {
        for (variant, res) in [Variant::Full, Variant::NeuralAvg].into_iter().zip(res) {
            let (image, kernel) = (images[i].0.clone(), kernels[j].0.clone());
            rows.push(match res {
                Ok(e) => BenchmarkRow {
                    image,
                    kernel,
                    r: e.r,
                    success: e.success,
                    shift_x: e.shift.0,
                    shift_y: e.shift.1,
                    mse: e.mse,
                    oracle_mse: e.oracle_mse,
                    variant,
                    error: String::new(),
                },
                Err(err) => BenchmarkRow {
                    image,
                    kernel,
                    r: f64::NAN,
                    success: false,
                    shift_x: 0,
                    shift_y: 0,
                    mse: f64::NAN,
                    oracle_mse: f64::NAN,
                    variant,
                    error: err.to_string(),
                },
            });
        }
    }
    let summaries = vec![summarize(&rows, Variant::Full), summarize(&rows, Variant::NeuralAvg)];
    Ok(BenchmarkReport { rows, summaries })
}

fn evaluate_pair<F>(
    gt: &Image,
    k: &BlurKernel,
    cfg: &BenchmarkConfig,
    initial: &F,
    i: u64,
    j: u64,
) -> [Result<EvalResult>; 2]
where
    F: Fn(&Image) -> Result<Image> + Sync,
{
    let prepared = (|| {
        let mut rng = substream(cfg.seed, STREAM_NOISE, i, j);
        let y = add_gaussian_noise(&convolve(gt, k, ConvMode::SameReflect)?, cfg.noise_sigma, &mut rng)?;
        let oracle = deconvolve(&y, k, &cfg.deconv)?;
        let x_n = initial(&y)?;
        Ok::<_, Error>((y, oracle, x_n))
    })();
    let (y, oracle, x_n) = match prepared {
        Ok(v) => v,
        Err(e) => {
            let msg = e.to_string();
            return [Err(Error::InvalidArgument(msg.clone())), Err(Error::InvalidArgument(msg))];
        }
    };
    let full = estimate_kernel(&x_n, &y, &cfg.estimator)
        .and_then(|k_hat| deconvolve(&y, &k_hat, &cfg.deconv))
        .and_then(|x| score(&x, &oracle, gt, cfg.max_shift));
    let neural = score(&x_n, &oracle, gt, cfg.max_shift);
    [full, neural]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{dead_leaves, DeadLeavesConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| rng.random())
    }

    #[test]
    fn aligned_mse_finds_translation() {
        let gt = random_image(130, 125, 1);
        assert_eq!(aligned_mse(&gt, &gt, 10).unwrap(), (0.0, (0, 0)));
        // est(r + dy, c + dx) = gt(r, c) with (dx, dy) = (3, -2).
        let est = gt.shift_circular(-2, 3);
        assert_eq!(aligned_mse(&est, &gt, 10).unwrap(), (0.0, (3, -2)));
    }

    #[test]
    fn aligned_mse_matches_brute_force() {
        let gt = random_image(124, 122, 2);
        let est = random_image(124, 122, 3);
        let (mse, shift) = aligned_mse(&est, &gt, 4).unwrap();
        let mut best = f64::INFINITY;
        for dy in -4i64..=4 {
            for dx in -4i64..=4 {
                let mut vals = Vec::new();
                for r in 50..72 {
                    for c in 50..74 {
                        let e = est.get((r + dy) as usize, (c + dx) as usize);
                        vals.push((e - gt.get(r as usize, c as usize)).powi(2));
                    }
                }
                best = best.min(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        assert!((mse - best).abs() < 1e-14);
        let zero: f64 = (50..72)
            .flat_map(|r| (50..74).map(move |c| (r, c)))
            .map(|(r, c)| (est.get(r, c) - gt.get(r, c)).powi(2))
            .sum::<f64>()
            / (22.0 * 24.0);
        assert!(mse <= zero);
        assert!(shift.0.abs() <= 4 && shift.1.abs() <= 4);
    }

    #[test]
    fn aligned_mse_rejects_small_images() {
        let a = random_image(120, 200, 4);
        assert!(aligned_mse(&a, &a, 10).is_err());
        assert!(aligned_mse(&random_image(121, 121, 4), &random_image(121, 121, 4), 10).is_ok());
        assert!(aligned_mse(&a, &random_image(200, 120, 4), 0).is_err());
    }

    fn blurred_case(seed: u64) -> (Image, Image, BlurKernel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = dead_leaves(&mut rng, 128, 128, &DeadLeavesConfig::default());
        let k = crate::kernel_synth::sample_kernel(&mut rng, &Default::default(), 16).unwrap();
        let y = add_gaussian_noise(&convolve(&gt, &k, ConvMode::SameReflect).unwrap(), 0.01, &mut rng).unwrap();
        (gt, y, k)
    }

    #[test]
    fn oracle_itself_has_unit_ratio() {
        let (gt, y, k) = blurred_case(5);
        let cfg = DeconvConfig::default();
        let oracle = deconvolve(&y, &k, &cfg).unwrap();
        let e = error_ratio(&oracle, &y, &k, &gt, &cfg, 10).unwrap();
        assert_eq!(e.r, 1.0);
        assert!(e.success);
    }

    #[test]
    fn blurry_input_scores_worse_than_oracle() {
        let cfg = DeconvConfig::default();
        for seed in 6..9 {
            let (gt, y, k) = blurred_case(seed);
            let e = error_ratio(&y, &y, &k, &gt, &cfg, 10).unwrap();
            assert!(e.r >= 1.0, "r {}", e.r);
            assert_eq!(e.success, e.r <= 5.0);
        }
    }

    #[test]
    fn ratio_ignores_common_offset() {
        let gt = random_image(125, 125, 10);
        let est = random_image(125, 125, 11);
        let oracle = random_image(125, 125, 12);
        let a = score(&est, &oracle, &gt, 3).unwrap();
        let b = score(&est.map(|v| v + 0.25), &oracle.map(|v| v + 0.25), &gt.map(|v| v + 0.25), 3).unwrap();
        assert!((a.r - b.r).abs() < 1e-12 * a.r);
        assert_eq!(a.shift, b.shift);
    }

    #[test]
    fn degenerate_oracle_is_flagged() {
        let gt = random_image(125, 125, 13);
        assert!(matches!(score(&gt, &gt, &gt, 2), Err(Error::DegenerateOracle)));
    }

    #[test]
    fn delta_kernel_with_identity_first_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let images = vec![("leaves".to_string(), dead_leaves(&mut rng, 140, 140, &DeadLeavesConfig::default()))];
        let kernels = vec![("delta".to_string(), BlurKernel::delta(3))];
        let report = run_benchmark_with(&images, &kernels, &BenchmarkConfig::default(), |y| Ok(y.clone())).unwrap();
        assert_eq!(report.rows.len(), 2);
        let (full, neural) = (&report.rows[0], &report.rows[1]);
        assert_eq!((full.variant, neural.variant), (Variant::Full, Variant::NeuralAvg));
        // the oracle denoises, so the untouched input scores a little above 1
        assert!(neural.r >= 1.0 && neural.success, "r {}", neural.r);
        assert_eq!(report.summary(Variant::NeuralAvg).unwrap().success_rate, 1.0);
        assert!(full.r.is_finite() && full.r >= 1.0 && full.error.is_empty());
        assert_eq!(full.oracle_mse, neural.oracle_mse);
    }

    #[test]
    fn failures_are_recorded_and_summary_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let images = vec![
            ("big".to_string(), dead_leaves(&mut rng, 130, 130, &DeadLeavesConfig::default())),
            ("small".to_string(), dead_leaves(&mut rng, 60, 60, &DeadLeavesConfig::default())),
        ];
        let kernels = vec![("delta".to_string(), BlurKernel::delta(1)), ("box".to_string(), BlurKernel::normalized(3, vec![1.0; 9]).unwrap())];
        let report = run_benchmark_with(&images, &kernels, &BenchmarkConfig::default(), |y| Ok(y.clone())).unwrap();
        assert_eq!(report.rows.len(), 8);
        assert!(report.rows.iter().filter(|r| r.image == "small").all(|r| !r.error.is_empty() && !r.success));
        for variant in [Variant::Full, Variant::NeuralAvg] {
            let s = report.summary(variant).unwrap();
            let ok: Vec<f64> = report.rows.iter().filter(|r| r.variant == variant && r.error.is_empty()).map(|r| r.r).collect();
            assert_eq!(s.failures, 2);
            assert!((s.mean_r - ok.iter().sum::<f64>() / ok.len() as f64).abs() < 1e-12);
            assert_eq!(s.max_r, ok.iter().cloned().fold(f64::MIN, f64::max));
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        report.write_csv(&path).unwrap();
        let back = BenchmarkReport::read_csv(&path).unwrap();
        assert_eq!(back.len(), 8);
        assert_eq!(back[0].image, report.rows[0].image);
        assert_eq!(back[0].r, report.rows[0].r);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("image,kernel,r,success,shift_x,shift_y,mse,oracle_mse,variant,error"));
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&v, 100.0), 20.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }
}
