//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 2 on usage errors and 1 when a pipeline stage fails.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::bands::PATCH;
use crate::corpus::{dead_leaves, load_image_dir, load_kernel_dir, random_crops, DeadLeavesConfig};
use crate::error::{Error, Result};
use crate::eval::{run_benchmark, BenchmarkConfig, Variant};
use crate::image::{load_image, save_image, BlurKernel};
use crate::kernel_est::{estimate_kernel, EstimatorConfig};
use crate::kernel_synth::{batch_kernels, KernelSynthConfig};
use crate::net::{read_weights, ArchitectureConfig};
use crate::nonblind::{deconvolve, Boundary, DeconvConfig, Prior};
use crate::restore::restore;
use crate::trainer::{substream, train, write_sidecar, TrainConfig, TrainOutputs, TrainingCorpus};

#[derive(Parser, Debug)]
#[command(name = "blurnet", version, about = "Blind motion deblurring", arg_required_else_help = true)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample random motion-blur kernels into a directory of text files.
    GenKernels(GenKernelsArgs),
    /// Render a synthetic dead-leaves image corpus.
    GenImages(GenImagesArgs),
    /// Train a filter-prediction network.
    Train(TrainArgs),
    /// Deblur an image: initial estimate, kernel estimate, deconvolution.
    Deblur(DeblurArgs),
    /// Estimate the blur kernel between a sharp estimate and a blurry image.
    EstimateKernel(EstimateKernelArgs),
    /// Deconvolve an image with a known kernel.
    Deconv(DeconvArgs),
    /// Score the pipeline on every image/kernel pair of a corpus.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenKernelsArgs {
    #[arg(long)]
    n: usize,
    /// Fixed control grid size; by default the grids are used round-robin.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long, default_value_t = 25)]
    canvas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct GenImagesArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    val_images: PathBuf,
    /// Directory of kernel text files (split 90/10 into training and validation).
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    kernels: Option<PathBuf>,
    /// Sample kernels instead of reading them.
    #[arg(long)]
    synth: bool,
    /// Number of sampled training kernels; a multiple of the number of grid sizes.
    #[arg(long, default_value_t = 2001)]
    synth_kernels: usize,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long, default_value_t = 5000)]
    patches: usize,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    val_pairs: Option<usize>,
    #[arg(long)]
    val_every: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct DeconvOpts {
    #[arg(long, value_parser = parse_prior, default_value = "hyperlap")]
    prior: Prior,
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    #[arg(long)]
    prior_weight: Option<f64>,
    #[arg(long)]
    deconv_iters: Option<usize>,
    #[arg(long)]
    circular: bool,
}

impl DeconvOpts {
    fn config(&self) -> DeconvConfig {
        let base = DeconvConfig::default();
        DeconvConfig {
            prior: self.prior,
            sigma: self.sigma,
            weight: self.prior_weight.unwrap_or(base.weight),
            iters: self.deconv_iters.unwrap_or(base.iters),
            boundary: if self.circular { Boundary::Circular } else { Boundary::Reflect },
            ..base
        }
    }
}

fn parse_prior(s: &str) -> std::result::Result<Prior, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug, Clone)]
struct EstimatorOpts {
    #[arg(long, default_value_t = 51)]
    support: usize,
    /// Comma-separated relative regularisation weights.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    keep_fraction: Option<f64>,
}

impl EstimatorOpts {
    fn config(&self) -> EstimatorConfig {
        let base = EstimatorConfig::default();
        EstimatorConfig {
            support: self.support,
            lambdas: self.lambdas.clone().unwrap_or(base.lambdas.clone()),
            gradient_keep_fraction: self.keep_fraction.unwrap_or(base.gradient_keep_fraction),
            ..base
        }
    }
}

#[derive(Args, Debug)]
struct DeblurArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    /// Where to write the initial estimate (default: `<out>.xn.pgm`).
    #[arg(long)]
    save_initial: Option<PathBuf>,
    /// Where to write the kernel (default: `<out>.k.txt`).
    #[arg(long)]
    kernel_out: Option<PathBuf>,
    /// Stop after the initial estimate and write it to `--out`.
    #[arg(long)]
    initial_only: bool,
    #[command(flatten)]
    estimator: EstimatorOpts,
    #[command(flatten)]
    deconv: DeconvOpts,
}

#[derive(Args, Debug)]
struct EstimateKernelArgs {
    #[arg(long)]
    sharp: PathBuf,
    #[arg(long)]
    blurry: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    estimator: EstimatorOpts,
}

#[derive(Args, Debug)]
struct DeconvArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    kernel: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    deconv: DeconvOpts,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    kernels: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 10)]
    max_shift: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    estimator: EstimatorOpts,
    #[command(flatten)]
    deconv: DeconvOpts,
}

/// A failure tagged with the pipeline stage it came from.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.source)
    }
}

trait Stage<T> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage: name, source })
    }
}

type CliResult = std::result::Result<(), StageError>;

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::GenKernels(a) => gen_kernels(a),
        Command::GenImages(a) => gen_images(a),
        Command::Train(a) => train_cmd(a),
        Command::Deblur(a) => deblur(a),
        Command::EstimateKernel(a) => estimate_kernel_cmd(a),
        Command::Deconv(a) => deconv_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn sidecar(artefact: &Path, value: serde_json::Value) -> CliResult {
    let mut value = value;
    value["version"] = json!(env!("CARGO_PKG_VERSION"));
    write_sidecar(artefact, &value).map(|_| ()).stage("write")
}

fn gen_kernels(a: GenKernelsArgs) -> CliResult {
    let mut cfg = KernelSynthConfig {
        canvas: a.canvas,
        ..KernelSynthConfig::default()
    };
    if let Some(g) = a.grid {
        cfg.grid_sizes = vec![g];
    }
    cfg.validate().stage("kernel-synth")?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let kernels = batch_kernels(&mut rng, &cfg, a.n).stage("kernel-synth")?;
    fs::create_dir_all(&a.out_dir).map_err(Error::from).stage("write")?;
    for (i, k) in kernels.iter().enumerate() {
        k.save(a.out_dir.join(format!("k_{i:05}.txt"))).stage("write")?;
    }
    sidecar(&a.out_dir, json!({"command": "gen-kernels", "n": a.n, "seed": a.seed, "config": cfg}))
}

fn gen_images(a: GenImagesArgs) -> CliResult {
    let cfg = DeadLeavesConfig::default();
    fs::create_dir_all(&a.out_dir).map_err(Error::from).stage("write")?;
    for i in 0..a.n {
        let mut rng = substream(a.seed, 0x6c65_6176_6573, i as u64, 0);
        let img = dead_leaves(&mut rng, a.size, a.size, &cfg);
        save_image(&img, a.out_dir.join(format!("img_{i:04}.pgm"))).stage("write")?;
    }
    sidecar(
        &a.out_dir,
        json!({"command": "gen-images", "n": a.n, "size": a.size, "seed": a.seed, "config": cfg}),
    )
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let (mut tcfg, arch) = match a.preset {
        Preset::Desk => (TrainConfig::desk(), ArchitectureConfig::desk()),
        Preset::Full => (TrainConfig::full(), ArchitectureConfig::full()),
    };
    tcfg.seed = a.seed;
    if let Some(v) = a.iters {
        tcfg.total_iters = v;
    }
    if let Some(v) = a.lr {
        tcfg.lr = v;
    }
    if let Some(v) = a.batch {
        tcfg.batch_size = v;
    }
    if let Some(v) = a.val_pairs {
        tcfg.val_pairs = v;
    }
    if let Some(v) = a.val_every {
        tcfg.val_every = v;
    }
    let (train_kernels, val_kernels) = if a.synth {
        let kcfg = KernelSynthConfig::default();
        let mut rng = substream(a.seed, 0x6b65_726e, 0, 0);
        let train = batch_kernels(&mut rng, &kcfg, a.synth_kernels).stage("kernel-synth")?;
        let grids = kcfg.grid_sizes.len();
        let n_val = (a.synth_kernels / 10 / grids).max(1) * grids;
        let val = batch_kernels(&mut rng, &kcfg, n_val).stage("kernel-synth")?;
        (train, val)
    } else {
        let dir = a.kernels.as_ref().expect("clap enforces --kernels or --synth");
        let mut all: Vec<BlurKernel> = load_kernel_dir(dir).stage("load")?.into_iter().map(|(_, k)| k).collect();
        if all.len() < 2 {
            return Err(Error::InvalidArgument("need at least two kernels".into())).stage("load");
        }
        let n_val = (all.len() / 10).max(1);
        let val = all.split_off(all.len() - n_val);
        (all, val)
    };
    let kmax = train_kernels.iter().chain(&val_kernels).map(|k| k.size()).max().unwrap_or(1);
    let side = PATCH + kmax - 1;
    let imgs = |dir: &Path| -> Result<Vec<_>> { Ok(load_image_dir(dir)?.into_iter().map(|(_, im)| im).collect()) };
    let train_images = imgs(&a.images).stage("load")?;
    let val_images = imgs(&a.val_images).stage("load")?;
    let mut rng = substream(a.seed, 0x7061_7463_68, 0, 0);
    let train_patches = random_crops(&mut rng, &train_images, a.patches, side).stage("corpus")?;
    let val_patches = random_crops(&mut rng, &val_images, tcfg.val_pairs, side).stage("corpus")?;
    let corpus = TrainingCorpus::new(train_patches, val_patches, train_kernels, val_kernels).stage("corpus")?;
    let outputs = TrainOutputs {
        weights: a.out.clone(),
        history: a.log.clone(),
        checkpoint_dir: a.checkpoint_dir.clone(),
    };
    let report = train(&corpus, arch.clone(), &tcfg, &outputs).stage("train")?;
    println!(
        "best validation loss {:.6} at iteration {} (keep-DC baseline {:.6})",
        report.best_val_loss, report.best_iter, report.baseline_val_loss
    );
    sidecar(
        &a.out,
        json!({
            "command": "train",
            "images": a.images, "val_images": a.val_images, "kernels": a.kernels, "synth": a.synth,
            "synth_kernels": a.synth_kernels, "patches": a.patches,
            "architecture": arch, "config": tcfg,
            "best_iter": report.best_iter, "best_val_loss": report.best_val_loss,
            "baseline_val_loss": report.baseline_val_loss,
        }),
    )
}

fn deblur(a: DeblurArgs) -> CliResult {
    let y = load_image(&a.input).stage("load")?;
    let w = read_weights(&a.weights).stage("load")?;
    let x_n = restore(&y, &w, a.stride).stage("restore")?;
    let ecfg = a.estimator.config();
    let dcfg = a.deconv.config();
    let mut record = json!({
        "command": "deblur", "input": a.input, "weights": a.weights, "stride": a.stride,
        "initial_only": a.initial_only, "estimator": ecfg, "deconv": dcfg,
    });
    if a.initial_only {
        save_image(&x_n, &a.out).stage("write")?;
        return sidecar(&a.out, record);
    }
    let initial_path = a.save_initial.clone().unwrap_or_else(|| with_suffix(&a.out, ".xn.pgm"));
    save_image(&x_n, &initial_path).stage("write")?;
    let k = estimate_kernel(&x_n, &y, &ecfg).stage("estimate-kernel")?;
    let kernel_path = a.kernel_out.clone().unwrap_or_else(|| with_suffix(&a.out, ".k.txt"));
    k.save(&kernel_path).stage("write")?;
    let x = deconvolve(&y, &k, &dcfg).stage("deconv")?;
    save_image(&x, &a.out).stage("write")?;
    record["initial"] = json!(initial_path);
    record["kernel"] = json!(kernel_path);
    sidecar(&a.out, record)
}

fn estimate_kernel_cmd(a: EstimateKernelArgs) -> CliResult {
    let x_n = load_image(&a.sharp).stage("load")?;
    let y = load_image(&a.blurry).stage("load")?;
    let cfg = a.estimator.config();
    let k = estimate_kernel(&x_n, &y, &cfg).stage("estimate-kernel")?;
    k.save(&a.out).stage("write")?;
    sidecar(
        &a.out,
        json!({"command": "estimate-kernel", "sharp": a.sharp, "blurry": a.blurry, "estimator": cfg}),
    )
}

fn deconv_cmd(a: DeconvArgs) -> CliResult {
    let y = load_image(&a.input).stage("load")?;
    let k = BlurKernel::load(&a.kernel).stage("load")?;
    let cfg = a.deconv.config();
    let x = deconvolve(&y, &k, &cfg).stage("deconv")?;
    save_image(&x, &a.out).stage("write")?;
    sidecar(&a.out, json!({"command": "deconv", "input": a.input, "kernel": a.kernel, "deconv": cfg}))
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let images = load_image_dir(&a.images).stage("load")?;
    let kernels = load_kernel_dir(&a.kernels).stage("load")?;
    let w = read_weights(&a.weights).stage("load")?;
    let cfg = BenchmarkConfig {
        noise_sigma: a.noise,
        stride: a.stride,
        max_shift: a.max_shift,
        seed: a.seed,
        estimator: a.estimator.config(),
        deconv: a.deconv.config(),
    };
    let report = run_benchmark(&images, &kernels, &w, &cfg).stage("eval")?;
    report.write_csv(&a.out).stage("write")?;
    for variant in [Variant::Full, Variant::NeuralAvg] {
        let s = report.summary(variant).expect("both variants are summarised");
        println!(
            "{:<10} pairs {:>3}  failures {:>2}  mean r {:.3}  p95 r {:.3}  max r {:.3}  success {:.1}%",
            variant.name(),
            s.pairs,
            s.failures,
            s.mean_r,
            s.p95_r,
            s.max_r,
            100.0 * s.success_rate
        );
    }
    sidecar(
        &a.out,
        json!({
            "command": "eval", "images": a.images, "kernels": a.kernels, "weights": a.weights,
            "config": cfg, "summaries": report.summaries,
        }),
    )
}
