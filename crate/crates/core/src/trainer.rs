//! On-the-fly synthesis of training pairs and SGD with momentum.
//!
//! Every example is drawn from its own RNG stream, keyed by the run seed,
//! the batch index and the position inside the batch. The sequence of
//! batches therefore does not depend on how many threads synthesise them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bands::{encode_raw, fit_whitening, BAND_DIMS, OUT_PATCH, PATCH};
use crate::error::{Error, Result};
use crate::filter::{apply_filter, loss, FilterPrediction};
use crate::image::{add_gaussian_noise, convolve, BlurKernel, ConvMode, Image};
use crate::net::{write_weights, ArchitectureConfig, Dense, Gradients, NetworkWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub lr: f64,
    pub lr_drop_every: usize,
    pub lr_drop_factor: f64,
    pub drop_start: usize,
    pub total_iters: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub val_pairs: usize,
    /// Validation interval in iterations.
    pub val_every: usize,
    pub checkpoint_every: usize,
    /// Number of synthetic examples used to fit the band whitening.
    pub whitening_samples: usize,
    /// Batches synthesised ahead of the optimiser.
    pub prefetch: usize,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            batch_size: 512,
            momentum: 0.9,
            lr: 32.0,
            lr_drop_every: 100_000,
            lr_drop_factor: std::f64::consts::SQRT_2,
            drop_start: 800_000,
            total_iters: 1_800_000,
            noise_sigma: 0.01,
            seed: 0,
            val_pairs: 3000,
            val_every: 1000,
            checkpoint_every: 10_000,
            whitening_samples: 20_000,
            prefetch: 4,
        }
    }

    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            lr: 1.0,
            lr_drop_every: 2000,
            drop_start: 10_000,
            total_iters: 20_000,
            val_pairs: 512,
            val_every: 250,
            checkpoint_every: 2000,
            whitening_samples: 4096,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.batch_size > 0
            && self.lr > 0.0
            && self.lr_drop_every > 0
            && self.lr_drop_factor > 0.0
            && self.val_pairs > 0
            && self.val_every > 0
            && self.checkpoint_every > 0
            && self.prefetch > 0;
        if !positive || !(0.0..1.0).contains(&self.momentum) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid training config {self:?}")));
        }
        let need = 10 * BAND_DIMS.iter().max().expect("bands");
        if self.whitening_samples < need {
            return Err(Error::TooFewSamples {
                got: self.whitening_samples,
                need,
            });
        }
        Ok(())
    }
}

/// Step size for iteration `iter` (0-based): constant until `drop_start`,
/// then divided by `lr_drop_factor` once per completed `lr_drop_every`.
pub fn learning_rate(cfg: &TrainConfig, iter: usize) -> f64 {
    if iter < cfg.drop_start {
        return cfg.lr;
    }
    let drops = (iter - cfg.drop_start) / cfg.lr_drop_every;
    cfg.lr / cfg.lr_drop_factor.powi(drops as i32)
}

/// Sharp patches and kernels, split into disjoint training and validation sets.
#[derive(Debug, Clone)]
pub struct TrainingCorpus {
    pub train_patches: Vec<Image>,
    pub val_patches: Vec<Image>,
    pub train_kernels: Vec<BlurKernel>,
    pub val_kernels: Vec<BlurKernel>,
}

impl TrainingCorpus {
    pub fn new(
        train_patches: Vec<Image>,
        val_patches: Vec<Image>,
        train_kernels: Vec<BlurKernel>,
        val_kernels: Vec<BlurKernel>,
    ) -> Result<Self> {
        if train_patches.is_empty() || val_patches.is_empty() || train_kernels.is_empty() || val_kernels.is_empty() {
            return Err(Error::InvalidArgument("corpus sets must be non-empty".into()));
        }
        let kmax = train_kernels.iter().chain(&val_kernels).map(|k| k.size()).max().expect("non-empty");
        let side = PATCH + kmax - 1;
        if let Some(p) = train_patches
            .iter()
            .chain(&val_patches)
            .find(|p| p.width() < side || p.height() < side)
        {
            return Err(Error::InvalidArgument(format!(
                "sharp patch {}x{} smaller than {side}x{side}",
                p.width(),
                p.height()
            )));
        }
        Ok(Self {
            train_patches,
            val_patches,
            train_kernels,
            val_kernels,
        })
    }
}

/// A blurry 65x65 input and the 33x33 sharp target at its centre.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// One of the eight symmetries of the square: optional transpose, then
/// optional row and column flips.
pub fn dihedral(img: &Image, element: u8) -> Image {
    let n = img.width();
    debug_assert_eq!(n, img.height());
    let transpose = element & 4 != 0;
    let flip_r = element & 2 != 0;
    let flip_c = element & 1 != 0;
    Image::from_fn(n, n, |r, c| {
        let r = if flip_r { n - 1 - r } else { r };
        let c = if flip_c { n - 1 - c } else { c };
        if transpose {
            img.get(c, r)
        } else {
            img.get(r, c)
        }
    })
}

/// Blurs a square sharp crop of side `65 + s - 1` with `k` (valid mode) and
/// adds noise. The target is the sharp region aligned with the centred
/// kernel, i.e. `crop[c + 16 .. c + 49]` with `c = (s - 1) / 2`.
pub fn synthesize_pair<R: Rng + ?Sized>(crop: &Image, k: &BlurKernel, sigma: f64, rng: &mut R) -> Result<Example> {
    let s = k.size();
    let side = PATCH + s - 1;
    if crop.width() != side || crop.height() != side {
        return Err(Error::ShapeMismatch(format!(
            "crop must be {side}x{side}, got {}x{}",
            crop.width(),
            crop.height()
        )));
    }
    let blurred = convolve(crop, k, ConvMode::Valid)?;
    let input = add_gaussian_noise(&blurred, sigma, rng)?.into_data();
    let off = (s - 1) / 2 + (PATCH - OUT_PATCH) / 2;
    let target = crop.crop(off, off, OUT_PATCH, OUT_PATCH)?.into_data();
    Ok(Example { input, target })
}

/// Random crop of `sharp`, random dihedral transform, blur, noise.
pub fn make_example<R: Rng + ?Sized>(rng: &mut R, sharp: &Image, k: &BlurKernel, sigma: f64) -> Result<Example> {
    let side = PATCH + k.size() - 1;
    if sharp.width() < side || sharp.height() < side {
        return Err(Error::InvalidArgument(format!(
            "sharp patch {}x{} smaller than {side}x{side}",
            sharp.width(),
            sharp.height()
        )));
    }
    let row = rng.random_range(0..=sharp.height() - side);
    let col = rng.random_range(0..=sharp.width() - side);
    let crop = dihedral(&sharp.crop(row, col, side, side)?, rng.random_range(0..8));
    synthesize_pair(&crop, k, sigma, rng)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent RNG for item `(a, b)` of stream `tag` under `seed`.
pub fn substream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed ^ tag).wrapping_add(a)).wrapping_add(b)))
}

const STREAM_TRAIN: u64 = 0x7472_6169_6e;
const STREAM_VAL: u64 = 0x76_616c;
const STREAM_WHITEN: u64 = 0x7768_6974;
const STREAM_INIT: u64 = 0x696e_6974;

fn draw_example(stream: &mut ChaCha8Rng, patches: &[Image], kernels: &[BlurKernel], sigma: f64) -> Result<Example> {
    let p = &patches[stream.random_range(0..patches.len())];
    let k = &kernels[stream.random_range(0..kernels.len())];
    make_example(stream, p, k, sigma)
}

/// Training batch `index`; identical for any thread count.
pub fn training_batch(corpus: &TrainingCorpus, cfg: &TrainConfig, index: usize) -> Result<Vec<Example>> {
    (0..cfg.batch_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(cfg.seed, STREAM_TRAIN, index as u64, i as u64);
            draw_example(&mut rng, &corpus.train_patches, &corpus.train_kernels, cfg.noise_sigma)
        })
        .collect()
}

/// The fixed validation pairs (same pairs for every evaluation).
pub fn validation_set(corpus: &TrainingCorpus, cfg: &TrainConfig) -> Result<Vec<Example>> {
    (0..cfg.val_pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(cfg.seed, STREAM_VAL, 0, i as u64);
            draw_example(&mut rng, &corpus.val_patches, &corpus.val_kernels, cfg.noise_sigma)
        })
        .collect()
}

/// Mean loss of `w` over `examples`, evaluated in chunks.
pub fn evaluate(w: &NetworkWeights, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in examples.chunks(256) {
        let inputs: Vec<Vec<f64>> = chunk.iter().map(|e| e.input.clone()).collect();
        let targets: Vec<Vec<f64>> = chunk.iter().map(|e| e.target.clone()).collect();
        total += w.batch_loss(&inputs, &targets)? * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Loss of the keep-DC filter (output = local mean) over `examples`.
pub fn identity_baseline(examples: &[Example]) -> Result<f64> {
    let g = FilterPrediction::keep_dc(PATCH);
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|e| loss(&apply_filter(&g, &e.input)?, &e.target))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / examples.len() as f64)
}

/// Momentum buffers, one per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Dense>,
}

impl SgdState {
    pub fn new(w: &NetworkWeights) -> Self {
        Self {
            velocity: Gradients::zeros_like(w).layers,
        }
    }
}

/// Classical momentum: `v <- momentum v - lr g`, `w <- w + v`.
pub fn sgd_step(w: &mut NetworkWeights, grads: &Gradients, state: &mut SgdState, lr: f64, momentum: f64) -> Result<()> {
    if grads.layers.len() != w.layers.len() || state.velocity.len() != w.layers.len() {
        return Err(Error::ShapeMismatch("gradient / velocity layer count".into()));
    }
    let names = w.arch.layer_names();
    for (i, g) in grads.layers.iter().enumerate() {
        if g.weight.dim() != w.layers[i].weight.dim() || g.bias.len() != w.layers[i].bias.len() {
            return Err(Error::ShapeMismatch(format!("gradient shape for {}", names[i])));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(names[i].clone()));
        }
    }
    for ((layer, g), v) in w.layers.iter_mut().zip(&grads.layers).zip(&mut state.velocity) {
        v.weight.zip_mut_with(&g.weight, |v, &g| *v = momentum * *v - lr * g);
        v.bias.zip_mut_with(&g.bias, |v, &g| *v = momentum * *v - lr * g);
        layer.weight += &v.weight;
        layer.bias += &v.bias;
    }
    Ok(())
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

/// Where `train` writes its artefacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub weights: PathBuf,
    pub history: PathBuf,
    /// Directory for periodic checkpoints; `None` disables them.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub weights: NetworkWeights,
    pub best_iter: usize,
    pub best_val_loss: f64,
    pub baseline_val_loss: f64,
    pub history: Vec<HistoryRow>,
}

struct History {
    writer: csv::Writer<fs::File>,
    rows: Vec<HistoryRow>,
}

impl History {
    fn create(path: &Path) -> Result<Self> {
        let writer = csv::Writer::from_path(path).map_err(|e| Error::unreadable(path, e))?;
        Ok(Self {
            writer,
            rows: Vec::new(),
        })
    }

    fn push(&mut self, row: HistoryRow) -> Result<()> {
        self.writer.serialize(&row).map_err(csv_err)?;
        self.rows.push(row);
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Reads a history CSV written by [`train`].
pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<HistoryRow>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::unreadable(path, e))?;
    reader.deserialize().map(|r| r.map_err(csv_err)).collect()
}

/// Fits the band whitening on synthetic training inputs.
pub fn fit_input_whitening(corpus: &TrainingCorpus, cfg: &TrainConfig) -> Result<crate::bands::WhiteningTransform> {
    let encodings = (0..cfg.whitening_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(cfg.seed, STREAM_WHITEN, 0, i as u64);
            let e = draw_example(&mut rng, &corpus.train_patches, &corpus.train_kernels, cfg.noise_sigma)?;
            encode_raw(&e.input)
        })
        .collect::<Result<Vec<_>>>()?;
    fit_whitening(&encodings)
}

/// Trains a network from scratch.
///
/// Validation runs every `val_every` iterations and at the end; every new
/// validation minimum is written to `outputs.weights`, so the file always
/// holds the best weights seen so far. On divergence the run stops with an
/// error and the files from before the failure are left in place.
pub fn train(
    corpus: &TrainingCorpus,
    arch: ArchitectureConfig,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    if let Some(dir) = &outputs.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let whitening = fit_input_whitening(corpus, cfg)?;
    let init_seed = splitmix(cfg.seed ^ STREAM_INIT);
    let mut w = NetworkWeights::init(arch, whitening, init_seed)?;
    let val = validation_set(corpus, cfg)?;
    let baseline = identity_baseline(&val)?;

    let mut history = History::create(&outputs.history)?;
    let initial_val = evaluate(&w, &val)?;
    history.push(HistoryRow {
        iter: 0,
        lr: learning_rate(cfg, 0),
        train_loss: None,
        val_loss: Some(initial_val),
    })?;
    history.flush()?;
    write_weights(&w, &outputs.weights)?;
    let mut best = (0, initial_val, w.clone());

    let mut state = SgdState::new(&w);
    let outcome = std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Vec<Example>>>(cfg.prefetch);
        scope.spawn(move || {
            for b in 0..cfg.total_iters {
                if tx.send(training_batch(corpus, cfg, b)).is_err() {
                    break;
                }
            }
        });
        for iter in 1..=cfg.total_iters {
            let batch = rx.recv().expect("producer runs until total_iters")?;
            let inputs: Vec<Vec<f64>> = batch.iter().map(|e| e.input.clone()).collect();
            let targets: Vec<Vec<f64>> = batch.iter().map(|e| e.target.clone()).collect();
            let lr = learning_rate(cfg, iter - 1);
            let (train_loss, grads) = w.loss_and_gradients(&inputs, &targets)?;
            if !train_loss.is_finite() {
                history.push(HistoryRow {
                    iter,
                    lr,
                    train_loss: Some(train_loss),
                    val_loss: None,
                })?;
                return Err(Error::Diverged(iter));
            }
            sgd_step(&mut w, &grads, &mut state, lr, cfg.momentum)?;

            let validate = iter % cfg.val_every == 0 || iter == cfg.total_iters;
            let val_loss = if validate { Some(evaluate(&w, &val)?) } else { None };
            history.push(HistoryRow {
                iter,
                lr,
                train_loss: Some(train_loss),
                val_loss,
            })?;
            if let Some(v) = val_loss {
                if !v.is_finite() {
                    return Err(Error::Diverged(iter));
                }
                if v < best.1 {
                    best = (iter, v, w.clone());
                    write_weights(&w, &outputs.weights)?;
                }
                history.flush()?;
            }
            if let Some(dir) = &outputs.checkpoint_dir {
                if iter % cfg.checkpoint_every == 0 {
                    write_weights(&w, dir.join(format!("iter_{iter:08}.ndbw")))?;
                }
            }
        }
        Ok(())
    });
    history.flush()?;
    outcome?;

    let (best_iter, best_val_loss, weights) = best;
    Ok(TrainReport {
        weights,
        best_iter,
        best_val_loss,
        baseline_val_loss: baseline,
        history: history.rows,
    })
}

/// Writes `value` as pretty JSON next to an artefact, e.g. `out.ndbw.json`.
pub fn write_sidecar<T: Serialize>(artefact: &Path, value: &T) -> Result<PathBuf> {
    let mut name = artefact.as_os_str().to_owned();
    name.push(".json");
    let path = PathBuf::from(name);
    let mut f = fs::File::create(&path)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    f.write_all(b"\n")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::WhiteningTransform;
    use crate::corpus::{dead_leaves, random_crops, DeadLeavesConfig};
    use crate::kernel_synth::{batch_kernels, KernelSynthConfig};

    fn random_image(n: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(n, n, |_, _| rng.random())
    }

    fn small_kernel(seed: u64) -> BlurKernel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut taps: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
        taps[3] = 0.0;
        BlurKernel::normalized(5, taps).unwrap()
    }

    #[test]
    fn delta_kernel_without_noise_keeps_the_target() {
        let sharp = random_image(100, 1);
        let k = BlurKernel::delta(7);
        let e = make_example(&mut ChaCha8Rng::seed_from_u64(2), &sharp, &k, 0.0).unwrap();
        for r in 0..OUT_PATCH {
            for c in 0..OUT_PATCH {
                assert_eq!(e.input[(r + 16) * PATCH + c + 16], e.target[r * OUT_PATCH + c]);
            }
        }
    }

    #[test]
    fn example_is_reproducible() {
        let sharp = random_image(90, 3);
        let k = small_kernel(4);
        let a = make_example(&mut ChaCha8Rng::seed_from_u64(5), &sharp, &k, 0.01).unwrap();
        let b = make_example(&mut ChaCha8Rng::seed_from_u64(5), &sharp, &k, 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pair_alignment_matches_brute_force_convolution() {
        let k = small_kernel(6);
        let s = k.size();
        let crop = random_image(PATCH + s - 1, 7);
        let e = synthesize_pair(&crop, &k, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for i in 0..PATCH {
            for j in 0..PATCH {
                let mut acc = 0.0;
                for a in 0..s {
                    for b in 0..s {
                        acc += k.get(a, b) * crop.get(i + s - 1 - a, j + s - 1 - b);
                    }
                }
                assert!((acc - e.input[i * PATCH + j]).abs() < 1e-12);
            }
        }
        // The kernel centre (2, 2) sees crop[i + 2][j + 2]; the target is that
        // view restricted to the central 33x33.
        let c = (s - 1) / 2;
        for r in 0..OUT_PATCH {
            for col in 0..OUT_PATCH {
                assert_eq!(e.target[r * OUT_PATCH + col], crop.get(r + 16 + c, col + 16 + c));
            }
        }
    }

    #[test]
    fn undersized_patch_is_rejected() {
        let sharp = random_image(68, 1);
        assert!(make_example(&mut ChaCha8Rng::seed_from_u64(0), &sharp, &small_kernel(1), 0.0).is_err());
    }

    #[test]
    fn dihedral_group_has_eight_distinct_elements() {
        let img = random_image(5, 9);
        let all: Vec<Image> = (0..8).map(|e| dihedral(&img, e)).collect();
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_eq!(all[0], img);
    }

    fn tiny_weights() -> NetworkWeights {
        NetworkWeights::init(ArchitectureConfig::new(2, 2, 3, 1).unwrap(), WhiteningTransform::identity(), 3).unwrap()
    }

    fn constant_grads(w: &NetworkWeights, v: f64) -> Gradients {
        let mut g = Gradients::zeros_like(w);
        for l in &mut g.layers {
            l.weight.fill(v);
            l.bias.fill(v);
        }
        g
    }

    #[test]
    fn sgd_plain_step() {
        let mut w = tiny_weights();
        let before = w.clone();
        let g = constant_grads(&w, 0.25);
        let mut st = SgdState::new(&w);
        sgd_step(&mut w, &g, &mut st, 1.0, 0.0).unwrap();
        for (a, b) in w.layers.iter().zip(&before.layers) {
            assert!(a.weight.iter().zip(&b.weight).all(|(x, y)| (x - y + 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let mut w = tiny_weights();
        let before = w.clone();
        let g = constant_grads(&w, 1.0);
        let mut st = SgdState::new(&w);
        sgd_step(&mut w, &g, &mut st, 1.0, 0.9).unwrap();
        sgd_step(&mut w, &g, &mut st, 1.0, 0.9).unwrap();
        for (a, b) in w.layers.iter().zip(&before.layers) {
            assert!(a.bias.iter().zip(&b.bias).all(|(x, y)| ((x - y) + 2.9).abs() < 1e-12));
        }
        // Zero gradient: weights move by the decayed velocity only.
        let v_before = st.velocity[0].bias[0];
        let zero = Gradients::zeros_like(&w);
        sgd_step(&mut w, &zero, &mut st, 1.0, 0.9).unwrap();
        assert!((st.velocity[0].bias[0] - 0.9 * v_before).abs() < 1e-15);

        let mut frozen = tiny_weights();
        let copy = frozen.clone();
        let mut fresh = SgdState::new(&frozen);
        sgd_step(&mut frozen, &zero, &mut fresh, 1.0, 0.9).unwrap();
        assert_eq!(frozen, copy);
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let mut w = tiny_weights();
        let mut g = Gradients::zeros_like(&w);
        g.layers[5].bias[0] = f64::NAN;
        let mut st = SgdState::new(&w);
        match sgd_step(&mut w, &g, &mut st, 1.0, 0.9) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "fc1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::full();
        assert_eq!(learning_rate(&cfg, 0), 32.0);
        assert_eq!(learning_rate(&cfg, 799_999), 32.0);
        assert_eq!(learning_rate(&cfg, 899_999), 32.0);
        assert!((learning_rate(&cfg, 900_000) - 32.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((learning_rate(&cfg, 1_000_000) - 16.0).abs() < 1e-12);
    }

    fn tiny_corpus(seed: u64) -> TrainingCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DeadLeavesConfig::default();
        let train_imgs: Vec<Image> = (0..2).map(|_| dead_leaves(&mut rng, 120, 120, &cfg)).collect();
        let val_imgs = vec![dead_leaves(&mut rng, 120, 120, &cfg)];
        let kcfg = KernelSynthConfig {
            grid_sizes: vec![4, 8],
            canvas: 9,
            ..KernelSynthConfig::default()
        };
        let side = PATCH + 8;
        TrainingCorpus::new(
            random_crops(&mut rng, &train_imgs, 20, side).unwrap(),
            random_crops(&mut rng, &val_imgs, 8, side).unwrap(),
            batch_kernels(&mut rng, &kcfg, 10).unwrap(),
            batch_kernels(&mut rng, &kcfg, 4).unwrap(),
        )
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            lr: 0.5,
            total_iters: 6,
            drop_start: 2,
            lr_drop_every: 2,
            val_pairs: 8,
            val_every: 3,
            checkpoint_every: 3,
            whitening_samples: 2080,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn zero_iterations_return_initialisation() {
        let corpus = tiny_corpus(1);
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutputs {
            weights: dir.path().join("w.ndbw"),
            history: dir.path().join("h.csv"),
            checkpoint_dir: None,
        };
        let cfg = TrainConfig {
            total_iters: 0,
            ..tiny_config()
        };
        let arch = ArchitectureConfig::new(2, 2, 3, 1).unwrap();
        let rep = train(&corpus, arch, &cfg, &out).unwrap();
        assert_eq!(rep.best_iter, 0);
        // Zero output layer: the initial network is the keep-DC filter.
        assert!((rep.best_val_loss - rep.baseline_val_loss).abs() < 1e-12);
        let hist = read_history(&out.history).unwrap();
        assert_eq!(hist.len(), 1);
        assert_eq!(crate::net::read_weights(&out.weights).unwrap(), rep.weights);
    }

    #[test]
    fn short_run_logs_schedule_and_is_deterministic() {
        let corpus = tiny_corpus(2);
        let arch = ArchitectureConfig::new(2, 2, 3, 1).unwrap();
        let cfg = tiny_config();
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let out = TrainOutputs {
                weights: dir.path().join("w.ndbw"),
                history: dir.path().join("h.csv"),
                checkpoint_dir: Some(dir.path().join("ck")),
            };
            let rep = train(&corpus, arch, &cfg, &out).unwrap();
            assert!(dir.path().join("ck/iter_00000006.ndbw").exists());
            (rep, fs::read(&out.history).unwrap())
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(ha, hb);
        assert_eq!(a.weights, b.weights);
        let lrs: Vec<f64> = a.history.iter().map(|r| r.lr).collect();
        let r2 = 0.5 / 2f64.sqrt();
        assert_eq!(lrs, [0.5, 0.5, 0.5, 0.5, 0.5, r2, r2]);
        let vals: Vec<f64> = a.history.iter().filter_map(|r| r.val_loss).collect();
        assert_eq!(vals.len(), 3);
        assert!(vals.iter().all(|v| *v >= a.best_val_loss));
    }

    #[test]
    fn validation_is_frozen() {
        let corpus = tiny_corpus(3);
        let cfg = tiny_config();
        let v1 = validation_set(&corpus, &cfg).unwrap();
        let v2 = validation_set(&corpus, &cfg).unwrap();
        assert_eq!(v1, v2);
        let w = tiny_weights();
        assert_eq!(evaluate(&w, &v1).unwrap(), evaluate(&w, &v2).unwrap());
    }

    #[test]
    fn corpus_rejects_small_patches() {
        let c = tiny_corpus(4);
        let small = vec![random_image(70, 0)];
        assert!(TrainingCorpus::new(small, c.val_patches, c.train_kernels, c.val_kernels).is_err());
    }
}
