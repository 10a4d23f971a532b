//! The feed-forward filter predictor.
//!
//! Layer 1 has three independent groups, each seeing one pair of adjacent
//! bands: `(L, B2)`, `(B2, B1)`, `(B1, H)`. Layer 2 has two groups over the
//! adjacent layer-1 group pairs `(g0, g1)` and `(g1, g2)`. Then come `fc_depth`
//! fully connected ReLU layers and a linear output of `2 * 2112` values read as
//! the interleaved half plane of the restoration filter.
//!
//! Because the bands are stored contiguously in `L, B2, B1, H` order, every
//! group reads a contiguous column range of its input.

mod io;

pub use io::{read_weights, write_weights, WEIGHTS_MAGIC};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bands::{
    encode_with_spectrum, BandEncoding, WhiteningTransform, BAND_DIMS, BAND_OFFSETS, ENCODING_DIM, NUM_BANDS,
    PATCH,
};
use crate::error::{Error, Result};
use crate::filter::{apply_filter_spectrum, filter_gradient, FilterPrediction, HALF_LEN};
use crate::fourier::{dft2, Spectrum};

/// Layer widths. The output length is fixed by the 65x65 patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub group1_width: usize,
    pub group2_width: usize,
    pub fc_width: usize,
    pub fc_depth: usize,
    pub output_half_len: usize,
}

impl ArchitectureConfig {
    pub fn new(group1_width: usize, group2_width: usize, fc_width: usize, fc_depth: usize) -> Result<Self> {
        let cfg = Self {
            group1_width,
            group2_width,
            fc_width,
            fc_depth,
            output_half_len: HALF_LEN,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 1024 / 2048 / 4096 with five fully connected layers (seven hidden).
    pub fn full() -> Self {
        Self::new(1024, 2048, 4096, 5).expect("valid preset")
    }

    /// 64 / 128 / 256 with three fully connected layers.
    pub fn desk() -> Self {
        Self::new(64, 128, 256, 3).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        if self.group1_width == 0 || self.group2_width == 0 || self.fc_width == 0 || self.fc_depth == 0 {
            return Err(Error::InvalidArgument("layer widths and depth must be >= 1".into()));
        }
        if self.output_half_len != HALF_LEN {
            return Err(Error::InvalidArgument(format!(
                "output_half_len must be {HALF_LEN}, got {}",
                self.output_half_len
            )));
        }
        Ok(())
    }

    /// `(out, in)` shape of every layer in storage order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let g1 = self.group1_width;
        let g2 = self.group2_width;
        let mut shapes = vec![
            (g1, BAND_DIMS[0] + BAND_DIMS[1]),
            (g1, BAND_DIMS[1] + BAND_DIMS[2]),
            (g1, BAND_DIMS[2] + BAND_DIMS[3]),
            (g2, 2 * g1),
            (g2, 2 * g1),
        ];
        let mut fan_in = 2 * g2;
        for _ in 0..self.fc_depth {
            shapes.push((self.fc_width, fan_in));
            fan_in = self.fc_width;
        }
        shapes.push((2 * self.output_half_len, fan_in));
        shapes
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = vec![
            "layer1.group(L,B2)".into(),
            "layer1.group(B2,B1)".into(),
            "layer1.group(B1,H)".into(),
            "layer2.group(0,1)".into(),
            "layer2.group(1,2)".into(),
        ];
        names.extend((0..self.fc_depth).map(|i| format!("fc{}", i + 1)));
        names.push("output".into());
        names
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

/// An affine layer `y = W x + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        z
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// All trainable layers plus the input whitening.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub arch: ArchitectureConfig,
    pub whitening: WhiteningTransform,
    pub layers: Vec<Dense>,
}

/// Activations kept from a forward pass for back-propagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    /// Post-ReLU activations of every hidden layer, concatenated per layer.
    hidden: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

/// Parameter gradients with the same layout as [`NetworkWeights::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(w: &NetworkWeights) -> Self {
        Self {
            layers: w.layers.iter().map(|l| Dense::zeros(l.out_dim(), l.in_dim())).collect(),
        }
    }
}

impl NetworkWeights {
    /// He-initialised hidden layers, zero biases, zero output layer (so the
    /// initial prediction is the keep-DC filter).
    pub fn init(arch: ArchitectureConfig, whitening: WhiteningTransform, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = arch.layer_shapes();
        let last = shapes.len() - 1;
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(i, &(out, inp))| {
                let mut d = Dense::zeros(out, inp);
                if i != last {
                    let normal = Normal::new(0.0, (2.0 / inp as f64).sqrt()).expect("positive std");
                    d.weight.mapv_inplace(|_| normal.sample(&mut rng));
                }
                d
            })
            .collect();
        Ok(Self {
            arch,
            whitening,
            layers,
        })
    }

    /// All-zero weights and biases.
    pub fn zeros(arch: ArchitectureConfig, whitening: WhiteningTransform) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| Dense::zeros(o, i))
            .collect();
        Ok(Self {
            arch,
            whitening,
            layers,
        })
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.arch.validate()?;
        let shapes = self.arch.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} layers, architecture needs {}",
                self.layers.len(),
                shapes.len()
            )));
        }
        for (i, (l, &(o, inp))) in self.layers.iter().zip(&shapes).enumerate() {
            if l.out_dim() != o || l.in_dim() != inp || l.bias.len() != o {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i}: {}x{} (bias {}), expected {o}x{inp}",
                    l.out_dim(),
                    l.in_dim(),
                    l.bias.len()
                )));
            }
        }
        for (b, w) in self.whitening.bands.iter().enumerate() {
            if w.dim() != BAND_DIMS[b] || w.matrix.len() != BAND_DIMS[b] * BAND_DIMS[b] {
                return Err(Error::ShapeMismatch(format!("whitening band {b}")));
            }
        }
        Ok(())
    }

    /// Whitens a batch of raw encodings given as rows of a `B x 705` matrix.
    pub fn whiten_batch(&self, raw: &Array2<f64>) -> Result<Array2<f64>> {
        if raw.ncols() != ENCODING_DIM {
            return Err(Error::ShapeMismatch(format!(
                "encoding batch has {} columns, expected {ENCODING_DIM}",
                raw.ncols()
            )));
        }
        let mut out = Array2::zeros(raw.raw_dim());
        for b in 0..NUM_BANDS {
            let (off, d) = (BAND_OFFSETS[b], BAND_DIMS[b]);
            let w = &self.whitening.bands[b];
            let m = ArrayView2::from_shape((d, d), &w.matrix).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            let mean = ArrayView2::from_shape((1, d), &w.mean).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            let centred = &raw.slice(s![.., off..off + d]) - &mean;
            out.slice_mut(s![.., off..off + d]).assign(&centred.dot(&m.t()));
        }
        Ok(out)
    }

    /// Forward pass on a batch of whitened encodings (`B x 705`).
    pub fn forward_batch(&self, input: Array2<f64>) -> Result<ForwardCache> {
        if input.ncols() != ENCODING_DIM {
            return Err(Error::ShapeMismatch(format!(
                "input has {} columns, expected {ENCODING_DIM}",
                input.ncols()
            )));
        }
        self.check_shapes()?;
        let g1 = self.arch.group1_width;
        let g2 = self.arch.group2_width;
        let batch = input.nrows();
        let ranges = layer1_ranges();

        let mut a1 = Array2::zeros((batch, 3 * g1));
        for (j, &(lo, hi)) in ranges.iter().enumerate() {
            let z = self.layers[j].forward(input.slice(s![.., lo..hi]));
            a1.slice_mut(s![.., j * g1..(j + 1) * g1]).assign(&z);
        }
        relu_inplace(&mut a1);

        let mut a2 = Array2::zeros((batch, 2 * g2));
        for j in 0..2 {
            let z = self.layers[3 + j].forward(a1.slice(s![.., j * g1..(j + 2) * g1]));
            a2.slice_mut(s![.., j * g2..(j + 1) * g2]).assign(&z);
        }
        relu_inplace(&mut a2);

        let mut hidden = vec![a1, a2];
        for j in 0..self.arch.fc_depth {
            let mut z = self.layers[5 + j].forward(hidden.last().expect("non-empty").view());
            relu_inplace(&mut z);
            hidden.push(z);
        }
        let output = self
            .layers
            .last()
            .expect("output layer")
            .forward(hidden.last().expect("non-empty").view());
        Ok(ForwardCache {
            input,
            hidden,
            output,
        })
    }

    /// Back-propagates `d_output` (`B x 4224`) through a cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, d_output: &Array2<f64>) -> Result<Gradients> {
        let n_layers = self.layers.len();
        if d_output.dim() != cache.output.dim() || cache.hidden.len() != 2 + self.arch.fc_depth {
            return Err(Error::ShapeMismatch("stale forward cache".into()));
        }
        let g1 = self.arch.group1_width;
        let g2 = self.arch.group2_width;
        let mut grads = Gradients::zeros_like(self);

        let dense_grad = |dz: &Array2<f64>, x: ArrayView2<f64>| Dense {
            weight: dz.t().dot(&x),
            bias: dz.sum_axis(Axis(0)),
        };

        // Output layer (linear).
        let last_hidden = cache.hidden.last().expect("hidden layers");
        grads.layers[n_layers - 1] = dense_grad(d_output, last_hidden.view());
        let mut d_act = d_output.dot(&self.layers[n_layers - 1].weight);

        // Fully connected stack, top down.
        for j in (0..self.arch.fc_depth).rev() {
            let act = &cache.hidden[2 + j];
            let dz = relu_backward(d_act, act);
            let below = &cache.hidden[1 + j];
            grads.layers[5 + j] = dense_grad(&dz, below.view());
            d_act = dz.dot(&self.layers[5 + j].weight);
        }

        // Layer 2 groups share the middle layer-1 group.
        let dz2 = relu_backward(d_act, &cache.hidden[1]);
        let a1 = &cache.hidden[0];
        let mut d_a1 = Array2::<f64>::zeros(a1.raw_dim());
        for j in 0..2 {
            let dz = dz2.slice(s![.., j * g2..(j + 1) * g2]).to_owned();
            let x = a1.slice(s![.., j * g1..(j + 2) * g1]);
            grads.layers[3 + j] = dense_grad(&dz, x);
            let dx = dz.dot(&self.layers[3 + j].weight);
            let mut target = d_a1.slice_mut(s![.., j * g1..(j + 2) * g1]);
            target += &dx;
        }

        let dz1 = relu_backward(d_a1, a1);
        for (j, &(lo, hi)) in layer1_ranges().iter().enumerate() {
            let dz = dz1.slice(s![.., j * g1..(j + 1) * g1]).to_owned();
            grads.layers[j] = dense_grad(&dz, cache.input.slice(s![.., lo..hi]));
        }
        Ok(grads)
    }

    /// Predicts filters for a batch of raw 65x65 patches.
    pub fn predict_batch(&self, patches: &[Vec<f64>]) -> Result<Vec<FilterPrediction>> {
        let prepared = prepare_patches(patches)?;
        let cache = self.forward_batch(self.whiten_batch(&prepared.raw)?)?;
        cache
            .output
            .rows()
            .into_iter()
            .map(|row| FilterPrediction::from_interleaved(row.as_slice().expect("contiguous row")))
            .collect()
    }

    /// Restores a batch of 65x65 patches to their central 33x33 estimates.
    pub fn restore_patches(&self, patches: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let prepared = prepare_patches(patches)?;
        let cache = self.forward_batch(self.whiten_batch(&prepared.raw)?)?;
        let rows: Vec<_> = cache.output.rows().into_iter().collect();
        rows.into_par_iter()
            .zip(prepared.spectra.par_iter())
            .map(|(row, y)| {
                let g = FilterPrediction::from_interleaved(row.as_slice().expect("contiguous row"))?;
                apply_filter_spectrum(&g, y)
            })
            .collect()
    }

    pub fn predict(&self, patch: &[f64]) -> Result<FilterPrediction> {
        Ok(self
            .predict_batch(std::slice::from_ref(&patch.to_vec()))?
            .pop()
            .expect("one prediction"))
    }

    /// Mean loss and parameter gradients over a batch of `(input 65x65, target 33x33)` pairs.
    pub fn loss_and_gradients(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, Gradients)> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::ShapeMismatch("inputs and targets must be non-empty and paired".into()));
        }
        let prepared = prepare_patches(inputs)?;
        let cache = self.forward_batch(self.whiten_batch(&prepared.raw)?)?;
        let batch = inputs.len();
        let rows: Vec<_> = cache.output.rows().into_iter().collect();
        let per_example: Vec<(f64, Vec<f64>)> = rows
            .into_par_iter()
            .zip(prepared.spectra.par_iter())
            .zip(targets.par_iter())
            .map(|((row, y), t)| {
                let g = FilterPrediction::from_interleaved(row.as_slice().expect("contiguous row"))?;
                let est = apply_filter_spectrum(&g, y)?;
                let mut grad = vec![0.0; 2 * HALF_LEN];
                let l = filter_gradient(y, &est, t, &mut grad)?;
                Ok((l, grad))
            })
            .collect::<Result<_>>()?;
        let mut d_out = Array2::zeros((batch, 2 * HALF_LEN));
        let mut total = 0.0;
        for (i, (l, g)) in per_example.into_iter().enumerate() {
            total += l;
            d_out.row_mut(i).assign(&Array1::from(g));
        }
        d_out /= batch as f64;
        let grads = self.backward(&cache, &d_out)?;
        Ok((total / batch as f64, grads))
    }

    /// Mean loss over a batch without gradients.
    pub fn batch_loss(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
        let est = self.restore_patches(inputs)?;
        let mut total = 0.0;
        for (e, t) in est.iter().zip(targets) {
            total += crate::filter::loss(e, t)?;
        }
        Ok(total / inputs.len() as f64)
    }
}

fn relu_backward(mut d: Array2<f64>, act: &Array2<f64>) -> Array2<f64> {
    ndarray::Zip::from(&mut d).and(act).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    d
}

fn layer1_ranges() -> [(usize, usize); 3] {
    [
        (BAND_OFFSETS[0], BAND_OFFSETS[1] + BAND_DIMS[1]),
        (BAND_OFFSETS[1], BAND_OFFSETS[2] + BAND_DIMS[2]),
        (BAND_OFFSETS[2], BAND_OFFSETS[3] + BAND_DIMS[3]),
    ]
}

/// Raw band encodings (as matrix rows) and 65x65 spectra of a set of patches.
pub struct PreparedPatches {
    pub raw: Array2<f64>,
    pub spectra: Vec<Spectrum>,
}

pub fn prepare_patches(patches: &[Vec<f64>]) -> Result<PreparedPatches> {
    let encoded: Vec<(Spectrum, BandEncoding)> = patches
        .par_iter()
        .map(|p| {
            let y = dft2(p, PATCH)?;
            let e = encode_with_spectrum(p, &y)?;
            Ok((y, e))
        })
        .collect::<Result<_>>()?;
    let mut raw = Array2::zeros((patches.len(), ENCODING_DIM));
    let mut spectra = Vec::with_capacity(patches.len());
    for (i, (y, e)) in encoded.into_iter().enumerate() {
        raw.row_mut(i).assign(&Array1::from(e.to_flat()));
        spectra.push(y);
    }
    Ok(PreparedPatches { raw, spectra })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::OUT_PATCH;
    use crate::filter::{apply_filter, loss};
    use rand::Rng;

    fn random_patches(n: usize, size: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..size * size).map(|_| rng.random::<f64>()).collect())
            .collect()
    }

    /// Scales raw encodings to unit-ish magnitude so tiny networks see
    /// activations of order one.
    fn scaled_whitening() -> WhiteningTransform {
        let mut w = WhiteningTransform::identity();
        for b in w.bands.iter_mut() {
            b.matrix.iter_mut().for_each(|v| *v /= 200.0);
        }
        w
    }

    #[test]
    fn presets() {
        let p = ArchitectureConfig::full();
        assert_eq!((p.group1_width, p.group2_width, p.fc_width, p.fc_depth), (1024, 2048, 4096, 5));
        assert_eq!(p.layer_shapes().len(), 2 + 5 + 1 + 3);
        let d = ArchitectureConfig::desk();
        assert_eq!((d.group1_width, d.group2_width, d.fc_width, d.fc_depth), (64, 128, 256, 3));
        assert!(ArchitectureConfig::new(0, 1, 1, 1).is_err());
        assert!(ArchitectureConfig::new(1, 1, 1, 0).is_err());
    }

    #[test]
    fn zero_weights_give_keep_dc() {
        let w = NetworkWeights::zeros(ArchitectureConfig::new(4, 4, 4, 1).unwrap(), WhiteningTransform::identity()).unwrap();
        let g = w.predict(&random_patches(1, PATCH, 1)[0]).unwrap();
        assert_eq!(g.packed().dc(), 1.0);
        assert!(g.packed().half().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn single_unit_hand_computation() {
        // Widths 1/1/1, depth 1, identity whitening. Only the first input of
        // each layer-1 group is weighted, so the composition reduces to a few
        // scalar ReLU maps we can evaluate by hand.
        let arch = ArchitectureConfig::new(1, 1, 1, 1).unwrap();
        let mut w = NetworkWeights::zeros(arch, WhiteningTransform::identity()).unwrap();
        // Encoding with L[0] = 2, B2[0] = -1, B1[0] = 3, everything else 0.
        let mut flat = vec![0.0; ENCODING_DIM];
        flat[BAND_OFFSETS[0]] = 2.0;
        flat[BAND_OFFSETS[1]] = -1.0;
        flat[BAND_OFFSETS[2]] = 3.0;
        // g0 = relu(0.5 * L0 + 1 * B2_0 + 0.1) = relu(0.1) = 0.1
        w.layers[0].weight[[0, 0]] = 0.5;
        w.layers[0].weight[[0, 81]] = 1.0;
        w.layers[0].bias[0] = 0.1;
        // g1 = relu(2 * B2_0 + 1 * B1_0) = relu(1) = 1
        w.layers[1].weight[[0, 0]] = 2.0;
        w.layers[1].weight[[0, 208]] = 1.0;
        // g2 = relu(-1 * B1_0) = 0
        w.layers[2].weight[[0, 0]] = -1.0;
        // h0 = relu(3 g0 + 1 g1) = 1.3 ; h1 = relu(-1 g1 + 0 g2 + 0.2) = 0
        w.layers[3].weight[[0, 0]] = 3.0;
        w.layers[3].weight[[0, 1]] = 1.0;
        w.layers[4].weight[[0, 0]] = -1.0;
        w.layers[4].bias[0] = 0.2;
        // f = relu(2 h0 + 5 h1 - 0.6) = 2.0
        w.layers[5].weight[[0, 0]] = 2.0;
        w.layers[5].weight[[0, 1]] = 5.0;
        w.layers[5].bias[0] = -0.6;
        // out[0] = 0.25 f + 1 = 1.5, out[7] = -f = -2.0
        w.layers[6].weight[[0, 0]] = 0.25;
        w.layers[6].bias[0] = 1.0;
        w.layers[6].weight[[7, 0]] = -1.0;

        let input = Array2::from_shape_vec((1, ENCODING_DIM), flat).unwrap();
        let cache = w.forward_batch(input).unwrap();
        let out = cache.output.row(0);
        assert!((out[0] - 1.5).abs() < 1e-15);
        assert!((out[7] + 2.0).abs() < 1e-15);
        assert!(out.iter().enumerate().all(|(i, &v)| i == 0 || i == 7 || v == 0.0));
    }

    #[test]
    fn deterministic_init_and_forward() {
        let arch = ArchitectureConfig::new(8, 8, 8, 2).unwrap();
        let a = NetworkWeights::init(arch, scaled_whitening(), 5).unwrap();
        let b = NetworkWeights::init(arch, scaled_whitening(), 5).unwrap();
        assert_eq!(a, b);
        let p = random_patches(3, PATCH, 2);
        assert_eq!(a.predict_batch(&p).unwrap(), b.predict_batch(&p).unwrap());
    }

    fn perturbed_tiny() -> NetworkWeights {
        let arch = ArchitectureConfig::new(3, 4, 4, 1).unwrap();
        let mut w = NetworkWeights::init(arch, scaled_whitening(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for l in w.layers.iter_mut() {
            l.bias.mapv_inplace(|_| rng.random::<f64>() * 0.2);
        }
        let out = w.layers.last_mut().unwrap();
        out.weight.mapv_inplace(|_| rng.random::<f64>() * 0.02 - 0.01);
        w
    }

    #[test]
    fn batch_loss_matches_single_example_pipeline() {
        let w = perturbed_tiny();
        let inputs = random_patches(2, PATCH, 3);
        let targets = random_patches(2, OUT_PATCH, 4);
        let (l, _) = w.loss_and_gradients(&inputs, &targets).unwrap();
        let mut expect = 0.0;
        for (x, t) in inputs.iter().zip(&targets) {
            let g = w.predict(x).unwrap();
            expect += loss(&apply_filter(&g, x).unwrap(), t).unwrap();
        }
        assert!((l - expect / 2.0).abs() < 1e-12);
        assert!((w.batch_loss(&inputs, &targets).unwrap() - l).abs() < 1e-12);
    }

    #[test]
    fn zero_residual_zero_gradients() {
        let w = perturbed_tiny();
        let inputs = random_patches(2, PATCH, 5);
        let targets = w.restore_patches(&inputs).unwrap();
        let (l, g) = w.loss_and_gradients(&inputs, &targets).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.layers.iter().all(|d| d.weight.iter().chain(d.bias.iter()).all(|&v| v == 0.0)));
    }

    #[test]
    fn spot_gradient_check() {
        let mut w = perturbed_tiny();
        let inputs = random_patches(2, PATCH, 6);
        let targets = random_patches(2, OUT_PATCH, 7);
        let (_, g) = w.loss_and_gradients(&inputs, &targets).unwrap();
        let h = 1e-4;
        for (li, idx) in [(0usize, [0usize, 5]), (3, [2, 1]), (5, [1, 3]), (6, [100, 2])] {
            let orig = w.layers[li].weight[idx];
            w.layers[li].weight[idx] = orig + h;
            let lp = w.batch_loss(&inputs, &targets).unwrap();
            w.layers[li].weight[idx] = orig - h;
            let lm = w.batch_loss(&inputs, &targets).unwrap();
            w.layers[li].weight[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = g.layers[li].weight[idx];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-10), "layer {li}: {fd} vs {an}");
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let w = perturbed_tiny();
        let cache = w.forward_batch(Array2::zeros((2, ENCODING_DIM))).unwrap();
        assert!(w.backward(&cache, &Array2::zeros((3, 2 * HALF_LEN))).is_err());
        assert!(w.forward_batch(Array2::zeros((2, 10))).is_err());
    }
}
