//! Fully connected regressor from a projection to the eleven candidate d2 values.
//!
//! Inputs are 64 x 64 block-averaged, log-normalized projections; the model
//! standardizes them with per-pixel statistics and predicts per-output
//! z-scores of `ln(d2 + eps)`, which are mapped back to d2 units and clamped
//! at zero. The log keeps small values from being drowned out: d2 behind
//! metal is one to two orders of magnitude below the rest of the map.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::N_CANDIDATES;
use crate::projector::{log_normalize_value, Projection, Raster};

pub const FEATURE_SIDE: usize = 64;
pub const FEATURE_DIM: usize = FEATURE_SIDE * FEATURE_SIDE;
pub const DEFAULT_LAYERS: [usize; 4] = [FEATURE_DIM, 256, 64, N_CANDIDATES];

const STD_FLOOR: f64 = 1e-8;
const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

/// Mean over non-overlapping blocks, producing a `side x side` raster.
pub fn block_average(raster: &Raster<f64>, side: usize) -> Result<Vec<f64>> {
    if raster.rows % side != 0 || raster.cols % side != 0 || raster.rows == 0 || raster.cols == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} detector is not a multiple of {side}",
            raster.rows, raster.cols
        )));
    }
    let (br, bc) = (raster.rows / side, raster.cols / side);
    let norm = (br * bc) as f64;
    let mut out = vec![0.0; side * side];
    for r in 0..raster.rows {
        for c in 0..raster.cols {
            out[(r / br) * side + c / bc] += raster.data[r * raster.cols + c];
        }
    }
    out.iter_mut().for_each(|v| *v /= norm);
    Ok(out)
}

/// Raw (unstandardized) features from a count raster, which may hold
/// expected rather than sampled counts.
pub fn featurize_counts(counts: &Raster<f64>, i0: f64) -> Result<FeatureVector> {
    if !(i0 > 0.0) {
        return Err(Error::InvalidArgument(format!("fluence {i0} must be positive")));
    }
    let blocks = block_average(counts, FEATURE_SIDE)?;
    Ok(FeatureVector(blocks.into_iter().map(|c| log_normalize_value(c, i0)).collect()))
}

pub fn featurize(projection: &Projection, i0: f64) -> Result<FeatureVector> {
    let counts = projection
        .noisy_counts
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("projection has no noisy counts".into()))?;
    featurize_counts(&counts.map(|&c| c as f64), i0)
}

/// Per-component affine standardization `z = (x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> Self {
        let mut mean = vec![0.0; dim];
        let mut n = 0usize;
        for row in rows.clone() {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
            n += 1;
        }
        let n = n.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in rows {
            var.iter_mut().zip(row).zip(&mean).for_each(|((v, x), m)| *v += (x - m) * (x - m));
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).map(|s| if s > STD_FLOOR { s } else { 1.0 }).collect();
        Normalization { mean, std }
    }

    fn apply<'a>(&'a self, x: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s)
    }

    fn invert<'a>(&'a self, z: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorModel {
    pub sizes: Vec<usize>,
    /// `weights[l]` maps layer `l` to `l + 1` and has shape `(out, in)`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub input_norm: Normalization,
    pub output_norm: Normalization,
    /// Outputs model `ln(d2 + target_log_eps)`; zero means plain d2.
    pub target_log_eps: f64,
}

/// Per-layer pre-activations and activations of one forward pass.
struct Tape {
    pre: Vec<Array2<f64>>,
    act: Vec<Array2<f64>>,
}

impl RegressorModel {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        let weights = sizes.windows(2).map(|w| Array2::zeros((w[1], w[0]))).collect();
        let biases = sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(RegressorModel {
            sizes: sizes.to_vec(),
            weights,
            biases,
            input_norm: Normalization::identity(sizes[0]),
            output_norm: Normalization::identity(*sizes.last().unwrap()),
            target_log_eps: 0.0,
        })
    }

    /// He-initialized weights, zero biases.
    pub fn random(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut model.weights {
            let scale = (2.0 / w.ncols() as f64).sqrt();
            w.iter_mut().for_each(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * scale
            });
        }
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn encode_target(&self, d2: f64) -> f64 {
        if self.target_log_eps > 0.0 {
            (d2 + self.target_log_eps).ln()
        } else {
            d2
        }
    }

    fn decode_output(&self, v: f64) -> f64 {
        let d2 = if self.target_log_eps > 0.0 { v.exp() - self.target_log_eps } else { v };
        d2.max(0.0)
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.weights.len() + 1 == self.sizes.len()
            && self.biases.len() == self.weights.len()
            && self.weights.iter().zip(self.sizes.windows(2)).all(|(w, s)| w.dim() == (s[1], s[0]))
            && self.biases.iter().zip(&self.sizes[1..]).all(|(b, &n)| b.len() == n)
            && self.input_norm.mean.len() == self.sizes[0]
            && self.input_norm.std.len() == self.sizes[0]
            && self.output_norm.mean.len() == self.output_dim()
            && self.output_norm.std.len() == self.output_dim();
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("inconsistent model layer shapes".into()))
        }
    }

    fn forward_tape(&self, x: ArrayView2<f64>) -> Tape {
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut act = Vec::with_capacity(self.n_layers() + 1);
        act.push(x.to_owned());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = act[l].dot(&w.t()) + b;
            let a = if l + 1 < self.n_layers() { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            pre.push(z);
            act.push(a);
        }
        Tape { pre, act }
    }

    /// Standardized outputs for a batch of standardized inputs.
    pub fn forward_standardized(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_tape(x).act.pop().unwrap()
    }

    fn standardize_batch(&self, features: &[&FeatureVector]) -> Result<Array2<f64>> {
        let d = self.input_dim();
        let mut x = Array2::zeros((features.len(), d));
        for (mut row, f) in x.rows_mut().into_iter().zip(features) {
            if f.0.len() != d {
                return Err(Error::ShapeMismatch(format!("feature length {} vs model input {d}", f.0.len())));
            }
            row.iter_mut().zip(self.input_norm.apply(&f.0)).for_each(|(r, v)| *r = v);
        }
        Ok(x)
    }

    pub fn predict_batch(&self, features: &[&FeatureVector]) -> Result<Vec<Vec<f64>>> {
        let x = self.standardize_batch(features)?;
        let z = self.forward_standardized(x.view());
        Ok(z.rows()
            .into_iter()
            .map(|row| self.output_norm.invert(row.as_slice().unwrap()).map(|v| self.decode_output(v)).collect())
            .collect())
    }

    pub fn predict(&self, features: &FeatureVector) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[features])?.pop().unwrap())
    }

    /// Mean squared error on standardized targets and its parameter gradient.
    fn loss_and_grad(&self, x: ArrayView2<f64>, t: ArrayView2<f64>) -> (f64, Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let tape = self.forward_tape(x);
        let y = tape.act.last().unwrap();
        let diff = y - &t;
        let count = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
        let mut delta = diff * (2.0 / count);
        let n = self.n_layers();
        let mut gw = vec![Array2::zeros((0, 0)); n];
        let mut gb = vec![Array1::zeros(0); n];
        for l in (0..n).rev() {
            gw[l] = delta.t().dot(&tape.act[l]);
            gb[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l]);
                back.zip_mut_with(&tape.pre[l - 1], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
                delta = back;
            }
        }
        (loss, gw, gb)
    }

    fn standardized_loss(&self, x: ArrayView2<f64>, t: ArrayView2<f64>) -> f64 {
        let y = self.forward_standardized(x);
        let diff = y - &t;
        diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64
    }

    fn param_mut(&mut self, p: ParamRef) -> &mut f64 {
        match p {
            ParamRef::Weight { layer, row, col } => &mut self.weights[layer][[row, col]],
            ParamRef::Bias { layer, index } => &mut self.biases[layer][index],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MODEL_MAGIC);
        bytes.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.sizes.len() as u32).to_le_bytes());
        for &s in &self.sizes {
            bytes.extend_from_slice(&(s as u32).to_le_bytes());
        }
        bytes.extend_from_slice(&self.target_log_eps.to_le_bytes());
        let mut put = |vals: &mut dyn Iterator<Item = f64>| vals.for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        for (w, b) in self.weights.iter().zip(&self.biases) {
            put(&mut w.iter().copied());
            put(&mut b.iter().copied());
        }
        for norm in [&self.input_norm, &self.output_norm] {
            put(&mut norm.mean.iter().copied());
            put(&mut norm.std.iter().copied());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let truncated = || Error::format(path, "truncated model file");
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(truncated)?;
            pos += n;
            Ok(s)
        };
        if take(8)? != MODEL_MAGIC {
            return Err(Error::format(path, "not a model file"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(Error::format(path, format!("unsupported model version {version}")));
        }
        let n_sizes = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            sizes.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let mut model = RegressorModel::zeros(&sizes).map_err(|e| Error::format(path, e.to_string()))?;
        let mut read_f64s = |n: usize| -> Result<Vec<f64>> {
            let raw = take(n * 8)?;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        model.target_log_eps = read_f64s(1)?[0];
        for l in 0..model.n_layers() {
            let (rows, cols) = model.weights[l].dim();
            model.weights[l] = Array2::from_shape_vec((rows, cols), read_f64s(rows * cols)?).unwrap();
            let n = model.biases[l].len();
            model.biases[l] = Array1::from(read_f64s(n)?);
        }
        let d_in = model.input_dim();
        let d_out = model.output_dim();
        model.input_norm = Normalization { mean: read_f64s(d_in)?, std: read_f64s(d_in)? };
        model.output_norm = Normalization { mean: read_f64s(d_out)?, std: read_f64s(d_out)? };
        if pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after model"));
        }
        Ok(model)
    }
}

const MODEL_MAGIC: &[u8; 8] = b"TRAJMLP\0";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ParamRef {
    Weight { layer: usize, row: usize, col: usize },
    Bias { layer: usize, index: usize },
}

/// One supervised example: raw features of a noisy projection and the
/// ground-truth d2 of the eleven candidates one step ahead.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub input: FeatureVector,
    pub target: [f64; N_CANDIDATES],
    pub meta: SampleMeta,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMeta {
    pub phi_deg: f64,
    pub theta_deg: f64,
    pub phantom_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub layers: Vec<usize>,
    /// Offset of the log transform applied to targets; zero disables it.
    pub target_log_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            batch: 32,
            epochs: 40,
            seed: 1,
            val_fraction: 0.1,
            momentum: 0.9,
            weight_decay: 3e-3,
            layers: DEFAULT_LAYERS.to_vec(),
            target_log_eps: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: key.into(), msg: msg.into() });
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.target_log_eps >= 0.0) {
            return bad("target_log_eps", "must be non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss_mean: f64,
    pub train_loss_median: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LossTrace {
    pub epochs: Vec<EpochStats>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss_mean,train_loss_median,val_loss\n");
        for e in &self.epochs {
            let val = e.val_loss.map_or(String::new(), |v| format!("{v:.10e}"));
            out.push_str(&format!("{},{:.10e},{:.10e},{val}\n", e.epoch, e.train_loss_mean, e.train_loss_median));
        }
        out
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn target_matrix(model: &RegressorModel, samples: &[&TrainingSample]) -> Array2<f64> {
    let mut t = Array2::zeros((samples.len(), model.output_dim()));
    for (mut row, s) in t.rows_mut().into_iter().zip(samples) {
        let encoded: Vec<f64> = s.target.iter().map(|&t| model.encode_target(t)).collect();
        row.iter_mut().zip(model.output_norm.apply(&encoded)).for_each(|(r, v)| *r = v);
    }
    t
}

/// Mini-batch SGD with momentum on the standardized mean squared error.
///
/// Single-threaded; with a fixed seed the result is bit-identical.
pub fn train(samples: &[TrainingSample], cfg: &TrainConfig) -> Result<(RegressorModel, LossTrace)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    let mut layers = cfg.layers.clone();
    layers[0] = samples[0].input.0.len();
    if *layers.last().unwrap() != N_CANDIDATES {
        return Err(Error::Config { key: "layers".into(), msg: format!("output layer must have {N_CANDIDATES} units") });
    }
    if samples.iter().any(|s| s.input.0.len() != layers[0]) {
        return Err(Error::ShapeMismatch("training features of differing length".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64) * cfg.val_fraction).floor() as usize;
    let n_val = n_val.min(samples.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let mut model = RegressorModel::random(&layers, rng.random())?;
    model.input_norm = Normalization::fit(train_idx.iter().map(|&i| samples[i].input.0.as_slice()), layers[0]);
    model.target_log_eps = cfg.target_log_eps;
    let encoded: Vec<Vec<f64>> =
        train_idx.iter().map(|&i| samples[i].target.iter().map(|&t| model.encode_target(t)).collect()).collect();
    model.output_norm = Normalization::fit(encoded.iter().map(Vec::as_slice), N_CANDIDATES);

    descend(model, samples, &mut train_idx, val_idx, cfg, &mut rng)
}

/// Continues training `model` on `samples` with its normalization frozen.
/// `cfg.layers` is ignored; the split and shuffling follow `cfg.seed`.
pub fn fine_tune(
    model: RegressorModel,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<(RegressorModel, LossTrace)> {
    cfg.validate()?;
    model.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    if samples.iter().any(|s| s.input.0.len() != model.input_dim()) {
        return Err(Error::ShapeMismatch(format!("features must have {} entries", model.input_dim())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (((samples.len() as f64) * cfg.val_fraction).floor() as usize).min(samples.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    descend(model, samples, &mut train_idx.to_vec(), val_idx, cfg, &mut rng)
}

fn descend(
    mut model: RegressorModel,
    samples: &[TrainingSample],
    train_idx: &mut [usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(RegressorModel, LossTrace)> {
    let val_refs: Vec<&TrainingSample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let val_batch = if val_refs.is_empty() {
        None
    } else {
        let inputs: Vec<&FeatureVector> = val_refs.iter().map(|s| &s.input).collect();
        Some((model.standardize_batch(&inputs)?, target_matrix(&model, &val_refs)))
    };

    let mut vel_w: Vec<Array2<f64>> = model.weights.iter().map(|w| Array2::zeros(w.dim())).collect();
    let mut vel_b: Vec<Array1<f64>> = model.biases.iter().map(|b| Array1::zeros(b.len())).collect();
    let mut trace = LossTrace::default();
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(rng);
        let mut batch_losses = Vec::with_capacity(train_idx.len() / cfg.batch + 1);
        for chunk in train_idx.chunks(cfg.batch) {
            let refs: Vec<&TrainingSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let inputs: Vec<&FeatureVector> = refs.iter().map(|s| &s.input).collect();
            let x = model.standardize_batch(&inputs)?;
            let t = target_matrix(&model, &refs);
            let (loss, gw, gb) = model.loss_and_grad(x.view(), t.view());
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged { epoch, loss });
            }
            batch_losses.push(loss);
            for l in 0..model.n_layers() {
                let decay = cfg.weight_decay;
                let w = &mut model.weights[l];
                let v = &mut vel_w[l];
                ndarray::Zip::from(&mut *v).and(&gw[l]).and(&*w).for_each(|v, &g, &w| {
                    *v = cfg.momentum * *v - cfg.lr * (g + decay * w);
                });
                *w += &*v;
                let vb = &mut vel_b[l];
                ndarray::Zip::from(&mut *vb).and(&gb[l]).for_each(|v, &g| *v = cfg.momentum * *v - cfg.lr * g);
                model.biases[l] += &*vb;
            }
        }
        let mean = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let val_loss = val_batch.as_ref().map(|(x, t)| model.standardized_loss(x.view(), t.view()));
        trace.epochs.push(EpochStats {
            epoch,
            train_loss_mean: mean,
            train_loss_median: median(&mut batch_losses),
            val_loss,
        });
    }
    Ok((model, trace))
}

/// Largest relative disagreement between backpropagated and central
/// finite-difference gradients over `n_params` randomly chosen parameters,
/// spread evenly over the layers. Entries below a thousandth of the largest
/// gradient magnitude are measured against that floor.
pub fn grad_check(model: &RegressorModel, sample: &TrainingSample, n_params: usize, seed: u64, h: f64) -> Result<f64> {
    model.validate()?;
    let x = model.standardize_batch(&[&sample.input])?;
    let t = target_matrix(model, &[sample]);
    let (_, gw, gb) = model.loss_and_grad(x.view(), t.view());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_layer = n_params.div_ceil(model.n_layers());
    let mut params = Vec::with_capacity(per_layer * model.n_layers());
    for layer in 0..model.n_layers() {
        let (rows, cols) = model.weights[layer].dim();
        for k in 0..per_layer {
            if k % 5 == 4 {
                params.push(ParamRef::Bias { layer, index: rng.random_range(0..rows) });
            } else {
                params.push(ParamRef::Weight { layer, row: rng.random_range(0..rows), col: rng.random_range(0..cols) });
            }
        }
    }

    let mut probe = model.clone();
    let mut pairs = Vec::with_capacity(params.len());
    for p in params {
        let analytic = match p {
            ParamRef::Weight { layer, row, col } => gw[layer][[row, col]],
            ParamRef::Bias { layer, index } => gb[layer][index],
        };
        let orig = *probe.param_mut(p);
        *probe.param_mut(p) = orig + h;
        let up = probe.standardized_loss(x.view(), t.view());
        *probe.param_mut(p) = orig - h;
        let down = probe.standardized_loss(x.view(), t.view());
        *probe.param_mut(p) = orig;
        pairs.push((analytic, (up - down) / (2.0 * h)));
    }
    let scale = pairs.iter().map(|(a, n)| a.abs().max(n.abs())).fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(pairs
        .iter()
        .map(|&(a, n)| {
            let mag = a.abs().max(n.abs());
            let denom = if mag > 1e-3 * scale { mag } else { 1e-3 * scale };
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_sample(dim: usize, seed: u64) -> TrainingSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = FeatureVector((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut target = [0.0; N_CANDIDATES];
        target.iter_mut().for_each(|t| *t = rng.random_range(0.0..5.0));
        TrainingSample { input, target, meta: SampleMeta { phi_deg: 0.0, theta_deg: 90.0, phantom_seed: seed } }
    }

    #[test]
    fn block_average_matches_two_by_two_oracle() {
        let data: Vec<f64> = (0..128 * 128).map(|i| ((i * 7919) % 1000) as f64).collect();
        let r = Raster::from_vec(128, 128, data).unwrap();
        let blocks = block_average(&r, 64).unwrap();
        for br in 0..64 {
            for bc in 0..64 {
                let direct = (r.get(2 * br, 2 * bc) + r.get(2 * br, 2 * bc + 1) + r.get(2 * br + 1, 2 * bc)
                    + r.get(2 * br + 1, 2 * bc + 1))
                    / 4.0;
                assert!((blocks[br * 64 + bc] - direct).abs() < 1e-12);
            }
        }
        assert!(block_average(&Raster::filled(100, 128, 0.0), 64).is_err());
    }

    #[test]
    fn flat_field_features_are_zero() {
        let counts = Raster::filled(128, 128, 500.0);
        let f = featurize_counts(&counts, 500.0).unwrap();
        assert_eq!(f.0.len(), FEATURE_DIM);
        assert!(f.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn featurize_needs_counts() {
        let proj = Projection {
            pose: Default::default(),
            line_integrals: Raster::filled(128, 128, 0.0),
            fluence_i0: Some(500.0),
            noisy_counts: None,
        };
        assert!(featurize(&proj, 500.0).is_err());
        let with = Projection { noisy_counts: Some(Raster::filled(128, 128, 250)), ..proj };
        let f = featurize(&with, 500.0).unwrap();
        assert!(f.0.iter().all(|&v| (v - 2f64.ln()).abs() < 1e-12));
        assert_eq!(f, featurize(&with, 500.0).unwrap());
    }

    #[test]
    fn zero_model_predicts_clamped_mean() {
        let mut m = RegressorModel::zeros(&[8, 4, N_CANDIDATES]).unwrap();
        m.output_norm.mean = (0..N_CANDIDATES).map(|i| i as f64 - 3.0).collect();
        let out = m.predict(&FeatureVector(vec![0.3; 8])).unwrap();
        let expected: Vec<f64> = (0..N_CANDIDATES).map(|i| (i as f64 - 3.0).max(0.0)).collect();
        assert_eq!(out, expected);
        assert!(m.predict(&FeatureVector(vec![0.3; 7])).is_err());

        m.target_log_eps = 0.01;
        m.output_norm.mean = vec![0.5f64.ln(); N_CANDIDATES];
        let out = m.predict(&FeatureVector(vec![0.3; 8])).unwrap();
        assert!(out.iter().all(|&v| (v - 0.49).abs() < 1e-12));
    }

    /// Plain nested-loop evaluation of the network.
    fn oracle_predict(m: &RegressorModel, x: &[f64]) -> Vec<f64> {
        let mut a: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v - m.input_norm.mean[i]) / m.input_norm.std[i]).collect();
        for l in 0..m.n_layers() {
            let w = &m.weights[l];
            let mut z = vec![0.0; w.nrows()];
            for r in 0..w.nrows() {
                z[r] = m.biases[l][r] + (0..w.ncols()).map(|c| w[[r, c]] * a[c]).sum::<f64>();
                if l + 1 < m.n_layers() {
                    z[r] = z[r].max(0.0);
                }
            }
            a = z;
        }
        a.iter().enumerate().map(|(i, v)| (v * m.output_norm.std[i] + m.output_norm.mean[i]).max(0.0)).collect()
    }

    #[test]
    fn prediction_matches_matrix_oracle_and_is_batch_invariant() {
        let mut m = RegressorModel::random(&[20, 16, 8, N_CANDIDATES], 3).unwrap();
        m.input_norm = Normalization { mean: vec![0.1; 20], std: vec![2.0; 20] };
        m.output_norm = Normalization { mean: vec![1.0; N_CANDIDATES], std: vec![3.0; N_CANDIDATES] };
        let samples: Vec<FeatureVector> = (0..5).map(|s| random_sample(20, s).input).collect();
        let refs: Vec<&FeatureVector> = samples.iter().collect();
        let batch = m.predict_batch(&refs).unwrap();
        for (f, b) in samples.iter().zip(&batch) {
            let single = m.predict(f).unwrap();
            for ((s, bb), o) in single.iter().zip(b).zip(oracle_predict(&m, &f.0)) {
                assert!((s - bb).abs() < 1e-12);
                assert!((s - o).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn linear_model_gradient_is_exact() {
        let mut m = RegressorModel::random(&[30, N_CANDIDATES], 5).unwrap();
        m.biases[0].iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64);
        let err = grad_check(&m, &random_sample(30, 1), 120, 7, 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn hidden_model_gradient_matches_differences() {
        let m = RegressorModel::random(&[64, 32, 16, N_CANDIDATES], 9).unwrap();
        let err = grad_check(&m, &random_sample(64, 2), 150, 3, 1e-4).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn grad_check_is_scale_invariant() {
        let m = RegressorModel::random(&[40, N_CANDIDATES], 5).unwrap();
        let s = random_sample(40, 4);
        let base = grad_check(&m, &s, 100, 7, 1e-4).unwrap();
        // Scaling weights, biases and targets together scales the loss by 100.
        let mut scaled = m.clone();
        scaled.weights[0].mapv_inplace(|v| v * 10.0);
        scaled.biases[0].mapv_inplace(|v| v * 10.0);
        let mut big = s.clone();
        big.target.iter_mut().for_each(|t| *t *= 10.0);
        let other = grad_check(&scaled, &big, 100, 7, 1e-4).unwrap();
        assert!(base < 1e-6 && other < 1e-6, "{base} {other}");
    }

    #[test]
    fn memorizes_single_sample() {
        // Normalization fitted on one sample would zero both input and target,
        // so the model keeps identity statistics and is fine-tuned instead.
        let s = random_sample(16, 8);
        let model = RegressorModel::random(&[16, 32, 16, N_CANDIDATES], 8).unwrap();
        let cfg = TrainConfig { lr: 0.02, batch: 1, epochs: 400, val_fraction: 0.0, momentum: 0.5, weight_decay: 0.0, ..TrainConfig::default() };
        let (_, trace) = fine_tune(model, &[s], &cfg).unwrap();
        assert!(trace.epochs[0].train_loss_mean > 1e-2);
        assert!(trace.epochs.last().unwrap().train_loss_mean < 1e-6);
    }

    #[test]
    fn training_is_reproducible_and_divergence_is_caught() {
        let samples: Vec<_> = (0..40).map(|s| random_sample(12, s)).collect();
        let cfg = TrainConfig { epochs: 5, batch: 8, layers: vec![12, 10, N_CANDIDATES], ..TrainConfig::default() };
        let (a, ta) = train(&samples, &cfg).unwrap();
        let (b, tb) = train(&samples, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let wild = TrainConfig { lr: 1e3, momentum: 0.0, ..cfg };
        assert!(matches!(train(&samples, &wild), Err(Error::Diverged { .. })));
        assert!(train(&[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let mut m = RegressorModel::random(&[10, 6, N_CANDIDATES], 1).unwrap();
        m.input_norm.mean[3] = 0.25;
        m.output_norm.std[2] = 7.5;
        m.target_log_eps = 0.02;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        m.save(&path).unwrap();
        assert_eq!(RegressorModel::load(&path).unwrap(), m);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(RegressorModel::load(&path).is_err());
    }
}
