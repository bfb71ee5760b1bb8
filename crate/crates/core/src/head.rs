//! The trainable prediction head over frozen backbone features.
//!
//! A small fully-convolutional network (3x3 kernels, ReLU, dropout between
//! hidden layers, one logistic output channel) is fitted by penalized maximum
//! likelihood. Its posterior is then approximated by a Gaussian centred on the
//! fitted parameters with a diagonal empirical-Fisher precision, and
//! Monte-Carlo samples from that Gaussian drive the ensemble used for
//! acquisition.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, PromptableSegmenter, FEATURE_CHANNELS};
use crate::conv::{col2im, conv_forward, conv_hwc, im2col, weights_for_hwc, Real, KERNEL, TAPS};
use crate::domain::{clamp_prob, iou, BinaryMask, ProbabilityMap};
use crate::error::{ensure, Error, Result};
use crate::synth::TrainingExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden_channels: Vec<usize>,
    pub kernel_size: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Pixels per example entering the loss each step.
    pub pixels_per_example: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden_channels: vec![16, 8],
            kernel_size: KERNEL,
            dropout_rate: 0.1,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 8,
            patience: 15,
            min_delta: 1e-4,
            max_epochs: 100,
            seed: 0,
            pixels_per_example: 256,
        }
    }
}

impl HeadConfig {
    /// The full-width head (`[256, 128]` hidden channels).
    pub fn wide() -> Self {
        HeadConfig { hidden_channels: vec![256, 128], ..HeadConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.kernel_size == KERNEL, "only {KERNEL}x{KERNEL} kernels are supported");
        ensure!(
            (0.0..1.0).contains(&self.dropout_rate),
            "dropout rate {} outside [0, 1)",
            self.dropout_rate
        );
        ensure!(
            self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.min_delta >= 0.0,
            "rates must be non-negative"
        );
        ensure!(self.batch_size > 0, "batch size must be positive");
        ensure!(self.pixels_per_example > 0, "pixels_per_example must be positive");
        ensure!(self.hidden_channels.iter().all(|&c| c > 0), "hidden layers need channels");
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(FEATURE_CHANNELS, &self.hidden_channels)
    }
}

/// Channel counts through the network: `[input, hidden.., 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    channels: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    weight_offset: usize,
    bias_offset: usize,
}

impl Architecture {
    pub fn new(input_channels: usize, hidden: &[usize]) -> Result<Self> {
        let mut channels = Vec::with_capacity(hidden.len() + 2);
        channels.push(input_channels);
        channels.extend_from_slice(hidden);
        channels.push(1);
        Architecture::from_channels(channels)
    }

    pub fn from_channels(channels: Vec<usize>) -> Result<Self> {
        ensure!(channels.len() >= 2, "a head needs at least one layer");
        ensure!(channels.iter().all(|&c| c > 0), "zero-width layer in {channels:?}");
        ensure!(*channels.last().unwrap() == 1, "the head must end in one output channel");
        Ok(Architecture { channels })
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn input_channels(&self) -> usize {
        self.channels[0]
    }

    pub fn layers(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.shapes().last().map(|s| s.bias_offset + s.outputs).unwrap_or(0)
    }

    fn shapes(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.channels
            .windows(2)
            .map(|pair| {
                let (inputs, outputs) = (pair[0], pair[1]);
                let weight_offset = offset;
                let bias_offset = weight_offset + outputs * inputs * TAPS;
                offset = bias_offset + outputs;
                LayerShape { inputs, outputs, weight_offset, bias_offset }
            })
            .collect()
    }
}

/// A flat parameter vector plus the architecture it belongs to. Per layer the
/// layout is the `[out][in][3][3]` weights followed by `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    arch: Architecture,
    values: Vec<f64>,
}

impl HeadParams {
    pub fn new(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        ensure!(
            values.len() == arch.param_count(),
            "{} parameters given, architecture {:?} needs {}",
            values.len(),
            arch.channels(),
            arch.param_count()
        );
        ensure!(values.iter().all(|v| v.is_finite()), "parameters must be finite");
        Ok(HeadParams { arch, values })
    }

    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.param_count();
        HeadParams { arch, values: vec![0.0; n] }
    }

    /// He-uniform weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; arch.param_count()];
        for s in arch.shapes() {
            let bound = (6.0 / (s.inputs * TAPS) as f64).sqrt();
            for v in &mut values[s.weight_offset..s.bias_offset] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        HeadParams { arch, values }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_features(&self, features: &FeatureMap) -> Result<()> {
        ensure!(
            features.channels() == self.arch.input_channels(),
            "head expects {} feature channels, got {}",
            self.arch.input_channels(),
            features.channels()
        );
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Cached activations of one forward pass.
struct Trace<T> {
    /// Patch matrix of each layer's input.
    cols: Vec<Vec<T>>,
    /// For hidden layer `l`, `a = z * gate` (ReLU derivative times dropout scale).
    gates: Vec<Vec<T>>,
    logits: Vec<T>,
}

fn forward<T: Real>(
    shapes: &[LayerShape],
    params: &[T],
    input: &[T],
    h: usize,
    w: usize,
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Trace<T> {
    let n = h * w;
    let mut cols = Vec::with_capacity(shapes.len());
    let mut gates = Vec::with_capacity(shapes.len() - 1);
    let mut act: Vec<T> = input.to_vec();
    for (l, s) in shapes.iter().enumerate() {
        let mut c = Vec::new();
        im2col(&act, s.inputs, h, w, &mut c);
        let z = conv_forward(
            &params[s.weight_offset..s.bias_offset],
            &params[s.bias_offset..s.bias_offset + s.outputs],
            &c,
            s.inputs,
            s.outputs,
            n,
        );
        cols.push(c);
        if l + 1 == shapes.len() {
            return Trace { cols, gates, logits: z };
        }
        let gate: Vec<T> = match dropout.as_mut() {
            Some((rate, rng)) => {
                let scale = T::from_f64(1.0 / (1.0 - *rate));
                z.iter()
                    .map(|&v| {
                        let keep = rng.gen::<f64>() >= *rate;
                        if v > T::ZERO && keep {
                            scale
                        } else {
                            T::ZERO
                        }
                    })
                    .collect()
            }
            None => z.iter().map(|&v| if v > T::ZERO { T::ONE } else { T::ZERO }).collect(),
        };
        act = z.iter().zip(&gate).map(|(&v, &g)| v * g).collect();
        gates.push(gate);
    }
    unreachable!("architecture has at least one layer")
}

/// Accumulates `d(sum_p dlogits[p] * z[p]) / d(theta)` into `grad`.
fn backward(shapes: &[LayerShape], params: &[f64], trace: &Trace<f64>, dlogits: &[f64], h: usize, w: usize, grad: &mut [f64]) {
    let n = h * w;
    let mut dz = dlogits.to_vec();
    for l in (0..shapes.len()).rev() {
        let s = shapes[l];
        let k = s.inputs * TAPS;
        let cols = &trace.cols[l];
        f64::gemm(
            s.outputs,
            n,
            k,
            &dz,
            (n, 1),
            cols,
            (1, n),
            1.0,
            &mut grad[s.weight_offset..s.bias_offset],
            k,
        );
        for (o, row) in dz.chunks(n).enumerate() {
            grad[s.bias_offset + o] += row.iter().sum::<f64>();
        }
        if l == 0 {
            break;
        }
        let mut dcols = vec![0.0; k * n];
        f64::gemm(
            k,
            s.outputs,
            n,
            &params[s.weight_offset..s.bias_offset],
            (1, k),
            &dz,
            (n, 1),
            0.0,
            &mut dcols,
            n,
        );
        let da = col2im(&dcols, s.inputs, h, w);
        dz = da.iter().zip(&trace.gates[l - 1]).map(|(&d, &g)| d * g).collect();
    }
}

/// Foreground probability map of the head. With `train_mode` set, dropout is
/// applied using a generator seeded by `seed`; otherwise the pass is pure.
pub fn head_forward(features: &FeatureMap, params: &HeadParams, train_mode: bool, seed: u64) -> Result<ProbabilityMap> {
    params.check_features(features)?;
    let logits = head_logits(features, params, train_mode.then_some(seed), 0.1)?;
    ProbabilityMap::new(features.height(), features.width(), logits.into_iter().map(sigmoid).collect())
}

/// Raw output logits; `dropout_seed` enables dropout at `dropout_rate`.
pub fn head_logits(features: &FeatureMap, params: &HeadParams, dropout_seed: Option<u64>, dropout_rate: f64) -> Result<Vec<f64>> {
    params.check_features(features)?;
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let dropout = rng.as_mut().map(|r| (dropout_rate, r));
    let trace = forward(&params.arch.shapes(), &params.values, features.data(), features.height(), features.width(), dropout);
    Ok(trace.logits)
}

/// One term of the training objective: features, target mask and the
/// linear indices of the pixels that enter the loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm<'a> {
    pub features: &'a FeatureMap,
    pub target: &'a BinaryMask,
    pub pixels: &'a [usize],
}

/// Mean binary cross-entropy over all listed pixels plus `weight_decay / 2 * |theta|^2`,
/// and its exact gradient. `dropout` is `(rate, seed)`.
pub fn objective_and_gradient(params: &HeadParams, terms: &[LossTerm<'_>], weight_decay: f64, dropout: Option<(f64, u64)>) -> Result<(f64, Vec<f64>)> {
    let shapes = params.arch.shapes();
    let total: usize = terms.iter().map(|t| t.pixels.len()).sum();
    ensure!(total > 0, "objective needs at least one pixel");
    let mut rng = dropout.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for term in terms {
        params.check_features(term.features)?;
        let (h, w) = (term.features.height(), term.features.width());
        ensure!(term.target.shape() == (h, w), "target shape differs from features");
        let drop = match (&dropout, rng.as_mut()) {
            (Some((rate, _)), Some(r)) => Some((*rate, r)),
            _ => None,
        };
        let trace = forward(&shapes, &params.values, term.features.data(), h, w, drop);
        let mut dlogits = vec![0.0; h * w];
        for &p in term.pixels {
            let z = trace.logits[p];
            let y = if term.target.bits()[p] { 1.0 } else { 0.0 };
            loss += softplus(z) - y * z;
            dlogits[p] += (sigmoid(z) - y) / total as f64;
        }
        backward(&shapes, &params.values, &trace, &dlogits, h, w, &mut grad);
    }
    loss /= total as f64;
    let norm2: f64 = params.values.iter().map(|v| v * v).sum();
    loss += 0.5 * weight_decay * norm2;
    for (g, v) in grad.iter_mut().zip(&params.values) {
        *g += weight_decay * v;
    }
    Ok((loss, grad))
}

/// Logit at one pixel and its gradient with respect to every parameter,
/// computed on the pixel's receptive field only.
pub fn pixel_logit_gradient(features: &FeatureMap, params: &HeadParams, pixel: usize) -> Result<(f64, Vec<f64>)> {
    params.check_features(features)?;
    let shapes = params.arch.shapes();
    let depth = shapes.len();
    let (h, w) = (features.height() as isize, features.width() as isize);
    let (pr, pc) = ((pixel / features.width()) as isize, (pixel % features.width()) as isize);
    let side = |radius: usize| 2 * radius + 1;
    let inside = |radius: usize, i: usize, j: usize| {
        let r = pr - radius as isize + i as isize;
        let c = pc - radius as isize + j as isize;
        r >= 0 && c >= 0 && r < h && c < w
    };

    // acts[l]: input of layer l on a square grid of radius depth - l.
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(depth);
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(depth);
    let r0 = depth;
    let mut a0 = vec![0.0; features.channels() * side(r0) * side(r0)];
    for c in 0..features.channels() {
        let plane = features.plane(c);
        for i in 0..side(r0) {
            for j in 0..side(r0) {
                if inside(r0, i, j) {
                    let r = (pr - r0 as isize + i as isize) as usize;
                    let cc = (pc - r0 as isize + j as isize) as usize;
                    a0[(c * side(r0) + i) * side(r0) + j] = plane[r * features.width() + cc];
                }
            }
        }
    }
    acts.push(a0);
    for (l, s) in shapes.iter().enumerate() {
        let (rin, rout) = (depth - l, depth - l - 1);
        let (sin, sout) = (side(rin), side(rout));
        let a = &acts[l];
        let wts = &params.values[s.weight_offset..s.bias_offset];
        let mut z = vec![0.0; s.outputs * sout * sout];
        for o in 0..s.outputs {
            for i in 0..sout {
                for j in 0..sout {
                    let mut acc = params.values[s.bias_offset + o];
                    for c in 0..s.inputs {
                        for ky in 0..KERNEL {
                            for kx in 0..KERNEL {
                                acc += wts[(o * s.inputs + c) * TAPS + ky * KERNEL + kx]
                                    * a[(c * sin + i + ky) * sin + j + kx];
                            }
                        }
                    }
                    z[(o * sout + i) * sout + j] = acc;
                }
            }
        }
        if l + 1 < depth {
            let mut next = vec![0.0; z.len()];
            for o in 0..s.outputs {
                for i in 0..sout {
                    for j in 0..sout {
                        let idx = (o * sout + i) * sout + j;
                        if inside(rout, i, j) && z[idx] > 0.0 {
                            next[idx] = z[idx];
                        }
                    }
                }
            }
            acts.push(next);
        }
        pre.push(z);
    }
    let logit = pre[depth - 1][0];

    let mut grad = vec![0.0; params.len()];
    let mut dz = vec![1.0];
    for l in (0..depth).rev() {
        let s = shapes[l];
        let (rin, rout) = (depth - l, depth - l - 1);
        let (sin, sout) = (side(rin), side(rout));
        let a = &acts[l];
        let wts = &params.values[s.weight_offset..s.bias_offset];
        let mut da = if l > 0 { vec![0.0; s.inputs * sin * sin] } else { Vec::new() };
        for o in 0..s.outputs {
            for i in 0..sout {
                for j in 0..sout {
                    let g = dz[(o * sout + i) * sout + j];
                    if g == 0.0 {
                        continue;
                    }
                    grad[s.bias_offset + o] += g;
                    for c in 0..s.inputs {
                        for ky in 0..KERNEL {
                            for kx in 0..KERNEL {
                                let ai = (c * sin + i + ky) * sin + j + kx;
                                let wi = (o * s.inputs + c) * TAPS + ky * KERNEL + kx;
                                grad[s.weight_offset + wi] += g * a[ai];
                                if l > 0 {
                                    da[ai] += g * wts[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        if l > 0 {
            // Gate by the ReLU and the in-image mask of layer l's input.
            let z = &pre[l - 1];
            dz = da
                .iter()
                .enumerate()
                .map(|(idx, &d)| {
                    let rem = idx % (sin * sin);
                    let (i, j) = (rem / sin, rem % sin);
                    if inside(rin, i, j) && z[idx] > 0.0 {
                        d
                    } else {
                        0.0
                    }
                })
                .collect();
        }
    }
    Ok((logit, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainStop {
    #[serde(rename = "early-stop")]
    EarlyStop,
    #[serde(rename = "max-epochs")]
    MaxEpochs,
}

impl TrainStop {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainStop::EarlyStop => "early-stop",
            TrainStop::MaxEpochs => "max-epochs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub stop_reason: TrainStop,
}

/// Features in single precision, to keep a whole training set resident.
struct CachedFeatures {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl CachedFeatures {
    fn new(f: &FeatureMap) -> Self {
        CachedFeatures { h: f.height(), w: f.width(), data: f.data().iter().map(|&v| v as f32).collect() }
    }

    fn expand(&self) -> FeatureMap {
        let c = self.data.len() / (self.h * self.w);
        FeatureMap::new(c, self.h, self.w, self.data.iter().map(|&v| v as f64).collect())
            .expect("cached features are well-formed")
    }
}

fn cache_features(examples: &[TrainingExample], backbone: &dyn PromptableSegmenter) -> Result<Vec<CachedFeatures>> {
    examples
        .iter()
        .map(|ex| Ok(CachedFeatures::new(&backbone.compute_features(&ex.image, &ex.prompts)?)))
        .collect()
}

fn sample_pixels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut picked = rand::seq::index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Mean IoU of the head's 0.5-thresholded probability map against each target.
pub fn mean_iou(params: &HeadParams, features: &[FeatureMap], targets: &[&BinaryMask]) -> Result<f64> {
    ensure!(!features.is_empty(), "no examples to score");
    let mut total = 0.0;
    for (f, t) in features.iter().zip(targets) {
        let probs = head_forward(f, params, false, 0)?;
        total += iou(&probs.threshold(0.5), t)?;
    }
    Ok(total / features.len() as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Fits the head by Adam on the penalized pixelwise log-likelihood, early
/// stopping on validation IoU. Returns the best-validation parameters.
pub fn train_map(
    train: &[TrainingExample],
    val: &[TrainingExample],
    backbone: &dyn PromptableSegmenter,
    config: &HeadConfig,
) -> Result<(HeadParams, TrainRecord)> {
    config.validate()?;
    ensure!(!train.is_empty(), "training split is empty");
    ensure!(!val.is_empty(), "validation split is empty");
    let arch = config.architecture()?;
    let mut params = HeadParams::init(arch, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);

    let train_features = cache_features(train, backbone)?;
    let val_features: Vec<FeatureMap> = val
        .iter()
        .map(|ex| backbone.compute_features(&ex.image, &ex.prompts))
        .collect::<Result<_>>()?;
    let val_targets: Vec<&BinaryMask> = val.iter().map(|ex| &ex.gt_mask).collect();

    let mut adam = Adam::new(params.len());
    let mut best = (f64::NEG_INFINITY, params.clone(), 0usize);
    let mut since_best = 0usize;
    let mut epochs = Vec::new();
    let mut stop_reason = TrainStop::MaxEpochs;
    let dropout = (config.dropout_rate > 0.0).then_some(config.dropout_rate);

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let feats: Vec<FeatureMap> = batch.iter().map(|&i| train_features[i].expand()).collect();
            let pixels: Vec<Vec<usize>> = feats
                .iter()
                .map(|f| sample_pixels(&mut rng, f.pixels(), config.pixels_per_example))
                .collect();
            let terms: Vec<LossTerm<'_>> = batch
                .iter()
                .zip(&feats)
                .zip(&pixels)
                .map(|((&i, f), px)| LossTerm { features: f, target: &train[i].gt_mask, pixels: px })
                .collect();
            let drop_seed: u64 = rng.gen();
            let (loss, grad) = objective_and_gradient(&params, &terms, config.weight_decay, dropout.map(|r| (r, drop_seed)))?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDivergence { epoch });
            }
            adam.update(&mut params.values, &grad, config.learning_rate);
            loss_sum += loss;
            batches += 1;
        }
        let val_iou = mean_iou(&params, &val_features, &val_targets)?;
        epochs.push(EpochRecord { epoch, train_loss: loss_sum / batches as f64, val_iou });
        if val_iou > best.0 + config.min_delta || best.0 == f64::NEG_INFINITY {
            best = (val_iou, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stop_reason = TrainStop::EarlyStop;
                break;
            }
        }
    }
    let stop_epoch = epochs.len();
    Ok((best.1, TrainRecord { epochs, best_epoch: best.2, stop_epoch, stop_reason }))
}

/// Gaussian posterior over head parameters with diagonal precision.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacePosterior {
    pub mean: HeadParams,
    pub precision: Vec<f64>,
    /// Number of examples the precision was accumulated over.
    pub subset_size: usize,
}

/// Precision used to make a posterior collapse onto its mean.
pub const POINT_MASS_PRECISION: f64 = 1e30;

impl LaplacePosterior {
    pub fn new(mean: HeadParams, precision: Vec<f64>, subset_size: usize) -> Result<Self> {
        ensure!(precision.len() == mean.len(), "precision length differs from parameter count");
        ensure!(
            precision.iter().all(|p| p.is_finite() && *p > 0.0),
            "precisions must be positive and finite"
        );
        Ok(LaplacePosterior { mean, precision, subset_size })
    }

    /// A posterior whose samples all equal `mean` (to within `1e-15` relative spread).
    pub fn point_mass(mean: HeadParams) -> Self {
        let n = mean.len();
        LaplacePosterior { mean, precision: vec![POINT_MASS_PRECISION; n], subset_size: 0 }
    }

    pub fn variances(&self) -> impl Iterator<Item = f64> + '_ {
        self.precision.iter().map(|p| 1.0 / p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceConfig {
    pub prior_precision: f64,
    pub pixels_per_example: usize,
    pub seed: u64,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        LaplaceConfig { prior_precision: 1.0, pixels_per_example: 256, seed: 42 }
    }
}

/// Diagonal empirical-Fisher Laplace fit around `map_params` over `subset`.
pub fn fit_laplace(
    map_params: &HeadParams,
    subset: &[TrainingExample],
    backbone: &dyn PromptableSegmenter,
    config: &LaplaceConfig,
) -> Result<LaplacePosterior> {
    ensure!(!subset.is_empty(), "Laplace fit needs a non-empty subset");
    let items = subset
        .iter()
        .map(|ex| Ok((backbone.compute_features(&ex.image, &ex.prompts)?, ex.gt_mask.clone())))
        .collect::<Result<Vec<_>>>()?;
    fit_laplace_on_features(map_params, &items, config)
}

/// As [`fit_laplace`], on precomputed features.
pub fn fit_laplace_on_features(
    map_params: &HeadParams,
    items: &[(FeatureMap, BinaryMask)],
    config: &LaplaceConfig,
) -> Result<LaplacePosterior> {
    ensure!(!items.is_empty(), "Laplace fit needs a non-empty subset");
    ensure!(
        config.prior_precision > 0.0 && config.prior_precision.is_finite(),
        "prior precision must be positive"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut fisher = vec![0.0; map_params.len()];
    for (features, target) in items {
        ensure!(target.shape() == (features.height(), features.width()), "target shape differs from features");
        for p in sample_pixels(&mut rng, features.pixels(), config.pixels_per_example) {
            let (z, dz) = pixel_logit_gradient(features, map_params, p)?;
            let y = if target.bits()[p] { 1.0 } else { 0.0 };
            // d log p(y | z) / dz = y - sigmoid(z)
            let r = y - sigmoid(z);
            for (f, g) in fisher.iter_mut().zip(&dz) {
                let gi = r * g;
                *f += gi * gi;
            }
        }
    }
    let precision = fisher.into_iter().map(|f| config.prior_precision + f).collect();
    LaplacePosterior::new(map_params.clone(), precision, items.len())
}

/// `k` draws `mean + eps`, `eps_i ~ N(0, 1 / precision_i)`.
pub fn sample_posterior(posterior: &LaplacePosterior, k: usize, seed: u64) -> Result<Vec<HeadParams>> {
    Ok(sample_diagonal_gaussian(&posterior.mean.values, &posterior.precision, k, seed)?
        .into_iter()
        .map(|values| HeadParams { arch: posterior.mean.arch.clone(), values })
        .collect())
}

/// `k` draws from `N(mean, diag(1 / precision))`, one seeded stream for all of them.
pub fn sample_diagonal_gaussian(mean: &[f64], precision: &[f64], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    ensure!(k >= 1, "need at least one posterior sample");
    ensure!(mean.len() == precision.len(), "precision length differs from mean length");
    ensure!(precision.iter().all(|p| *p > 0.0), "precisions must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = precision.iter().map(|p| p.sqrt().recip()).collect();
    Ok((0..k)
        .map(|_| {
            mean.iter()
                .zip(&scales)
                .map(|(&m, &s)| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    m + s * e
                })
                .collect()
        })
        .collect())
}

/// Dropout-free probability maps for many parameter vectors sharing one
/// architecture, computed in single precision.
pub fn ensemble_forward(features: &FeatureMap, samples: &[HeadParams]) -> Result<Vec<ProbabilityMap>> {
    Ensemble::new(samples, &[])?.forward(features)
}

/// Posterior samples laid out for repeated forward passes over one image.
///
/// The first layer of every sample runs as one GEMM over a shared patch
/// matrix. Channels listed as fixed are assumed to change rarely (typically
/// image-only channels); their share of that GEMM is cached and recomputed
/// only when their planes differ from the cached copy.
#[derive(Debug, Clone)]
pub struct Ensemble {
    arch: Architecture,
    k: usize,
    fixed: Vec<usize>,
    moving: Vec<usize>,
    w_fixed: Vec<f32>,
    w_moving: Vec<f32>,
    bias: Vec<f32>,
    later: Vec<Vec<(Vec<f32>, Vec<f32>)>>,
    cache: Option<FixedPart>,
}

#[derive(Debug, Clone)]
struct FixedPart {
    shape: (usize, usize),
    planes: Vec<f32>,
    out: Vec<f32>,
}

fn narrow(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl Ensemble {
    pub fn new(samples: &[HeadParams], fixed_channels: &[usize]) -> Result<Self> {
        ensure!(!samples.is_empty(), "ensemble needs at least one sample");
        let arch = samples[0].architecture().clone();
        ensure!(
            samples.iter().all(|s| s.architecture() == &arch),
            "ensemble samples have different architectures"
        );
        let shapes = arch.shapes();
        let first = shapes[0];
        let mut fixed: Vec<usize> = fixed_channels.to_vec();
        fixed.sort_unstable();
        fixed.dedup();
        ensure!(
            fixed.iter().all(|&c| c < first.inputs),
            "fixed channel out of range for {} inputs",
            first.inputs
        );
        let moving: Vec<usize> = (0..first.inputs).filter(|c| fixed.binary_search(c).is_err()).collect();
        let gather = |channels: &[usize]| {
            let mut out = Vec::with_capacity(samples.len() * first.outputs * channels.len() * TAPS);
            for s in samples {
                let w = &s.values[first.weight_offset..first.bias_offset];
                for row in w.chunks(first.inputs * TAPS) {
                    for &c in channels {
                        out.extend(row[c * TAPS..(c + 1) * TAPS].iter().map(|&x| x as f32));
                    }
                }
            }
            out
        };
        let (w_fixed, w_moving) = (gather(&fixed), gather(&moving));
        let bias = samples
            .iter()
            .flat_map(|s| narrow(&s.values[first.bias_offset..first.bias_offset + first.outputs]))
            .collect();
        let later = samples
            .iter()
            .map(|s| {
                shapes[1..]
                    .iter()
                    .map(|l| {
                        (
                            weights_for_hwc(&narrow(&s.values[l.weight_offset..l.bias_offset]), l.inputs, l.outputs),
                            narrow(&s.values[l.bias_offset..l.bias_offset + l.outputs]),
                        )
                    })
                    .collect()
            })
            .collect();
        Ok(Ensemble { arch, k: samples.len(), fixed, moving, w_fixed, w_moving, bias, later, cache: None })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    fn gather_planes(features: &FeatureMap, channels: &[usize]) -> Vec<f32> {
        channels.iter().flat_map(|&c| features.plane(c).iter().map(|&x| x as f32)).collect()
    }

    /// First-layer pre-activations of every sample, `[k * outputs][h * w]`.
    fn first_layer(&mut self, features: &FeatureMap) -> Vec<f32> {
        let (h, w) = (features.height(), features.width());
        let n = h * w;
        let outputs = self.arch.shapes()[0].outputs;
        let rows = self.k * outputs;
        let mut cols = Vec::new();
        let fixed_planes = Self::gather_planes(features, &self.fixed);
        let stale = match &self.cache {
            Some(c) => c.shape != (h, w) || c.planes != fixed_planes,
            None => true,
        };
        if stale {
            let mut out = vec![0.0f32; rows * n];
            for (o, row) in out.chunks_mut(n).enumerate() {
                row.fill(self.bias[o]);
            }
            if !self.fixed.is_empty() {
                im2col(&fixed_planes, self.fixed.len(), h, w, &mut cols);
                let kk = self.fixed.len() * TAPS;
                f32::gemm(rows, kk, n, &self.w_fixed, (kk, 1), &cols, (n, 1), 1.0, &mut out, n);
            }
            self.cache = Some(FixedPart { shape: (h, w), planes: fixed_planes, out });
        }
        let mut out = self.cache.as_ref().expect("filled above").out.clone();
        if !self.moving.is_empty() {
            im2col(&Self::gather_planes(features, &self.moving), self.moving.len(), h, w, &mut cols);
            let kk = self.moving.len() * TAPS;
            f32::gemm(rows, kk, n, &self.w_moving, (kk, 1), &cols, (n, 1), 1.0, &mut out, n);
        }
        out
    }

    /// One probability map per sample.
    pub fn forward(&mut self, features: &FeatureMap) -> Result<Vec<ProbabilityMap>> {
        ensure!(
            features.channels() == self.arch.input_channels(),
            "head expects {} feature channels, got {}",
            self.arch.input_channels(),
            features.channels()
        );
        let shapes = self.arch.shapes();
        let (h, w) = (features.height(), features.width());
        let n = h * w;
        let first_out = self.first_layer(features);
        let width = shapes[0].outputs;
        let block = width * n;
        self.later
            .iter()
            .enumerate()
            .map(|(i, layers)| {
                let planes = &first_out[i * block..(i + 1) * block];
                let mut act = if layers.is_empty() {
                    planes.to_vec()
                } else {
                    // Later layers run pixel-major.
                    let mut hwc = vec![0.0f32; block];
                    for (c, plane) in planes.chunks(n).enumerate() {
                        for (p, &v) in plane.iter().enumerate() {
                            hwc[p * width + c] = v;
                        }
                    }
                    hwc
                };
                for (s, (weights, bias)) in shapes[1..].iter().zip(layers) {
                    act.iter_mut().for_each(|v| *v = v.max(0.0));
                    act = conv_hwc(weights, bias, &act, s.inputs, s.outputs, h, w);
                }
                ProbabilityMap::new(h, w, act.into_iter().map(|z| clamp_prob(sigmoid(z as f64))).collect())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> Architecture {
        Architecture::new(FEATURE_CHANNELS, &[4]).unwrap()
    }

    fn pseudo_features(h: usize, w: usize, salt: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(salt);
        let data = (0..FEATURE_CHANNELS * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(FEATURE_CHANNELS, h, w, data).unwrap()
    }

    fn pseudo_mask(h: usize, w: usize, salt: u64) -> BinaryMask {
        let mut rng = ChaCha8Rng::seed_from_u64(salt);
        BinaryMask::from_fn(h, w, |_| rng.gen())
    }

    #[test]
    fn param_counts() {
        let a = Architecture::new(32, &[16, 8]).unwrap();
        assert_eq!(a.param_count(), 16 * 32 * 9 + 16 + 8 * 16 * 9 + 8 + 8 * 9 + 1);
        assert_eq!(tiny_arch().param_count(), 4 * 32 * 9 + 4 + 4 * 9 + 1);
        assert!(Architecture::from_channels(vec![32, 2]).is_err());
    }

    #[test]
    fn zero_params_give_half() {
        let params = HeadParams::zeros(Architecture::new(32, &[16, 8]).unwrap());
        let probs = head_forward(&pseudo_features(6, 5, 1), &params, false, 0).unwrap();
        assert!(probs.values().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn eval_mode_is_pure_and_train_mode_is_seeded() {
        let params = HeadParams::init(Architecture::new(32, &[16, 8]).unwrap(), 3);
        let f = pseudo_features(8, 8, 2);
        assert_eq!(head_forward(&f, &params, false, 1).unwrap(), head_forward(&f, &params, false, 2).unwrap());
        let a = head_forward(&f, &params, true, 5).unwrap();
        assert_eq!(a, head_forward(&f, &params, true, 5).unwrap());
        assert_ne!(a, head_forward(&f, &params, false, 5).unwrap());
    }

    #[test]
    fn single_layer_single_pixel_matches_hand_value() {
        // One 3x3 layer on a 1x1 map only sees the centre tap.
        let arch = Architecture::from_channels(vec![32, 1]).unwrap();
        let mut values = vec![0.0; arch.param_count()];
        let mut data = vec![0.0; 32];
        let mut expected = -0.3; // bias
        for c in 0..32 {
            let x = (c as f64 - 15.5) / 20.0;
            let wt = 0.05 * ((c % 7) as f64 - 3.0);
            data[c] = x;
            values[c * 9 + 4] = wt;
            // Off-centre taps hit zero padding.
            values[c * 9] = 1.0;
            expected += wt * x;
        }
        values[32 * 9] = -0.3;
        let params = HeadParams::new(arch, values).unwrap();
        let f = FeatureMap::new(32, 1, 1, data).unwrap();
        let p = head_forward(&f, &params, false, 0).unwrap().values()[0];
        assert!((p - 1.0 / (1.0 + (-expected).exp())).abs() < 1e-12);
    }

    #[test]
    fn mismatched_features_rejected() {
        let params = HeadParams::zeros(tiny_arch());
        let f = FeatureMap::zeros(3, 4, 4);
        assert!(matches!(head_forward(&f, &params, false, 0), Err(Error::Contract(_))));
    }

    fn finite_difference_error(dropout: Option<(f64, u64)>) -> f64 {
        let params = HeadParams::init(tiny_arch(), 7);
        let feats = [pseudo_features(4, 4, 11), pseudo_features(4, 4, 12)];
        let masks = [pseudo_mask(4, 4, 13), pseudo_mask(4, 4, 14)];
        let all: Vec<usize> = (0..16).collect();
        let some = [0usize, 3, 5, 6, 10, 15];
        let terms = [
            LossTerm { features: &feats[0], target: &masks[0], pixels: &all },
            LossTerm { features: &feats[1], target: &masks[1], pixels: &some },
        ];
        let (_, analytic) = objective_and_gradient(&params, &terms, 1e-2, dropout).unwrap();
        let step = 1e-4;
        let mut numeric = vec![0.0; params.len()];
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.values[i] += step;
            let mut minus = params.clone();
            minus.values[i] -= step;
            let lp = objective_and_gradient(&plus, &terms, 1e-2, dropout).unwrap().0;
            let lm = objective_and_gradient(&minus, &terms, 1e-2, dropout).unwrap().0;
            numeric[i] = (lp - lm) / (2.0 * step);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / na.max(nn)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        assert!(finite_difference_error(None) < 1e-4);
        assert!(finite_difference_error(Some((0.1, 99))) < 1e-4);
    }

    #[test]
    fn pixel_gradient_agrees_with_full_backward() {
        let params = HeadParams::init(Architecture::new(32, &[6, 3]).unwrap(), 5);
        let f = pseudo_features(7, 9, 21);
        let logits = head_logits(&f, &params, None, 0.0).unwrap();
        for pixel in [0usize, 8, 31, 62] {
            let (z, g) = pixel_logit_gradient(&f, &params, pixel).unwrap();
            assert!((z - logits[pixel]).abs() < 1e-12);
            // Full backward of the single logit.
            let shapes = params.arch.shapes();
            let trace = forward(&shapes, &params.values, f.data(), 7, 9, None);
            let mut dl = vec![0.0; 63];
            dl[pixel] = 1.0;
            let mut full = vec![0.0; params.len()];
            backward(&shapes, &params.values, &trace, &dl, 7, 9, &mut full);
            for (a, b) in g.iter().zip(&full) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn laplace_precision_at_least_prior() {
        let params = HeadParams::init(tiny_arch(), 1);
        let items = vec![(pseudo_features(5, 5, 1), pseudo_mask(5, 5, 2))];
        let post = fit_laplace_on_features(&params, &items, &LaplaceConfig { prior_precision: 2.5, ..Default::default() }).unwrap();
        assert!(post.precision.iter().all(|&p| p >= 2.5));
        assert_eq!(post.subset_size, 1);
        assert!(fit_laplace_on_features(&params, &[], &LaplaceConfig::default()).is_err());
    }

    #[test]
    fn point_mass_samples_equal_mean() {
        let mean = HeadParams::init(tiny_arch(), 9);
        let s = sample_posterior(&LaplacePosterior::point_mass(mean.clone()), 1, 4).unwrap();
        for (a, b) in s[0].values().iter().zip(mean.values()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(sample_posterior(&LaplacePosterior::point_mass(mean), 0, 4).is_err());
    }

    #[test]
    fn ensemble_forward_matches_single_forward() {
        let arch = Architecture::new(32, &[5, 3]).unwrap();
        let samples: Vec<HeadParams> = (0..4).map(|s| HeadParams::init(arch.clone(), s)).collect();
        let f = pseudo_features(6, 7, 8);
        let maps = ensemble_forward(&f, &samples).unwrap();
        assert_eq!(maps.len(), 4);
        for (m, s) in maps.iter().zip(&samples) {
            let single = head_forward(&f, s, false, 0).unwrap();
            for (a, b) in m.values().iter().zip(single.values()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn cached_channels_follow_their_planes() {
        let arch = Architecture::new(32, &[9]).unwrap();
        let samples: Vec<HeadParams> = (0..3).map(|s| HeadParams::init(arch.clone(), s + 20)).collect();
        let mut cached = Ensemble::new(&samples, &[0, 3, 31]).unwrap();
        for salt in [1, 1, 2, 3] {
            let f = pseudo_features(5, 6, salt);
            let got = cached.forward(&f).unwrap();
            let want = ensemble_forward(&f, &samples).unwrap();
            for (g, w) in got.iter().zip(&want) {
                for (a, b) in g.values().iter().zip(w.values()) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
        assert!(Ensemble::new(&samples, &[32]).is_err());
    }
}
