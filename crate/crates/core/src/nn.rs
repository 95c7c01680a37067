//! Layers and the toy teacher/student networks.
//!
//! A [`Network`] is an ordered list of [`Layer`]s with one designated
//! feature-tap layer whose output is the distilled feature map. Parameters
//! are plain tensors; each forward pass lifts them onto a fresh [`Tape`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::distr::{Distribution, Uniform};
use rand::{Rng, RngCore};

use crate::rng::{self, Stream};
use crate::{Error, FeatureBatch, Result, Tape, Tensor, Var};

/// EMA weight of the current batch in running statistics.
pub const STANDARDIZE_MOMENTUM: f64 = 0.1;
/// Variance floor of batch standardization.
pub const VARIANCE_FLOOR: f64 = 1e-5;

pub const TEACHER_WIDTH: usize = 16;
pub const STUDENT_WIDTH: usize = 8;
/// Index of the second convolution in [`toy_specs`].
pub const TOY_FEATURE_TAP: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Linear {
        fan_in: usize,
        fan_out: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Relu,
    /// Non-affine per-channel standardization over (B, H, W).
    BatchStandardize {
        channels: usize,
    },
    /// Inverted dropout; `keep` is the keep probability.
    Dropout {
        keep: f64,
    },
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchStandardize { .. } => "batch_standardize",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Linear { fan_in, fan_out } if fan_in == 0 || fan_out == 0 => {
                Err(Error::config("linear layer needs positive fan-in and fan-out"))
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } if in_channels == 0 || out_channels == 0 || !(kernel == 1 || kernel == 3) => {
                Err(Error::config(format!(
                    "conv2d needs positive channels and a 1×1 or 3×3 kernel, got {in_channels}→{out_channels}, k={kernel}"
                )))
            }
            LayerSpec::BatchStandardize { channels: 0 } => {
                Err(Error::config("batch_standardize needs at least one channel"))
            }
            LayerSpec::Dropout { keep } if !(keep > 0.0 && keep <= 1.0) => Err(Error::config(
                format!("dropout keep probability must be in (0, 1], got {keep}"),
            )),
            _ => Ok(()),
        }
    }
}

/// conv(1→w, 3×3, pad 1) – relu – conv(w→w, 3×3, pad 1) – global average
/// pool – linear(w→classes). The second convolution is the feature tap.
pub fn toy_specs(width: usize, classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: width,
            kernel: 3,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Conv2d {
            in_channels: width,
            out_channels: width,
            kernel: 3,
            padding: 1,
        },
        LayerSpec::GlobalAvgPool,
        LayerSpec::Linear {
            fan_in: width,
            fan_out: classes,
        },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Non-affine batch standardization with EMA running statistics.
///
/// Train mode normalizes each channel by its batch mean and population
/// variance (floored at [`VARIANCE_FLOOR`]) and folds them into the running
/// statistics; eval mode applies `(x − running_mean) / √(running_var + 1e-5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStandardize {
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

impl BatchStandardize {
    pub fn new(channels: usize) -> Self {
        BatchStandardize {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn from_stats(running_mean: Vec<f64>, running_var: Vec<f64>) -> Result<Self> {
        if running_mean.len() != running_var.len() || running_mean.is_empty() {
            return Err(Error::shape(
                "batch_standardize",
                format!(
                    "running mean has {} channels, running var {}",
                    running_mean.len(),
                    running_var.len()
                ),
            ));
        }
        if running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::domain("batch_standardize", "negative running variance"));
        }
        Ok(BatchStandardize {
            running_mean,
            running_var,
        })
    }

    /// Running statistics set to the exact per-channel population moments
    /// of `x`, as if the EMA had converged on it.
    pub fn fit(x: &FeatureBatch) -> Result<Self> {
        let (mean, var) = channel_stats(x);
        BatchStandardize::from_stats(mean, var)
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    fn check(&self, dims: &[usize]) -> Result<()> {
        if dims.len() != 4 || dims[1] != self.channels() {
            return Err(Error::shape(
                "batch_standardize",
                format!("expected B×{}×H×W, got {dims:?}", self.channels()),
            ));
        }
        Ok(())
    }

    fn absorb(&mut self, mean: &[f64], var: &[f64]) {
        for c in 0..self.channels() {
            self.running_mean[c] =
                (1.0 - STANDARDIZE_MOMENTUM) * self.running_mean[c] + STANDARDIZE_MOMENTUM * mean[c];
            self.running_var[c] =
                (1.0 - STANDARDIZE_MOMENTUM) * self.running_var[c] + STANDARDIZE_MOMENTUM * var[c];
        }
    }

    /// Train-mode pass on plain values; updates the running statistics.
    pub fn forward_train(&mut self, x: &FeatureBatch) -> Result<FeatureBatch> {
        self.check(x.tensor().dims())?;
        if x.batch() < 2 {
            return Err(Error::usage("batch_standardize in train mode needs batch size ≥ 2"));
        }
        let (mean, var) = channel_stats(x);
        let out = apply_channelwise(x, |c, v| (v - mean[c]) / libm::sqrt(var[c].max(VARIANCE_FLOOR)))?;
        self.absorb(&mean, &var);
        Ok(out)
    }

    pub fn forward_eval(&self, x: &FeatureBatch) -> Result<FeatureBatch> {
        self.check(x.tensor().dims())?;
        let scale: Vec<f64> = self
            .running_var
            .iter()
            .map(|&v| libm::sqrt(v + VARIANCE_FLOOR))
            .collect();
        apply_channelwise(x, |c, v| (v - self.running_mean[c]) / scale[c])
    }

    /// Inverse of [`BatchStandardize::forward_eval`].
    pub fn destandardize(&self, z: &FeatureBatch) -> Result<FeatureBatch> {
        self.check(z.tensor().dims())?;
        let scale: Vec<f64> = self
            .running_var
            .iter()
            .map(|&v| libm::sqrt(v + VARIANCE_FLOOR))
            .collect();
        apply_channelwise(z, |c, v| v * scale[c] + self.running_mean[c])
    }

    fn tape_forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        updates: &mut Vec<(Vec<f64>, Vec<f64>)>,
    ) -> Result<Var> {
        let dims = tape.value(x).dims().to_vec();
        self.check(&dims)?;
        let c = self.channels();
        match mode {
            Mode::Train => {
                if dims[0] < 2 {
                    return Err(Error::usage(
                        "batch_standardize in train mode needs batch size ≥ 2",
                    ));
                }
                let mean = tape.mean(x, &[0, 2, 3])?;
                let var = tape.var_population(x, &[0, 2, 3])?;
                updates.push((
                    tape.value(mean).values().to_vec(),
                    tape.value(var).values().to_vec(),
                ));
                let centered = tape.sub(x, mean)?;
                let floored = tape.clamp_min(var, VARIANCE_FLOOR)?;
                let scale = tape.sqrt(floored)?;
                tape.div(centered, scale)
            }
            Mode::Eval => {
                let mean = tape.constant(Tensor::new([1, c, 1, 1], self.running_mean.clone())?);
                let scale = tape.constant(Tensor::new(
                    [1, c, 1, 1],
                    self.running_var
                        .iter()
                        .map(|&v| libm::sqrt(v + VARIANCE_FLOOR))
                        .collect(),
                )?);
                let centered = tape.sub(x, mean)?;
                tape.div(centered, scale)
            }
        }
    }
}

fn channel_stats(x: &FeatureBatch) -> (Vec<f64>, Vec<f64>) {
    let [c, h, w] = x.sample_dims();
    let plane = h * w;
    let n = (x.batch() * plane) as f64;
    let v = x.tensor().values();
    let mut mean = vec![0.0; c];
    for b in 0..x.batch() {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            mean[ch] += v[start..start + plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for b in 0..x.batch() {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            var[ch] += v[start..start + plane]
                .iter()
                .map(|&x| (x - mean[ch]) * (x - mean[ch]))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

fn apply_channelwise(x: &FeatureBatch, f: impl Fn(usize, f64) -> f64) -> Result<FeatureBatch> {
    let [c, h, w] = x.sample_dims();
    let plane = h * w;
    let values = x
        .tensor()
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| f((i / plane) % c, v))
        .collect();
    FeatureBatch::new(Tensor::from_shape(x.tensor().shape().clone(), values)?)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `y = x·W + b` with `W` stored `fan_in × fan_out` and `b` as `1 × fan_out`.
    Linear { weight: Tensor, bias: Tensor },
    /// Kernel `Cout×Cin×k×k`, bias `Cout×1×1`.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        padding: usize,
    },
    Relu,
    BatchStandardize(BatchStandardize),
    Dropout { keep: f64 },
    GlobalAvgPool,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Linear { weight, .. } => LayerSpec::Linear {
                fan_in: weight.dims()[0],
                fan_out: weight.dims()[1],
            },
            Layer::Conv2d {
                weight, padding, ..
            } => LayerSpec::Conv2d {
                in_channels: weight.dims()[1],
                out_channels: weight.dims()[0],
                kernel: weight.dims()[2],
                padding: *padding,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::BatchStandardize(bs) => LayerSpec::BatchStandardize {
                channels: bs.channels(),
            },
            Layer::Dropout { keep } => LayerSpec::Dropout { keep: *keep },
            Layer::GlobalAvgPool => LayerSpec::GlobalAvgPool,
        }
    }

    pub fn kind(&self) -> &'static str {
        self.spec().kind()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            _ => Vec::new(),
        }
    }

    /// Checks parameter shapes against each other.
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: alloc::string::String| Err(Error::shape("layer", detail));
        match self {
            Layer::Linear { weight, bias } => {
                if weight.shape().rank() != 2 || bias.dims() != [1, weight.dims()[1]] {
                    return bad(format!(
                        "linear weight {:?} with bias {:?}",
                        weight.shape(),
                        bias.shape()
                    ));
                }
            }
            Layer::Conv2d { weight, bias, .. } => {
                let d = weight.dims();
                if d.len() != 4 || d[2] != d[3] || !(d[2] == 1 || d[2] == 3) || bias.dims() != [d[0], 1, 1]
                {
                    return bad(format!(
                        "conv2d kernel {:?} with bias {:?}",
                        weight.shape(),
                        bias.shape()
                    ));
                }
            }
            Layer::Dropout { keep } => {
                LayerSpec::Dropout { keep: *keep }.validate()?;
            }
            _ => {}
        }
        Ok(())
    }
}

fn uniform_fill(dims: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let bound = libm::sqrt(6.0 / fan_in as f64);
    let dist = Uniform::new_inclusive(-bound, bound)
        .map_err(|e| Error::config(format!("weight init: {e}")))?;
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

impl Layer {
    /// Draws weights uniformly in `±√(6/fan_in)`; biases start at zero.
    pub fn init(spec: &LayerSpec, rng: &mut impl Rng) -> Result<Layer> {
        spec.validate()?;
        Ok(match *spec {
            LayerSpec::Linear { fan_in, fan_out } => Layer::Linear {
                weight: uniform_fill(&[fan_in, fan_out], fan_in, rng)?,
                bias: Tensor::zeros([1, fan_out])?,
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => Layer::Conv2d {
                weight: uniform_fill(
                    &[out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    rng,
                )?,
                bias: Tensor::zeros([out_channels, 1, 1])?,
                padding,
            },
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::BatchStandardize { channels } => {
                Layer::BatchStandardize(BatchStandardize::new(channels))
            }
            LayerSpec::Dropout { keep } => Layer::Dropout { keep },
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
        })
    }
}

/// Tape handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub output: Var,
    pub feature: Var,
    /// One handle per parameter, in [`Network::params`] order.
    pub params: Vec<Var>,
}

/// Per-pass options: whether parameters receive gradients and the stream
/// used by train-mode dropout.
pub struct ForwardOptions<'a> {
    pub trainable: bool,
    pub dropout_rng: Option<&'a mut dyn RngCore>,
}

impl ForwardOptions<'_> {
    pub fn frozen() -> Self {
        ForwardOptions {
            trainable: false,
            dropout_rng: None,
        }
    }

    pub fn trainable() -> Self {
        ForwardOptions {
            trainable: true,
            dropout_rng: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    feature_tap: usize,
    mode: Mode,
}

impl Network {
    /// Builds a network from specs with seeded uniform initialization.
    pub fn init(specs: &[LayerSpec], feature_tap: usize, seed: u64) -> Result<Network> {
        if specs.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| Layer::init(spec, &mut rng::keyed(Stream::Init, seed, i as u64, 0)))
            .collect::<Result<Vec<_>>>()?;
        Network::from_layers(layers, feature_tap)
    }

    pub fn from_layers(layers: Vec<Layer>, feature_tap: usize) -> Result<Network> {
        if feature_tap >= layers.len() {
            return Err(Error::config(format!(
                "feature tap index {feature_tap} out of range for {} layers",
                layers.len()
            )));
        }
        for (index, layer) in layers.iter().enumerate() {
            layer.validate().map_err(|e| Error::Layer {
                index,
                kind: layer.kind(),
                source: alloc::boxed::Box::new(e),
            })?;
        }
        Ok(Network {
            layers,
            feature_tap,
            mode: Mode::Train,
        })
    }

    /// Toy teacher (16 channels) in train mode.
    pub fn teacher(classes: usize, seed: u64) -> Result<Network> {
        Network::init(&toy_specs(TEACHER_WIDTH, classes), TOY_FEATURE_TAP, seed)
    }

    /// Toy student (8 channels) in train mode.
    pub fn student(classes: usize, seed: u64) -> Result<Network> {
        Network::init(&toy_specs(STUDENT_WIDTH, classes), TOY_FEATURE_TAP, seed)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn feature_tap(&self) -> usize {
        self.feature_tap
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Channels of the feature tap output, if the tap is a convolution.
    pub fn feature_channels(&self) -> Option<usize> {
        match &self.layers[self.feature_tap] {
            Layer::Conv2d { weight, .. } => Some(weight.dims()[0]),
            _ => None,
        }
    }

    /// Records a full forward pass in the current mode. Train mode updates
    /// batch-standardization running statistics.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, opts: ForwardOptions<'_>) -> Result<ForwardPass> {
        let mut updates = Vec::new();
        let (pass, _) = self.run(tape, x, 0..self.layers.len(), self.mode, opts, &mut updates)?;
        let mut updates = updates.into_iter();
        for layer in &mut self.layers {
            if let Layer::BatchStandardize(bs) = layer {
                if let Some((mean, var)) = updates.next() {
                    bs.absorb(&mean, &var);
                }
            }
        }
        Ok(pass)
    }

    /// Eval-mode pass over a sub-range of layers, starting from `x`.
    pub fn forward_range(&self, tape: &mut Tape, x: Var, layers: Range<usize>) -> Result<Var> {
        let mut sink = Vec::new();
        let (_, out) = self.run(tape, x, layers, Mode::Eval, ForwardOptions::frozen(), &mut sink)?;
        Ok(out)
    }

    /// Eval-mode prediction on plain values: `(output, feature)`.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut sink = Vec::new();
        let (pass, _) = self.run(
            &mut tape,
            xv,
            0..self.layers.len(),
            Mode::Eval,
            ForwardOptions::frozen(),
            &mut sink,
        )?;
        Ok((tape.value(pass.output).clone(), tape.value(pass.feature).clone()))
    }

    /// Eval-mode output of the layers after the feature tap applied to `feature`.
    pub fn head(&self, feature: &FeatureBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.constant(feature.tensor().clone());
        let out = self.forward_range(&mut tape, f, self.feature_tap + 1..self.layers.len())?;
        Ok(tape.value(out).clone())
    }

    fn run(
        &self,
        tape: &mut Tape,
        x: Var,
        range: Range<usize>,
        mode: Mode,
        mut opts: ForwardOptions<'_>,
        updates: &mut Vec<(Vec<f64>, Vec<f64>)>,
    ) -> Result<(ForwardPass, Var)> {
        let mut h = x;
        let mut feature = x;
        let mut params = Vec::new();
        for index in range {
            let layer = &self.layers[index];
            let wrap = |e: Error| Error::Layer {
                index,
                kind: layer.kind(),
                source: alloc::boxed::Box::new(e),
            };
            h = match layer {
                Layer::Linear { weight, bias } => {
                    let w = tape.leaf(weight.clone(), opts.trainable);
                    let b = tape.leaf(bias.clone(), opts.trainable);
                    params.extend([w, b]);
                    let y = tape.matmul(h, w).map_err(wrap)?;
                    tape.add(y, b).map_err(wrap)?
                }
                Layer::Conv2d {
                    weight,
                    bias,
                    padding,
                } => {
                    let w = tape.leaf(weight.clone(), opts.trainable);
                    let b = tape.leaf(bias.clone(), opts.trainable);
                    params.extend([w, b]);
                    let y = tape.conv2d(h, w, 1, *padding).map_err(wrap)?;
                    tape.add(y, b).map_err(wrap)?
                }
                Layer::Relu => tape.relu(h).map_err(wrap)?,
                Layer::BatchStandardize(bs) => bs.tape_forward(tape, h, mode, updates).map_err(wrap)?,
                Layer::Dropout { keep } => {
                    if mode == Mode::Eval || *keep >= 1.0 {
                        h
                    } else {
                        let rng = opts
                            .dropout_rng
                            .as_deref_mut()
                            .ok_or_else(|| wrap(Error::usage("train-mode dropout needs a random stream")))?;
                        let dims = tape.value(h).dims().to_vec();
                        let n: usize = dims.iter().product();
                        let mask: Vec<f64> = (0..n)
                            .map(|_| {
                                if rng.random::<f64>() < *keep {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let m = tape.constant(Tensor::new(dims, mask)?);
                        tape.mul(h, m).map_err(wrap)?
                    }
                }
                Layer::GlobalAvgPool => {
                    let dims = tape.value(h).dims().to_vec();
                    if dims.len() != 4 {
                        return Err(wrap(Error::shape(
                            "global_avg_pool",
                            format!("expected B×C×H×W, got {dims:?}"),
                        )));
                    }
                    let pooled = tape.mean(h, &[2, 3]).map_err(wrap)?;
                    tape.reshape(pooled, &[dims[0], dims[1]]).map_err(wrap)?
                }
            };
            if index == self.feature_tap {
                feature = h;
            }
        }
        Ok((
            ForwardPass {
                output: h,
                feature,
                params,
            },
            h,
        ))
    }
}

/// 1×1 convolution adapting student feature channels to teacher channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    weight: Tensor,
    bias: Tensor,
}

impl Projection {
    pub fn init(student_channels: usize, teacher_channels: usize, seed: u64) -> Result<Projection> {
        let mut rng = rng::keyed(Stream::Init, seed, u64::MAX, 0);
        match Layer::init(
            &LayerSpec::Conv2d {
                in_channels: student_channels,
                out_channels: teacher_channels,
                kernel: 1,
                padding: 0,
            },
            &mut rng,
        )? {
            Layer::Conv2d { weight, bias, .. } => Ok(Projection { weight, bias }),
            _ => unreachable!(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    /// Records `φ(feature)`; returns the projected feature and the two
    /// parameter handles.
    pub fn apply(&self, tape: &mut Tape, feature: Var, trainable: bool) -> Result<(Var, [Var; 2])> {
        let w = tape.leaf(self.weight.clone(), trainable);
        let b = tape.leaf(self.bias.clone(), trainable);
        let y = tape.conv2d(feature, w, 1, 0)?;
        Ok((tape.add(y, b)?, [w, b]))
    }
}

/// Mean cross-entropy of `logits[B×K]` against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let dims = tape.value(logits).dims().to_vec();
    if dims.len() != 2 || dims[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {dims:?} for {} labels", labels.len()),
        ));
    }
    let (b, k) = (dims[0], dims[1]);
    let mut onehot = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::usage(format!("label {y} out of range for {k} classes")));
        }
        onehot[i * k + y] = 1.0;
    }
    let logp = tape.log_softmax(logits, &[1])?;
    let target = tape.constant(Tensor::new([b, k], onehot)?);
    let picked = tape.mul(logp, target)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

/// Index of the largest element in each row of `logits[B×K]`.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.dims()[logits.dims().len() - 1];
    logits
        .values()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}
