//! Training loops: plain classifiers, distilled students and the avatar
//! ensemble evaluation.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;

use crate::avatar::{self, AvatarConfig};
use crate::autodiff::softmax;
use crate::data::{Dataset, Split, ToyDatasetSpec};
use crate::distill::{DistillConfig, LossKind, SoftmaxAxes};
use crate::nn::{self, BatchStandardize, ForwardOptions, Mode, Network, Projection};
use crate::rng::{self, Stream};
use crate::uncertainty::{EmaSigma, MergeMode, SigmaEstimator, SigmaTensor};
use crate::{Error, FeatureBatch, Result, Tape, Tensor};

/// Rows per eval-mode chunk when predicting over a split.
const EVAL_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_size: 32,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::config("need at least one epoch and a batch size of at least 2"));
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v ← μv + g`, `p ← p − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd {
            cfg,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::usage(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(Tensor::zeros_like).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.dims() != g.dims() || v.dims() != g.dims() {
                return Err(Error::mismatch("sgd", p.dims(), g.dims()));
            }
            for ((pi, &gi), vi) in p.values_mut().iter_mut().zip(g.values()).zip(v.values_mut()) {
                *vi = self.cfg.momentum * *vi + gi;
                *pi -= self.cfg.learning_rate * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub task_loss: f64,
    pub distill_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub teacher_acc: f64,
    pub student_acc: Option<f64>,
    pub final_task_loss: f64,
    pub final_distill_loss: Option<f64>,
    pub epochs: Vec<EpochTrace>,
    /// Unweighted distillation loss of every optimizer step.
    pub step_distill_losses: Vec<f64>,
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Domain { op, detail } => Error::Diverged {
            epoch,
            step,
            detail: format!("{op}: {detail}"),
        },
        other => other,
    }
}

/// Shuffled full batches of one epoch; the remainder is dropped.
fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::keyed(Stream::Shuffle, seed, epoch as u64, 0));
    order.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}

fn grads_of(tape: &Tape, vars: &[crate::Var], params: &[&Tensor]) -> Vec<Tensor> {
    vars.iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| p.zeros_like()))
        .collect()
}

/// Eval-mode accuracy of `net` on a split.
pub fn accuracy(net: &Network, split: &Split) -> Result<f64> {
    let mut correct = 0;
    let rows: Vec<usize> = (0..split.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (x, y) = split.batch(chunk)?;
        let (logits, _) = net.predict(&x)?;
        correct += nn::argmax_rows(&logits)
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierRun {
    pub test_acc: f64,
    pub final_loss: f64,
    pub epochs: Vec<EpochTrace>,
}

/// Cross-entropy training of `net` on the training split; leaves the network
/// in eval mode.
pub fn train_classifier(net: &mut Network, data: &Dataset, sgd: &SgdConfig, seed: u64) -> Result<ClassifierRun> {
    sgd.validate()?;
    net.set_mode(Mode::Train);
    let mut opt = Sgd::new(*sgd);
    let mut epochs = Vec::with_capacity(sgd.epochs);
    for epoch in 0..sgd.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.train.len(), sgd.batch_size, seed, epoch);
        for (step, rows) in batches.iter().enumerate() {
            let (x, y) = data.train.batch(rows)?;
            let run = || -> Result<(f64, Vec<Tensor>)> {
                let mut tape = Tape::new();
                let xv = tape.constant(x);
                let pass = net.forward(&mut tape, xv, ForwardOptions::trainable())?;
                let loss = nn::cross_entropy(&mut tape, pass.output, &y)?;
                tape.backward(loss)?;
                let value = tape.value(loss).item()?;
                Ok((value, grads_of(&tape, &pass.params, &net.params())))
            };
            let (value, grads) = run().map_err(|e| diverged(epoch, step, e))?;
            opt.step(net.params_mut(), &grads)?;
            total += value;
        }
        epochs.push(EpochTrace {
            epoch,
            task_loss: total / batches.len() as f64,
            distill_loss: None,
        });
    }
    net.set_mode(Mode::Eval);
    Ok(ClassifierRun {
        test_acc: accuracy(net, &data.test)?,
        final_loss: epochs.last().map_or(0.0, |e| e.task_loss),
        epochs,
    })
}

/// Trains a toy teacher of the given width on a freshly rendered dataset.
pub fn train_teacher(spec: &ToyDatasetSpec, width: usize, sgd: &SgdConfig, seed: u64) -> Result<(Network, RunMetrics)> {
    spec.validate(sgd.batch_size)?;
    let data = crate::data::make_dataset(spec)?;
    let mut teacher = Network::init(&nn::toy_specs(width, spec.classes), nn::TOY_FEATURE_TAP, seed)?;
    let run = train_classifier(&mut teacher, &data, sgd, seed)?;
    Ok((
        teacher,
        RunMetrics {
            seed,
            teacher_acc: run.test_acc,
            student_acc: None,
            final_task_loss: run.final_loss,
            final_distill_loss: None,
            epochs: run.epochs,
            step_distill_losses: Vec::new(),
        },
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum DistillMode {
    /// Mimic the standardized teacher feature directly.
    #[default]
    BaselineTeacherDistill,
    /// Equal-weight ensemble of avatars.
    AvatarsEqual,
    /// Avatars with the uncertainty temperature.
    Akd,
}

impl DistillMode {
    pub const ALL: [DistillMode; 3] = [
        DistillMode::BaselineTeacherDistill,
        DistillMode::AvatarsEqual,
        DistillMode::Akd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistillMode::BaselineTeacherDistill => "baseline_teacher_distill",
            DistillMode::AvatarsEqual => "avatars_equal",
            DistillMode::Akd => "akd",
        }
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    /// Accepts the long names and the short command-line forms
    /// `baseline` and `avatars`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" | "baseline_teacher_distill" => Ok(DistillMode::BaselineTeacherDistill),
            "avatars" | "avatars_equal" => Ok(DistillMode::AvatarsEqual),
            "akd" => Ok(DistillMode::Akd),
            other => Err(Error::config(format!("unknown distillation mode `{other}`"))),
        }
    }
}

/// Where the AKD temperature comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SigmaSource {
    /// One pass over the standardized training features before training.
    #[default]
    Precomputed,
    /// Exponential moving average over the batches seen so far.
    Ema,
}

impl SigmaSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SigmaSource::Precomputed => "precomputed",
            SigmaSource::Ema => "ema",
        }
    }
}

impl fmt::Display for SigmaSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SigmaSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "precomputed" => Ok(SigmaSource::Precomputed),
            "ema" => Ok(SigmaSource::Ema),
            other => Err(Error::config(format!("unknown sigma source `{other}`"))),
        }
    }
}

pub const EMA_SIGMA_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: DistillMode,
    pub loss_kind: LossKind,
    pub kl_axes: SoftmaxAxes,
    pub merge_mode: MergeMode,
    pub sigma_source: SigmaSource,
    pub avatars: AvatarConfig,
    pub alpha: f64,
    pub sgd: SgdConfig,
    /// Channel width of the toy student.
    pub student_width: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: DistillMode::Akd,
            loss_kind: LossKind::Mse,
            kl_axes: SoftmaxAxes::PerChannelSpatial,
            merge_mode: MergeMode::Full,
            sigma_source: SigmaSource::Precomputed,
            avatars: AvatarConfig::default(),
            alpha: 1.0,
            sgd: SgdConfig::default(),
            student_width: nn::STUDENT_WIDTH,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.student_width == 0 {
            return Err(Error::config("student width must be positive"));
        }
        if self.mode != DistillMode::BaselineTeacherDistill {
            self.avatars.validate()?;
        }
        DistillConfig {
            alpha: self.alpha,
            ..DistillConfig::default()
        }
        .validate()
    }
}

/// Frozen-teacher quantities shared by every distillation run on one
/// dataset: standardized training features and their variance estimator.
#[derive(Clone, Debug)]
pub struct DistillContext {
    standardizer: BatchStandardize,
    train_features: Tensor,
    estimator: SigmaEstimator,
    teacher_acc: f64,
    classes: usize,
    feature_dims: [usize; 3],
}

fn features_of(net: &Network, x: &Tensor) -> Result<Tensor> {
    let n = x.dims()[0];
    let rows: Vec<usize> = (0..n).collect();
    let mut values = Vec::new();
    let mut dims = Vec::new();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (_, f) = net.predict(&x.gather_rows(chunk)?)?;
        dims = f.dims().to_vec();
        values.extend_from_slice(f.values());
    }
    dims[0] = n;
    Tensor::new(dims, values)
}

impl DistillContext {
    /// Runs the frozen teacher over the training split, fits the
    /// standardization to the feature moments and streams the standardized
    /// features through a σ estimator.
    pub fn prepare(teacher: &Network, data: &Dataset) -> Result<DistillContext> {
        if teacher.mode() != Mode::Eval {
            return Err(Error::usage("teacher must be in eval mode"));
        }
        let raw = FeatureBatch::new(features_of(teacher, &data.train.x)?)?;
        let standardizer = BatchStandardize::fit(&raw)?;
        let z = standardizer.forward_eval(&raw)?;
        let feature_dims = z.sample_dims();
        let mut estimator = SigmaEstimator::new(feature_dims)?;
        estimator.update(&z)?;
        Ok(DistillContext {
            standardizer,
            train_features: z.into_tensor(),
            estimator,
            teacher_acc: accuracy(teacher, &data.test)?,
            classes: data.classes,
            feature_dims,
        })
    }

    pub fn standardizer(&self) -> &BatchStandardize {
        &self.standardizer
    }

    /// Standardized teacher features of the training split.
    pub fn train_features(&self) -> &Tensor {
        &self.train_features
    }

    pub fn feature_dims(&self) -> [usize; 3] {
        self.feature_dims
    }

    pub fn teacher_acc(&self) -> f64 {
        self.teacher_acc
    }

    pub fn estimator(&self) -> &SigmaEstimator {
        &self.estimator
    }

    pub fn sigma(&self, mode: MergeMode) -> Result<SigmaTensor> {
        self.estimator.clone().finalize(mode)
    }
}

/// Trains a fresh student with cross-entropy plus `α·` the mode's
/// distillation loss. The teacher enters only through `ctx`.
pub fn distill_student(ctx: &DistillContext, data: &Dataset, cfg: &ExperimentConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    if data.classes != ctx.classes || data.train.len() != ctx.train_features.dims()[0] {
        return Err(Error::config("dataset does not match the distillation context"));
    }
    let specs = nn::toy_specs(cfg.student_width, ctx.classes);
    let mut student = Network::init(&specs, nn::TOY_FEATURE_TAP, cfg.seed)?;
    let student_channels = student
        .feature_channels()
        .ok_or_else(|| Error::config("student feature tap must be a convolution"))?;
    let mut projection = Projection::init(student_channels, ctx.feature_dims[0], cfg.seed)?;
    let fixed_sigma = match (cfg.mode, cfg.sigma_source) {
        (DistillMode::Akd, SigmaSource::Precomputed) => Some(ctx.sigma(cfg.merge_mode)?),
        (DistillMode::Akd, SigmaSource::Ema) => None,
        _ => Some(SigmaTensor::unit()),
    };
    let mut ema = match fixed_sigma {
        None => Some(EmaSigma::new(ctx.feature_dims, EMA_SIGMA_MOMENTUM)?),
        Some(_) => None,
    };
    let baseline = AvatarConfig {
        count: 1,
        dropout_ratio: 0.0,
        per_avatar_ratios: None,
        ..cfg.avatars.clone()
    };
    let avatar_cfg = match cfg.mode {
        DistillMode::BaselineTeacherDistill => &baseline,
        _ => &cfg.avatars,
    };
    let mut opt = Sgd::new(cfg.sgd);
    let mut epochs = Vec::with_capacity(cfg.sgd.epochs);
    let mut step_losses = Vec::new();
    let mut global_step: u64 = 0;
    for epoch in 0..cfg.sgd.epochs {
        let batches = epoch_batches(data.train.len(), cfg.sgd.batch_size, cfg.seed, epoch);
        let (mut task_total, mut distill_total) = (0.0, 0.0);
        for (step, rows) in batches.iter().enumerate() {
            let (x, y) = data.train.batch(rows)?;
            let z = FeatureBatch::new(ctx.train_features.gather_rows(rows)?)?;
            let sigma = match (&fixed_sigma, &mut ema) {
                (Some(s), _) => s.clone(),
                (None, Some(e)) => {
                    e.update(&z)?;
                    e.sigma(cfg.merge_mode)?
                }
                (None, None) => unreachable!(),
            };
            let dcfg = DistillConfig {
                loss_kind: cfg.loss_kind,
                kl_axes: cfg.kl_axes,
                alpha: cfg.alpha,
                sigma,
            };
            let set = avatar::generate(&z, avatar_cfg, global_step)?;
            let n_student = student.params().len();
            let run = || -> Result<(f64, f64, Vec<Tensor>)> {
                let mut tape = Tape::new();
                let xv = tape.constant(x);
                let pass = student.forward(&mut tape, xv, ForwardOptions::trainable())?;
                let (proj, pvars) = projection.apply(&mut tape, pass.feature, true)?;
                let task = nn::cross_entropy(&mut tape, pass.output, &y)?;
                let distill = dcfg.loss(&mut tape, set.features(), proj)?;
                let weighted = tape.scale(distill, dcfg.alpha)?;
                let total = tape.add(task, weighted)?;
                tape.backward(total)?;
                let mut grads = grads_of(&tape, &pass.params, &student.params());
                grads.extend(grads_of(&tape, &pvars, &projection.params()));
                Ok((tape.value(task).item()?, tape.value(distill).item()?, grads))
            };
            let (task, distill, mut grads) = run().map_err(|e| diverged(epoch, step, e))?;
            let proj_grads = grads.split_off(n_student);
            opt_step(&mut opt, &mut student, &mut projection, grads, proj_grads)?;
            task_total += task;
            distill_total += distill;
            step_losses.push(distill);
            global_step += 1;
        }
        let n = batches.len() as f64;
        epochs.push(EpochTrace {
            epoch,
            task_loss: task_total / n,
            distill_loss: Some(distill_total / n),
        });
    }
    student.set_mode(Mode::Eval);
    let last = epochs.last().cloned();
    Ok(RunMetrics {
        seed: cfg.seed,
        teacher_acc: ctx.teacher_acc,
        student_acc: Some(accuracy(&student, &data.test)?),
        final_task_loss: last.as_ref().map_or(0.0, |e| e.task_loss),
        final_distill_loss: last.and_then(|e| e.distill_loss),
        epochs,
        step_distill_losses: step_losses,
    })
}

fn opt_step(
    opt: &mut Sgd,
    student: &mut Network,
    projection: &mut Projection,
    mut grads: Vec<Tensor>,
    proj_grads: Vec<Tensor>,
) -> Result<()> {
    grads.extend(proj_grads);
    let mut params = student.params_mut();
    params.extend(projection.params_mut());
    opt.step(params, &grads)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleResult {
    pub single_acc: f64,
    pub ensemble_acc: f64,
}

/// Standardized teacher features of a split, the input of [`ensemble_eval_on`].
pub fn standardized_features(
    teacher: &Network,
    standardizer: &BatchStandardize,
    split: &Split,
) -> Result<FeatureBatch> {
    standardizer.forward_eval(&FeatureBatch::new(features_of(teacher, &split.x)?)?)
}

/// Accuracy of the teacher head on unperturbed features versus the
/// softmax average over `k` avatars with ratio `m`. Avatars are drawn on the
/// standardized test features and mapped back before the head.
pub fn ensemble_eval(
    teacher: &Network,
    standardizer: &BatchStandardize,
    test: &Split,
    k: usize,
    m: f64,
    seed: u64,
) -> Result<EnsembleResult> {
    let z = standardized_features(teacher, standardizer, test)?;
    ensemble_eval_on(teacher, standardizer, &z, &test.y, k, m, seed)
}

/// [`ensemble_eval`] on precomputed standardized features `z`.
pub fn ensemble_eval_on(
    teacher: &Network,
    standardizer: &BatchStandardize,
    z: &FeatureBatch,
    labels: &[usize],
    k: usize,
    m: f64,
    seed: u64,
) -> Result<EnsembleResult> {
    let cfg = AvatarConfig {
        count: k,
        dropout_ratio: m,
        per_avatar_ratios: None,
        seed,
        ..AvatarConfig::default()
    };
    cfg.validate()?;
    if z.batch() != labels.len() {
        return Err(Error::usage(format!(
            "{} feature rows but {} labels",
            z.batch(),
            labels.len()
        )));
    }
    let head = |f: &FeatureBatch| -> Result<Tensor> {
        let logits = teacher.head(&standardizer.destandardize(f)?)?;
        softmax(&logits, &[1])
    };
    let single = head(z)?;
    let set = avatar::generate(z, &cfg, 0)?;
    let mut mean: Option<Vec<f64>> = None;
    for (j, a) in set.features().iter().enumerate() {
        let p = head(a)?;
        match &mut mean {
            None => mean = Some(p.values().to_vec()),
            Some(acc) => {
                for (x, &v) in acc.iter_mut().zip(p.values()) {
                    *x += (v - *x) / (j + 1) as f64;
                }
            }
        }
    }
    let mean = Tensor::new(single.dims().to_vec(), mean.unwrap_or_default())?;
    let acc = |p: &Tensor| {
        nn::argmax_rows(p)
            .iter()
            .zip(labels)
            .filter(|(a, b)| a == b)
            .count() as f64
            / labels.len() as f64
    };
    Ok(EnsembleResult {
        single_acc: acc(&single),
        ensemble_acc: acc(&mean),
    })
}
