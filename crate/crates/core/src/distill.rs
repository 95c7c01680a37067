//! Ensemble mimic losses with an uncertainty temperature.
//!
//! All losses compare `k` constant avatar maps against the projected student
//! feature `s` (a tape variable). The average over avatars is folded into a
//! running mean `ā` plus a constant spread term:
//!
//! ```text
//! (1/k) Σᵢ mean(((aᵢ − s)/σ)²) = mean(((ā − s)/σ)²) + (1/k) Σᵢ mean(((aᵢ − ā)/σ)²)
//! (1/k) Σᵢ KL(pᵢ ‖ q)          = (1/k) Σᵢ Σ pᵢ log pᵢ − Σ p̄ log q
//! ```
//!
//! so the tape carries one term regardless of `k`, and `k` identical avatars
//! reproduce the single-teacher loss bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::autodiff::{log_softmax, softmax};
use crate::gradcheck;
use crate::rng::{self, Stream};
use crate::uncertainty::{MergeMode, SigmaTensor};
use crate::{Error, FeatureBatch, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum LossKind {
    #[default]
    Mse,
    Kl,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Kl => "kl",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "kl" => Ok(LossKind::Kl),
            other => Err(Error::config(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// Axes of a `B×C×H×W` map over which the KL softmax normalizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SoftmaxAxes {
    /// One distribution per (sample, channel) over spatial positions.
    #[default]
    PerChannelSpatial,
    /// One distribution per sample over all of `C×H×W`.
    AllChw,
}

impl SoftmaxAxes {
    pub const ALL: [SoftmaxAxes; 2] = [SoftmaxAxes::PerChannelSpatial, SoftmaxAxes::AllChw];

    pub fn axes(self) -> &'static [usize] {
        match self {
            SoftmaxAxes::PerChannelSpatial => &[2, 3],
            SoftmaxAxes::AllChw => &[1, 2, 3],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SoftmaxAxes::PerChannelSpatial => "per_channel_spatial",
            SoftmaxAxes::AllChw => "all_chw",
        }
    }

    /// Number of distributions in a batch of the given dims.
    pub fn distributions(self, dims: &[usize]) -> usize {
        match self {
            SoftmaxAxes::PerChannelSpatial => dims[0] * dims[1],
            SoftmaxAxes::AllChw => dims[0],
        }
    }
}

impl fmt::Display for SoftmaxAxes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SoftmaxAxes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SoftmaxAxes::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown softmax axes `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub loss_kind: LossKind,
    pub kl_axes: SoftmaxAxes,
    /// Weight of the distillation term next to cross-entropy.
    pub alpha: f64,
    pub sigma: SigmaTensor,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            loss_kind: LossKind::Mse,
            kl_axes: SoftmaxAxes::PerChannelSpatial,
            alpha: 1.0,
            sigma: SigmaTensor::unit(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!(
                "distill weight alpha must be positive, got {}",
                self.alpha
            )));
        }
        self.sigma.check_floor()
    }

    /// The configured loss of `avatars` against `projected`.
    pub fn loss(&self, tape: &mut Tape, avatars: &[FeatureBatch], projected: Var) -> Result<Var> {
        match self.loss_kind {
            LossKind::Mse => akd_mse_loss(tape, avatars, projected, &self.sigma),
            LossKind::Kl => akd_kl_loss(tape, avatars, projected, &self.sigma, self.kl_axes),
        }
    }
}

fn check_inputs(
    tape: &Tape,
    avatars: &[FeatureBatch],
    projected: Var,
    sigma: &SigmaTensor,
) -> Result<Vec<usize>> {
    let dims = tape.value(projected).dims().to_vec();
    if avatars.is_empty() {
        return Err(Error::usage("distillation needs at least one avatar"));
    }
    if let Some(a) = avatars.iter().find(|a| a.tensor().dims() != dims.as_slice()) {
        return Err(Error::mismatch("distill", a.tensor().dims(), &dims));
    }
    sigma.check_floor()?;
    sigma.check_broadcast(&dims)?;
    Ok(dims)
}

/// Elementwise running mean; exact when all inputs are equal.
fn running_mean<'a>(maps: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut mean: Vec<f64> = Vec::new();
    for (j, m) in maps.into_iter().enumerate() {
        if j == 0 {
            mean.extend_from_slice(m);
            continue;
        }
        let n = (j + 1) as f64;
        for (acc, &x) in mean.iter_mut().zip(m) {
            *acc += (x - *acc) / n;
        }
    }
    mean
}

/// Equal-weight ensemble mimic: `(1/k) Σᵢ mean((aᵢ − s)²)`.
pub fn vanilla_ensemble_loss(tape: &mut Tape, avatars: &[FeatureBatch], projected: Var) -> Result<Var> {
    akd_mse_loss(tape, avatars, projected, &SigmaTensor::unit())
}

/// Uncertainty-weighted mimic: `(1/k) Σᵢ mean(((aᵢ − s)/σ)²)`, σ constant.
pub fn akd_mse_loss(
    tape: &mut Tape,
    avatars: &[FeatureBatch],
    projected: Var,
    sigma: &SigmaTensor,
) -> Result<Var> {
    let dims = check_inputs(tape, avatars, projected, sigma)?;
    let mean = running_mean(avatars.iter().map(|a| a.tensor().values()));
    let spread = if avatars.len() > 1 {
        let s = sigma.expand(&dims)?;
        let total: f64 = avatars
            .iter()
            .map(|a| {
                a.tensor()
                    .values()
                    .iter()
                    .zip(&mean)
                    .zip(&s)
                    .map(|((&x, &m), &sg)| {
                        let d = (x - m) / sg;
                        d * d
                    })
                    .sum::<f64>()
            })
            .sum();
        total / (avatars.len() * mean.len()) as f64
    } else {
        0.0
    };
    let target = tape.constant(Tensor::new(dims, mean)?);
    let sig = tape.constant(sigma.values().clone());
    let diff = tape.sub(target, projected)?;
    let scaled = tape.div(diff, sig)?;
    let sq = tape.square(scaled)?;
    let loss = tape.mean_all(sq)?;
    if spread == 0.0 {
        Ok(loss)
    } else {
        tape.offset(loss, spread)
    }
}

/// `(1/k) Σᵢ KL(softmax(aᵢ/σ) ‖ softmax(s/σ))`, averaged over the
/// distributions selected by `axes`.
pub fn akd_kl_loss(
    tape: &mut Tape,
    avatars: &[FeatureBatch],
    projected: Var,
    sigma: &SigmaTensor,
    axes: SoftmaxAxes,
) -> Result<Var> {
    let dims = check_inputs(tape, avatars, projected, sigma)?;
    let ax = axes.axes();
    let s = sigma.expand(&dims)?;
    let mut probs = Vec::with_capacity(avatars.len());
    let mut negentropy = 0.0;
    for (j, a) in avatars.iter().enumerate() {
        let z = Tensor::new(
            dims.clone(),
            a.tensor().values().iter().zip(&s).map(|(x, sg)| x / sg).collect(),
        )?;
        let p = softmax(&z, ax)?;
        let logp = log_softmax(&z, ax)?;
        let h: f64 = p.values().iter().zip(logp.values()).map(|(p, l)| p * l).sum();
        negentropy += (h - negentropy) / (j + 1) as f64;
        probs.push(p);
    }
    let pbar = running_mean(probs.iter().map(Tensor::values));
    let sig = tape.constant(sigma.values().clone());
    let scaled = tape.div(projected, sig)?;
    let logq = tape.log_softmax(scaled, ax)?;
    let pbar = tape.constant(Tensor::new(dims.clone(), pbar)?);
    let cross = tape.mul(pbar, logq)?;
    let cross = tape.sum_all(cross)?;
    let neg = tape.neg(cross)?;
    let total = tape.offset(neg, negentropy)?;
    let loss = tape.scale(total, 1.0 / axes.distributions(&dims) as f64)?;
    // rounding can leave identical distributions a hair below zero
    tape.clamp_min(loss, 0.0)
}

/// Loss normalizer: elements for MSE, distributions for KL.
pub fn normalizer(kind: LossKind, axes: SoftmaxAxes, dims: &[usize]) -> usize {
    match kind {
        LossKind::Mse => dims.iter().product(),
        LossKind::Kl => axes.distributions(dims),
    }
}

/// `∂/∂s (s − t)²/σ² = 2(s − t)/σ²`.
pub fn analytic_grad_mse(teacher: f64, student: f64, sigma: f64) -> f64 {
    2.0 * (student - teacher) / (sigma * sigma)
}

/// `G(pᵗ, pˢ)/σ` with `G = pˢ·Σpᵗ − pᵗ` and `p = softmax(F/σ)` over `axes`;
/// the gradient of the summed KL with respect to the student map.
pub fn analytic_grad_kl(
    teacher: &Tensor,
    student: &Tensor,
    sigma: &SigmaTensor,
    axes: SoftmaxAxes,
) -> Result<Tensor> {
    if teacher.dims() != student.dims() {
        return Err(Error::mismatch("analytic_grad_kl", teacher.dims(), student.dims()));
    }
    let dims = teacher.dims().to_vec();
    let s = sigma.expand(&dims)?;
    let scale = |x: &Tensor| -> Result<Tensor> {
        Tensor::new(dims.clone(), x.values().iter().zip(&s).map(|(v, sg)| v / sg).collect())
    };
    let pt = softmax(&scale(teacher)?, axes.axes())?;
    let ps = softmax(&scale(student)?, axes.axes())?;
    let mut tape = Tape::new();
    let ptv = tape.constant(pt.clone());
    let total = tape.sum(ptv, axes.axes())?;
    let mass = tape.value(total).clone();
    let groups = group_index(&dims, axes.axes());
    Ok(Tensor::new(
        dims,
        (0..pt.numel())
            .map(|i| (ps.values()[i] * mass.values()[groups[i]] - pt.values()[i]) / s[i])
            .collect(),
    )?)
}

/// For each element of `dims`, the flat index of its group after reducing
/// `axes` with kept dimensions.
fn group_index(dims: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = dims.len();
    let mut reduced = dims.to_vec();
    for &a in axes {
        reduced[a] = 1;
    }
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let mut flat = 0;
        for d in 0..rank {
            flat = flat * reduced[d] + if reduced[d] == 1 { 0 } else { idx[d] };
        }
        out.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// One point of the gradient-ratio curves: the ratio of the tempered to the
/// untempered gradient at one element under a uniform σ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioSample {
    pub sigma: f64,
    pub ratio_mse: f64,
    pub ratio_kl: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradTolerances {
    pub autodiff_abs: f64,
    pub finite_diff_rel: f64,
    pub ratio_mse_abs: f64,
    pub ratio_kl_rel: f64,
}

impl Default for GradTolerances {
    fn default() -> Self {
        GradTolerances {
            autodiff_abs: 1e-9,
            finite_diff_rel: 1e-5,
            ratio_mse_abs: 1e-12,
            ratio_kl_rel: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub trials: usize,
    /// Analytic formula vs tape gradient, scaled by the loss normalizer.
    pub max_abs_err_autodiff: f64,
    pub worst_autodiff: String,
    /// Tape vs central differences, `|a − n| / max(1, |n|)`.
    pub max_rel_err_finite_diff: f64,
    pub worst_finite_diff: String,
    /// `|r_mse − 1/σ²|` over all ratio samples.
    pub max_ratio_err_mse: f64,
    /// `|r_kl − r_G| / max(1, |r_G|)` with `r_G` from the analytic G-form.
    pub max_ratio_err_kl: f64,
    pub ratio_samples: Vec<RatioSample>,
}

impl GradReport {
    /// Fails with a verification error naming the first violated bound.
    pub fn check(&self, tol: &GradTolerances) -> Result<()> {
        if !(self.max_abs_err_autodiff <= tol.autodiff_abs) {
            return Err(Error::Verification(format!(
                "analytic vs autodiff error {:e} > {:e} at {}",
                self.max_abs_err_autodiff, tol.autodiff_abs, self.worst_autodiff
            )));
        }
        if !(self.max_rel_err_finite_diff <= tol.finite_diff_rel) {
            return Err(Error::Verification(format!(
                "autodiff vs finite-difference error {:e} > {:e} at {}",
                self.max_rel_err_finite_diff, tol.finite_diff_rel, self.worst_finite_diff
            )));
        }
        if !(self.max_ratio_err_mse <= tol.ratio_mse_abs) {
            return Err(Error::Verification(format!(
                "MSE gradient ratio deviates from 1/σ² by {:e}",
                self.max_ratio_err_mse
            )));
        }
        if !(self.max_ratio_err_kl <= tol.ratio_kl_rel) {
            return Err(Error::Verification(format!(
                "KL gradient ratio deviates from the G-form by {:e}",
                self.max_ratio_err_kl
            )));
        }
        Ok(())
    }
}

/// Magnitude below which an untempered gradient element is too small for a
/// meaningful ratio.
const RATIO_MIN_GRAD: f64 = 1e-4;
const SIGMA_RANGE: (f64, f64) = (0.25, 4.0);

fn uniform_tensor(dims: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn tape_grad(
    kind: LossKind,
    axes: SoftmaxAxes,
    avatars: &[FeatureBatch],
    student: &Tensor,
    sigma: &SigmaTensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.param(student.clone());
    let loss = match kind {
        LossKind::Mse => akd_mse_loss(&mut tape, avatars, s, sigma)?,
        LossKind::Kl => akd_kl_loss(&mut tape, avatars, s, sigma, axes)?,
    };
    tape.backward(loss)?;
    Ok(tape.grad(s).cloned().unwrap_or_else(|| student.zeros_like()))
}

/// Runs the analytic / autodiff / finite-difference comparison over
/// `n_trials` random problems, each covering every merge shape, both
/// softmax-axis conventions and both loss kinds, and collects gradient-ratio
/// samples under uniform σ. Does not apply tolerances; see
/// [`verify_gradients`].
pub fn gradient_report(n_trials: usize, seed: u64) -> Result<GradReport> {
    if n_trials < 10 {
        return Err(Error::usage(format!("gradient verification needs ≥ 10 trials, got {n_trials}")));
    }
    let mut report = GradReport {
        trials: n_trials,
        max_abs_err_autodiff: 0.0,
        worst_autodiff: String::new(),
        max_rel_err_finite_diff: 0.0,
        worst_finite_diff: String::new(),
        max_ratio_err_mse: 0.0,
        max_ratio_err_kl: 0.0,
        ratio_samples: Vec::new(),
    };
    for trial in 0..n_trials {
        let mut rng = rng::keyed(Stream::Verify, seed, trial as u64, 0);
        let dims = [
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(2..=3),
        ];
        let teacher = uniform_tensor(&dims, -2.0, 2.0, &mut rng)?;
        let second = uniform_tensor(&dims, -2.0, 2.0, &mut rng)?;
        let student = uniform_tensor(&dims, -2.0, 2.0, &mut rng)?;
        let t = [FeatureBatch::new(teacher.clone())?];
        let pair = [t[0].clone(), FeatureBatch::new(second)?];
        for mode in MergeMode::ALL {
            let sample = [dims[1], dims[2], dims[3]];
            let sdims = mode.sigma_dims(sample);
            let sigma = SigmaTensor::from_values(
                mode,
                uniform_tensor(&sdims, SIGMA_RANGE.0, SIGMA_RANGE.1, &mut rng)?,
                false,
            )?;
            let s_exp = sigma.expand(&dims)?;
            for axes in SoftmaxAxes::ALL {
                for kind in [LossKind::Mse, LossKind::Kl] {
                    if kind == LossKind::Mse && axes != SoftmaxAxes::PerChannelSpatial {
                        continue;
                    }
                    let where_ = |i: usize| {
                        format!("trial {trial}, {kind}, {mode}, {axes}, dims {dims:?}, element {i}")
                    };
                    let analytic = match kind {
                        LossKind::Mse => Tensor::new(
                            dims.to_vec(),
                            (0..teacher.numel())
                                .map(|i| {
                                    analytic_grad_mse(teacher.values()[i], student.values()[i], s_exp[i])
                                })
                                .collect(),
                        )?,
                        LossKind::Kl => analytic_grad_kl(&teacher, &student, &sigma, axes)?,
                    };
                    let norm = normalizer(kind, axes, &dims) as f64;
                    let auto = tape_grad(kind, axes, &t, &student, &sigma)?;
                    for (i, (a, g)) in analytic.values().iter().zip(auto.values()).enumerate() {
                        let err = (a - g * norm).abs();
                        if err > report.max_abs_err_autodiff || report.worst_autodiff.is_empty() {
                            if err > report.max_abs_err_autodiff {
                                report.max_abs_err_autodiff = err;
                            }
                            report.worst_autodiff = where_(i);
                        }
                    }
                    let check = gradcheck::grad_check(
                        |tape: &mut Tape, s: Var| match kind {
                            LossKind::Mse => akd_mse_loss(tape, &pair, s, &sigma),
                            LossKind::Kl => akd_kl_loss(tape, &pair, s, &sigma, axes),
                        },
                        &student,
                        gradcheck::DEFAULT_STEP,
                    )?;
                    if check.max_rel_err > report.max_rel_err_finite_diff
                        || report.worst_finite_diff.is_empty()
                    {
                        if check.max_rel_err > report.max_rel_err_finite_diff {
                            report.max_rel_err_finite_diff = check.max_rel_err;
                        }
                        report.worst_finite_diff = where_(check.worst_index);
                    }
                }
            }
        }
        let axes = SoftmaxAxes::ALL[trial % 2];
        // σ = 1 first, then a log-spaced sweep hitting both ends of the range
        let level = if trial == 0 {
            1.0
        } else {
            let frac = (trial - 1) as f64 / n_trials.saturating_sub(2).max(1) as f64;
            SIGMA_RANGE.0 * libm::pow(SIGMA_RANGE.1 / SIGMA_RANGE.0, frac)
        };
        ratio_samples(&mut report, &t, &student, level, axes)?;
    }
    Ok(report)
}

fn ratio_samples(
    report: &mut GradReport,
    teacher: &[FeatureBatch],
    student: &Tensor,
    level: f64,
    axes: SoftmaxAxes,
) -> Result<()> {
    let dims = student.dims();
    let sigma = SigmaTensor::from_values(MergeMode::Scalar, Tensor::full([1, 1, 1], level)?, false)?;
    let unit = SigmaTensor::unit();
    let mse_s = tape_grad(LossKind::Mse, axes, teacher, student, &sigma)?;
    let mse_1 = tape_grad(LossKind::Mse, axes, teacher, student, &unit)?;
    let kl_s = tape_grad(LossKind::Kl, axes, teacher, student, &sigma)?;
    let kl_1 = tape_grad(LossKind::Kl, axes, teacher, student, &unit)?;
    let t = teacher[0].tensor();
    let g_s = analytic_grad_kl(t, student, &sigma, axes)?;
    let g_1 = analytic_grad_kl(t, student, &unit, axes)?;
    let norm_mse = normalizer(LossKind::Mse, axes, dims) as f64;
    for i in 0..student.numel() {
        let (m1, k1) = (mse_1.values()[i], kl_1.values()[i]);
        if (m1 * norm_mse).abs() < RATIO_MIN_GRAD || g_1.values()[i].abs() < RATIO_MIN_GRAD {
            continue;
        }
        let ratio_mse = mse_s.values()[i] / m1;
        let ratio_kl = kl_s.values()[i] / k1;
        let ratio_g = g_s.values()[i] / g_1.values()[i];
        report.max_ratio_err_mse = report
            .max_ratio_err_mse
            .max((ratio_mse - 1.0 / (level * level)).abs());
        report.max_ratio_err_kl = report
            .max_ratio_err_kl
            .max((ratio_kl - ratio_g).abs() / ratio_g.abs().max(1.0));
        report.ratio_samples.push(RatioSample {
            sigma: level,
            ratio_mse,
            ratio_kl,
        });
    }
    Ok(())
}

/// [`gradient_report`] followed by [`GradReport::check`] at the default
/// tolerances.
pub fn verify_gradients(n_trials: usize, seed: u64) -> Result<GradReport> {
    let report = gradient_report(n_trials, seed)?;
    report.check(&GradTolerances::default())?;
    Ok(report)
}
