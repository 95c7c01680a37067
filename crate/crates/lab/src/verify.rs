//! The invariant battery behind `akd verify`. Every check runs even when an
//! earlier one fails, so the report names all failures at once.

use akd_core::avatar::{self, AvatarConfig};
use akd_core::data::{make_dataset, ToyDatasetSpec};
use akd_core::distill::{self, GradReport, LossKind};
use akd_core::nn::BatchStandardize;
use akd_core::rng::{self, Stream};
use akd_core::train::{self, DistillContext, DistillMode, ExperimentConfig, SgdConfig};
use akd_core::uncertainty::{self, MergeMode, SigmaEstimator, SigmaTensor};
use akd_core::{FeatureBatch, Tape, Tensor};
use rand::Rng;
use serde::Serialize;

use crate::config::FORMAT_VERSION;

pub const GRAD_TRIALS: usize = 100;
pub const ORACLE_DRAWS: usize = 1_000_000;
pub const ANALYTIC_MIN_TRIALS: usize = 20;
const ANALYTIC_GRID: usize = 2001;
const STREAM_SAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// The worst observed error, compared against `tolerance`.
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn bound(name: &'static str, value: f64, tolerance: f64, detail: impl Into<String>) -> Check {
        Check {
            name,
            passed: value <= tolerance,
            value,
            tolerance,
            detail: detail.into(),
        }
    }

    fn error(name: &'static str, e: impl std::fmt::Display) -> Check {
        Check {
            name,
            passed: false,
            value: f64::NAN,
            tolerance: f64::NAN,
            detail: e.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub format_version: u32,
    pub passed: bool,
    pub checks: Vec<Check>,
    #[serde(skip)]
    pub grad_report: Option<GradReport>,
}

impl VerifyReport {
    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }
}

type Res<T> = Result<T, String>;

fn err(e: akd_core::Error) -> String {
    e.to_string()
}

/// Runs the full battery with streams keyed by `seed`.
pub fn run(seed: u64) -> VerifyReport {
    let mut checks = Vec::new();
    let mut grad_report = None;
    match distill::gradient_report(GRAD_TRIALS, seed) {
        Ok(r) => {
            checks.push(Check::bound(
                "gradients_autodiff",
                r.max_abs_err_autodiff,
                1e-9,
                format!("analytic vs tape over {} trials, worst at {}", r.trials, r.worst_autodiff),
            ));
            checks.push(Check::bound(
                "gradients_finite_difference",
                r.max_rel_err_finite_diff,
                1e-5,
                format!("tape vs central differences, worst at {}", r.worst_finite_diff),
            ));
            checks.push(Check::bound(
                "ratio_law_mse",
                r.max_ratio_err_mse,
                1e-12,
                format!("|ratio − 1/σ²| over {} samples", r.ratio_samples.len()),
            ));
            checks.push(Check::bound(
                "ratio_law_kl",
                r.max_ratio_err_kl,
                1e-9,
                "KL ratio vs the closed form, relative",
            ));
            grad_report = Some(r);
        }
        Err(e) => checks.push(Check::error("gradients_autodiff", e)),
    }
    let battery: [(&'static str, fn(u64) -> Res<Check>); 6] = [
        ("residual_moment", residual_moment),
        ("residual_quadratic_scaling", residual_scaling),
        ("analytic_min", analytic_min),
        ("welford_two_pass", welford),
        ("zero_mean", zero_mean),
        ("unit_sigma_reduction", unit_sigma),
    ];
    for (name, f) in battery {
        checks.push(f(seed).unwrap_or_else(|e| Check::error(name, e)));
    }
    match training_reductions(seed) {
        Ok(v) => checks.extend(v),
        Err(e) => checks.push(Check::error("training_reductions", e)),
    }
    VerifyReport {
        format_version: FORMAT_VERSION,
        passed: checks.iter().all(|c| c.passed),
        checks,
        grad_report,
    }
}

const MOMENT_RATIO: f64 = 0.1;
const MOMENT_SCALE: f64 = 10.0;

fn moment_feature() -> Res<Tensor> {
    Tensor::new([1, 2, 2, 2], vec![0.3, -0.7, 1.1, 1.9, -2.5, 0.05, 0.8, -1.4]).map_err(err)
}

/// Worst relative gap between the Monte Carlo residual moment and `m·t²`.
fn moment_gap(t: &Tensor, seed: u64) -> Res<f64> {
    let est = avatar::residual_moment_oracle(t, MOMENT_RATIO, ORACLE_DRAWS, seed).map_err(err)?;
    let c = avatar::mask_dropout_constant(MOMENT_RATIO);
    Ok(est
        .values()
        .iter()
        .zip(t.values())
        .map(|(&e, &v)| (e - c * v * v).abs() / (c * v * v))
        .fold(0.0, f64::max))
}

fn residual_moment(seed: u64) -> Res<Check> {
    let t = moment_feature()?;
    let big = t.map(|v| v * MOMENT_SCALE);
    let gap = moment_gap(&t, seed)?.max(moment_gap(&big, seed)?);
    Ok(Check::bound(
        "residual_moment",
        gap,
        0.02,
        format!("{ORACLE_DRAWS} draws, m = {MOMENT_RATIO}, magnitudes ×1 and ×{MOMENT_SCALE}"),
    ))
}

/// Same masks at two magnitudes: the moment ratio must be the squared scale.
fn residual_scaling(seed: u64) -> Res<Check> {
    let t = moment_feature()?;
    let small = avatar::residual_moment_oracle(&t, MOMENT_RATIO, ORACLE_DRAWS, seed).map_err(err)?;
    let big = avatar::residual_moment_oracle(&t.map(|v| v * MOMENT_SCALE), MOMENT_RATIO, ORACLE_DRAWS, seed)
        .map_err(err)?;
    let want = MOMENT_SCALE * MOMENT_SCALE;
    let gap = small
        .values()
        .iter()
        .zip(big.values())
        .map(|(&s, &b)| (b / s / want - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(Check::bound(
        "residual_quadratic_scaling",
        gap,
        0.01,
        "moment ratio vs squared magnitude ratio",
    ))
}

/// Grid argmin of `ln σ² + r²/σ²` lies within one log-grid step of `r²`.
/// The value reported is the worst distance in grid steps.
fn analytic_min(seed: u64) -> Res<Check> {
    let mut rng = rng::keyed(Stream::Verify, seed, 1, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..ANALYTIC_MIN_TRIALS {
        let r = rng.random_range(0.05..20.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let r2 = r * r;
        let grid = uncertainty::log_grid(r2 / 10.0, 10.0 * r2, ANALYTIC_GRID).map_err(err)?;
        let step = (grid[1] / grid[0]).ln();
        let best = uncertainty::analytic_min_check(r, &grid).map_err(err)?;
        worst = worst.max((best / r2).ln().abs() / step);
    }
    Ok(Check::bound(
        "analytic_min",
        worst,
        1.0,
        format!("{ANALYTIC_MIN_TRIALS} residuals, {ANALYTIC_GRID}-point grids; value in grid steps"),
    ))
}

fn random_stream(seed: u64, n: usize, offset: f64) -> Res<FeatureBatch> {
    let mut rng = rng::keyed(Stream::Verify, seed, 2, n as u64);
    let dims = [n, 3, 2, 2];
    let values = (0..n * 12)
        .map(|i| offset + (1.0 + (i % 12) as f64) * rng.random_range(-1.0..1.0))
        .collect();
    FeatureBatch::new(Tensor::new(dims, values).map_err(err)?).map_err(err)
}

fn welford(seed: u64) -> Res<Check> {
    let x = random_stream(seed, STREAM_SAMPLES, 5.0)?;
    let mut est = SigmaEstimator::new(x.sample_dims()).map_err(err)?;
    // uneven chunks exercise the merge of partial batches
    let rows: Vec<usize> = (0..STREAM_SAMPLES).collect();
    for chunk in rows.chunks(137) {
        let part = FeatureBatch::new(x.tensor().gather_rows(chunk).map_err(err)?).map_err(err)?;
        est.update(&part).map_err(err)?;
    }
    let var = est.variance().map_err(err)?;
    let per = 12;
    let n = STREAM_SAMPLES as f64;
    let mut worst: f64 = 0.0;
    for pos in 0..per {
        let col: Vec<f64> = x.tensor().values().iter().skip(pos).step_by(per).copied().collect();
        let mean = col.iter().sum::<f64>() / n;
        let two_pass = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        worst = worst.max((var.values()[pos] - two_pass).abs() / two_pass);
    }
    Ok(Check::bound(
        "welford_two_pass",
        worst,
        1e-10,
        format!("{STREAM_SAMPLES}-sample stream in chunks of 137, relative"),
    ))
}

/// Standardized features have zero per-channel mean over the fitted data.
fn zero_mean(seed: u64) -> Res<Check> {
    let x = random_stream(seed, STREAM_SAMPLES, 5.0)?;
    let bs = BatchStandardize::fit(&x).map_err(err)?;
    let z = bs.forward_eval(&x).map_err(err)?;
    let plane = z.height() * z.width();
    let c = z.channels();
    let mut sums = vec![0.0; c];
    for (i, v) in z.tensor().values().iter().enumerate() {
        sums[(i / plane) % c] += v;
    }
    let count = (z.batch() * plane) as f64;
    let worst = sums.iter().map(|s| (s / count).abs()).fold(0.0, f64::max);
    Ok(Check::bound("zero_mean", worst, 1e-10, "max |channel mean| after standardization"))
}

/// σ ≡ 1 turns the tempered MSE into the plain ensemble mimic, evaluated
/// here directly.
fn unit_sigma(seed: u64) -> Res<Check> {
    let t = random_stream(seed, 4, 0.0)?;
    let s = random_stream(seed + 1, 4, 0.0)?;
    let set = avatar::generate(
        &t,
        &AvatarConfig {
            count: 5,
            seed,
            ..AvatarConfig::default()
        },
        0,
    )
    .map_err(err)?;
    let direct = set
        .features()
        .iter()
        .map(|a| {
            let d = a.tensor().values().iter().zip(s.tensor().values());
            d.map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / s.tensor().numel() as f64
        })
        .sum::<f64>()
        / set.len() as f64;
    let ones = Tensor::ones(s.sample_dims()).map_err(err)?;
    let sigmas = [
        SigmaTensor::unit(),
        SigmaTensor::from_values(MergeMode::Full, ones, false).map_err(err)?,
    ];
    let mut worst: f64 = 0.0;
    for sigma in &sigmas {
        let mut tape = Tape::new();
        let sv = tape.constant(s.tensor().clone());
        let l = distill::akd_mse_loss(&mut tape, set.features(), sv, sigma).map_err(err)?;
        worst = worst.max((tape.value(l).item().map_err(err)? - direct).abs());
    }
    Ok(Check::bound(
        "unit_sigma_reduction",
        worst,
        1e-12,
        "tempered MSE with σ ≡ 1 vs the plain ensemble mimic",
    ))
}

fn max_step_gap(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Short training runs: scalar merge against the σ ≡ 1 ensemble for both
/// loss kinds, and a zero-ratio ensemble against the baseline.
fn training_reductions(seed: u64) -> Res<Vec<Check>> {
    let spec = ToyDatasetSpec {
        n_train: 64,
        n_test: 32,
        seed,
        ..ToyDatasetSpec::default()
    };
    let sgd = SgdConfig {
        epochs: 2,
        batch_size: 16,
        ..SgdConfig::default()
    };
    let (teacher, _) = train::train_teacher(&spec, 4, &SgdConfig { epochs: 1, ..sgd }, seed).map_err(err)?;
    let data = make_dataset(&spec).map_err(err)?;
    let ctx = DistillContext::prepare(&teacher, &data).map_err(err)?;
    let base = ExperimentConfig {
        sgd,
        student_width: 2,
        seed,
        avatars: AvatarConfig {
            count: 3,
            seed,
            ..AvatarConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let steps = |cfg: &ExperimentConfig| -> Res<Vec<f64>> {
        Ok(train::distill_student(&ctx, &data, cfg).map_err(err)?.step_distill_losses)
    };
    let mut checks = Vec::new();
    let mut scalar_gap: f64 = 0.0;
    for loss_kind in [LossKind::Mse, LossKind::Kl] {
        let fixed = steps(&ExperimentConfig {
            mode: DistillMode::AvatarsEqual,
            loss_kind,
            ..base.clone()
        })?;
        let scalar = steps(&ExperimentConfig {
            mode: DistillMode::Akd,
            loss_kind,
            merge_mode: MergeMode::Scalar,
            ..base.clone()
        })?;
        scalar_gap = scalar_gap.max(max_step_gap(&fixed, &scalar));
    }
    checks.push(Check::bound(
        "scalar_merge_fixed_temperature",
        scalar_gap,
        1e-9,
        "per-step distillation loss, scalar merge vs σ ≡ 1, MSE and KL",
    ));
    let baseline = steps(&ExperimentConfig {
        mode: DistillMode::BaselineTeacherDistill,
        ..base.clone()
    })?;
    let zero = steps(&ExperimentConfig {
        mode: DistillMode::AvatarsEqual,
        avatars: AvatarConfig {
            dropout_ratio: 0.0,
            ..base.avatars.clone()
        },
        ..base.clone()
    })?;
    checks.push(Check::bound(
        "zero_ratio_matches_baseline",
        max_step_gap(&baseline, &zero),
        0.0,
        "per-step distillation loss, avatars with m = 0 vs baseline, bitwise",
    ));
    Ok(checks)
}
