//! Teacher-feature variance as a temperature field.
//!
//! [`SigmaEstimator`] streams standardized teacher features through a
//! per-position Welford accumulator. Finalizing merges the variance over the
//! axes of a [`MergeMode`], takes the square root, floors it and divides by
//! the geometric mean, giving a [`SigmaTensor`] of shape `C×H×W`, `C×1×1`,
//! `1×H×W` or `1×1×1` that broadcasts against `B×C×H×W`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::{Error, FeatureBatch, Result, Shape, Tensor};

/// Lower bound on every σ element, applied before normalization.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum MergeMode {
    /// Merge batch, channel and space: one scalar.
    Scalar,
    /// Merge batch only: `C×H×W`.
    #[default]
    Full,
    /// Merge batch and space: `C×1×1`.
    Channel,
    /// Merge batch and channel: `1×H×W`.
    Spatial,
}

impl MergeMode {
    pub const ALL: [MergeMode; 4] = [
        MergeMode::Scalar,
        MergeMode::Full,
        MergeMode::Channel,
        MergeMode::Spatial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMode::Scalar => "scalar",
            MergeMode::Full => "full",
            MergeMode::Channel => "channel",
            MergeMode::Spatial => "spatial",
        }
    }

    /// Axes of a `C×H×W` sample averaged away by this mode.
    pub fn merged_axes(self) -> &'static [usize] {
        match self {
            MergeMode::Scalar => &[0, 1, 2],
            MergeMode::Full => &[],
            MergeMode::Channel => &[1, 2],
            MergeMode::Spatial => &[0],
        }
    }

    /// σ shape for per-sample feature dims `[C, H, W]`.
    pub fn sigma_dims(self, sample: [usize; 3]) -> [usize; 3] {
        let mut d = sample;
        for &a in self.merged_axes() {
            d[a] = 1;
        }
        d
    }
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MergeMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown merge mode `{s}`")))
    }
}

/// Per-position Welford accumulator over samples of shape `C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaEstimator {
    dims: [usize; 3],
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    finalized: bool,
}

impl SigmaEstimator {
    pub fn new(dims: [usize; 3]) -> Result<Self> {
        let n = Shape::new(dims.to_vec())?.numel();
        Ok(SigmaEstimator {
            dims,
            count: 0,
            mean: vec![0.0; n],
            m2: vec![0.0; n],
            finalized: false,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Folds every sample of the batch in, one at a time.
    pub fn update(&mut self, feat: &FeatureBatch) -> Result<()> {
        if self.finalized {
            return Err(Error::usage("sigma estimator already finalized"));
        }
        if feat.sample_dims() != self.dims {
            return Err(Error::mismatch(
                "sigma_update",
                &self.dims,
                &feat.sample_dims(),
            ));
        }
        let per = self.mean.len();
        for sample in feat.tensor().values().chunks(per) {
            self.push(sample);
        }
        Ok(())
    }

    fn push(&mut self, sample: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((x, mean), m2) in sample.iter().zip(&mut self.mean).zip(&mut self.m2) {
            let delta = x - *mean;
            *mean += delta / n;
            *m2 += delta * (x - *mean);
        }
    }

    /// Per-position population variance `M2/n` as a `C×H×W` tensor.
    pub fn variance(&self) -> Result<Tensor> {
        if self.count < 2 {
            return Err(Error::usage(format!(
                "sigma estimator needs at least 2 samples, has {}",
                self.count
            )));
        }
        let n = self.count as f64;
        Tensor::new(self.dims.to_vec(), self.m2.iter().map(|m| m / n).collect())
    }

    /// Seals the estimator and builds the normalized temperature field.
    /// Further finalization with other modes is allowed; updates are not.
    pub fn finalize(&mut self, mode: MergeMode) -> Result<SigmaTensor> {
        let var = self.variance()?;
        self.finalized = true;
        SigmaTensor::from_variance(&var, mode)
    }
}

/// Exponential moving average of per-position mean and variance, for an
/// online σ that follows the training stream.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaSigma {
    momentum: f64,
    mean: Option<Vec<f64>>,
    var: Vec<f64>,
    dims: [usize; 3],
}

impl EmaSigma {
    pub fn new(dims: [usize; 3], momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::config(format!("EMA momentum must be in (0, 1], got {momentum}")));
        }
        let n = Shape::new(dims.to_vec())?.numel();
        Ok(EmaSigma {
            momentum,
            mean: None,
            var: vec![0.0; n],
            dims,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_none()
    }

    pub fn update(&mut self, feat: &FeatureBatch) -> Result<()> {
        if feat.sample_dims() != self.dims {
            return Err(Error::mismatch("ema_sigma", &self.dims, &feat.sample_dims()));
        }
        if feat.batch() < 2 {
            return Err(Error::usage("EMA sigma needs batches of at least 2 samples"));
        }
        let mut est = SigmaEstimator::new(self.dims)?;
        est.update(feat)?;
        let batch_var = est.variance()?;
        match &mut self.mean {
            None => {
                self.mean = Some(est.mean.clone());
                self.var.copy_from_slice(batch_var.values());
            }
            Some(mean) => {
                let a = self.momentum;
                for (m, &b) in mean.iter_mut().zip(&est.mean) {
                    *m = (1.0 - a) * *m + a * b;
                }
                for (v, &b) in self.var.iter_mut().zip(batch_var.values()) {
                    *v = (1.0 - a) * *v + a * b;
                }
            }
        }
        Ok(())
    }

    pub fn sigma(&self, mode: MergeMode) -> Result<SigmaTensor> {
        if self.mean.is_none() {
            return Err(Error::usage("EMA sigma has seen no batches"));
        }
        SigmaTensor::from_variance(&Tensor::new(self.dims.to_vec(), self.var.clone())?, mode)
    }
}

/// Floored temperature field of rank 3.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaTensor {
    mode: MergeMode,
    values: Tensor,
    floor: f64,
    normalized: bool,
}

impl SigmaTensor {
    /// The unit temperature: scalar 1.
    pub fn unit() -> Self {
        SigmaTensor {
            mode: MergeMode::Scalar,
            values: Tensor::ones([1, 1, 1]).expect("static shape"),
            floor: SIGMA_FLOOR,
            normalized: true,
        }
    }

    /// Merges a per-position `C×H×W` variance, takes the square root,
    /// floors and normalizes to unit geometric mean.
    pub fn from_variance(var: &Tensor, mode: MergeMode) -> Result<Self> {
        let dims: [usize; 3] = var
            .dims()
            .try_into()
            .map_err(|_| Error::shape("sigma", format!("variance must be C×H×W, got {:?}", var.dims())))?;
        if var.values().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::domain("sigma", "negative or non-finite variance"));
        }
        let merged = merge_mean(var, dims, mode);
        let raw: Vec<f64> = merged.iter().map(|&v| libm::sqrt(v).max(SIGMA_FLOOR)).collect();
        let mean_log = raw.iter().map(|&s| libm::log(s)).sum::<f64>() / raw.len() as f64;
        let values = raw
            .iter()
            .map(|&s| libm::exp(libm::log(s) - mean_log).max(SIGMA_FLOOR))
            .collect();
        Ok(SigmaTensor {
            mode,
            values: Tensor::new(mode.sigma_dims(dims).to_vec(), values)?,
            floor: SIGMA_FLOOR,
            normalized: true,
        })
    }

    /// Wraps explicit σ values. Elements below the floor are a usage error.
    pub fn from_values(mode: MergeMode, values: Tensor, normalized: bool) -> Result<Self> {
        let dims: [usize; 3] = values.dims().try_into().map_err(|_| {
            Error::shape("sigma", format!("sigma must have rank 3, got {:?}", values.dims()))
        })?;
        for &a in mode.merged_axes() {
            if dims[a] != 1 {
                return Err(Error::shape(
                    "sigma",
                    format!("{mode} sigma must have size 1 on axis {a}, got {dims:?}"),
                ));
            }
        }
        let sigma = SigmaTensor {
            mode,
            values,
            floor: SIGMA_FLOOR,
            normalized,
        };
        sigma.check_floor()?;
        Ok(sigma)
    }

    pub fn mode(&self) -> MergeMode {
        self.mode
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn is_unit(&self) -> bool {
        self.values.values().iter().all(|&v| v == 1.0)
    }

    pub fn geometric_mean(&self) -> f64 {
        let v = self.values.values();
        libm::exp(v.iter().map(|&s| libm::log(s)).sum::<f64>() / v.len() as f64)
    }

    pub fn check_floor(&self) -> Result<()> {
        match self.values.values().iter().position(|&s| !(s >= self.floor)) {
            Some(i) => Err(Error::usage(format!(
                "sigma element {i} = {} is below the floor {}",
                self.values.values()[i],
                self.floor
            ))),
            None => Ok(()),
        }
    }

    /// Checks that σ broadcasts against features of the given dims.
    pub fn check_broadcast(&self, feature_dims: &[usize]) -> Result<()> {
        let ok = feature_dims.len() == 4
            && self
                .values
                .dims()
                .iter()
                .zip(&feature_dims[1..])
                .all(|(&s, &f)| s == 1 || s == f);
        if ok {
            Ok(())
        } else {
            Err(Error::mismatch("sigma", self.values.dims(), feature_dims))
        }
    }

    /// σ value at sample position `(c, h, w)`.
    pub fn at(&self, c: usize, h: usize, w: usize) -> f64 {
        let d = self.values.dims();
        let idx = ((c % d[0]) * d[1] + (h % d[1])) * d[2] + (w % d[2]);
        self.values.values()[idx]
    }

    /// σ expanded to every element of a `B×C×H×W` batch.
    pub fn expand(&self, feature_dims: &[usize]) -> Result<Vec<f64>> {
        self.check_broadcast(feature_dims)?;
        let [b, c, h, w] = [feature_dims[0], feature_dims[1], feature_dims[2], feature_dims[3]];
        let mut out = Vec::with_capacity(b * c * h * w);
        for _ in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        out.push(self.at(ci, hi, wi));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn merge_mean(var: &Tensor, dims: [usize; 3], mode: MergeMode) -> Vec<f64> {
    let out_dims = mode.sigma_dims(dims);
    let n_out: usize = out_dims.iter().product();
    let group = (var.numel() / n_out) as f64;
    let mut sums = vec![0.0; n_out];
    let [_, h, w] = dims;
    for (i, &v) in var.values().iter().enumerate() {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (c, y, x) = (c % out_dims[0], y % out_dims[1], x % out_dims[2]);
        sums[(c * out_dims[1] + y) * out_dims[2] + x] += v;
    }
    sums.iter().map(|s| s / group).collect()
}

/// `g(σ²) = ln σ² + r²/σ²`, the per-position uncertainty objective.
pub fn local_objective(sigma_sq: f64, r: f64) -> f64 {
    libm::log(sigma_sq) + r * r / sigma_sq
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || n < 2 {
        return Err(Error::usage(format!("bad log grid [{lo}, {hi}] with {n} points")));
    }
    let (a, b) = (libm::log(lo), libm::log(hi));
    Ok((0..n)
        .map(|i| libm::exp(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect())
}

/// Grid minimizer of [`local_objective`] for residual `r`. The grid must
/// cover `[r²/10, 10·r²]`.
pub fn analytic_min_check(r: f64, grid: &[f64]) -> Result<f64> {
    if r == 0.0 || !r.is_finite() {
        return Err(Error::domain(
            "analytic_min_check",
            "residual must be non-zero and finite; the minimum of ln σ² lies outside σ² > 0",
        ));
    }
    let r2 = r * r;
    let lo = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // endpoints from `log_grid` can land an ulp inside the interval
    let slack = 1.0 + 1e-9;
    if !(lo > 0.0) || lo > slack * r2 / 10.0 || slack * hi < 10.0 * r2 {
        return Err(Error::usage(format!(
            "grid [{lo}, {hi}] must be positive and span [{}, {}]",
            r2 / 10.0,
            10.0 * r2
        )));
    }
    let (_, best) = grid
        .iter()
        .map(|&s| (local_objective(s, r), s))
        .fold((f64::INFINITY, f64::NAN), |acc, cur| if cur.0 < acc.0 { cur } else { acc });
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(dims: [usize; 4], f: impl Fn(usize) -> f64) -> FeatureBatch {
        let n = dims.iter().product();
        FeatureBatch::new(Tensor::new(dims, (0..n).map(f).collect()).unwrap()).unwrap()
    }

    #[test]
    fn two_point_variance() {
        let mut est = SigmaEstimator::new([1, 1, 1]).unwrap();
        est.update(&stream([1, 1, 1, 1], |_| 2.0)).unwrap();
        est.update(&stream([1, 1, 1, 1], |_| 4.0)).unwrap();
        assert_eq!(est.mean(), &[3.0]);
        assert_eq!(est.variance().unwrap().values(), &[1.0]);
    }

    #[test]
    fn constant_stream_has_zero_variance_and_floored_sigma() {
        let mut est = SigmaEstimator::new([2, 1, 1]).unwrap();
        est.update(&stream([5, 2, 1, 1], |_| 0.7)).unwrap();
        assert!(est.variance().unwrap().values().iter().all(|&v| v == 0.0));
        let s = est.finalize(MergeMode::Full).unwrap();
        assert!(s.values().values().iter().all(|&v| v >= SIGMA_FLOOR));
    }

    #[test]
    fn finalize_rules() {
        let mut est = SigmaEstimator::new([1, 1, 1]).unwrap();
        est.update(&stream([1, 1, 1, 1], |_| 1.0)).unwrap();
        assert!(matches!(est.finalize(MergeMode::Scalar), Err(Error::Usage(_))));
        est.update(&stream([1, 1, 1, 1], |_| 3.0)).unwrap();
        est.finalize(MergeMode::Scalar).unwrap();
        assert!(matches!(
            est.update(&stream([1, 1, 1, 1], |_| 1.0)),
            Err(Error::Usage(_))
        ));
        let wrong = stream([1, 2, 1, 1], |_| 1.0);
        let mut fresh = SigmaEstimator::new([1, 1, 1]).unwrap();
        assert!(matches!(fresh.update(&wrong), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn scalar_mode_is_exactly_one() {
        let mut est = SigmaEstimator::new([3, 2, 2]).unwrap();
        est.update(&stream([6, 3, 2, 2], |i| (i as f64 * 0.77).sin() * 3.0)).unwrap();
        let s = est.finalize(MergeMode::Scalar).unwrap();
        assert_eq!(s.values().dims(), &[1, 1, 1]);
        assert_eq!(s.values().values(), &[1.0]);
    }

    #[test]
    fn channel_mode_two_channels() {
        let var = Tensor::new([2, 1, 2], vec![1.0, 1.0, 4.0, 4.0]).unwrap();
        let s = SigmaTensor::from_variance(&var, MergeMode::Channel).unwrap();
        assert_eq!(s.values().dims(), &[2, 1, 1]);
        let r = libm::sqrt(2.0);
        assert!((s.values().values()[0] - 1.0 / r).abs() < 1e-15);
        assert!((s.values().values()[1] - r).abs() < 1e-15);
    }

    #[test]
    fn merge_shapes() {
        let var = Tensor::new([3, 2, 4], (0..24).map(|i| 1.0 + i as f64).collect()).unwrap();
        let shape = |m| SigmaTensor::from_variance(&var, m).unwrap().values().dims().to_vec();
        assert_eq!(shape(MergeMode::Full), vec![3, 2, 4]);
        assert_eq!(shape(MergeMode::Channel), vec![3, 1, 1]);
        assert_eq!(shape(MergeMode::Spatial), vec![1, 2, 4]);
        assert_eq!(shape(MergeMode::Scalar), vec![1, 1, 1]);
        // spatial mode averages over channels: position (0, 0) holds 1, 9, 17
        let raw = merge_mean(&var, [3, 2, 4], MergeMode::Spatial);
        assert_eq!(raw[0], 9.0);
    }

    #[test]
    fn normalized_geometric_mean_is_one() {
        let var = Tensor::new([2, 2, 2], vec![0.1, 2.0, 3.0, 0.5, 9.0, 1.0, 1.5, 0.2]).unwrap();
        let s = SigmaTensor::from_variance(&var, MergeMode::Full).unwrap();
        assert!((s.geometric_mean() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn broadcast_and_expand() {
        let s = SigmaTensor::from_values(
            MergeMode::Channel,
            Tensor::new([2, 1, 1], vec![0.5, 2.0]).unwrap(),
            false,
        )
        .unwrap();
        assert!(s.check_broadcast(&[3, 2, 4, 4]).is_ok());
        assert!(s.check_broadcast(&[3, 3, 4, 4]).is_err());
        let e = s.expand(&[1, 2, 1, 2]).unwrap();
        assert_eq!(e, vec![0.5, 0.5, 2.0, 2.0]);
        assert!(SigmaTensor::from_values(
            MergeMode::Channel,
            Tensor::new([2, 1, 1], vec![1e-4, 2.0]).unwrap(),
            false
        )
        .is_err());
        assert!(SigmaTensor::from_values(
            MergeMode::Channel,
            Tensor::new([2, 2, 1], vec![1.0; 4]).unwrap(),
            false
        )
        .is_err());
    }

    #[test]
    fn analytic_minimum() {
        let grid = log_grid(0.01, 100.0, 4001).unwrap();
        assert!((analytic_min_check(2.0, &grid).unwrap() - 4.0).abs() < 0.01);
        assert!((analytic_min_check(1.0, &grid).unwrap() - 1.0).abs() < 0.01);
        let e = core::f64::consts::E;
        assert!(local_objective(4.0 * e, 2.0) > local_objective(4.0, 2.0));
        assert!(local_objective(4.0 / e, 2.0) > local_objective(4.0, 2.0));
        assert!(matches!(analytic_min_check(0.0, &grid), Err(Error::Domain { .. })));
        assert!(analytic_min_check(20.0, &grid).is_err());
    }

    #[test]
    fn ema_first_batch_matches_batch_variance() {
        let f = stream([4, 1, 1, 2], |i| i as f64);
        let mut ema = EmaSigma::new([1, 1, 2], 0.1).unwrap();
        ema.update(&f).unwrap();
        let mut est = SigmaEstimator::new([1, 1, 2]).unwrap();
        est.update(&f).unwrap();
        assert_eq!(
            ema.sigma(MergeMode::Full).unwrap(),
            est.finalize(MergeMode::Full).unwrap()
        );
    }

    #[test]
    fn merge_mode_round_trips() {
        for m in MergeMode::ALL {
            assert_eq!(m.as_str().parse::<MergeMode>().unwrap(), m);
        }
        assert!("bogus".parse::<MergeMode>().is_err());
    }
}
