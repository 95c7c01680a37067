//! Synthetic bump images.
//!
//! Each `1×16×16` image holds one Gaussian bump whose quadrant encodes the
//! class, plus white noise. Sample `i` of a split draws from its own keyed
//! stream, so any subset can be regenerated independently.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::{self, Stream};
use crate::{Error, Result, Tensor};

pub const IMAGE_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    pub seed: u64,
    /// Standard deviation of the additive pixel noise.
    pub noise_std: f64,
    /// Spatial standard deviation of the bump, in pixels.
    pub bump_width: f64,
    pub amplitude: f64,
    /// Per-sample relative amplitude jitter, uniform in `±jitter`.
    pub amplitude_jitter: f64,
    /// Distance of the bump centre from the nearest image edges, in pixels.
    pub edge_offset: f64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec {
            n_train: 512,
            n_test: 512,
            classes: 4,
            seed: 0,
            noise_std: 0.3,
            bump_width: 2.0,
            amplitude: 1.0,
            amplitude_jitter: 0.2,
            edge_offset: 2.5,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.n_train < 2 * batch_size {
            return Err(Error::config(format!(
                "n_train = {} must be at least twice the batch size {batch_size}",
                self.n_train
            )));
        }
        if self.n_test == 0 {
            return Err(Error::config("n_test must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.bump_width > 0.0 && self.amplitude_jitter >= 0.0) {
            return Err(Error::config("noise, bump width and jitter must be non-negative"));
        }
        let max = (IMAGE_SIZE - 1) as f64;
        if !(0.0..=max).contains(&self.edge_offset) {
            return Err(Error::config(format!("edge offset must lie in [0, {max}]")));
        }
        Ok(())
    }

    /// Bump centre `(row, col)` for a class. Classes beyond four reuse the
    /// quadrants with a larger base amplitude.
    pub fn centre(&self, class: usize) -> (f64, f64) {
        let near = self.edge_offset;
        let far = (IMAGE_SIZE - 1) as f64 - self.edge_offset;
        match class % 4 {
            0 => (near, near),
            1 => (near, far),
            2 => (far, near),
            _ => (far, far),
        }
    }

    fn base_amplitude(&self, class: usize) -> f64 {
        self.amplitude * (1.0 + 0.5 * (class / 4) as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `N×1×16×16` images.
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((self.x.gather_rows(rows)?, rows.iter().map(|&r| self.y[r]).collect()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub classes: usize,
}

fn render(spec: &ToyDatasetSpec, split: u64, n: usize) -> Result<Split> {
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::config(format!("noise distribution: {e}")))?;
    let px = IMAGE_SIZE * IMAGE_SIZE;
    let mut values = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    let two_w2 = 2.0 * spec.bump_width * spec.bump_width;
    for i in 0..n {
        let class = i % spec.classes;
        let mut rng = rng::keyed(Stream::Dataset, spec.seed, split, i as u64);
        let jitter = if spec.amplitude_jitter > 0.0 {
            rng.random_range(-spec.amplitude_jitter..=spec.amplitude_jitter)
        } else {
            0.0
        };
        let amp = spec.base_amplitude(class) * (1.0 + jitter);
        let (cy, cx) = spec.centre(class);
        for r in 0..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                let d2 = dy * dy + dx * dx;
                values.push(amp * libm::exp(-d2 / two_w2) + noise.sample(&mut rng));
            }
        }
        labels.push(class);
    }
    Ok(Split {
        x: Tensor::new([n, 1, IMAGE_SIZE, IMAGE_SIZE], values)?,
        y: labels,
    })
}

/// Renders both splits. Labels cycle through the classes, so every class
/// appears `n/classes` times (rounded) in each split.
pub fn make_dataset(spec: &ToyDatasetSpec) -> Result<Dataset> {
    spec.validate(1)?;
    Ok(Dataset {
        train: render(spec, 0, spec.n_train)?,
        test: render(spec, 1, spec.n_test)?,
        classes: spec.classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyDatasetSpec {
        ToyDatasetSpec {
            n_train: 40,
            n_test: 12,
            ..ToyDatasetSpec::default()
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = make_dataset(&small()).unwrap();
        let b = make_dataset(&small()).unwrap();
        assert_eq!(a, b);
        for c in 0..4 {
            assert_eq!(a.train.y.iter().filter(|&&y| y == c).count(), 10);
            assert_eq!(a.test.y.iter().filter(|&&y| y == c).count(), 3);
        }
        assert_eq!(a.train.x.dims(), &[40, 1, 16, 16]);
    }

    #[test]
    fn noise_free_peak_sits_at_the_class_centre() {
        let spec = ToyDatasetSpec {
            noise_std: 0.0,
            amplitude_jitter: 0.0,
            edge_offset: 4.0,
            ..small()
        };
        let d = make_dataset(&spec).unwrap();
        let img = &d.train.x.values()[256..512];
        let peak = img
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        assert_eq!(peak, (4 * 16 + 11, 1.0));
    }

    #[test]
    fn validation() {
        assert!(ToyDatasetSpec { classes: 1, ..small() }.validate(1).is_err());
        assert!(small().validate(32).is_err());
    }
}
