//! Avatars: perturbed copies of standardized teacher features.
//!
//! The only perturbation is mask dropout: every element is zeroed
//! independently with probability `m` and survivors are left unscaled. The
//! residual `a − t` then has second moment `m·t²` per position. Other
//! dropout flavours change only the constant: inverted dropout gives
//! `m/(1−m)·t²` and a deterministic `(1−m)` scaling gives `m²·t²`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::rng::{self, Stream};
use crate::{Error, FeatureBatch, Result, Tensor};

pub const DEFAULT_COUNT: usize = 5;
pub const DEFAULT_DROPOUT_RATIO: f64 = 0.1;
/// Smallest draw count accepted by [`residual_moment_oracle`].
pub const MIN_ORACLE_DRAWS: usize = 10_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Perturbation {
    #[default]
    Dropout,
}

impl Perturbation {
    pub fn as_str(self) -> &'static str {
        match self {
            Perturbation::Dropout => "dropout",
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dropout" => Ok(Perturbation::Dropout),
            other => Err(Error::config(format!("unknown perturbation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AvatarConfig {
    pub count: usize,
    pub dropout_ratio: f64,
    /// Per-avatar ratios overriding `dropout_ratio`; length must be `count`.
    pub per_avatar_ratios: Option<Vec<f64>>,
    pub seed: u64,
    pub perturbation: Perturbation,
}

impl Default for AvatarConfig {
    fn default() -> Self {
        AvatarConfig {
            count: DEFAULT_COUNT,
            dropout_ratio: DEFAULT_DROPOUT_RATIO,
            per_avatar_ratios: None,
            seed: 0,
            perturbation: Perturbation::Dropout,
        }
    }
}

fn check_ratio(what: &str, m: f64) -> Result<()> {
    if (0.0..1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::config(format!("{what} must be in [0, 1), got {m}")))
    }
}

impl AvatarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("avatar count must be at least 1"));
        }
        check_ratio("dropout ratio", self.dropout_ratio)?;
        if let Some(ratios) = &self.per_avatar_ratios {
            if ratios.len() != self.count {
                return Err(Error::config(format!(
                    "per-avatar ratios has {} entries for {} avatars",
                    ratios.len(),
                    self.count
                )));
            }
            for (i, &m) in ratios.iter().enumerate() {
                check_ratio(&format!("dropout ratio of avatar {i}"), m)?;
            }
        }
        Ok(())
    }

    pub fn ratio(&self, avatar: usize) -> f64 {
        match &self.per_avatar_ratios {
            Some(r) => r[avatar],
            None => self.dropout_ratio,
        }
    }
}

/// `k` avatars of one standardized teacher feature batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AvatarSet<'a> {
    features: Vec<FeatureBatch>,
    source: &'a FeatureBatch,
}

impl<'a> AvatarSet<'a> {
    pub fn features(&self) -> &[FeatureBatch] {
        &self.features
    }

    pub fn source(&self) -> &'a FeatureBatch {
        self.source
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn into_features(self) -> Vec<FeatureBatch> {
        self.features
    }
}

fn mask_dropout(src: &[f64], m: f64, rng: &mut impl Rng) -> Vec<f64> {
    src.iter()
        .map(|&v| if rng.random_bool(m) { 0.0 } else { v })
        .collect()
}

/// Draws `cfg.count` avatars of `teacher_feat`. Avatar `i` uses the stream
/// keyed by `(cfg.seed, stream_id, i)`.
pub fn generate<'a>(
    teacher_feat: &'a FeatureBatch,
    cfg: &AvatarConfig,
    stream_id: u64,
) -> Result<AvatarSet<'a>> {
    cfg.validate()?;
    let features = (0..cfg.count)
        .map(|i| {
            let m = cfg.ratio(i);
            if m == 0.0 {
                return Ok(teacher_feat.clone());
            }
            let mut rng = rng::keyed(Stream::Avatar, cfg.seed, stream_id, i as u64);
            let values = mask_dropout(teacher_feat.tensor().values(), m, &mut rng);
            FeatureBatch::new(Tensor::from_shape(teacher_feat.tensor().shape().clone(), values)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AvatarSet {
        features,
        source: teacher_feat,
    })
}

/// Residual second-moment constant of mask dropout: `E[(a − t)²] = m·t²`.
pub fn mask_dropout_constant(m: f64) -> f64 {
    m
}

/// Constant for inverted dropout (survivors scaled by `1/(1−m)`).
pub fn inverted_dropout_constant(m: f64) -> f64 {
    m / (1.0 - m)
}

/// Constant for the deterministic map `a = (1−m)·t`.
pub fn deterministic_scaling_constant(m: f64) -> f64 {
    m * m
}

/// Monte Carlo estimate of `E[(a − t)²]` per position under mask dropout
/// with ratio `m`, averaged over `n_draws` independent masks.
pub fn residual_moment_oracle(teacher_feat: &Tensor, m: f64, n_draws: usize, seed: u64) -> Result<Tensor> {
    check_ratio("dropout ratio", m)?;
    if n_draws < MIN_ORACLE_DRAWS {
        return Err(Error::usage(format!(
            "residual oracle needs at least {MIN_ORACLE_DRAWS} draws, got {n_draws}"
        )));
    }
    let t = teacher_feat.values();
    let mut acc = alloc::vec![0.0; t.len()];
    if m > 0.0 {
        for (pos, (&v, slot)) in t.iter().zip(acc.iter_mut()).enumerate() {
            let mut rng = rng::keyed(Stream::Oracle, seed, pos as u64, 0);
            let dropped = (0..n_draws).filter(|_| rng.random_bool(m)).count();
            // a − t is −t when dropped and 0 otherwise
            *slot = dropped as f64 * v * v / n_draws as f64;
        }
    }
    Tensor::from_shape(teacher_feat.shape().clone(), acc)
}

/// Describes an avatar configuration for logs and echoed metadata.
pub fn describe(cfg: &AvatarConfig) -> String {
    match &cfg.per_avatar_ratios {
        Some(r) => format!("{}×{} ratios={:?}", cfg.count, cfg.perturbation.as_str(), r),
        None => format!("{}×{} m={}", cfg.count, cfg.perturbation.as_str(), cfg.dropout_ratio),
    }
}
