//! Summary statistics over seeds.

use serde::Serialize;
use statrs::distribution::{Binomial, DiscreteCDF, StudentsT, ContinuousCDF};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); zero for fewer than two
/// values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Two-sided 95% Student-t interval for the mean. Collapses to the mean for
/// fewer than two values.
pub fn ci95(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, m);
    }
    let n = xs.len() as f64;
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let half = t * std_dev(xs) / n.sqrt();
    (m - half, m + half)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `P(X ≥ wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

/// One-sided paired sign test of `a > b`. Ties are dropped.
pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    assert_eq!(a.len(), b.len(), "sign test needs paired samples");
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let n = wins + losses;
    let p_value = if wins == 0 {
        1.0
    } else {
        let bin = Binomial::new(0.5, n as u64).expect("valid binomial");
        bin.sf(wins as u64 - 1)
    };
    SignTest {
        wins,
        losses,
        ties: a.len() - n,
        p_value,
    }
}
