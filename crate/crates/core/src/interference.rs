//! Bandwidth-contention delay model and its least-squares fit.
//!
//! The delay a module sees on one GPU is
//! `e1 + e2 * sum(B) + e3 * prod(B)` over the bandwidth utilizations `B` of
//! the modules resident on that GPU.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

/// Minimum samples per fitted coefficient.
pub const SAMPLES_PER_COEFFICIENT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferenceModel {
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    /// Coefficient of determination on the fitting data.
    pub r_squared: f64,
    pub sample_count: usize,
}

impl InterferenceModel {
    pub fn new(e1: f64, e2: f64, e3: f64) -> Self {
        InterferenceModel { e1, e2, e3, r_squared: 1.0, sample_count: 0 }
    }

    /// A model that predicts no contention at all.
    pub fn unaware() -> Self {
        InterferenceModel::new(0.0, 0.0, 0.0)
    }

    /// Same coefficients with the multiplicative term removed.
    pub fn without_product_term(&self) -> Self {
        InterferenceModel { e3: 0.0, ..*self }
    }

    pub fn has_negative_coefficient(&self) -> bool {
        self.e1 < 0.0 || self.e2 < 0.0 || self.e3 < 0.0
    }

    /// Delay on one GPU given the utilizations of the modules counted as
    /// resident. An empty set contributes only `e1`.
    pub fn delay(&self, utilizations: &[f64]) -> f64 {
        if utilizations.is_empty() {
            return self.e1;
        }
        let sum: f64 = utilizations.iter().sum();
        let prod: f64 = utilizations.iter().product();
        self.e1 + self.e2 * sum + self.e3 * prod
    }

    /// Stable identity of the coefficients, used in cache keys.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in [self.e1, self.e2, self.e3] {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// One module resident on the sampled GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColocatedModule {
    pub module_id: String,
    pub a: f64,
    pub bandwidth_util: f64,
}

/// One colocation measurement: `victim` ran alongside `members` (which
/// include the victim itself) on every one of its `dp_degree` GPUs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColocationSample {
    pub victim: String,
    pub dp_degree: u32,
    pub members: Vec<ColocatedModule>,
    pub observed_s: f64,
    pub base_s: f64,
}

impl ColocationSample {
    pub fn residual(&self) -> f64 {
        self.observed_s - self.base_s
    }

    /// Utilizations counted in the delay, optionally leaving out the victim.
    pub fn utilizations(&self, include_self: bool) -> Vec<f64> {
        let mut skipped = false;
        self.members
            .iter()
            .filter(|m| {
                if !include_self && !skipped && m.module_id == self.victim {
                    skipped = true;
                    return false;
                }
                true
            })
            .map(|m| m.bandwidth_util)
            .collect()
    }
}

/// Which terms a fit estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitForm {
    /// `e1 + e2 * sum + e3 * prod`.
    Full,
    /// `e1 + e2 * sum`, with `e3` fixed at zero.
    AdditiveOnly,
}

impl FitForm {
    fn coefficients(self) -> usize {
        match self {
            FitForm::Full => 3,
            FitForm::AdditiveOnly => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("need at least {needed} samples spanning 2 colocation sizes; got {got} samples over {cardinalities} size(s)")]
    InsufficientSamples { needed: usize, got: usize, cardinalities: usize },
    #[error("design matrix is rank deficient (samples do not vary the fitted terms)")]
    DegenerateDesignMatrix,
    #[error("sample for `{0}` has a non-finite value")]
    NonFinite(String),
}

/// Least-squares estimate of the delay coefficients from colocation samples.
///
/// Negative coefficients are returned as fitted; callers can check
/// [`InterferenceModel::has_negative_coefficient`].
pub fn fit_interference(
    samples: &[ColocationSample],
    form: FitForm,
    include_self: bool,
) -> Result<InterferenceModel, FitError> {
    let needed = SAMPLES_PER_COEFFICIENT * FitForm::Full.coefficients();
    let cardinalities: BTreeSet<usize> = samples.iter().map(|s| s.members.len()).collect();
    if samples.len() < needed || cardinalities.len() < 2 {
        return Err(FitError::InsufficientSamples {
            needed,
            got: samples.len(),
            cardinalities: cardinalities.len(),
        });
    }
    let k = form.coefficients();
    let mut x = DMatrix::<f64>::zeros(samples.len(), k);
    let mut y = DVector::<f64>::zeros(samples.len());
    for (row, s) in samples.iter().enumerate() {
        let bs = s.utilizations(include_self);
        let (sum, prod) = if bs.is_empty() {
            (0.0, 0.0)
        } else {
            (bs.iter().sum::<f64>(), bs.iter().product::<f64>())
        };
        let target = s.residual();
        if !(sum.is_finite() && prod.is_finite() && target.is_finite()) {
            return Err(FitError::NonFinite(s.victim.clone()));
        }
        x[(row, 0)] = 1.0;
        x[(row, 1)] = sum;
        if k == 3 {
            x[(row, 2)] = prod;
        }
        y[row] = target;
    }

    // Rank check on the column-scaled design so units do not matter.
    let mut scaled = x.clone();
    for mut col in scaled.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let sv = scaled.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if smax <= 0.0 || smin / smax < 1e-10 {
        return Err(FitError::DegenerateDesignMatrix);
    }

    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let beta = xtx.lu().solve(&xty).ok_or(FitError::DegenerateDesignMatrix)?;

    let fitted = &x * &beta;
    let mean = y.mean();
    let ss_res: f64 = (&y - &fitted).iter().map(|r| r * r).sum();
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    let model = InterferenceModel {
        e1: beta[0],
        e2: beta[1],
        e3: if k == 3 { beta[2] } else { 0.0 },
        r_squared,
        sample_count: samples.len(),
    };
    if model.has_negative_coefficient() {
        log::warn!(
            "fitted interference model has a negative coefficient: e1={} e2={} e3={}",
            model.e1, model.e2, model.e3
        );
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(bs: &[f64], truth: &InterferenceModel) -> ColocationSample {
        let members: Vec<ColocatedModule> = bs
            .iter()
            .enumerate()
            .map(|(i, &b)| ColocatedModule { module_id: format!("m{i}"), a: 0.1, bandwidth_util: b })
            .collect();
        let base = 1.0;
        ColocationSample {
            victim: "m0".into(),
            dp_degree: 1,
            observed_s: base + truth.delay(bs),
            members,
            base_s: base,
        }
    }

    fn design() -> Vec<Vec<f64>> {
        vec![
            vec![0.2],
            vec![0.9],
            vec![0.5, 0.4],
            vec![0.7, 0.8],
            vec![0.1, 0.95],
            vec![0.3, 0.3, 0.3],
            vec![0.9, 0.6, 0.2],
            vec![1.0, 1.0],
            vec![0.6, 0.5, 0.4, 0.3],
            vec![0.05, 0.15],
        ]
    }

    #[test]
    fn delay_hand_evaluation() {
        let m = InterferenceModel::new(0.0, 0.1, 1.0);
        assert!((m.delay(&[0.5, 0.4]) - 0.29).abs() < 1e-15);
        assert_eq!(InterferenceModel::new(0.003, 0.1, 1.0).delay(&[0.0]), 0.003);
        assert_eq!(InterferenceModel::new(0.003, 0.1, 1.0).delay(&[]), 0.003);
    }

    #[test]
    fn zero_noise_recovery() {
        let truth = InterferenceModel::new(0.001, 0.05, 0.20);
        let samples: Vec<_> = design().iter().map(|b| sample(b, &truth)).collect();
        let fit = fit_interference(&samples, FitForm::Full, true).unwrap();
        for (got, want) in [(fit.e1, truth.e1), (fit.e2, truth.e2), (fit.e3, truth.e3)] {
            assert!(((got - want) / want).abs() < 1e-9, "{got} vs {want}");
        }
        assert!(fit.r_squared > 1.0 - 1e-12);
        assert_eq!(fit.sample_count, samples.len());
    }

    #[test]
    fn nested_additive_truth_gives_zero_product_coefficient() {
        let truth = InterferenceModel::new(0.002, 0.07, 0.0);
        let samples: Vec<_> = design().iter().map(|b| sample(b, &truth)).collect();
        let fit = fit_interference(&samples, FitForm::Full, true).unwrap();
        assert!(fit.e3.abs() < 1e-9);
    }

    #[test]
    fn additive_only_fits_worse_on_multiplicative_data() {
        let truth = InterferenceModel::new(0.001, 0.05, 0.20);
        let samples: Vec<_> = design().iter().map(|b| sample(b, &truth)).collect();
        let full = fit_interference(&samples, FitForm::Full, true).unwrap();
        let add = fit_interference(&samples, FitForm::AdditiveOnly, true).unwrap();
        assert_eq!(add.e3, 0.0);
        assert!(add.r_squared < full.r_squared);
    }

    #[test]
    fn insufficient_and_degenerate() {
        let truth = InterferenceModel::new(0.001, 0.05, 0.20);
        let few: Vec<_> = design().iter().take(8).map(|b| sample(b, &truth)).collect();
        assert!(matches!(
            fit_interference(&few, FitForm::Full, true),
            Err(FitError::InsufficientSamples { .. })
        ));
        let one_size: Vec<_> = (0..12).map(|i| sample(&[0.1 * (i % 9) as f64 + 0.05], &truth)).collect();
        assert!(matches!(
            fit_interference(&one_size, FitForm::Full, true),
            Err(FitError::InsufficientSamples { .. })
        ));
        let same: Vec<_> = (0..12)
            .map(|i| sample(if i % 2 == 0 { &[0.5, 0.5][..] } else { &[0.5, 0.5, 1.0][..] }, &truth))
            .collect();
        // only two distinct (sum, prod) rows -> three columns cannot be resolved
        assert_eq!(fit_interference(&same, FitForm::Full, true), Err(FitError::DegenerateDesignMatrix));
    }

    #[test]
    fn excluding_the_victim() {
        let s = sample(&[0.5, 0.4, 0.3], &InterferenceModel::unaware());
        assert_eq!(s.utilizations(true), vec![0.5, 0.4, 0.3]);
        assert_eq!(s.utilizations(false), vec![0.4, 0.3]);
    }
}
