//! Integer SM-quota arithmetic.
//!
//! Quotas are stored as thousandths of one GPU's SM capacity so per-GPU
//! capacity checks are exact integer comparisons. Fractions only appear at
//! file and interpolation boundaries.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use thiserror::Error;

/// Number of quota units in one full GPU.
pub const QUOTA_SCALE: u32 = 1000;

const QUANTIZE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuotaError {
    #[error("quota {0} is outside (0, 1]")]
    OutOfRange(f64),
    #[error("quota {0} is not a multiple of 1/{QUOTA_SCALE}")]
    NotQuantized(f64),
    #[error("granularity {0} must lie in (0, 1] and be a multiple of 1/{QUOTA_SCALE}")]
    InvalidGranularity(f64),
}

/// A fraction of one GPU's SMs, in units of `1 / QUOTA_SCALE`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Quota(u32);

impl Quota {
    pub const FULL: Quota = Quota(QUOTA_SCALE);

    pub fn from_units(units: u32) -> Result<Self, QuotaError> {
        if units == 0 || units > QUOTA_SCALE {
            return Err(QuotaError::OutOfRange(units as f64 / QUOTA_SCALE as f64));
        }
        Ok(Quota(units))
    }

    pub fn from_fraction(a: f64) -> Result<Self, QuotaError> {
        if !a.is_finite() || a <= 0.0 || a > 1.0 + QUANTIZE_EPS {
            return Err(QuotaError::OutOfRange(a));
        }
        let scaled = a * QUOTA_SCALE as f64;
        let units = scaled.round();
        if (scaled - units).abs() > QUANTIZE_EPS * QUOTA_SCALE as f64 {
            return Err(QuotaError::NotQuantized(a));
        }
        Quota::from_units(units as u32)
    }

    pub fn units(self) -> u32 {
        self.0
    }

    pub fn fraction(self) -> f64 {
        self.0 as f64 / QUOTA_SCALE as f64
    }
}

impl fmt::Display for Quota {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.fraction())
    }
}

impl Serialize for Quota {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.fraction())
    }
}

impl<'de> Deserialize<'de> for Quota {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let a = f64::deserialize(d)?;
        Quota::from_fraction(a).map_err(serde::de::Error::custom)
    }
}

/// Step of the SM-quota search lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Granularity(Quota);

impl Granularity {
    pub fn new(g: f64) -> Result<Self, QuotaError> {
        Quota::from_fraction(g)
            .map(Granularity)
            .map_err(|_| QuotaError::InvalidGranularity(g))
    }

    pub fn units(self) -> u32 {
        self.0.units()
    }

    pub fn fraction(self) -> f64 {
        self.0.fraction()
    }

    /// Quota levels `g, 2g, ...` up to and including the largest multiple
    /// that does not exceed one full GPU.
    pub fn levels(self) -> Vec<Quota> {
        let step = self.0.units();
        (1..=QUOTA_SCALE / step).map(|k| Quota(k * step)).collect()
    }

    pub fn contains(self, q: Quota) -> bool {
        q.units().is_multiple_of(self.units())
    }
}

impl Default for Granularity {
    fn default() -> Self {
        Granularity(Quota(QUOTA_SCALE / 10))
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.fraction())
    }
}

impl Serialize for Granularity {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.fraction())
    }
}

impl<'de> Deserialize<'de> for Granularity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let g = f64::deserialize(d)?;
        Granularity::new(g).map_err(serde::de::Error::custom)
    }
}
