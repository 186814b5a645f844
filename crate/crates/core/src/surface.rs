//! Per-module scaling surfaces over `(dp degree, SM quota)`.
//!
//! Lookups are exact at grid points and bilinear in `(log2 d, a)` between
//! them. Nothing is extrapolated outside the profiled hull.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

/// Tolerance when matching a quota to a grid column.
const GRID_EPS: f64 = 1e-12;

/// One profiled record of a surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub d: u32,
    pub a: f64,
    pub latency: f64,
    pub bandwidth_util: f64,
    pub memory: f64,
}

/// Interpolated values at one `(d, a)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseEstimate {
    pub latency: f64,
    pub bandwidth_util: f64,
    pub memory: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SurfaceError {
    #[error("surface for `{0}` has no points")]
    Empty(String),
    #[error("surface for `{module}` has an invalid point at d={d}, a={a}: {reason}")]
    InvalidPoint { module: String, d: u32, a: f64, reason: &'static str },
    #[error("surface for `{module}` is missing grid point d={d}, a={a}")]
    IncompleteGrid { module: String, d: u32, a: f64 },
    #[error("surface for `{module}` has duplicate grid point d={d}, a={a}")]
    DuplicatePoint { module: String, d: u32, a: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LookupError {
    #[error("module `{module}`: dp degree {d} outside profiled range {min}..={max}")]
    DpOutOfRange { module: String, d: u32, min: u32, max: u32 },
    #[error("module `{module}`: quota {a} outside profiled range {min}..={max}")]
    QuotaOutOfRange { module: String, a: f64, min: f64, max: f64 },
    #[error("no scaling surface for module `{0}`")]
    UnknownModule(String),
}

/// A complete grid of [`SurfacePoint`]s for one module.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingSurface {
    module_id: String,
    d_values: Vec<u32>,
    a_values: Vec<f64>,
    /// Row-major: `points[di * a_values.len() + ai]`.
    points: Vec<SurfacePoint>,
}

/// A point where latency increases with quota at fixed dp degree.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityViolation {
    pub d: u32,
    pub a_low: f64,
    pub a_high: f64,
    pub latency_low: f64,
    pub latency_high: f64,
}

impl ScalingSurface {
    pub fn from_points(
        module_id: impl Into<String>,
        points: Vec<SurfacePoint>,
    ) -> Result<Self, SurfaceError> {
        let module_id = module_id.into();
        if points.is_empty() {
            return Err(SurfaceError::Empty(module_id));
        }
        for p in &points {
            let bad = |reason| SurfaceError::InvalidPoint { module: module_id.clone(), d: p.d, a: p.a, reason };
            if p.d == 0 {
                return Err(bad("dp degree must be positive"));
            }
            if !(p.a.is_finite() && p.a > 0.0 && p.a <= 1.0 + GRID_EPS) {
                return Err(bad("quota must lie in (0, 1]"));
            }
            if !(p.latency.is_finite() && p.latency > 0.0) {
                return Err(bad("latency must be positive"));
            }
            if !(p.bandwidth_util.is_finite() && (0.0..=1.0).contains(&p.bandwidth_util)) {
                return Err(bad("bandwidth utilization must lie in [0, 1]"));
            }
            if !(p.memory.is_finite() && p.memory > 0.0) {
                return Err(bad("memory must be positive"));
            }
        }
        let d_values: Vec<u32> = points.iter().map(|p| p.d).collect::<BTreeSet<_>>().into_iter().collect();
        let mut a_values: Vec<f64> = Vec::new();
        let mut sorted_a: Vec<f64> = points.iter().map(|p| p.a).collect();
        sorted_a.sort_by(|x, y| x.total_cmp(y));
        for a in sorted_a {
            if a_values.last().is_none_or(|&last| a - last > GRID_EPS) {
                a_values.push(a);
            }
        }
        let na = a_values.len();
        let mut slots: Vec<Option<SurfacePoint>> = vec![None; d_values.len() * na];
        for p in points {
            let di = d_values.binary_search(&p.d).unwrap();
            let ai = a_values.iter().position(|&a| (a - p.a).abs() <= GRID_EPS).unwrap();
            let slot = &mut slots[di * na + ai];
            if slot.is_some() {
                return Err(SurfaceError::DuplicatePoint { module: module_id, d: p.d, a: p.a });
            }
            *slot = Some(p);
        }
        let mut grid = Vec::with_capacity(slots.len());
        for (k, s) in slots.into_iter().enumerate() {
            match s {
                Some(p) => grid.push(p),
                None => {
                    return Err(SurfaceError::IncompleteGrid {
                        module: module_id,
                        d: d_values[k / na],
                        a: a_values[k % na],
                    })
                }
            }
        }
        let surface = ScalingSurface { module_id, d_values, a_values, points: grid };
        for v in surface.monotonicity_violations() {
            log::warn!(
                "surface `{}`: latency rises from {} to {} between a={} and a={} at d={}",
                surface.module_id, v.latency_low, v.latency_high, v.a_low, v.a_high, v.d
            );
        }
        Ok(surface)
    }

    pub fn module_id(&self) -> &str {
        &self.module_id
    }

    pub fn d_values(&self) -> &[u32] {
        &self.d_values
    }

    pub fn a_values(&self) -> &[f64] {
        &self.a_values
    }

    pub fn points(&self) -> &[SurfacePoint] {
        &self.points
    }

    fn point(&self, di: usize, ai: usize) -> &SurfacePoint {
        &self.points[di * self.a_values.len() + ai]
    }

    /// Places where latency is not non-increasing in `a` at fixed `d`.
    pub fn monotonicity_violations(&self) -> Vec<MonotonicityViolation> {
        let mut out = Vec::new();
        for di in 0..self.d_values.len() {
            for ai in 1..self.a_values.len() {
                let lo = self.point(di, ai - 1);
                let hi = self.point(di, ai);
                if hi.latency > lo.latency {
                    out.push(MonotonicityViolation {
                        d: lo.d,
                        a_low: lo.a,
                        a_high: hi.a,
                        latency_low: lo.latency,
                        latency_high: hi.latency,
                    });
                }
            }
        }
        out
    }

    pub fn contains(&self, d: u32, a: f64) -> bool {
        self.bracket_d(d).is_ok() && self.bracket_a(a).is_ok()
    }

    fn bracket_d(&self, d: u32) -> Result<(usize, usize, f64), LookupError> {
        let (min, max) = (self.d_values[0], *self.d_values.last().unwrap());
        if d < min || d > max {
            return Err(LookupError::DpOutOfRange { module: self.module_id.clone(), d, min, max });
        }
        match self.d_values.binary_search(&d) {
            Ok(i) => Ok((i, i, 0.0)),
            Err(hi) => {
                let lo = hi - 1;
                let x0 = (self.d_values[lo] as f64).log2();
                let x1 = (self.d_values[hi] as f64).log2();
                Ok((lo, hi, ((d as f64).log2() - x0) / (x1 - x0)))
            }
        }
    }

    fn bracket_a(&self, a: f64) -> Result<(usize, usize, f64), LookupError> {
        let (min, max) = (self.a_values[0], *self.a_values.last().unwrap());
        if !(a >= min - GRID_EPS && a <= max + GRID_EPS) {
            return Err(LookupError::QuotaOutOfRange { module: self.module_id.clone(), a, min, max });
        }
        if let Some(i) = self.a_values.iter().position(|&v| (v - a).abs() <= GRID_EPS) {
            return Ok((i, i, 0.0));
        }
        let hi = self.a_values.iter().position(|&v| v > a).unwrap();
        let lo = hi - 1;
        let (a0, a1) = (self.a_values[lo], self.a_values[hi]);
        Ok((lo, hi, (a - a0) / (a1 - a0)))
    }

    /// Surface values at `(d, a)`.
    pub fn lookup(&self, d: u32, a: f64) -> Result<BaseEstimate, LookupError> {
        let (d0, d1, td) = self.bracket_d(d)?;
        let (a0, a1, ta) = self.bracket_a(a)?;
        if d0 == d1 && a0 == a1 {
            let p = self.point(d0, a0);
            return Ok(BaseEstimate { latency: p.latency, bandwidth_util: p.bandwidth_util, memory: p.memory });
        }
        let blend = |f: fn(&SurfacePoint) -> f64| {
            let along_a = |di: usize| {
                let (lo, hi) = (f(self.point(di, a0)), f(self.point(di, a1)));
                if a0 == a1 { lo } else { lo + (hi - lo) * ta }
            };
            let (lo, hi) = (along_a(d0), along_a(d1));
            if d0 == d1 { lo } else { lo + (hi - lo) * td }
        };
        Ok(BaseEstimate {
            latency: blend(|p| p.latency),
            bandwidth_util: blend(|p| p.bandwidth_util),
            memory: blend(|p| p.memory),
        })
    }
}
