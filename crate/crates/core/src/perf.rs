//! Interference-rectified module latency.
//!
//! A module's latency under an allocation is its surface latency at its own
//! `(d, a)` plus the worst per-GPU contention delay over the GPUs it runs on.

use crate::interference::InterferenceModel;
use crate::plan::{DeploymentOption, StageAllocation};
use crate::surface::{BaseEstimate, LookupError, ScalingSurface};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub fn lookup_base(surface: &ScalingSurface, opt: DeploymentOption) -> Result<BaseEstimate, LookupError> {
    surface.lookup(opt.dp_degree, opt.sm_quota.fraction())
}

/// Modules resident on each GPU of one stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Colocation {
    per_gpu: BTreeMap<usize, Vec<(String, DeploymentOption)>>,
}

impl Colocation {
    pub fn new() -> Self {
        Colocation::default()
    }

    pub fn place(&mut self, module: &str, opt: DeploymentOption, gpus: &[usize]) {
        for &g in gpus {
            self.per_gpu.entry(g).or_default().push((module.to_string(), opt));
        }
    }

    pub fn from_allocation(alloc: &StageAllocation) -> Self {
        let mut c = Colocation::new();
        for a in &alloc.assignments {
            c.place(&a.module, a.option, &a.gpus);
        }
        c
    }

    pub fn residents(&self, gpu: usize) -> &[(String, DeploymentOption)] {
        self.per_gpu.get(&gpu).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// How contention is accounted for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterferenceMode {
    /// All three coefficients.
    #[default]
    Full,
    /// Multiplicative coefficient forced to zero.
    AdditiveOnly,
    /// No contention delay.
    Unaware,
}

/// Surfaces plus a contention model.
#[derive(Debug, Clone)]
pub struct PerfModel {
    surfaces: BTreeMap<String, ScalingSurface>,
    interference: InterferenceModel,
    /// Whether a module's own utilization counts toward its delay.
    include_self: bool,
}

impl PerfModel {
    pub fn new(surfaces: impl IntoIterator<Item = ScalingSurface>, interference: InterferenceModel) -> Self {
        PerfModel {
            surfaces: surfaces.into_iter().map(|s| (s.module_id().to_string(), s)).collect(),
            interference,
            include_self: true,
        }
    }

    pub fn with_include_self(mut self, include_self: bool) -> Self {
        self.include_self = include_self;
        self
    }

    /// The same surfaces under a different contention model.
    pub fn with_interference(&self, interference: InterferenceModel) -> Self {
        PerfModel { interference, ..self.clone() }
    }

    pub fn with_mode(&self, mode: InterferenceMode) -> Self {
        match mode {
            InterferenceMode::Full => self.clone(),
            InterferenceMode::AdditiveOnly => self.with_interference(self.interference.without_product_term()),
            InterferenceMode::Unaware => self.with_interference(InterferenceModel::unaware()),
        }
    }

    pub fn interference(&self) -> &InterferenceModel {
        &self.interference
    }

    pub fn include_self(&self) -> bool {
        self.include_self
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &ScalingSurface> {
        self.surfaces.values()
    }

    pub fn surface(&self, module: &str) -> Result<&ScalingSurface, LookupError> {
        self.surfaces.get(module).ok_or_else(|| LookupError::UnknownModule(module.to_string()))
    }

    pub fn base(&self, module: &str, opt: DeploymentOption) -> Result<BaseEstimate, LookupError> {
        lookup_base(self.surface(module)?, opt)
    }

    /// Contention delay of `module` on one GPU with the given residents.
    pub fn gpu_delay(&self, module: &str, residents: &[(String, DeploymentOption)]) -> Result<f64, LookupError> {
        let mut bs = Vec::with_capacity(residents.len());
        let mut skipped = false;
        for (m, opt) in residents {
            if !self.include_self && !skipped && m == module {
                skipped = true;
                continue;
            }
            bs.push(self.base(m, *opt)?.bandwidth_util);
        }
        Ok(self.interference.delay(&bs))
    }

    /// Surface latency plus the largest per-GPU delay across `placement`.
    pub fn rectified_latency(
        &self,
        module: &str,
        opt: DeploymentOption,
        placement: &[usize],
        colocation: &Colocation,
    ) -> Result<f64, LookupError> {
        let base = self.base(module, opt)?.latency;
        let mut worst = f64::NEG_INFINITY;
        for &g in placement {
            worst = worst.max(self.gpu_delay(module, colocation.residents(g))?);
        }
        if placement.is_empty() {
            worst = 0.0;
        }
        Ok(base + worst)
    }

    /// [`Self::rectified_latency`] with the multiplicative term dropped.
    pub fn additive_only_latency(
        &self,
        module: &str,
        opt: DeploymentOption,
        placement: &[usize],
        colocation: &Colocation,
    ) -> Result<f64, LookupError> {
        self.with_mode(InterferenceMode::AdditiveOnly)
            .rectified_latency(module, opt, placement, colocation)
    }

    /// Rectified latency of every assignment, in assignment order.
    pub fn allocation_latencies(&self, alloc: &StageAllocation) -> Result<Vec<f64>, LookupError> {
        let coloc = Colocation::from_allocation(alloc);
        alloc
            .assignments
            .iter()
            .map(|a| self.rectified_latency(&a.module, a.option, &a.gpus, &coloc))
            .collect()
    }

    /// Max rectified latency over the stage's modules.
    pub fn stage_time(&self, alloc: &StageAllocation) -> Result<f64, LookupError> {
        Ok(self.allocation_latencies(alloc)?.into_iter().fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quota::Quota;
    use crate::surface::SurfacePoint;

    fn flat_surface(id: &str, latency: f64, b: f64) -> ScalingSurface {
        let mut pts = Vec::new();
        for d in [1u32, 2] {
            for k in 1..=10 {
                pts.push(SurfacePoint { d, a: k as f64 / 10.0, latency, bandwidth_util: b, memory: 1e9 });
            }
        }
        ScalingSurface::from_points(id, pts).unwrap()
    }

    fn opt(d: u32, a: f64) -> DeploymentOption {
        DeploymentOption::new(d, Quota::from_fraction(a).unwrap())
    }

    #[test]
    fn alone_with_zero_utilization_pays_only_e1() {
        let pm = PerfModel::new([flat_surface("m", 2.0, 0.0)], InterferenceModel::new(0.004, 0.1, 1.0));
        let mut c = Colocation::new();
        c.place("m", opt(2, 1.0), &[0, 1]);
        assert_eq!(pm.rectified_latency("m", opt(2, 1.0), &[0, 1], &c).unwrap(), 2.004);
    }

    #[test]
    fn two_residents_hand_evaluated() {
        let pm = PerfModel::new(
            [flat_surface("x", 1.0, 0.5), flat_surface("y", 1.0, 0.4)],
            InterferenceModel::new(0.0, 0.1, 1.0),
        );
        let mut c = Colocation::new();
        c.place("x", opt(1, 0.5), &[0]);
        c.place("y", opt(1, 0.5), &[0]);
        let t = pm.rectified_latency("x", opt(1, 0.5), &[0], &c).unwrap();
        assert!((t - 1.29).abs() < 1e-12);
        let add = pm.additive_only_latency("x", opt(1, 0.5), &[0], &c).unwrap();
        assert!((add - 1.09).abs() < 1e-12);
    }

    #[test]
    fn worst_gpu_governs() {
        // x spans GPUs 0 and 1; only GPU 1 is shared.
        let pm = PerfModel::new(
            [flat_surface("x", 1.0, 0.5), flat_surface("y", 1.0, 1.0)],
            InterferenceModel::new(0.0, 0.2, 0.0),
        );
        let mut c = Colocation::new();
        c.place("x", opt(2, 0.5), &[0, 1]);
        c.place("y", opt(1, 0.5), &[1]);
        let d0 = pm.gpu_delay("x", c.residents(0)).unwrap();
        let d1 = pm.gpu_delay("x", c.residents(1)).unwrap();
        assert!((d0 - 0.1).abs() < 1e-12 && (d1 - 0.3).abs() < 1e-12);
        let t = pm.rectified_latency("x", opt(2, 0.5), &[0, 1], &c).unwrap();
        assert!((t - 1.3).abs() < 1e-12);
    }

    #[test]
    fn excluding_self_removes_own_utilization() {
        let pm = PerfModel::new([flat_surface("x", 1.0, 0.5)], InterferenceModel::new(0.01, 0.2, 0.3))
            .with_include_self(false);
        let mut c = Colocation::new();
        c.place("x", opt(1, 1.0), &[0]);
        assert!((pm.rectified_latency("x", opt(1, 1.0), &[0], &c).unwrap() - 1.01).abs() < 1e-12);
    }
}
