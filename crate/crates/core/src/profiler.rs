//! Analytic stand-in for GPU profiling.
//!
//! Each module is described by a roofline-style workload; surfaces and
//! colocation measurements are generated from it deterministically.

use crate::cluster::ClusterSpec;
use crate::graph::{ModelGraph, ModuleSpec};
use crate::interference::{ColocatedModule, ColocationSample, InterferenceModel};
use crate::surface::{ScalingSurface, SurfaceError, SurfacePoint};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// SM efficiency below the knee bottoms out at this fraction.
const EFFICIENCY_FLOOR: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    /// Activation bytes independent of quota.
    pub base: f64,
    /// Extra bytes per unit of SM quota (workspace grows with concurrency).
    pub per_quota: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleWorkload {
    pub id: String,
    #[serde(default)]
    pub name: String,
    /// FLOPs per training iteration.
    pub flops_per_iter: f64,
    /// DRAM bytes moved per training iteration.
    pub bytes_per_iter: f64,
    /// Gradient bytes all-reduced per iteration when data-parallel.
    pub gradient_bytes: f64,
    /// Quota above which the module runs at full SM efficiency.
    pub sm_efficiency_knee: f64,
    pub memory_model: MemoryModel,
    /// Weights and optimizer state, resident regardless of quota.
    #[serde(default)]
    pub memory_base: f64,
    /// Expected `flops_per_iter / bytes_per_iter`, when configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_ci: Option<f64>,
}

impl ModuleWorkload {
    pub fn compute_intensity(&self) -> f64 {
        self.flops_per_iter / self.bytes_per_iter
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |field: &'static str| WorkloadError::Invalid { module: self.id.clone(), field };
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.flops_per_iter) {
            return Err(bad("flops_per_iter"));
        }
        if !positive(self.bytes_per_iter) {
            return Err(bad("bytes_per_iter"));
        }
        if !positive(self.gradient_bytes) {
            return Err(bad("gradient_bytes"));
        }
        if !(self.sm_efficiency_knee > 0.0 && self.sm_efficiency_knee <= 1.0) {
            return Err(bad("sm_efficiency_knee"));
        }
        let m = &self.memory_model;
        if !(m.base.is_finite() && m.base >= 0.0 && m.per_quota.is_finite() && m.per_quota >= 0.0) {
            return Err(bad("memory_model"));
        }
        if !(self.memory_base.is_finite() && self.memory_base >= 0.0) {
            return Err(bad("memory_base"));
        }
        if let Some(ci) = self.target_ci {
            if !positive(ci) {
                return Err(bad("target_ci"));
            }
            if ((self.compute_intensity() - ci) / ci).abs() > 1e-9 {
                return Err(WorkloadError::IntensityMismatch {
                    module: self.id.clone(),
                    actual: self.compute_intensity(),
                    target: ci,
                });
            }
        }
        Ok(())
    }

    /// SM efficiency at quota `a`.
    pub fn efficiency(&self, a: f64) -> f64 {
        let r = a / self.sm_efficiency_knee;
        (r + (1.0 - r) * EFFICIENCY_FLOOR).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("workload `{module}`: field `{field}` is out of range")]
    Invalid { module: String, field: &'static str },
    #[error("workload `{module}`: compute intensity {actual} does not match target {target}")]
    IntensityMismatch { module: String, actual: f64, target: f64 },
}

/// Workloads plus the dependency edges between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSet {
    pub modules: Vec<ModuleWorkload>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
}

impl WorkloadSet {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        self.modules.iter().try_for_each(ModuleWorkload::validate)
    }

    pub fn graph(&self) -> ModelGraph {
        ModelGraph {
            modules: self
                .modules
                .iter()
                .map(|w| ModuleSpec {
                    id: w.id.clone(),
                    name: if w.name.is_empty() { w.id.clone() } else { w.name.clone() },
                    memory_base: w.memory_base,
                    tags: Vec::new(),
                })
                .collect(),
            edges: self.edges.clone(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&ModuleWorkload> {
        self.modules.iter().find(|w| w.id == id)
    }
}

/// Knobs of the analytic profiler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilerConfig {
    /// Scales bandwidth utilization, to stress contention fitting.
    pub demand_scale: f64,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        ProfilerConfig { demand_scale: 1.0 }
    }
}

/// Quota deciles `0.1, 0.2, ..., 1.0`.
pub fn decile_quotas() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 10.0).collect()
}

/// Evaluates the analytic model at one `(d, a)`.
pub fn profile_point(
    w: &ModuleWorkload,
    cluster: &ClusterSpec,
    d: u32,
    a: f64,
    config: &ProfilerConfig,
) -> SurfacePoint {
    let df = d as f64;
    let compute = (w.flops_per_iter / df) / (a * cluster.peak_compute * w.efficiency(a));
    let io = (w.bytes_per_iter / df) / cluster.peak_bandwidth;
    let sync = if d > 1 {
        cluster.interconnect_alpha * df.log2().ceil() + cluster.interconnect_beta * w.gradient_bytes
    } else {
        0.0
    };
    let busy = compute.max(io);
    SurfacePoint {
        d,
        a,
        latency: busy + sync,
        bandwidth_util: (io / busy * config.demand_scale).min(1.0),
        memory: w.memory_model.base + w.memory_model.per_quota * a + w.gradient_bytes / df,
    }
}

pub fn generate_surface(
    w: &ModuleWorkload,
    cluster: &ClusterSpec,
    d_set: &[u32],
    a_set: &[f64],
    config: &ProfilerConfig,
) -> Result<ScalingSurface, SurfaceError> {
    let mut points = Vec::with_capacity(d_set.len() * a_set.len());
    for &d in d_set {
        for &a in a_set {
            points.push(profile_point(w, cluster, d, a, config));
        }
    }
    ScalingSurface::from_points(w.id.clone(), points)
}

/// Surfaces for every workload on the cluster's default grid.
pub fn generate_surfaces(
    set: &WorkloadSet,
    cluster: &ClusterSpec,
    config: &ProfilerConfig,
) -> Result<Vec<ScalingSurface>, SurfaceError> {
    let d_set = cluster.default_dp_degrees();
    let a_set = decile_quotas();
    set.modules.iter().map(|w| generate_surface(w, cluster, &d_set, &a_set, config)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub count: usize,
    pub seed: u64,
    /// Standard deviation of the log-normal factor applied to the measured
    /// contention delay.
    pub noise_sigma: f64,
    /// Largest number of modules sharing the sampled GPU.
    pub max_colocated: usize,
    /// Smallest number of modules sharing the sampled GPU.
    #[serde(default = "one")]
    pub min_colocated: usize,
}

fn one() -> usize {
    1
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { count: 200, seed: 0, noise_sigma: 0.0, max_colocated: 4, min_colocated: 1 }
    }
}

/// Draws random colocations and "measures" them against `ground_truth`.
///
/// Every member shares the victim's dp degree and GPU set; quotas on the
/// shared GPUs sum to at most one.
pub fn generate_colocation_samples(
    set: &WorkloadSet,
    cluster: &ClusterSpec,
    ground_truth: &InterferenceModel,
    sample: &SampleConfig,
    profiler: &ProfilerConfig,
) -> Vec<ColocationSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample.seed);
    let noise = Normal::new(0.0, sample.noise_sigma.max(0.0)).expect("finite sigma");
    let d_set = cluster.default_dp_degrees();
    let deciles: Vec<u32> = (1..=10).collect();
    let max_k = sample.max_colocated.clamp(1, set.modules.len().min(10));
    let min_k = sample.min_colocated.clamp(1, max_k);
    let mut out = Vec::with_capacity(sample.count);
    while out.len() < sample.count {
        let k = rng.random_range(min_k..=max_k);
        let d = d_set[rng.random_range(0..d_set.len())];
        let members: Vec<&ModuleWorkload> = set.modules.choose_multiple(&mut rng, k).collect();
        // quotas in tenths summing to at most 10
        let mut tenths: Vec<u32> = (0..k).map(|_| *deciles.choose(&mut rng).unwrap()).collect();
        while tenths.iter().sum::<u32>() > 10 {
            let i = rng.random_range(0..k);
            if tenths[i] > 1 {
                tenths[i] -= 1;
            }
        }
        let points: Vec<SurfacePoint> = members
            .iter()
            .zip(&tenths)
            .map(|(w, &t)| profile_point(w, cluster, d, t as f64 / 10.0, profiler))
            .collect();
        let bs: Vec<f64> = points.iter().map(|p| p.bandwidth_util).collect();
        let base = points[0].latency;
        let factor = if sample.noise_sigma > 0.0 { noise.sample(&mut rng).exp() } else { 1.0 };
        out.push(ColocationSample {
            victim: members[0].id.clone(),
            dp_degree: d,
            members: members
                .iter()
                .zip(&points)
                .map(|(w, p)| ColocatedModule { module_id: w.id.clone(), a: p.a, bandwidth_util: p.bandwidth_util })
                .collect(),
            observed_s: base + ground_truth.delay(&bs) * factor,
            base_s: base,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn workload(id: &str, flops: f64, ci: f64) -> ModuleWorkload {
        ModuleWorkload {
            id: id.into(),
            name: id.into(),
            flops_per_iter: flops,
            bytes_per_iter: flops / ci,
            gradient_bytes: 1e9,
            sm_efficiency_knee: 0.5,
            memory_model: MemoryModel { base: 1e9, per_quota: 1e8 },
            memory_base: 2e9,
            target_ci: Some(ci),
        }
    }

    #[test]
    fn full_gpu_single_replica_is_definitional() {
        let cluster = ClusterSpec::h100(8);
        let w = ModuleWorkload {
            bytes_per_iter: 1.0,
            target_ci: None,
            ..workload("m", cluster.peak_compute, 1.0)
        };
        let p = profile_point(&w, &cluster, 1, 1.0, &ProfilerConfig::default());
        assert!((p.latency - 1.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_dp_halves_latency_without_io_or_sync() {
        let mut cluster = ClusterSpec::h100(8);
        cluster.interconnect_alpha = 1e-300;
        cluster.interconnect_beta = 1e-300;
        let w = ModuleWorkload { bytes_per_iter: 1.0, target_ci: None, ..workload("m", 1e15, 1.0) };
        let cfg = ProfilerConfig::default();
        for a in [0.3, 1.0] {
            let one = profile_point(&w, &cluster, 2, a, &cfg).latency;
            let two = profile_point(&w, &cluster, 4, a, &cfg).latency;
            assert!((one / two - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generated_surfaces_are_monotone_in_quota() {
        let cluster = ClusterSpec::h100(8);
        for ci in [2.1, 20.0, 82.4, 145.2] {
            let s = generate_surface(
                &workload("m", 1e15, ci),
                &cluster,
                &cluster.default_dp_degrees(),
                &decile_quotas(),
                &ProfilerConfig::default(),
            )
            .unwrap();
            assert!(s.monotonicity_violations().is_empty());
        }
    }

    #[test]
    fn lower_intensity_means_higher_utilization() {
        let cluster = ClusterSpec::h100(8);
        let cfg = ProfilerConfig::default();
        let low = workload("lo", 1e14, 8.0);
        let high = ModuleWorkload { sm_efficiency_knee: 0.9, ..workload("hi", 3e15, 80.0) };
        for d in cluster.default_dp_degrees() {
            for a in decile_quotas() {
                let bl = profile_point(&low, &cluster, d, a, &cfg).bandwidth_util;
                let bh = profile_point(&high, &cluster, d, a, &cfg).bandwidth_util;
                assert!(bl >= bh, "d={d} a={a}: {bl} < {bh}");
            }
        }
    }

    #[test]
    fn invalid_workloads() {
        let mut w = workload("m", 1e15, 10.0);
        assert!(w.validate().is_ok());
        w.flops_per_iter = -1.0;
        assert!(matches!(w.validate(), Err(WorkloadError::Invalid { field: "flops_per_iter", .. })));
        let mut w = workload("m", 1e15, 10.0);
        w.target_ci = Some(20.0);
        assert!(matches!(w.validate(), Err(WorkloadError::IntensityMismatch { .. })));
    }

    #[test]
    fn samples_are_seed_deterministic() {
        let set = WorkloadSet {
            modules: vec![workload("a", 1e15, 5.0), workload("b", 2e15, 40.0), workload("c", 5e14, 15.0)],
            edges: vec![],
        };
        let cluster = ClusterSpec::h100(8);
        let gt = InterferenceModel::new(0.01, 0.2, 0.5);
        let cfg = SampleConfig { count: 50, seed: 7, noise_sigma: 0.02, max_colocated: 3, min_colocated: 1 };
        let a = generate_colocation_samples(&set, &cluster, &gt, &cfg, &ProfilerConfig::default());
        let b = generate_colocation_samples(&set, &cluster, &gt, &cfg, &ProfilerConfig::default());
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        for s in &a {
            let total: f64 = s.members.iter().map(|m| m.a).sum();
            assert!(total <= 1.0 + 1e-9);
        }
    }
}
