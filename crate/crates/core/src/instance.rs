//! Bundled problem instances: workloads, graph, cluster and performance model.

use crate::cluster::{ClusterError, ClusterSpec};
use crate::graph::{Dag, GraphError};
use crate::interference::InterferenceModel;
use crate::perf::PerfModel;
use crate::presets::default_ground_truth;
use crate::profiler::{generate_surfaces, MemoryModel, ModuleWorkload, ProfilerConfig, WorkloadError, WorkloadSet};
use crate::surface::SurfaceError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InstanceError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Surface(#[from] SurfaceError),
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub workloads: WorkloadSet,
    pub dag: Dag,
    pub cluster: ClusterSpec,
    pub perf: PerfModel,
}

impl Instance {
    /// Profiles `workloads` on `cluster` and attaches `interference`.
    pub fn from_workloads(
        workloads: WorkloadSet,
        cluster: ClusterSpec,
        interference: InterferenceModel,
        profiler: &ProfilerConfig,
    ) -> Result<Self, InstanceError> {
        workloads.validate()?;
        cluster.validate()?;
        let dag = Dag::new(&workloads.graph())?;
        let surfaces = generate_surfaces(&workloads, &cluster, profiler)?;
        Ok(Instance { workloads, dag, cluster, perf: PerfModel::new(surfaces, interference) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomInstanceConfig {
    pub modules: usize,
    pub gpus: usize,
    /// Chance of an edge between each ordered pair of modules.
    pub edge_probability: f64,
}

impl Default for RandomInstanceConfig {
    fn default() -> Self {
        RandomInstanceConfig { modules: 4, gpus: 4, edge_probability: 0.3 }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Random workloads on a random DAG, seeded.
pub fn random_workloads(config: &RandomInstanceConfig, seed: u64) -> WorkloadSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modules = (0..config.modules)
        .map(|i| {
            let tflops = log_uniform(&mut rng, 0.05, 5.0);
            let ci = log_uniform(&mut rng, 2.0, 150.0);
            let params = log_uniform(&mut rng, 0.01, 2.0) * 1e9;
            let knee = rng.random_range(0.2..0.9);
            let flops = tflops * 1e12 * 3.0 * 256.0;
            ModuleWorkload {
                id: format!("m{i}"),
                name: format!("m{i}"),
                flops_per_iter: flops,
                bytes_per_iter: flops / ci,
                gradient_bytes: 2.0 * params,
                sm_efficiency_knee: knee,
                memory_model: MemoryModel { base: (2e9 + 2e9 * tflops).min(20e9), per_quota: 1e9 },
                memory_base: 6.0 * params,
                target_ci: None,
            }
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..config.modules {
        for j in i + 1..config.modules {
            if rng.random_bool(config.edge_probability) {
                edges.push((format!("m{i}"), format!("m{j}")));
            }
        }
    }
    WorkloadSet { modules, edges }
}

/// A random instance under the default ground-truth contention model.
pub fn random_instance(config: &RandomInstanceConfig, seed: u64) -> Instance {
    Instance::from_workloads(
        random_workloads(config, seed),
        ClusterSpec::h100(config.gpus),
        default_ground_truth(),
        &ProfilerConfig::default(),
    )
    .expect("generated instances are valid")
}
