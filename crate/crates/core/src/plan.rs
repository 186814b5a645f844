//! Deployment options, stage allocations, and whole-iteration plans.

use crate::cluster::ClusterSpec;
use crate::graph::{Dag, ModuleSet};
use crate::quota::{Granularity, Quota, QUOTA_SCALE};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

/// How one module is deployed: replica count and per-replica SM quota.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeploymentOption {
    #[serde(rename = "d")]
    pub dp_degree: u32,
    #[serde(rename = "a")]
    pub sm_quota: Quota,
}

impl DeploymentOption {
    pub fn new(dp_degree: u32, sm_quota: Quota) -> Self {
        DeploymentOption { dp_degree, sm_quota }
    }

    /// Quota units summed over all replicas.
    pub fn total_units(&self) -> u64 {
        self.dp_degree as u64 * self.sm_quota.units() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleAssignment {
    pub module: String,
    pub option: DeploymentOption,
    /// GPU indices, ascending; one replica per GPU.
    pub gpus: Vec<usize>,
    /// Per-GPU footprint in bytes, including the module's quota-independent base.
    pub memory_bytes: f64,
}

/// Allocation of one stage's modules onto the cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAllocation {
    pub assignments: Vec<ModuleAssignment>,
}

impl StageAllocation {
    pub fn modules(&self) -> impl Iterator<Item = &str> {
        self.assignments.iter().map(|a| a.module.as_str())
    }

    /// `(quota units, memory bytes)` summed per GPU.
    pub fn gpu_usage(&self, gpu_count: usize) -> Vec<(u32, f64)> {
        let mut usage = vec![(0u32, 0.0f64); gpu_count];
        for a in &self.assignments {
            for &g in &a.gpus {
                if let Some(u) = usage.get_mut(g) {
                    u.0 += a.option.sm_quota.units();
                    u.1 += a.memory_bytes;
                }
            }
        }
        usage
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub granularity: Granularity,
    pub stages: Vec<StageAllocation>,
    pub predicted_stage_times: Vec<f64>,
    pub predicted_iteration_time: f64,
}

impl DeploymentPlan {
    pub fn new(granularity: Granularity, stages: Vec<StageAllocation>, times: Vec<f64>) -> Self {
        let total = times.iter().sum();
        DeploymentPlan {
            granularity,
            stages,
            predicted_stage_times: times,
            predicted_iteration_time: total,
        }
    }

    /// Stage module sets resolved against `dag`; unknown ids are skipped.
    pub fn stage_sets(&self, dag: &Dag) -> Vec<ModuleSet> {
        self.stages
            .iter()
            .map(|s| ModuleSet::from_indices(s.modules().filter_map(|m| dag.index_of(m))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("plan has no stages")]
    EmptyPlan,
    #[error("stage {0} is empty")]
    EmptyStage(usize),
    #[error("plan references unknown module `{0}`")]
    UnknownModule(String),
    #[error("module `{0}` is not covered by any stage")]
    ModuleMissing(String),
    #[error("module `{0}` appears more than once")]
    ModuleDuplicated(String),
    #[error("edge {up} -> {down} is not satisfied by the stage order")]
    DependencyViolated { up: String, down: String },
    #[error("module `{module}` has an invalid placement: {reason}")]
    InvalidPlacement { module: String, reason: String },
    #[error("quota of module `{0}` is not on the plan's granularity lattice")]
    OffLattice(String),
    #[error("GPU {gpu} is over-committed: SM quotas sum to {sum}")]
    SmOvercommit { gpu: usize, sum: f64 },
    #[error("GPU {gpu} is over-committed: {used} bytes > {capacity}")]
    MemoryOvercommit { gpu: usize, used: f64, capacity: f64 },
    #[error("predicted times are inconsistent: {0}")]
    TimeMismatch(String),
}

pub fn validate_stage(
    stage: &StageAllocation,
    dag: &Dag,
    cluster: &ClusterSpec,
    granularity: Option<Granularity>,
) -> Result<(), PlanError> {
    for a in &stage.assignments {
        if dag.index_of(&a.module).is_none() {
            return Err(PlanError::UnknownModule(a.module.clone()));
        }
        if let Some(g) = granularity {
            if !g.contains(a.option.sm_quota) {
                return Err(PlanError::OffLattice(a.module.clone()));
            }
        }
        let bad = |reason: String| PlanError::InvalidPlacement { module: a.module.clone(), reason };
        let d = a.option.dp_degree as usize;
        if d == 0 || d > cluster.gpu_count {
            return Err(bad(format!("dp degree {d} outside 1..={}", cluster.gpu_count)));
        }
        if a.gpus.len() != d {
            return Err(bad(format!("{} GPUs listed for dp degree {d}", a.gpus.len())));
        }
        let distinct: BTreeSet<_> = a.gpus.iter().collect();
        if distinct.len() != a.gpus.len() {
            return Err(bad("a GPU hosts two replicas".into()));
        }
        if let Some(&g) = a.gpus.iter().find(|&&g| g >= cluster.gpu_count) {
            return Err(bad(format!("GPU {g} does not exist")));
        }
        if !(a.memory_bytes.is_finite() && a.memory_bytes >= 0.0) {
            return Err(bad("memory footprint is not a finite non-negative number".into()));
        }
    }
    for (gpu, (units, mem)) in stage.gpu_usage(cluster.gpu_count).into_iter().enumerate() {
        if units > QUOTA_SCALE {
            return Err(PlanError::SmOvercommit { gpu, sum: units as f64 / QUOTA_SCALE as f64 });
        }
        if mem > cluster.memory_capacity {
            return Err(PlanError::MemoryOvercommit {
                gpu,
                used: mem,
                capacity: cluster.memory_capacity,
            });
        }
    }
    Ok(())
}

/// Checks coverage, dependency order, and per-GPU SM and memory capacity of
/// every stage. Stages multiplex in time, so capacity is checked per stage.
pub fn validate_plan(plan: &DeploymentPlan, dag: &Dag, cluster: &ClusterSpec) -> Result<(), PlanError> {
    if plan.stages.is_empty() {
        return Err(PlanError::EmptyPlan);
    }
    let mut seen = ModuleSet::EMPTY;
    for (k, stage) in plan.stages.iter().enumerate() {
        if stage.assignments.is_empty() {
            return Err(PlanError::EmptyStage(k));
        }
        for m in stage.modules() {
            let i = dag.index_of(m).ok_or_else(|| PlanError::UnknownModule(m.to_string()))?;
            if seen.contains(i) {
                return Err(PlanError::ModuleDuplicated(m.to_string()));
            }
            seen = seen.union(ModuleSet::singleton(i));
        }
    }
    if let Some(i) = dag.all().iter().find(|&i| !seen.contains(i)) {
        return Err(PlanError::ModuleMissing(dag.id(i).to_string()));
    }
    let sets = plan.stage_sets(dag);
    let mut position = vec![0usize; dag.len()];
    for (k, s) in sets.iter().enumerate() {
        for i in s.iter() {
            position[i] = k;
        }
    }
    for &(u, v) in dag.edges() {
        if position[u] >= position[v] {
            return Err(PlanError::DependencyViolated {
                up: dag.id(u).to_string(),
                down: dag.id(v).to_string(),
            });
        }
    }
    for stage in &plan.stages {
        validate_stage(stage, dag, cluster, Some(plan.granularity))?;
    }
    if plan.predicted_stage_times.len() != plan.stages.len() {
        return Err(PlanError::TimeMismatch(format!(
            "{} stage times for {} stages",
            plan.predicted_stage_times.len(),
            plan.stages.len()
        )));
    }
    let total: f64 = plan.predicted_stage_times.iter().sum();
    if (total - plan.predicted_iteration_time).abs() > 1e-9 * total.abs().max(1.0) {
        return Err(PlanError::TimeMismatch(format!(
            "iteration time {} != sum of stage times {total}",
            plan.predicted_iteration_time
        )));
    }
    Ok(())
}

/// Sum of stage times.
pub fn iteration_time(plan: &DeploymentPlan) -> Result<f64, PlanError> {
    if plan.stages.is_empty() || plan.predicted_stage_times.is_empty() {
        return Err(PlanError::EmptyPlan);
    }
    Ok(plan.predicted_stage_times.iter().sum())
}
