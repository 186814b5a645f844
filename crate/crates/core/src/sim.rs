//! Replay of a plan over training iterations.
//!
//! Stages run back to back; within a stage every module runs concurrently on
//! its GPUs and the stage lasts as long as its slowest module. Each stage
//! start pays a stream-setup overhead that depends on the stream mode.

use crate::cluster::ClusterSpec;
use crate::graph::Dag;
use crate::perf::PerfModel;
use crate::plan::{validate_plan, DeploymentOption, DeploymentPlan, ModuleAssignment, PlanError, StageAllocation};
use crate::quota::{Granularity, Quota};
use crate::surface::LookupError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// Streams come from a pre-created pool; one small cost per stage.
    #[default]
    Pooled,
    /// Streams are created when a stage starts.
    OnDemand,
}

impl FromStr for StreamMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pooled" => Ok(StreamMode::Pooled),
            "on_demand" | "on-demand" => Ok(StreamMode::OnDemand),
            _ => Err(format!("unknown stream mode `{s}` (expected pooled or on_demand)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub iterations: usize,
    pub stream_mode: StreamMode,
    /// Seconds per stage transition in pooled mode.
    pub pooled_overhead: f64,
    /// Seconds per stream created in on-demand mode.
    pub on_demand_overhead: f64,
    /// Sigma of the log-normal factor applied to each module duration.
    pub perturbation_sigma: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            iterations: 1,
            stream_mode: StreamMode::Pooled,
            pooled_overhead: 0.013e-3,
            on_demand_overhead: 37e-3,
            perturbation_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.iterations == 0 {
            return Err(SimError::Config("iterations must be at least 1".into()));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.pooled_overhead) || !ok(self.on_demand_overhead) || !ok(self.perturbation_sigma) {
            return Err(SimError::Config("overheads and sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub iteration: usize,
    pub stage: usize,
    pub gpu: usize,
    pub module: String,
    pub start: f64,
    pub end: f64,
    pub quota: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    /// Mean over iterations.
    pub iteration_time: f64,
    pub iteration_times: Vec<f64>,
    /// Mean stage durations, overhead excluded.
    pub per_stage_times: Vec<f64>,
    /// Transition overhead paid per iteration.
    pub overhead_per_iteration: f64,
    pub per_gpu_busy_fraction: Vec<f64>,
    pub mean_busy_fraction: f64,
    pub timeline: Vec<TimelineEntry>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid plan: {0}")]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Lookup(#[from] LookupError),
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("baseline infeasible: {0}")]
    InfeasibleBaseline(String),
}

/// Streams created at the start of `stage` in on-demand mode: the busiest
/// GPU's count of distinct `(module, quota)` streams, since GPUs set up
/// their streams in parallel.
pub fn stage_streams(stage: &StageAllocation) -> usize {
    let mut per_gpu: std::collections::BTreeMap<usize, BTreeSet<(&str, u32)>> = Default::default();
    for a in &stage.assignments {
        for &g in &a.gpus {
            per_gpu.entry(g).or_default().insert((a.module.as_str(), a.option.sm_quota.units()));
        }
    }
    per_gpu.values().map(BTreeSet::len).max().unwrap_or(0)
}

pub fn stage_overhead(stage: &StageAllocation, config: &SimConfig) -> f64 {
    match config.stream_mode {
        StreamMode::Pooled => config.pooled_overhead,
        StreamMode::OnDemand => config.on_demand_overhead * stage_streams(stage) as f64,
    }
}

/// Replays `plan` for `config.iterations` iterations.
pub fn simulate(
    plan: &DeploymentPlan,
    dag: &Dag,
    cluster: &ClusterSpec,
    perf: &PerfModel,
    config: &SimConfig,
) -> Result<SimulationReport, SimError> {
    config.validate()?;
    validate_plan(plan, dag, cluster)?;
    let latencies: Vec<Vec<f64>> =
        plan.stages.iter().map(|s| perf.allocation_latencies(s)).collect::<Result<_, _>>()?;
    let overheads: Vec<f64> = plan.stages.iter().map(|s| stage_overhead(s, config)).collect();
    let overhead_per_iteration: f64 = overheads.iter().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut t = 0.0;
    let mut busy = vec![0.0; cluster.gpu_count];
    let mut stage_sums = vec![0.0; plan.stages.len()];
    let mut iteration_times = Vec::with_capacity(config.iterations);
    let mut timeline = Vec::new();
    for it in 0..config.iterations {
        let it_start = t;
        for (k, stage) in plan.stages.iter().enumerate() {
            let start = t + overheads[k];
            let mut longest = 0.0f64;
            for (a, &lat) in stage.assignments.iter().zip(&latencies[k]) {
                let dur = if config.perturbation_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    lat * (config.perturbation_sigma * z).exp()
                } else {
                    lat
                };
                longest = longest.max(dur);
                let q = a.option.sm_quota.fraction();
                for &g in &a.gpus {
                    busy[g] += q * dur;
                    timeline.push(TimelineEntry {
                        iteration: it,
                        stage: k,
                        gpu: g,
                        module: a.module.clone(),
                        start,
                        end: start + dur,
                        quota: q,
                    });
                }
            }
            stage_sums[k] += longest;
            t = start + longest;
        }
        iteration_times.push(t - it_start);
    }
    let n = config.iterations as f64;
    let per_gpu_busy_fraction: Vec<f64> =
        busy.iter().map(|b| if t > 0.0 { (b / t).min(1.0) } else { 0.0 }).collect();
    let mean_busy_fraction = per_gpu_busy_fraction.iter().sum::<f64>() / cluster.gpu_count as f64;
    timeline.sort_by(|x, y| {
        (x.iteration, x.gpu, x.stage)
            .cmp(&(y.iteration, y.gpu, y.stage))
            .then(x.start.total_cmp(&y.start))
            .then(x.module.cmp(&y.module))
    });
    Ok(SimulationReport {
        iteration_time: iteration_times.iter().sum::<f64>() / n,
        iteration_times,
        per_stage_times: stage_sums.iter().map(|s| s / n).collect(),
        overhead_per_iteration,
        per_gpu_busy_fraction,
        mean_busy_fraction,
        timeline,
    })
}

/// Exclusive-allocation baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselinePolicy {
    /// Every module alone on the whole cluster.
    Megatron,
    /// Independent modules side by side on disjoint GPU sets; a dependency
    /// level may be run as several such waves.
    DistMm,
}

impl FromStr for BaselinePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "megatron" => Ok(BaselinePolicy::Megatron),
            "distmm" => Ok(BaselinePolicy::DistMm),
            _ => Err(format!("unknown baseline `{s}` (expected megatron or distmm)")),
        }
    }
}

impl fmt::Display for BaselinePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselinePolicy::Megatron => "megatron",
            BaselinePolicy::DistMm => "distmm",
        })
    }
}

/// Largest wave split exhaustively over GPU counts.
pub const EXHAUSTIVE_WAVE_LIMIT: usize = 8;

fn exclusive(dag: &Dag, perf: &PerfModel, cluster: &ClusterSpec, m: usize, d: u32, first_gpu: usize) -> Result<ModuleAssignment, SimError> {
    let id = dag.id(m);
    let option = DeploymentOption::new(d, Quota::FULL);
    let memory = perf.base(id, option)?.memory + dag.module(m).memory_base;
    if memory > cluster.memory_capacity {
        return Err(SimError::InfeasibleBaseline(format!(
            "module `{id}` needs {memory} bytes per GPU at d={d}, capacity is {}",
            cluster.memory_capacity
        )));
    }
    Ok(ModuleAssignment { module: id.to_string(), option, gpus: (first_gpu..first_gpu + d as usize).collect(), memory_bytes: memory })
}

fn solo_latency(dag: &Dag, perf: &PerfModel, cluster: &ClusterSpec, m: usize, d: u32) -> f64 {
    match exclusive(dag, perf, cluster, m, d, 0) {
        Ok(a) => {
            let alloc = StageAllocation { assignments: vec![a] };
            perf.stage_time(&alloc).unwrap_or(f64::INFINITY)
        }
        Err(_) => f64::INFINITY,
    }
}

/// GPU counts for one wave minimizing its slowest module, with that time.
fn split_wave(dag: &Dag, perf: &PerfModel, cluster: &ClusterSpec, wave: &[usize]) -> (Vec<u32>, f64) {
    let g = cluster.gpu_count as u32;
    let k = wave.len();
    let table: Vec<Vec<f64>> = wave
        .iter()
        .map(|&m| (0..=g).map(|d| if d == 0 { f64::INFINITY } else { solo_latency(dag, perf, cluster, m, d) }).collect())
        .collect();
    let time = |ds: &[u32]| ds.iter().enumerate().map(|(j, &d)| table[j][d as usize]).fold(0.0, f64::max);
    if k <= EXHAUSTIVE_WAVE_LIMIT {
        let mut best = (f64::INFINITY, vec![1u32; k]);
        let mut cur = vec![0u32; k];
        fn rec(i: usize, left: u32, cur: &mut Vec<u32>, time: &dyn Fn(&[u32]) -> f64, best: &mut (f64, Vec<u32>)) {
            if i == cur.len() {
                let t = time(cur);
                if t < best.0 {
                    *best = (t, cur.clone());
                }
                return;
            }
            let reserve = (cur.len() - i - 1) as u32;
            for d in 1..=left.saturating_sub(reserve) {
                cur[i] = d;
                rec(i + 1, left - d, cur, time, best);
            }
        }
        rec(0, g, &mut cur, &time, &mut best);
        (best.1, best.0)
    } else {
        let mut ds = vec![1u32; k];
        let mut left = g - k as u32;
        while left > 0 {
            let (i, _) = ds
                .iter()
                .enumerate()
                .map(|(j, &d)| (j, table[j][d as usize]))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .unwrap();
            if table[i][ds[i] as usize + 1] >= table[i][ds[i] as usize] {
                break;
            }
            ds[i] += 1;
            left -= 1;
        }
        let t = time(&ds);
        (ds, t)
    }
}

/// Splits one dependency level into the fewest waves of at most
/// `gpu_count` modules, dealing modules longest-first to the least loaded
/// wave.
fn level_waves(dag: &Dag, perf: &PerfModel, cluster: &ClusterSpec, level: &[usize]) -> Vec<Vec<usize>> {
    let g = cluster.gpu_count;
    let n = level.len();
    let mut by_size: Vec<(usize, f64)> =
        level.iter().map(|&m| (m, solo_latency(dag, perf, cluster, m, g as u32))).collect();
    by_size.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    for waves in n.div_ceil(g)..=n.div_ceil(g) {
        let mut groups: Vec<(f64, Vec<usize>)> = vec![(0.0, Vec::new()); waves];
        for &(m, t) in &by_size {
            let slot = (0..waves)
                .filter(|&w| groups[w].1.len() < g)
                .min_by(|&a, &b| groups[a].0.total_cmp(&groups[b].0).then(a.cmp(&b)))
                .expect("capacity suffices");
            groups[slot].0 += t;
            groups[slot].1.push(m);
        }
        let mut groups: Vec<Vec<usize>> = groups.into_iter().map(|(_, mut ms)| {
            ms.sort_unstable();
            ms
        }).collect();
        groups.sort();
        let total: f64 = groups.iter().map(|w| split_wave(dag, perf, cluster, w).1).sum();
        if best.as_ref().is_none_or(|b| total < b.0) {
            best = Some((total, groups));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

/// Builds the baseline plan for `policy`.
pub fn baseline_plan(
    dag: &Dag,
    cluster: &ClusterSpec,
    perf: &PerfModel,
    policy: BaselinePolicy,
    granularity: Granularity,
) -> Result<DeploymentPlan, SimError> {
    let g = cluster.gpu_count;
    let mut stages = Vec::new();
    match policy {
        BaselinePolicy::Megatron => {
            for s in crate::graph::topological_singleton_stages(dag) {
                let m = s.iter().next().unwrap();
                stages.push(StageAllocation { assignments: vec![exclusive(dag, perf, cluster, m, g as u32, 0)?] });
            }
        }
        BaselinePolicy::DistMm => {
            let levels = dag.levels();
            let depth = levels.iter().copied().max().unwrap_or(0);
            for l in 0..=depth {
                let members: Vec<usize> = (0..dag.len()).filter(|&m| levels[m] == l).collect();
                for wave in level_waves(dag, perf, cluster, &members) {
                    let (ds, _) = split_wave(dag, perf, cluster, &wave);
                    let mut next = 0;
                    let mut assignments = Vec::new();
                    for (&m, &d) in wave.iter().zip(&ds) {
                        assignments.push(exclusive(dag, perf, cluster, m, d, next)?);
                        next += d as usize;
                    }
                    stages.push(StageAllocation { assignments });
                }
            }
        }
    }
    let times = stages.iter().map(|s| perf.stage_time(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(DeploymentPlan::new(granularity, stages, times))
}

/// Builds and simulates a baseline plan.
pub fn simulate_baseline(
    dag: &Dag,
    cluster: &ClusterSpec,
    perf: &PerfModel,
    policy: BaselinePolicy,
    granularity: Granularity,
    config: &SimConfig,
) -> Result<(DeploymentPlan, SimulationReport), SimError> {
    let plan = baseline_plan(dag, cluster, perf, policy, granularity)?;
    let report = simulate(&plan, dag, cluster, perf, config)?;
    Ok((plan, report))
}
