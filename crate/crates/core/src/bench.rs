//! Seeded benchmark suites: optimality against the oracle, cluster-size
//! scaling, quota granularity and contention-model ablation.

use crate::cluster::ClusterSpec;
use crate::instance::{random_instance, Instance, InstanceError, RandomInstanceConfig};
use crate::interference::{fit_interference, ColocationSample, FitError, FitForm, InterferenceModel};
use crate::oracle::{brute_force_optimum, OracleError};
use crate::perf::PerfModel;
use crate::plan::DeploymentPlan;
use crate::presets::{default_ground_truth, Preset, PresetError};
use crate::profiler::{generate_colocation_samples, ProfilerConfig, SampleConfig};
use crate::quota::{Granularity, QuotaError};
use crate::sim::{simulate, simulate_baseline, BaselinePolicy, SimConfig, SimError};
use crate::solver::{solve, SolveError, SolverConfig};
use crate::surface::LookupError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown bench suite `{0}` (expected optimality, scale, granularity or ablation)")]
    UnknownSuite(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Preset(#[from] PresetError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Lookup(#[from] LookupError),
    #[error(transparent)]
    Quota(#[from] QuotaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Optimality,
    Scale,
    Granularity,
    Ablation,
}

impl FromStr for Suite {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "optimality" => Ok(Suite::Optimality),
            "scale" => Ok(Suite::Scale),
            "granularity" => Ok(Suite::Granularity),
            "ablation" => Ok(Suite::Ablation),
            other => Err(BenchError::UnknownSuite(other.to_string())),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Optimality => "optimality",
            Suite::Scale => "scale",
            Suite::Granularity => "granularity",
            Suite::Ablation => "ablation",
        })
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityConfig {
    /// Instance seeds run are `base_seed .. base_seed + seeds`.
    pub seeds: u64,
    pub base_seed: u64,
    /// Module counts, cycled over seeds.
    pub modules: Vec<usize>,
    pub gpus: usize,
    pub granularity: Granularity,
    pub edge_probability: f64,
}

impl Default for OptimalityConfig {
    fn default() -> Self {
        OptimalityConfig {
            seeds: 100,
            base_seed: 0,
            modules: vec![1, 2, 3, 4],
            gpus: 4,
            granularity: Granularity::new(0.25).unwrap(),
            edge_probability: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityRow {
    pub seed: u64,
    pub oracle_time: f64,
    pub gahc_time: f64,
    /// Oracle time over GAHC time; 1.0 is optimal.
    pub ratio: f64,
    pub modules: usize,
    pub gahc_solve_s: f64,
    pub oracle_solve_s: f64,
}

pub fn optimality(config: &OptimalityConfig) -> Result<Vec<OptimalityRow>, BenchError> {
    (0..config.seeds)
        .into_par_iter()
        .map(|i| {
            let seed = config.base_seed + i;
            let modules = config.modules[(i as usize) % config.modules.len()];
            let inst = random_instance(
                &RandomInstanceConfig { modules, gpus: config.gpus, edge_probability: config.edge_probability },
                seed,
            );
            let solver = SolverConfig { granularity: config.granularity, ..Default::default() };
            let t = Instant::now();
            let (plan, _) = solve(&inst.dag, &inst.cluster, &inst.perf, &solver)?;
            let gahc_solve = t.elapsed();
            let t = Instant::now();
            let oracle = brute_force_optimum(&inst.dag, &inst.cluster, &inst.perf, config.granularity)?;
            let oracle_solve = t.elapsed();
            let (o, g) = (oracle.plan.predicted_iteration_time, plan.predicted_iteration_time);
            Ok(OptimalityRow {
                seed,
                oracle_time: o,
                gahc_time: g,
                ratio: o / g,
                modules,
                gahc_solve_s: secs(gahc_solve),
                oracle_solve_s: secs(oracle_solve),
            })
        })
        .collect()
}

/// Median of `values`; the upper median for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleConfig {
    pub preset: Preset,
    pub gpus: Vec<usize>,
    pub granularity: Granularity,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig { preset: Preset::OfaSys, gpus: vec![4, 8, 16], granularity: Granularity::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub preset: String,
    pub gpus: usize,
    pub policy: String,
    pub iteration_time: f64,
    pub mean_busy_fraction: f64,
    pub stages: usize,
    pub solve_s: f64,
}

pub fn preset_instance(preset: Preset, encoders: Option<usize>, gpus: usize) -> Result<Instance, BenchError> {
    Ok(Instance::from_workloads(
        preset.with_encoders(encoders)?,
        ClusterSpec::h100(gpus),
        default_ground_truth(),
        &ProfilerConfig::default(),
    )?)
}

pub fn scale(config: &ScaleConfig) -> Result<Vec<ScaleRow>, BenchError> {
    let mut rows = Vec::new();
    let sim = SimConfig::default();
    for &gpus in &config.gpus {
        let inst = preset_instance(config.preset, None, gpus)?;
        let t = Instant::now();
        let (plan, _) =
            solve(&inst.dag, &inst.cluster, &inst.perf, &SolverConfig { granularity: config.granularity, ..Default::default() })?;
        let solve_s = secs(t.elapsed());
        let report = simulate(&plan, &inst.dag, &inst.cluster, &inst.perf, &sim)?;
        rows.push(ScaleRow {
            preset: config.preset.to_string(),
            gpus,
            policy: "mosaic".into(),
            iteration_time: report.iteration_time,
            mean_busy_fraction: report.mean_busy_fraction,
            stages: plan.stages.len(),
            solve_s,
        });
        for policy in [BaselinePolicy::DistMm, BaselinePolicy::Megatron] {
            let t = Instant::now();
            let (plan, report) = simulate_baseline(&inst.dag, &inst.cluster, &inst.perf, policy, config.granularity, &sim)?;
            rows.push(ScaleRow {
                preset: config.preset.to_string(),
                gpus,
                policy: policy.to_string(),
                iteration_time: report.iteration_time,
                mean_busy_fraction: report.mean_busy_fraction,
                stages: plan.stages.len(),
                solve_s: secs(t.elapsed()),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GranularityConfig {
    pub preset: Preset,
    pub encoders: Option<usize>,
    pub gpus: usize,
    pub levels: Vec<f64>,
    /// Solves per level; the median wall time is reported.
    pub repeats: usize,
}

impl Default for GranularityConfig {
    fn default() -> Self {
        GranularityConfig {
            preset: Preset::OfaSys,
            encoders: Some(3),
            gpus: 8,
            levels: vec![0.3, 0.2, 0.1, 0.05, 0.01],
            repeats: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularityRow {
    pub granularity: f64,
    pub solve_s: f64,
    pub iteration_time: f64,
    /// Best plan time across all levels over this level's plan time.
    pub quality: f64,
    pub feasibility_calls: u64,
    pub search_nodes: u64,
}

pub fn granularity(config: &GranularityConfig) -> Result<Vec<GranularityRow>, BenchError> {
    let inst = preset_instance(config.preset, config.encoders, config.gpus)?;
    let mut rows = Vec::new();
    for &level in &config.levels {
        let g = Granularity::new(level)?;
        let solver = SolverConfig { granularity: g, ..Default::default() };
        let mut times = Vec::with_capacity(config.repeats.max(1));
        let mut last = None;
        for _ in 0..config.repeats.max(1) {
            let t = Instant::now();
            last = Some(solve(&inst.dag, &inst.cluster, &inst.perf, &solver)?);
            times.push(secs(t.elapsed()));
        }
        let (plan, trace) = last.unwrap();
        rows.push(GranularityRow {
            granularity: level,
            solve_s: median(&times),
            iteration_time: plan.predicted_iteration_time,
            quality: 0.0,
            feasibility_calls: trace.feasibility_calls(),
            search_nodes: trace.search.nodes,
        });
    }
    let best = rows.iter().map(|r| r.iteration_time).fold(f64::INFINITY, f64::min);
    for r in &mut rows {
        r.quality = best / r.iteration_time;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub preset: Preset,
    pub gpus: usize,
    pub seeds: u64,
    pub base_seed: u64,
    pub granularity: Granularity,
    /// Training colocations per seed, with at most four modules each.
    pub train_samples: usize,
    pub noise_sigma: f64,
    /// Held-out colocations with exactly `scenario_size` modules.
    pub scenarios: usize,
    pub scenario_size: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            preset: Preset::OfaSys,
            gpus: 8,
            seeds: 5,
            base_seed: 0,
            granularity: Granularity::default(),
            train_samples: 200,
            noise_sigma: 0.02,
            scenarios: 100,
            scenario_size: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Unaware,
    AdditiveOnly,
    Full,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [ModelVariant::Unaware, ModelVariant::AdditiveOnly, ModelVariant::Full];
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelVariant::Unaware => "unaware",
            ModelVariant::AdditiveOnly => "additive_only",
            ModelVariant::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub model: ModelVariant,
    /// Mean relative error predicting held-out colocation latencies.
    pub prediction_error: f64,
    /// Iteration time the planner expected under this model.
    pub predicted_time: f64,
    /// The same plan re-evaluated under the ground truth.
    pub true_time: f64,
}

/// Mean of `|predicted - observed| / observed` over `samples`.
pub fn mean_prediction_error(model: &InterferenceModel, samples: &[ColocationSample], include_self: bool) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let predicted = s.base_s + model.delay(&s.utilizations(include_self));
            (predicted - s.observed_s).abs() / s.observed_s
        })
        .sum();
    total / samples.len() as f64
}

fn true_plan_time(plan: &DeploymentPlan, truth: &PerfModel) -> Result<f64, LookupError> {
    plan.stages.iter().map(|s| truth.stage_time(s)).sum()
}

pub fn ablation(config: &AblationConfig) -> Result<Vec<AblationRow>, BenchError> {
    let inst = preset_instance(config.preset, None, config.gpus)?;
    let truth = default_ground_truth();
    let include_self = inst.perf.include_self();
    let mut rows = Vec::new();
    for seed in config.base_seed..config.base_seed + config.seeds {
        let train = generate_colocation_samples(
            &inst.workloads,
            &inst.cluster,
            &truth,
            &SampleConfig {
                count: config.train_samples,
                seed,
                noise_sigma: config.noise_sigma,
                max_colocated: 4,
                min_colocated: 1,
            },
            &ProfilerConfig::default(),
        );
        let held_out = generate_colocation_samples(
            &inst.workloads,
            &inst.cluster,
            &truth,
            &SampleConfig {
                count: config.scenarios,
                seed: seed.wrapping_add(1 << 32),
                noise_sigma: 0.0,
                max_colocated: config.scenario_size,
                min_colocated: config.scenario_size,
            },
            &ProfilerConfig::default(),
        );
        for variant in ModelVariant::ALL {
            let model = match variant {
                ModelVariant::Unaware => InterferenceModel::unaware(),
                ModelVariant::AdditiveOnly => fit_interference(&train, FitForm::AdditiveOnly, include_self)?,
                ModelVariant::Full => fit_interference(&train, FitForm::Full, include_self)?,
            };
            let perf = inst.perf.with_interference(model);
            let (plan, _) = solve(
                &inst.dag,
                &inst.cluster,
                &perf,
                &SolverConfig { granularity: config.granularity, ..Default::default() },
            )?;
            rows.push(AblationRow {
                seed,
                model: variant,
                prediction_error: mean_prediction_error(&model, &held_out, include_self),
                predicted_time: plan.predicted_iteration_time,
                true_time: true_plan_time(&plan, &inst.perf)?,
            });
        }
    }
    Ok(rows)
}
