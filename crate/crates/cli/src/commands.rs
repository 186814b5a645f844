use crate::error::CliError;
use crate::{BenchArgs, FitArgs, InstanceArgs, OracleArgs, PlanArgs, ProfileArgs, SimulateArgs};
use mosaic_core::bench::{
    self, median, AblationConfig, GranularityConfig, OptimalityConfig, ScaleConfig, Suite,
};
use mosaic_core::cluster::ClusterSpec;
use mosaic_core::graph::{Dag, ModelGraph};
use mosaic_core::interference::{fit_interference, FitForm, InterferenceModel};
use mosaic_core::io::{self, InterferenceFile, ProfileSet};
use mosaic_core::perf::PerfModel;
use mosaic_core::plan::{validate_plan, DeploymentPlan};
use mosaic_core::presets::{default_ground_truth, Preset};
use mosaic_core::profiler::{generate_colocation_samples, generate_surfaces, ProfilerConfig, SampleConfig, WorkloadSet};
use mosaic_core::quota::Granularity;
use mosaic_core::sim::{simulate as run_sim, simulate_baseline, BaselinePolicy, SimConfig, StreamMode};
use mosaic_core::solver::{solve, SolverConfig};
use serde::Serialize;
use std::path::Path;

fn write_csv<T: Serialize>(rows: &[T], out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => {
            let mut w = csv::Writer::from_path(path)?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Summary lines go to standard output unless the CSV itself does.
fn note(csv_on_stdout: bool, line: String) {
    if csv_on_stdout {
        eprintln!("{line}");
    } else {
        println!("{line}");
    }
}

pub fn profile(a: &ProfileArgs) -> Result<(), CliError> {
    let workloads: WorkloadSet = if a.preset.eq_ignore_ascii_case("custom") {
        let path = a
            .workloads
            .as_deref()
            .ok_or_else(|| CliError::Validation("`--preset custom` needs `--workloads <file>`".into()))?;
        io::load(path)?
    } else {
        if a.workloads.is_some() {
            return Err(CliError::Validation("`--workloads` is only read with `--preset custom`".into()));
        }
        a.preset.parse::<Preset>()?.with_encoders(a.modules)?
    };
    workloads.validate()?;
    let cluster = match &a.cluster {
        Some(p) => io::load(p)?,
        None => ClusterSpec::h100(a.gpus),
    };
    cluster.validate()?;
    let graph = workloads.graph();
    Dag::new(&graph)?;

    let profiler = ProfilerConfig::default();
    let surfaces = generate_surfaces(&workloads, &cluster, &profiler)?;
    let samples = generate_colocation_samples(
        &workloads,
        &cluster,
        &default_ground_truth(),
        &SampleConfig {
            count: a.samples,
            seed: a.seed,
            noise_sigma: a.noise,
            max_colocated: a.max_colocated,
            min_colocated: 1,
        },
        &profiler,
    );
    let points: usize = surfaces.iter().map(|s| s.points().len()).sum();
    io::save(&a.out, &ProfileSet::new(&surfaces, samples))?;
    if let Some(p) = &a.model_out {
        io::save(p, &graph)?;
    }
    if let Some(p) = &a.cluster_out {
        io::save(p, &cluster)?;
    }
    println!(
        "profiled {} modules on {} GPUs: {} surface points, {} colocation samples -> {}",
        surfaces.len(),
        cluster.gpu_count,
        points,
        a.samples,
        a.out.display()
    );
    Ok(())
}

fn fit_row(name: &str, m: &InterferenceModel) -> String {
    format!("{name:<14} {:>12.6} {:>12.6} {:>12.6} {:>8.4} {:>8}", m.e1, m.e2, m.e3, m.r_squared, m.sample_count)
}

pub fn fit(a: &FitArgs) -> Result<(), CliError> {
    let profiles: ProfileSet = io::load(&a.profiles)?;
    let include_self = !a.exclude_self;
    let full = fit_interference(&profiles.samples, FitForm::Full, include_self)?;
    let additive = fit_interference(&profiles.samples, FitForm::AdditiveOnly, include_self)?;
    if full.has_negative_coefficient() {
        log::warn!("fitted model has a negative coefficient; pruning and bounds will be disabled when planning");
    }
    io::save(&a.out, &InterferenceFile { model: full, additive_only: Some(additive), include_self })?;
    println!("{:<14} {:>12} {:>12} {:>12} {:>8} {:>8}", "form", "e1", "e2", "e3", "r2", "samples");
    println!("{}", fit_row("full", &full));
    println!("{}", fit_row("additive_only", &additive));
    println!("wrote {}", a.out.display());
    Ok(())
}

pub struct Loaded {
    pub dag: Dag,
    pub cluster: ClusterSpec,
    pub perf: PerfModel,
}

pub fn load_instance(a: &InstanceArgs) -> Result<Loaded, CliError> {
    let graph: ModelGraph = io::load(&a.model)?;
    let dag = Dag::new(&graph)?;
    let cluster: ClusterSpec = io::load(&a.cluster)?;
    cluster.validate()?;
    let profiles: ProfileSet = io::load(&a.profiles)?;
    let interference: InterferenceFile = io::load(&a.interference)?;
    let perf =
        PerfModel::new(profiles.scaling_surfaces()?, interference.model).with_include_self(interference.include_self);
    for m in dag.modules() {
        perf.surface(&m.id)?;
    }
    Ok(Loaded { dag, cluster, perf })
}

fn describe_plan(plan: &DeploymentPlan) {
    for (i, (stage, t)) in plan.stages.iter().zip(&plan.predicted_stage_times).enumerate() {
        let parts: Vec<String> = stage
            .assignments
            .iter()
            .map(|m| format!("{}(d={}, a={})", m.module, m.option.dp_degree, m.option.sm_quota))
            .collect();
        println!("  stage {i}: {:.6} s  {}", t, parts.join(" "));
    }
}

pub fn plan(a: &PlanArgs) -> Result<(), CliError> {
    let inst = load_instance(&a.instance)?;
    let config = SolverConfig {
        granularity: Granularity::new(a.granularity)?,
        prune: !a.no_prune,
        cache: !a.no_cache,
        ..Default::default()
    };
    let (plan, trace) = solve(&inst.dag, &inst.cluster, &inst.perf, &config)?;
    validate_plan(&plan, &inst.dag, &inst.cluster)?;
    io::save(&a.out, &plan)?;
    if let Some(p) = &a.trace {
        io::save(p, &trace)?;
    }
    println!("{} stages, predicted iteration time {:.6} s", plan.stages.len(), plan.predicted_iteration_time);
    describe_plan(&plan);
    println!(
        "solver: {} rounds, {} feasibility calls, {} search nodes, {} pruned, cache {} hits / {} misses, {} truncated probes, {:.3} s",
        trace.rounds.len(),
        trace.feasibility_calls(),
        trace.search.nodes,
        trace.pruned,
        trace.cache_hits,
        trace.cache_misses,
        trace.search.truncated,
        trace.elapsed.as_secs_f64()
    );
    Ok(())
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let inst = load_instance(&a.instance)?;
    let config = SimConfig {
        iterations: a.iters,
        stream_mode: a.mode.parse::<StreamMode>().map_err(CliError::Validation)?,
        perturbation_sigma: a.noise,
        seed: a.seed,
        ..Default::default()
    };
    let (label, plan, report) = match (&a.baseline, &a.plan) {
        (Some(b), _) => {
            let policy: BaselinePolicy = b.parse().map_err(CliError::Validation)?;
            let granularity = Granularity::new(a.granularity)?;
            let (plan, report) = simulate_baseline(&inst.dag, &inst.cluster, &inst.perf, policy, granularity, &config)?;
            (policy.to_string(), plan, report)
        }
        (None, Some(p)) => {
            let plan: DeploymentPlan = io::load(p)?;
            validate_plan(&plan, &inst.dag, &inst.cluster)?;
            let report = run_sim(&plan, &inst.dag, &inst.cluster, &inst.perf, &config)?;
            ("plan".to_string(), plan, report)
        }
        (None, None) => return Err(CliError::Validation("give `--plan` or `--baseline`".into())),
    };
    println!(
        "{label}: {} stages, iteration time {:.6} s (overhead {:.6} s per iteration, {} iteration(s))",
        plan.stages.len(),
        report.iteration_time,
        report.overhead_per_iteration,
        report.iteration_times.len()
    );
    let per_gpu: Vec<String> = report.per_gpu_busy_fraction.iter().map(|u| format!("{u:.4}")).collect();
    println!("utilization: mean {:.4}, per GPU [{}]", report.mean_busy_fraction, per_gpu.join(", "));
    if let Some(p) = &a.report {
        io::save(p, &report)?;
    }
    if let Some(p) = &a.timeline {
        write_csv(&report.timeline, Some(p))?;
    }
    Ok(())
}

pub fn oracle(a: &OracleArgs) -> Result<(), CliError> {
    let config = OptimalityConfig {
        seeds: a.seeds,
        base_seed: a.seed,
        modules: a.modules.clone(),
        gpus: a.gpus,
        granularity: Granularity::new(a.granularity)?,
        ..Default::default()
    };
    if config.modules.is_empty() {
        return Err(CliError::Validation("`--modules` needs at least one count".into()));
    }
    let rows = bench::optimality(&config)?;
    write_csv(&rows, a.out.as_deref())?;
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let optimal = rows.iter().filter(|r| (r.ratio - 1.0).abs() <= 1e-6).count();
    if !rows.is_empty() {
        note(
            a.out.is_none(),
            format!("{} instances: {} optimal, median ratio {:.4}", rows.len(), optimal, median(&ratios)),
        );
    }
    Ok(())
}

fn preset_or(name: &Option<String>, default: Preset) -> Result<Preset, CliError> {
    match name {
        Some(n) => Ok(n.parse()?),
        None => Ok(default),
    }
}

pub fn bench(a: &BenchArgs) -> Result<(), CliError> {
    let suite: Suite = a.suite.parse()?;
    let out = a.out.as_deref();
    match suite {
        Suite::Optimality => {
            let rows = bench::optimality(&OptimalityConfig {
                seeds: a.seeds.unwrap_or(100),
                base_seed: a.seed,
                ..Default::default()
            })?;
            write_csv(&rows, out)?;
            let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
            if !rows.is_empty() {
                note(out.is_none(), format!("{} instances, median ratio {:.4}", rows.len(), median(&ratios)));
            }
        }
        Suite::Scale => {
            let mut config = ScaleConfig { preset: preset_or(&a.preset, Preset::OfaSys)?, ..Default::default() };
            if !a.gpus.is_empty() {
                config.gpus = a.gpus.clone();
            }
            write_csv(&bench::scale(&config)?, out)?;
        }
        Suite::Granularity => {
            let mut config = GranularityConfig { preset: preset_or(&a.preset, Preset::OfaSys)?, ..Default::default() };
            if a.preset.is_some() {
                config.encoders = None;
            }
            if let Some(r) = a.repeats {
                config.repeats = r;
            }
            if let Some(&g) = a.gpus.first() {
                config.gpus = g;
            }
            write_csv(&bench::granularity(&config)?, out)?;
        }
        Suite::Ablation => {
            let mut config = AblationConfig {
                preset: preset_or(&a.preset, Preset::OfaSys)?,
                base_seed: a.seed,
                ..Default::default()
            };
            if let Some(s) = a.seeds {
                config.seeds = s;
            }
            if let Some(&g) = a.gpus.first() {
                config.gpus = g;
            }
            write_csv(&bench::ablation(&config)?, out)?;
        }
    }
    Ok(())
}
