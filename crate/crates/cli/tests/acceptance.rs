//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use mosaic_core::bench::{self, median, preset_instance, AblationConfig, GranularityConfig, ModelVariant, OptimalityConfig};
use mosaic_core::cluster::ClusterSpec;
use mosaic_core::instance::{random_instance, RandomInstanceConfig};
use mosaic_core::interference::{fit_interference, FitForm};
use mosaic_core::io;
use mosaic_core::oracle::stage_optimum;
use mosaic_core::plan::validate_plan;
use mosaic_core::presets::{default_ground_truth, Preset};
use mosaic_core::profiler::{generate_colocation_samples, ProfilerConfig, SampleConfig};
use mosaic_core::quota::Granularity;
use mosaic_core::sim::{simulate, simulate_baseline, BaselinePolicy, SimConfig, StreamMode};
use mosaic_core::solver::{solve, SolveTrace, SolverConfig};
use mosaic_core::stage_eval::{option_tables, stage_eval, SearchConfig, StageContext};
use rayon::prelude::*;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_oracle_optimality() -> Outcome {
    let small = bench::optimality(&OptimalityConfig { seeds: 100, modules: vec![1, 2, 3, 4], ..Default::default() })
        .map_err(|e| e.to_string())?;
    let optimal = small.iter().filter(|r| (r.gahc_time - r.oracle_time).abs() <= 1e-6 * r.oracle_time).count();
    let six = bench::optimality(&OptimalityConfig { seeds: 30, base_seed: 10_000, modules: vec![6], ..Default::default() })
        .map_err(|e| e.to_string())?;
    let ratios: Vec<f64> = six.iter().map(|r| r.ratio).collect();
    let med = median(&ratios);
    let worst = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    check(
        optimal * 100 >= 95 * small.len() && med >= 0.92,
        format!(
            "{optimal}/{} instances with <=4 modules optimal (need 95%); 6-module median ratio {med:.4} over {} (need 0.92, min {worst:.4})",
            small.len(),
            six.len()
        ),
    )
}

fn c2_stage_eval_exactness() -> Outcome {
    let g = Granularity::new(0.5).unwrap();
    let results: Vec<Result<(bool, bool, f64), String>> = (0..200u64)
        .into_par_iter()
        .map(|seed| {
            let modules = 1 + (seed % 3) as usize;
            let gpus = 1 + (seed / 3 % 2) as usize;
            let inst = random_instance(&RandomInstanceConfig { modules, gpus, edge_probability: 0.0 }, 20_000 + seed);
            let tables = option_tables(&inst.dag, &inst.perf, &inst.cluster, g).map_err(|e| e.to_string())?;
            let ctx = StageContext { dag: &inst.dag, cluster: &inst.cluster, perf: &inst.perf, tables: &tables };
            let set = inst.dag.all();
            let exact = stage_optimum(&inst.dag, set, &inst.cluster, &inst.perf, g).map_err(|e| e.to_string())?;
            Ok(match (stage_eval(&ctx, set, &SearchConfig::default()), exact) {
                (Ok(r), Some((best, _))) => {
                    let dev = (r.stage_time - best).abs() / best;
                    (dev <= 1e-12, r.stage_time == best, dev)
                }
                (Err(_), None) => (true, true, 0.0),
                _ => (false, false, f64::INFINITY),
            })
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let matched = results.iter().filter(|r| r.0).count();
    let identical = results.iter().filter(|r| r.1).count();
    let worst = results.iter().map(|r| r.2).fold(0.0, f64::max);
    check(
        matched == results.len(),
        format!("{matched}/{} stages match exhaustive search ({identical} bit-identical, worst relative gap {worst:.1e})", results.len()),
    )
}

fn c3_interference_fit() -> Outcome {
    let w = Preset::OfaSys.workloads();
    let cluster = ClusterSpec::h100(8);
    let truth = default_ground_truth();
    let draw = |seed, noise| {
        generate_colocation_samples(
            &w,
            &cluster,
            &truth,
            &SampleConfig { count: 200, seed, noise_sigma: noise, max_colocated: 4, min_colocated: 1 },
            &ProfilerConfig::default(),
        )
    };
    let mut worst_full = f64::INFINITY;
    let mut worst_gap = f64::INFINITY;
    let mut ok = true;
    for seed in 0..20 {
        let samples = draw(seed, 0.02);
        let full = fit_interference(&samples, FitForm::Full, true).map_err(|e| e.to_string())?;
        let add = fit_interference(&samples, FitForm::AdditiveOnly, true).map_err(|e| e.to_string())?;
        ok &= full.r_squared >= 0.95 && full.r_squared > add.r_squared;
        worst_full = worst_full.min(full.r_squared);
        worst_gap = worst_gap.min(full.r_squared - add.r_squared);
    }
    let exact = fit_interference(&draw(99, 0.0), FitForm::Full, true).map_err(|e| e.to_string())?;
    let rel = |x: f64, y: f64| (x - y).abs() / y.abs();
    let recovery = rel(exact.e1, truth.e1).max(rel(exact.e2, truth.e2)).max(rel(exact.e3, truth.e3));
    check(
        ok && recovery <= 1e-9,
        format!(
            "20 seeds: min full r2 {worst_full:.4} (need 0.95), min margin over additive {worst_gap:.4}; zero-noise recovery error {recovery:.1e} (need 1e-9)"
        ),
    )
}

fn c4_prediction_ablation() -> Outcome {
    let rows = bench::ablation(&AblationConfig::default()).map_err(|e| e.to_string())?;
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.dedup();
    let mut ok = true;
    let mut parts = Vec::new();
    for s in &seeds {
        let err = |m: ModelVariant| rows.iter().find(|r| r.seed == *s && r.model == m).map(|r| r.prediction_error).unwrap();
        let (f, a, u) = (err(ModelVariant::Full), err(ModelVariant::AdditiveOnly), err(ModelVariant::Unaware));
        ok &= f <= a && a <= u;
        parts.push(format!("{:.2}%/{:.2}%/{:.2}%", f * 100.0, a * 100.0, u * 100.0));
    }
    check(ok && !seeds.is_empty(), format!("full/additive/unaware error per seed: {}", parts.join(" ")))
}

fn run(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mosaic"))
        .current_dir(dir)
        .env_remove("MOSAIC_SEED")
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`mosaic {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn c5_prune_cache() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let mut identical = 0;
    let mut ofasys = None;
    for preset in Preset::ALL {
        let name = preset.name();
        let (profiles, model, cluster, fit) =
            (format!("{name}-p.json"), format!("{name}-m.json"), format!("{name}-c.json"), format!("{name}-f.json"));
        run(d, &["profile", "--preset", name, "--gpus", "8", "--out", &profiles, "--model-out", &model, "--cluster-out", &cluster])?;
        run(d, &["fit", "--profiles", &profiles, "--out", &fit])?;
        let instance = ["--model", &model, "--cluster", &cluster, "--profiles", &profiles, "--interference", &fit];
        let (fast, slow) = (format!("{name}-fast.json"), format!("{name}-slow.json"));
        let (fast_t, slow_t) = (format!("{name}-fast-t.json"), format!("{name}-slow-t.json"));
        let mut a = vec!["plan", "--out", &fast, "--trace", &fast_t];
        a.extend(instance);
        run(d, &a)?;
        let mut b = vec!["plan", "--no-prune", "--no-cache", "--out", &slow, "--trace", &slow_t];
        b.extend(instance);
        run(d, &b)?;
        let read = |f: &str| std::fs::read(d.join(f)).map_err(|e| e.to_string());
        if read(&fast)? == read(&slow)? {
            identical += 1;
        }
        if preset == Preset::OfaSys {
            let calls = |f: &str| io::load::<SolveTrace>(&d.join(f)).map(|t| t.feasibility_calls()).map_err(|e| e.to_string());
            let modules = io::load::<mosaic_core::graph::ModelGraph>(&d.join(&model)).map_err(|e| e.to_string())?.modules.len();
            ofasys = Some((modules, calls(&fast_t)?, calls(&slow_t)?));
        }
    }
    let (modules, with, without) = ofasys.ok_or("OFASys preset missing")?;
    let ratio = without as f64 / with as f64;
    check(
        identical == Preset::ALL.len() && modules == 10 && ratio >= 2.0,
        format!(
            "{identical}/{} presets byte-identical; {modules}-module OFASys feasibility calls {without} -> {with} ({ratio:.2}x, need 2x)",
            Preset::ALL.len()
        ),
    )
}

fn c6_baseline_dominance() -> Outcome {
    let sim = SimConfig::default();
    let mut ok = true;
    let mut parts = Vec::new();
    let mut speedup = 0.0;
    for preset in Preset::ALL {
        let inst = preset_instance(preset, None, 8).map_err(|e| e.to_string())?;
        let config = SolverConfig::default();
        let (plan, _) = solve(&inst.dag, &inst.cluster, &inst.perf, &config).map_err(|e| e.to_string())?;
        let ours = simulate(&plan, &inst.dag, &inst.cluster, &inst.perf, &sim).map_err(|e| e.to_string())?;
        let base = |p| {
            simulate_baseline(&inst.dag, &inst.cluster, &inst.perf, p, config.granularity, &sim)
                .map(|r| r.1)
                .map_err(|e| e.to_string())
        };
        let (distmm, megatron) = (base(BaselinePolicy::DistMm)?, base(BaselinePolicy::Megatron)?);
        let fine = ours.iteration_time <= distmm.iteration_time
            && distmm.iteration_time <= megatron.iteration_time
            && ours.mean_busy_fraction >= distmm.mean_busy_fraction;
        ok &= fine;
        if preset == Preset::OfaSys {
            speedup = distmm.iteration_time / ours.iteration_time;
        }
        parts.push(format!(
            "{} {:.3}/{:.3}/{:.3}s util {:.3}/{:.3}{}",
            preset.name(),
            ours.iteration_time,
            distmm.iteration_time,
            megatron.iteration_time,
            ours.mean_busy_fraction,
            distmm.mean_busy_fraction,
            if fine { "" } else { " (out of order)" }
        ));
    }
    check(
        ok && speedup >= 1.10,
        format!("ours/distmm/megatron: {}; OFASys speedup {speedup:.2}x (need 1.10x)", parts.join("; ")),
    )
}

fn c7_stream_pool() -> Outcome {
    let inst = preset_instance(Preset::ImageBind, None, 8).map_err(|e| e.to_string())?;
    let (plan, _) = solve(&inst.dag, &inst.cluster, &inst.perf, &SolverConfig::default()).map_err(|e| e.to_string())?;
    let time = |mode| {
        simulate(&plan, &inst.dag, &inst.cluster, &inst.perf, &SimConfig { stream_mode: mode, ..Default::default() })
            .map(|r| r.iteration_time)
            .map_err(|e| e.to_string())
    };
    let (pooled, on_demand) = (time(StreamMode::Pooled)?, time(StreamMode::OnDemand)?);
    let reduction = (on_demand - pooled) / on_demand;
    check(
        (0.01..=0.10).contains(&reduction),
        format!(
            "ImageBind {} stages: pooled {pooled:.4}s vs on-demand {on_demand:.4}s, reduction {:.2}% (band 1%-10%)",
            plan.stages.len(),
            reduction * 100.0
        ),
    )
}

fn c8_granularity_knee() -> Outcome {
    let rows = bench::granularity(&GranularityConfig { repeats: 25, ..Default::default() }).map_err(|e| e.to_string())?;
    let faster = rows.windows(2).all(|w| w[1].solve_s > w[0].solve_s);
    let better = rows.windows(2).all(|w| w[1].quality >= w[0].quality);
    let q = |g: f64| rows.iter().find(|r| (r.granularity - g).abs() < 1e-12).map(|r| r.quality).unwrap_or(f64::NAN);
    let (d05, d01) = ((q(0.05) - q(0.1)) * 100.0, (q(0.01) - q(0.1)) * 100.0);
    let table: Vec<String> =
        rows.iter().map(|r| format!("g={} {:.2}ms q={:.4}", r.granularity, r.solve_s * 1e3, r.quality)).collect();
    check(
        faster && better && d05 <= 2.0 && d01 <= 2.0,
        format!(
            "{}; gains over g=0.1: {d05:.2} and {d01:.2} points (max 2){}{}",
            table.join(", "),
            if faster { "" } else { "; solve time not strictly increasing" },
            if better { "" } else { "; quality decreased" }
        ),
    )
}

fn c9_fuzz() -> Outcome {
    let failures: Vec<String> = (0..1000u64)
        .into_par_iter()
        .filter_map(|seed| {
            let modules = 1 + (seed % 8) as usize;
            let gpus = 1 + (seed / 8 % 8) as usize;
            let g = Granularity::new([0.1, 0.2, 0.25, 0.5][(seed / 64 % 4) as usize]).unwrap();
            let inst = random_instance(&RandomInstanceConfig { modules, gpus, edge_probability: 0.3 }, 40_000 + seed);
            let config = SolverConfig { granularity: g, check_invariants: true, ..Default::default() };
            match solve(&inst.dag, &inst.cluster, &inst.perf, &config) {
                Ok((plan, _)) => validate_plan(&plan, &inst.dag, &inst.cluster).err().map(|e| format!("seed {seed}: {e}")),
                Err(e) => Some(format!("seed {seed}: {e}")),
            }
        })
        .collect();
    check(
        failures.is_empty(),
        format!(
            "1000 seeded instances solved with per-round invariant checks, {} invalid plans{}; per-module properties run in the crates' test targets",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("C1 oracle optimality", c1_oracle_optimality),
        ("C2 stage evaluation exactness", c2_stage_eval_exactness),
        ("C3 contention model fit", c3_interference_fit),
        ("C4 prediction error ablation", c4_prediction_ablation),
        ("C5 pruning and caching", c5_prune_cache),
        ("C6 baseline dominance", c6_baseline_dominance),
        ("C7 stream pool", c7_stream_pool),
        ("C8 granularity knee", c8_granularity_knee),
        ("C9 invariant fuzzing", c9_fuzz),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
