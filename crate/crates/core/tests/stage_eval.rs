mod common;

use common::{granularity, instance, rel_close};
use mosaic_core::graph::ModuleSet;
use mosaic_core::oracle::stage_optimum;
use mosaic_core::plan::validate_stage;
use mosaic_core::stage_eval::{feasible, option_tables, stage_eval, SearchConfig, SearchStats, StageContext, StageEvalError};
use proptest::prelude::*;

#[test]
fn matches_exhaustive_minimum_on_small_stages() {
    let mut compared = 0;
    for seed in 0..100u64 {
        let modules = 1 + (seed % 3) as usize;
        let gpus = 1 + (seed / 3 % 2) as usize;
        let g = if seed % 2 == 0 { 0.25 } else { 0.5 };
        let inst = instance(modules, gpus, 1000 + seed);
        let gran = granularity(g);
        let tables = option_tables(&inst.dag, &inst.perf, &inst.cluster, gran).unwrap();
        let ctx = StageContext { dag: &inst.dag, cluster: &inst.cluster, perf: &inst.perf, tables: &tables };
        let set = inst.dag.all();
        let exact = stage_optimum(&inst.dag, set, &inst.cluster, &inst.perf, gran).unwrap();
        match (stage_eval(&ctx, set, &SearchConfig::default()), exact) {
            (Ok(r), Some((best, _))) => {
                assert!(rel_close(r.stage_time, best, 1e-6), "seed {seed}: {} vs {best}", r.stage_time);
                compared += 1;
            }
            (Err(StageEvalError::Unpackable(_) | StageEvalError::ModuleInfeasible(_)), None) => {}
            (r, e) => panic!("seed {seed}: stage_eval {r:?} vs oracle {e:?}"),
        }
    }
    assert!(compared >= 90, "only {compared} feasible stages");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solved_stages_are_consistent(seed in any::<u64>(), modules in 1usize..=5, gpus in 1usize..=8, gi in 0usize..3) {
        let g = [0.1, 0.25, 0.5][gi];
        let inst = instance(modules, gpus, seed);
        let gran = granularity(g);
        let tables = option_tables(&inst.dag, &inst.perf, &inst.cluster, gran).unwrap();
        let ctx = StageContext { dag: &inst.dag, cluster: &inst.cluster, perf: &inst.perf, tables: &tables };
        let set = inst.dag.all();
        let config = SearchConfig { verify: true, ..Default::default() };
        let r = match stage_eval(&ctx, set, &config) {
            Ok(r) => r,
            Err(StageEvalError::Unpackable(_)) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };

        // allocation re-check
        let recomputed = inst.perf.stage_time(&r.allocation).unwrap();
        prop_assert!(recomputed <= r.stage_time + 1e-9, "{recomputed} > {}", r.stage_time);
        prop_assert!(validate_stage(&r.allocation, &inst.dag, &inst.cluster, Some(gran)).is_ok());
        let placed = ModuleSet::from_indices(r.allocation.modules().map(|m| inst.dag.index_of(m).unwrap()));
        prop_assert_eq!(placed, set);

        // feasibility monotonicity above the optimum
        let mut stats = SearchStats::default();
        for factor in [1.0, 1.1, 1.5, 3.0] {
            prop_assert!(feasible(&ctx, set, r.stage_time * factor, &mut stats).is_some(), "infeasible at x{factor}");
        }

        // determinism
        let again = stage_eval(&ctx, set, &config).unwrap();
        prop_assert_eq!(&again.allocation, &r.allocation);
        prop_assert_eq!(again.stage_time.to_bits(), r.stage_time.to_bits());
    }
}
