//! Greedy agglomerative stage merging.
//!
//! Starts from one stage per module in topological order and repeatedly
//! applies the legal pairwise merge with the largest positive gain
//! `T_x + T_y - T_{x ∪ y}` until no merge helps.

use crate::cluster::ClusterSpec;
use crate::graph::{topological_singleton_stages, Dag, ModuleSet};
use crate::perf::PerfModel;
use crate::plan::DeploymentPlan;
use crate::quota::Granularity;
use crate::stage_eval::{
    option_tables, stage_eval, stage_lower_bound, CandidateOption, SearchConfig, SearchStats, StageContext, StageEvalError,
    StageEvalResult,
};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub granularity: Granularity,
    pub prune: bool,
    pub cache: bool,
    pub search: SearchConfig,
    /// Re-check dependency order and monotone improvement every round.
    pub check_invariants: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            granularity: Granularity::default(),
            prune: true,
            cache: true,
            search: SearchConfig::default(),
            check_invariants: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error(transparent)]
    Stage(#[from] StageEvalError),
    #[error("solver invariant violated: {0}")]
    InvariantViolated(String),
}

/// Whether merging stage `y` into stage `x` (the merged stage takes position
/// `x`) keeps every edge pointing strictly forward.
pub fn legal_merge(stages: &[ModuleSet], x: usize, y: usize, dag: &Dag) -> bool {
    if x >= y || y >= stages.len() {
        return false;
    }
    let mut position = vec![usize::MAX; dag.len()];
    let mut k = 0;
    for (i, s) in stages.iter().enumerate() {
        if i == y {
            continue;
        }
        let set = if i == x { s.union(stages[y]) } else { *s };
        for m in set.iter() {
            position[m] = k;
        }
        k += 1;
    }
    dag.edges().iter().all(|&(u, v)| position[u] < position[v])
}

/// True when the merge cannot beat `best_gain`.
pub fn early_prune(t_x: f64, t_y: f64, t_lb: f64, best_gain: f64) -> bool {
    t_x + t_y - t_lb <= best_gain
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct CacheKey {
    set: u64,
    granularity: u32,
    fingerprint: u64,
    include_self: bool,
}

/// Memo of stage evaluations keyed by module set and model configuration.
///
/// Safe to share across threads; concurrent inserts keep the first result.
#[derive(Debug, Default)]
pub struct EvalCache {
    map: Mutex<HashMap<CacheKey, Result<StageEvalResult, StageEvalError>>>,
    hits: Mutex<(u64, u64)>,
}

impl EvalCache {
    pub fn new() -> Self {
        EvalCache::default()
    }

    fn key(set: ModuleSet, perf: &PerfModel, g: Granularity) -> CacheKey {
        CacheKey {
            set: set.0,
            granularity: g.units(),
            fingerprint: perf.interference().fingerprint(),
            include_self: perf.include_self(),
        }
    }

    /// Cached result, or computes and stores it. The flag reports a hit.
    pub fn get_or_eval(
        &self,
        set: ModuleSet,
        perf: &PerfModel,
        g: Granularity,
        eval: impl FnOnce() -> Result<StageEvalResult, StageEvalError>,
    ) -> (Result<StageEvalResult, StageEvalError>, bool) {
        let key = EvalCache::key(set, perf, g);
        if let Some(r) = self.map.lock().unwrap().get(&key) {
            self.hits.lock().unwrap().0 += 1;
            return (r.clone(), true);
        }
        let fresh = eval();
        self.hits.lock().unwrap().1 += 1;
        let stored = self.map.lock().unwrap().entry(key).or_insert(fresh).clone();
        (stored, false)
    }

    pub fn hits(&self) -> u64 {
        self.hits.lock().unwrap().0
    }

    pub fn misses(&self) -> u64 {
        self.hits.lock().unwrap().1
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A merge that was applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeCandidate {
    pub stage_x: usize,
    pub stage_y: usize,
    pub merged_modules: u64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CandidateOutcome {
    Illegal,
    Pruned { bound: f64 },
    Unpackable,
    Evaluated { stage_time: f64, gain: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub x: usize,
    pub y: usize,
    pub merged_modules: u64,
    pub outcome: CandidateOutcome,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    /// Stage module sets at the start of the round.
    pub stages: Vec<u64>,
    pub iteration_time: f64,
    pub candidates: Vec<CandidateTrace>,
    pub applied: Option<MergeCandidate>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub rounds: Vec<RoundTrace>,
    pub pruned: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    /// Summed over fresh stage evaluations only.
    pub search: SearchStats,
    #[serde(with = "crate::stage_eval::duration_secs")]
    pub elapsed: Duration,
}

impl SolveTrace {
    pub fn feasibility_calls(&self) -> u64 {
        self.search.feasibility_calls
    }

    /// The rounds with cache-hit flags cleared, for comparing runs.
    pub fn normalized_rounds(&self) -> Vec<RoundTrace> {
        let mut rounds = self.rounds.clone();
        for r in &mut rounds {
            for c in &mut r.candidates {
                c.cache_hit = false;
            }
        }
        rounds
    }
}

/// Orders `(gain, cardinality, mask)`: larger gain, then fewer modules, then
/// the smaller bitmask.
fn beats(gain: f64, set: ModuleSet, best: &(f64, ModuleSet)) -> bool {
    gain > best.0 || (gain == best.0 && (set.len(), set.0) < (best.1.len(), best.1 .0))
}

struct Evaluator<'a> {
    ctx: StageContext<'a>,
    config: &'a SolverConfig,
    cache: Option<&'a EvalCache>,
    trace: &'a mut SolveTrace,
}

impl Evaluator<'_> {
    fn eval(&mut self, set: ModuleSet) -> (Result<StageEvalResult, StageEvalError>, bool) {
        let (ctx, search) = (self.ctx, self.config.search);
        let fresh = || stage_eval(&ctx, set, &search);
        let (r, hit) = match self.cache {
            Some(c) => c.get_or_eval(set, ctx.perf, self.config.granularity, fresh),
            None => (fresh(), false),
        };
        if hit {
            self.trace.cache_hits += 1;
        } else {
            self.trace.cache_misses += 1;
            if let Ok(ok) = &r {
                self.trace.search.absorb(&ok.stats);
            }
        }
        (r, hit)
    }
}

/// Runs the merge loop and returns the plan with its trace.
pub fn solve(
    dag: &Dag,
    cluster: &ClusterSpec,
    perf: &PerfModel,
    config: &SolverConfig,
) -> Result<(DeploymentPlan, SolveTrace), SolveError> {
    let tables = option_tables(dag, perf, cluster, config.granularity).map_err(StageEvalError::from)?;
    let cache = EvalCache::new();
    solve_with(dag, cluster, perf, &tables, config, config.cache.then_some(&cache))
}

/// [`solve`] with precomputed option tables and a caller-owned cache.
pub fn solve_with(
    dag: &Dag,
    cluster: &ClusterSpec,
    perf: &PerfModel,
    tables: &[Vec<CandidateOption>],
    config: &SolverConfig,
    cache: Option<&EvalCache>,
) -> Result<(DeploymentPlan, SolveTrace), SolveError> {
    let start = Instant::now();
    let ctx = StageContext { dag, cluster, perf, tables };
    let mut trace = SolveTrace::default();
    let model = *perf.interference();
    let can_prune = config.prune && !model.has_negative_coefficient();

    let mut stages = topological_singleton_stages(dag);
    let mut results = Vec::with_capacity(stages.len());
    {
        let mut ev = Evaluator { ctx, config, cache, trace: &mut trace };
        for &s in &stages {
            results.push(ev.eval(s).0?);
        }
    }

    while stages.len() > 1 {
        let iteration_time: f64 = results.iter().map(|r| r.stage_time).sum();
        let mut round = RoundTrace {
            stages: stages.iter().map(|s| s.0).collect(),
            iteration_time,
            candidates: Vec::new(),
            applied: None,
        };
        let mut best: Option<(f64, ModuleSet, usize, usize, StageEvalResult)> = None;
        // Pairs in order of decreasing optimistic gain, so a strong
        // incumbent is found early and more of the rest can be pruned.
        let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
        for x in 0..stages.len() {
            for y in x + 1..stages.len() {
                let bound = if can_prune {
                    let t_lb = stage_lower_bound(stages[x].union(stages[y]), tables, &model, perf.include_self());
                    results[x].stage_time + results[y].stage_time - t_lb
                } else {
                    0.0
                };
                pairs.push((x, y, bound));
            }
        }
        if can_prune {
            pairs.sort_by(|a, b| b.2.total_cmp(&a.2));
        }
        for (x, y, bound) in pairs {
            let merged = stages[x].union(stages[y]);
            let mut cand = CandidateTrace {
                x,
                y,
                merged_modules: merged.0,
                outcome: CandidateOutcome::Illegal,
                cache_hit: false,
            };
            if !legal_merge(&stages, x, y, dag) {
                round.candidates.push(cand);
                continue;
            }
            let (t_x, t_y) = (results[x].stage_time, results[y].stage_time);
            if can_prune {
                // A bound equal to the incumbent can only tie; skip it
                // when it would lose the tie-break anyway.
                let skip = match &best {
                    None => early_prune(t_x, t_y, t_x + t_y - bound, 0.0),
                    Some(b) => bound < b.0 || (bound == b.0 && !beats(bound, merged, &(b.0, b.1))),
                };
                if skip {
                    trace.pruned += 1;
                    cand.outcome = CandidateOutcome::Pruned { bound };
                    round.candidates.push(cand);
                    continue;
                }
            }
            let (r, hit) = Evaluator { ctx, config, cache, trace: &mut trace }.eval(merged);
            cand.cache_hit = hit;
            match r {
                Ok(r) => {
                    let gain = t_x + t_y - r.stage_time;
                    cand.outcome = CandidateOutcome::Evaluated { stage_time: r.stage_time, gain };
                    let better = match &best {
                        None => gain > 0.0,
                        Some(b) => beats(gain, merged, &(b.0, b.1)),
                    };
                    if better {
                        best = Some((gain, merged, x, y, r));
                    }
                }
                Err(StageEvalError::Unpackable(_)) => cand.outcome = CandidateOutcome::Unpackable,
                Err(e) => return Err(e.into()),
            }
            round.candidates.push(cand);
        }
        let Some((gain, merged, x, y, r)) = best else {
            trace.rounds.push(round);
            break;
        };
        round.applied = Some(MergeCandidate { stage_x: x, stage_y: y, merged_modules: merged.0, gain });
        trace.rounds.push(round);
        stages[x] = merged;
        stages.remove(y);
        results[x] = r;
        results.remove(y);
        if config.check_invariants {
            if !dag.respects_order(&stages) {
                return Err(SolveError::InvariantViolated(format!("stage order broken after merging {x} and {y}")));
            }
            let now: f64 = results.iter().map(|r| r.stage_time).sum();
            if now >= iteration_time {
                return Err(SolveError::InvariantViolated(format!(
                    "iteration time did not decrease: {iteration_time} -> {now}"
                )));
            }
        }
    }

    let times = results.iter().map(|r| r.stage_time).collect();
    let plan = DeploymentPlan::new(config.granularity, results.into_iter().map(|r| r.allocation).collect(), times);
    trace.elapsed = start.elapsed();
    Ok((plan, trace))
}
