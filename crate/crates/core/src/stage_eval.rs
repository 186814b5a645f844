//! Optimal allocation of one stage.
//!
//! The min-max objective is turned into a sequence of feasibility questions
//! "can every module meet latency target `tau`?", each answered by a
//! backtracking search over deployment options and GPU placements. The
//! smallest feasible `tau` is the stage time.

use crate::cluster::ClusterSpec;
use crate::graph::{Dag, ModuleSet};
use crate::interference::InterferenceModel;
use crate::perf::PerfModel;
use crate::plan::{DeploymentOption, ModuleAssignment, StageAllocation};
use crate::quota::{Granularity, QUOTA_SCALE};
use crate::surface::LookupError;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};
use thiserror::Error;

/// A deployment option with its solo surface values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateOption {
    pub option: DeploymentOption,
    pub base_latency: f64,
    pub bandwidth_util: f64,
    /// Per-GPU footprint, quota-independent module state included.
    pub memory: f64,
}

impl CandidateOption {
    fn footprint_units(&self) -> u64 {
        self.option.total_units()
    }
}

/// Every `(d, a)` on the quota lattice that the surface covers and that fits
/// in GPU memory, sorted by base latency.
pub fn candidate_options(
    dag: &Dag,
    module: usize,
    perf: &PerfModel,
    cluster: &ClusterSpec,
    granularity: Granularity,
) -> Result<Vec<CandidateOption>, LookupError> {
    let spec = dag.module(module);
    let surface = perf.surface(&spec.id)?;
    let mut out = Vec::new();
    for &d in surface.d_values() {
        if d as usize > cluster.gpu_count {
            continue;
        }
        for q in granularity.levels() {
            if !surface.contains(d, q.fraction()) {
                continue;
            }
            let option = DeploymentOption::new(d, q);
            let est = surface.lookup(d, q.fraction())?;
            let memory = est.memory + spec.memory_base;
            if memory > cluster.memory_capacity {
                continue;
            }
            out.push(CandidateOption {
                option,
                base_latency: est.latency,
                bandwidth_util: est.bandwidth_util,
                memory,
            });
        }
    }
    out.sort_by(|x, y| {
        x.base_latency
            .total_cmp(&y.base_latency)
            .then(x.option.dp_degree.cmp(&y.option.dp_degree))
            .then(x.option.sm_quota.cmp(&y.option.sm_quota))
    });
    Ok(out)
}

/// Candidate options of every module in `dag`, indexed by module.
pub fn option_tables(
    dag: &Dag,
    perf: &PerfModel,
    cluster: &ClusterSpec,
    granularity: Granularity,
) -> Result<Vec<Vec<CandidateOption>>, LookupError> {
    (0..dag.len()).map(|m| candidate_options(dag, m, perf, cluster, granularity)).collect()
}

/// Everything a stage evaluation needs besides the module set.
#[derive(Debug, Clone, Copy)]
pub struct StageContext<'a> {
    pub dag: &'a Dag,
    pub cluster: &'a ClusterSpec,
    pub perf: &'a PerfModel,
    pub tables: &'a [Vec<CandidateOption>],
}

pub const DEFAULT_NODE_LIMIT: u64 = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Relative gap at which continuous bisection hands over to exact
    /// tightening.
    pub tolerance: f64,
    /// Re-probe `1.1 * tau*` after each solve and fail if it is infeasible.
    pub verify: bool,
    /// Hand spare SM quota to modules when that keeps the stage time.
    pub fill_spare: bool,
    /// Search-tree nodes allowed per ordering in one feasibility probe.
    pub node_limit: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { tolerance: 1e-3, verify: false, fill_spare: true, node_limit: DEFAULT_NODE_LIMIT }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub feasibility_calls: u64,
    /// Search-tree nodes expanded across all feasibility calls.
    pub nodes: u64,
    /// Probes that ran out of node budget under every ordering.
    #[serde(default)]
    pub truncated: u64,
    #[serde(with = "duration_secs")]
    pub elapsed: Duration,
}

impl SearchStats {
    pub fn absorb(&mut self, other: &SearchStats) {
        self.feasibility_calls += other.feasibility_calls;
        self.nodes += other.nodes;
        self.truncated += other.truncated;
        self.elapsed += other.elapsed;
    }
}

pub(crate) mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?.max(0.0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEvalResult {
    pub stage_time: f64,
    pub allocation: StageAllocation,
    pub stats: SearchStats,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StageEvalError {
    #[error("module `{0}` has no deployment option that fits the cluster")]
    ModuleInfeasible(String),
    #[error("modules {0} cannot be packed into one stage")]
    Unpackable(String),
    #[error(transparent)]
    Lookup(#[from] LookupError),
    #[error("search invariant violated: {0}")]
    InvariantViolated(String),
}

/// One module's choice in a feasibility answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub module: usize,
    pub option: usize,
    pub gpus: Vec<usize>,
}

/// A complete assignment that meets the target, with its achieved max latency.
#[derive(Debug, Clone, PartialEq)]
pub struct Feasible {
    pub placements: Vec<Placement>,
    pub max_latency: f64,
}

#[derive(Debug, Clone, Default)]
struct GpuState {
    units: u32,
    memory: f64,
    /// `(search position, option index)` in placement order.
    residents: Vec<(usize, usize)>,
}

struct Search<'a> {
    tau: f64,
    model: InterferenceModel,
    include_self: bool,
    bounded: bool,
    cluster: &'a ClusterSpec,
    modules: Vec<usize>,
    tables: Vec<&'a [CandidateOption]>,
    allowed: Vec<Vec<usize>>,
    rest_units: Vec<u64>,
    rest_memory: Vec<f64>,
    rest_min_b: Vec<f64>,
    gpus: Vec<GpuState>,
    chosen: Vec<(usize, Vec<usize>)>,
    nodes: u64,
    node_limit: u64,
    aborted: bool,
}

impl<'a> Search<'a> {
    fn option(&self, pos: usize, opt: usize) -> &CandidateOption {
        &self.tables[pos][opt]
    }

    /// Utilizations counted in `victim`'s delay on `gpu`.
    fn members(&self, gpu: usize, victim: usize) -> Vec<f64> {
        self.gpus[gpu]
            .residents
            .iter()
            .filter(|&&(p, _)| self.include_self || p != victim)
            .map(|&(p, o)| self.option(p, o).bandwidth_util)
            .collect()
    }

    /// Lower bound on `victim`'s final delay on `gpu`, given that modules at
    /// positions `> placed` may still join.
    fn delay_lower_bound(&self, gpu: usize, victim: usize, placed: usize) -> f64 {
        let bs = self.members(gpu, victim);
        let sum: f64 = bs.iter().sum();
        let product = if bs.is_empty() {
            0.0
        } else {
            bs.iter().product::<f64>() * self.rest_min_b[placed + 1]
        };
        self.model.e1 + self.model.e2 * sum + self.model.e3 * product
    }

    fn exact_latency(&self, pos: usize) -> f64 {
        let (opt, gpus) = &self.chosen[pos];
        let worst = gpus
            .iter()
            .map(|&g| self.model.delay(&self.members(g, pos)))
            .fold(f64::NEG_INFINITY, f64::max);
        self.option(pos, *opt).base_latency + worst
    }

    fn run(&mut self) -> Option<f64> {
        self.descend(0)
    }

    fn descend(&mut self, pos: usize) -> Option<f64> {
        if pos == self.modules.len() {
            let mut worst = 0.0f64;
            for p in 0..self.modules.len() {
                let t = self.exact_latency(p);
                if t > self.tau {
                    return None;
                }
                worst = worst.max(t);
            }
            return Some(worst);
        }
        let free_units: u64 = self.gpus.iter().map(|g| (QUOTA_SCALE - g.units) as u64).sum();
        let free_memory: f64 = self.gpus.iter().map(|g| self.cluster.memory_capacity - g.memory).sum();
        if free_units < self.rest_units[pos] || free_memory < self.rest_memory[pos] - 1e-6 {
            return None;
        }
        for k in 0..self.allowed[pos].len() {
            let opt = self.allowed[pos][k];
            let cand = *self.option(pos, opt);
            let units = cand.option.sm_quota.units();
            let d = cand.option.dp_degree as usize;
            // Eligible GPUs grouped by identical state; equal-state GPUs are
            // interchangeable, so only prefixes of each class are tried.
            let mut classes: Vec<Vec<usize>> = Vec::new();
            for g in 0..self.gpus.len() {
                let s = &self.gpus[g];
                if s.units + units > QUOTA_SCALE || s.memory + cand.memory > self.cluster.memory_capacity {
                    continue;
                }
                match classes.iter_mut().find(|c| self.gpus[c[0]].residents == s.residents) {
                    Some(c) => c.push(g),
                    None => classes.push(vec![g]),
                }
            }
            let eligible: usize = classes.iter().map(Vec::len).sum();
            if eligible < d {
                continue;
            }
            let mut counts = vec![0usize; classes.len()];
            if let Some(t) = self.choose(pos, opt, &classes, &mut counts, 0, d) {
                return Some(t);
            }
            if self.aborted {
                return None;
            }
        }
        None
    }

    fn choose(
        &mut self,
        pos: usize,
        opt: usize,
        classes: &[Vec<usize>],
        counts: &mut Vec<usize>,
        class: usize,
        remaining: usize,
    ) -> Option<f64> {
        if remaining == 0 {
            let gpus: Vec<usize> = classes
                .iter()
                .zip(counts.iter())
                .flat_map(|(c, &n)| c[..n].iter().copied())
                .collect();
            return self.place(pos, opt, gpus);
        }
        if class == classes.len() {
            return None;
        }
        let capacity_after: usize = classes[class + 1..].iter().map(Vec::len).sum();
        let max = remaining.min(classes[class].len());
        let min = remaining.saturating_sub(capacity_after);
        for n in (min..=max).rev() {
            counts[class] = n;
            if let Some(t) = self.choose(pos, opt, classes, counts, class + 1, remaining - n) {
                return Some(t);
            }
            if self.aborted {
                break;
            }
        }
        counts[class] = 0;
        None
    }

    fn place(&mut self, pos: usize, opt: usize, gpus: Vec<usize>) -> Option<f64> {
        self.nodes += 1;
        if self.nodes > self.node_limit {
            self.aborted = true;
            return None;
        }
        let cand = *self.option(pos, opt);
        for &g in &gpus {
            let s = &mut self.gpus[g];
            s.units += cand.option.sm_quota.units();
            s.memory += cand.memory;
            s.residents.push((pos, opt));
        }
        self.chosen.push((opt, gpus.clone()));

        let mut ok = true;
        if self.bounded {
            'check: for &g in &gpus {
                for &(p, o) in &self.gpus[g].residents {
                    let lb = self.option(p, o).base_latency + self.delay_lower_bound(g, p, pos);
                    if lb > self.tau {
                        ok = false;
                        break 'check;
                    }
                }
            }
        }
        let result = if ok { self.descend(pos + 1) } else { None };

        if result.is_none() {
            self.chosen.pop();
            for &g in &gpus {
                let s = &mut self.gpus[g];
                s.units -= cand.option.sm_quota.units();
                s.memory -= cand.memory;
                s.residents.pop();
            }
        }
        result
    }
}

/// Drops options for which another option with the same dp degree is no
/// worse in quota, memory, base latency and bandwidth utilization. Swapping
/// in the dominating option never hurts any module when coefficients are
/// non-negative.
fn undominated(table: &[CandidateOption], allowed: &[usize]) -> Vec<usize> {
    let no_worse = |x: &CandidateOption, y: &CandidateOption| {
        x.option.dp_degree == y.option.dp_degree
            && x.option.sm_quota <= y.option.sm_quota
            && x.memory <= y.memory
            && x.base_latency <= y.base_latency
            && x.bandwidth_util <= y.bandwidth_util
    };
    allowed
        .iter()
        .copied()
        .filter(|&o| {
            !allowed.iter().any(|&p| {
                p != o && no_worse(&table[p], &table[o]) && (!no_worse(&table[o], &table[p]) || p < o)
            })
        })
        .collect()
}

/// Outcome of one budgeted feasibility probe.
#[derive(Debug, Clone, PartialEq)]
pub enum Probe {
    Feasible(Feasible),
    Infeasible,
    /// The node budget ran out before an answer was found.
    Exhausted,
}

/// Searches for an assignment of the stage's modules where every module's
/// rectified latency is at most `tau`, without a node budget.
pub fn feasible(ctx: &StageContext, set: ModuleSet, tau: f64, stats: &mut SearchStats) -> Option<Feasible> {
    match probe(ctx, set, tau, u64::MAX, stats) {
        Probe::Feasible(f) => Some(f),
        _ => None,
    }
}

/// [`feasible`] with at most `node_limit` nodes per module ordering. Two
/// orderings are tried in turn: fail-first (fewest options) and
/// largest-footprint-first.
pub fn probe(ctx: &StageContext, set: ModuleSet, tau: f64, node_limit: u64, stats: &mut SearchStats) -> Probe {
    stats.feasibility_calls += 1;
    let model = *ctx.perf.interference();
    let include_self = ctx.perf.include_self();
    let bounded = !model.has_negative_coefficient();

    // Options that can meet tau under any colocation.
    let mut entries: Vec<(usize, Vec<usize>)> = Vec::new();
    for m in set.iter() {
        let table = &ctx.tables[m];
        let mut allowed: Vec<usize> = (0..table.len())
            .filter(|&o| {
                if !bounded {
                    return true;
                }
                let c = &table[o];
                let own = if include_self { c.bandwidth_util } else { 0.0 };
                c.base_latency + model.e1 + model.e2 * own <= tau
            })
            .collect();
        if allowed.is_empty() {
            return Probe::Infeasible;
        }
        if bounded {
            allowed = undominated(table, &allowed);
        }
        allowed.sort_by(|&x, &y| {
            let (cx, cy) = (&table[x], &table[y]);
            cx.footprint_units()
                .cmp(&cy.footprint_units())
                .then(cx.base_latency.total_cmp(&cy.base_latency))
                .then(x.cmp(&y))
        });
        entries.push((m, allowed));
    }
    let min_units = |e: &(usize, Vec<usize>)| e.1.iter().map(|&o| ctx.tables[e.0][o].footprint_units()).min().unwrap();
    let mut fail_first = entries.clone();
    fail_first.sort_by(|a, b| a.1.len().cmp(&b.1.len()).then(a.0.cmp(&b.0)));
    let mut largest_first = entries;
    largest_first.sort_by(|a, b| min_units(b).cmp(&min_units(a)).then(a.1.len().cmp(&b.1.len())).then(a.0.cmp(&b.0)));

    for order in [fail_first, largest_first] {
        match search_in_order(ctx, order, tau, bounded, node_limit, stats) {
            Some(Probe::Exhausted) => continue,
            Some(p) => return p,
            None => return Probe::Infeasible,
        }
    }
    stats.truncated += 1;
    Probe::Exhausted
}

fn search_in_order(
    ctx: &StageContext,
    entries: Vec<(usize, Vec<usize>)>,
    tau: f64,
    bounded: bool,
    node_limit: u64,
    stats: &mut SearchStats,
) -> Option<Probe> {
    let n = entries.len();
    let modules: Vec<usize> = entries.iter().map(|e| e.0).collect();
    let tables: Vec<&[CandidateOption]> = modules.iter().map(|&m| ctx.tables[m].as_slice()).collect();
    let mut rest_units = vec![0u64; n + 1];
    let mut rest_memory = vec![0f64; n + 1];
    let mut rest_min_b = vec![1f64; n + 2];
    for pos in (0..n).rev() {
        let opts = &entries[pos].1;
        let table = tables[pos];
        rest_units[pos] = rest_units[pos + 1] + opts.iter().map(|&o| table[o].footprint_units()).min().unwrap();
        rest_memory[pos] = rest_memory[pos + 1]
            + opts
                .iter()
                .map(|&o| table[o].memory * table[o].option.dp_degree as f64)
                .fold(f64::INFINITY, f64::min);
        let min_b = opts.iter().map(|&o| table[o].bandwidth_util).fold(1.0, f64::min);
        rest_min_b[pos] = rest_min_b[pos + 1] * min_b;
    }
    let mut search = Search {
        tau,
        model: *ctx.perf.interference(),
        include_self: ctx.perf.include_self(),
        bounded,
        cluster: ctx.cluster,
        modules,
        tables,
        allowed: entries.into_iter().map(|e| e.1).collect(),
        rest_units,
        rest_memory,
        rest_min_b,
        gpus: vec![GpuState::default(); ctx.cluster.gpu_count],
        chosen: Vec::with_capacity(n),
        nodes: 0,
        node_limit,
        aborted: false,
    };
    let found = search.run();
    stats.nodes += search.nodes.min(node_limit);
    match found {
        Some(max_latency) => Some(Probe::Feasible(Feasible {
            placements: search
                .modules
                .iter()
                .zip(search.chosen)
                .map(|(&module, (option, gpus))| Placement { module, option, gpus })
                .collect(),
            max_latency,
        })),
        None if search.aborted => Some(Probe::Exhausted),
        None => None,
    }
}

/// Max rectified latency of a complete set of placements.
fn placements_max_latency(ctx: &StageContext, placements: &[Placement]) -> f64 {
    let model = ctx.perf.interference();
    let mut residents: Vec<Vec<usize>> = vec![Vec::new(); ctx.cluster.gpu_count];
    for (k, p) in placements.iter().enumerate() {
        for &g in &p.gpus {
            residents[g].push(k);
        }
    }
    placements
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let worst = p
                .gpus
                .iter()
                .map(|&g| {
                    let bs: Vec<f64> = residents[g]
                        .iter()
                        .filter(|&&j| ctx.perf.include_self() || j != k)
                        .map(|&j| ctx.tables[placements[j].module][placements[j].option].bandwidth_util)
                        .collect();
                    model.delay(&bs)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            ctx.tables[p.module][p.option].base_latency + worst
        })
        .fold(0.0, f64::max)
}

/// Raises quotas, module by module, into SM capacity left idle on each
/// module's GPUs, keeping the stage's max latency within `limit`.
fn fill_spare_quota(ctx: &StageContext, placements: &mut [Placement], limit: f64) {
    let mut order: Vec<usize> = (0..placements.len()).collect();
    order.sort_by_key(|&k| placements[k].module);
    for k in order {
        let table = &ctx.tables[placements[k].module];
        let current = table[placements[k].option];
        let mut units = vec![0u32; ctx.cluster.gpu_count];
        let mut memory = vec![0f64; ctx.cluster.gpu_count];
        for (j, p) in placements.iter().enumerate() {
            if j == k {
                continue;
            }
            let c = &ctx.tables[p.module][p.option];
            for &g in &p.gpus {
                units[g] += c.option.sm_quota.units();
                memory[g] += c.memory;
            }
        }
        let mut larger: Vec<usize> = (0..table.len())
            .filter(|&o| {
                let c = &table[o];
                c.option.dp_degree == current.option.dp_degree && c.option.sm_quota > current.option.sm_quota
            })
            .collect();
        larger.sort_by(|&x, &y| table[y].option.sm_quota.cmp(&table[x].option.sm_quota));
        for o in larger {
            let c = &table[o];
            let fits = placements[k].gpus.iter().all(|&g| {
                units[g] + c.option.sm_quota.units() <= QUOTA_SCALE && memory[g] + c.memory <= ctx.cluster.memory_capacity
            });
            if !fits {
                continue;
            }
            let previous = placements[k].option;
            placements[k].option = o;
            if placements_max_latency(ctx, placements) <= limit {
                break;
            }
            placements[k].option = previous;
        }
    }
}

fn to_allocation(ctx: &StageContext, f: &Feasible) -> StageAllocation {
    let mut placements = f.placements.clone();
    placements.sort_by_key(|p| p.module);
    StageAllocation {
        assignments: placements
            .into_iter()
            .map(|p| {
                let c = &ctx.tables[p.module][p.option];
                let mut gpus = p.gpus;
                gpus.sort_unstable();
                ModuleAssignment {
                    module: ctx.dag.id(p.module).to_string(),
                    option: c.option,
                    gpus,
                    memory_bytes: c.memory,
                }
            })
            .collect(),
    }
}

/// Lower bound on the stage time of `set` for non-negative coefficients.
///
/// Each module pays at least its own share of the contention term: with
/// self-inclusion a co-resident set always contains the module, and the
/// product can shrink by at most the other modules' smallest `B`.
pub fn stage_lower_bound(
    set: ModuleSet,
    tables: &[Vec<CandidateOption>],
    model: &InterferenceModel,
    include_self: bool,
) -> f64 {
    let min_b: Vec<f64> = set
        .iter()
        .map(|m| tables[m].iter().map(|c| c.bandwidth_util).fold(1.0, f64::min))
        .collect();
    set.iter()
        .enumerate()
        .map(|(i, m)| {
            let others: f64 = min_b.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, b)| b).product();
            tables[m]
                .iter()
                .map(|c| {
                    let own = if include_self {
                        model.e2 * c.bandwidth_util + model.e3 * c.bandwidth_util.min(1.0) * others
                    } else {
                        0.0
                    };
                    c.base_latency + model.e1 + own
                })
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Minimal stage time of `set` and an allocation achieving it.
pub fn stage_eval(ctx: &StageContext, set: ModuleSet, config: &SearchConfig) -> Result<StageEvalResult, StageEvalError> {
    let start = Instant::now();
    let mut stats = SearchStats::default();
    let model = *ctx.perf.interference();
    let include_self = ctx.perf.include_self();
    for m in set.iter() {
        if ctx.tables[m].is_empty() {
            return Err(StageEvalError::ModuleInfeasible(ctx.dag.id(m).to_string()));
        }
    }

    let Some(mut best) = feasible(ctx, set, f64::INFINITY, &mut stats) else {
        return Err(StageEvalError::Unpackable(ctx.dag.ids_of(set).join(",")));
    };
    let mut hi = best.max_latency;
    // Largest target known to be infeasible.
    let mut lo = 0.0f64;
    if !model.has_negative_coefficient() {
        lo = stage_lower_bound(set, ctx.tables, &model, include_self) * (1.0 - 1e-12);
    }

    // Discrete phase: solo rectified latencies of every option.
    let mut candidates: Vec<f64> = set
        .iter()
        .flat_map(|m| ctx.tables[m].iter())
        .map(|c| {
            let own: &[f64] = if include_self { std::slice::from_ref(&c.bandwidth_util) } else { &[] };
            c.base_latency + model.delay(own)
        })
        .filter(|&t| t > lo && t < hi)
        .collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let (mut i, mut j) = (0usize, candidates.len());
    while i < j {
        let mid = (i + j) / 2;
        let tau = candidates[mid];
        if tau >= hi {
            j = mid;
            continue;
        }
        match probe(ctx, set, tau, config.node_limit, &mut stats) {
            Probe::Feasible(f) => {
                hi = f.max_latency;
                best = f;
                j = mid;
            }
            // An exhausted probe is treated as infeasible; the answer stays a
            // valid allocation but may not be minimal (see stats.truncated).
            Probe::Infeasible | Probe::Exhausted => {
                lo = lo.max(tau);
                i = mid + 1;
            }
        }
    }

    // Continuous phase.
    while hi - lo > config.tolerance * hi {
        let tau = 0.5 * (lo + hi);
        match probe(ctx, set, tau, config.node_limit, &mut stats) {
            Probe::Feasible(f) => {
                hi = f.max_latency;
                best = f;
            }
            Probe::Infeasible | Probe::Exhausted => lo = tau,
        }
    }

    // Exact tightening: stop once nothing strictly better than `hi` exists.
    loop {
        let tau = hi * (1.0 - 1e-12);
        if tau <= lo {
            break;
        }
        match probe(ctx, set, tau, config.node_limit, &mut stats) {
            Probe::Feasible(f) if f.max_latency < hi => {
                hi = f.max_latency;
                best = f;
            }
            Probe::Feasible(_) => {
                return Err(StageEvalError::InvariantViolated(format!(
                    "feasible answer at {tau} does not improve on {hi}"
                )))
            }
            Probe::Infeasible | Probe::Exhausted => break,
        }
    }

    if config.verify && probe(ctx, set, hi * 1.1, config.node_limit, &mut stats) == Probe::Infeasible {
        return Err(StageEvalError::InvariantViolated(format!(
            "feasible at {hi} but not at {}",
            hi * 1.1
        )));
    }

    if config.fill_spare {
        fill_spare_quota(ctx, &mut best.placements, hi);
        best.max_latency = placements_max_latency(ctx, &best.placements);
    }
    let allocation = to_allocation(ctx, &best);
    let stage_time = ctx.perf.stage_time(&allocation)?;
    if (stage_time - best.max_latency).abs() > 1e-9 * stage_time.max(1.0) || stage_time > hi * (1.0 + 1e-12) {
        return Err(StageEvalError::InvariantViolated(format!(
            "re-evaluated stage time {stage_time} differs from search value {}",
            best.max_latency
        )));
    }
    stats.elapsed = start.elapsed();
    Ok(StageEvalResult { stage_time, allocation, stats })
}
