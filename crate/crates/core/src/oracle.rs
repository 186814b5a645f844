//! Exhaustive ground truth for small instances.
//!
//! Enumerates every dependency-legal ordered stage partition and, for each
//! distinct stage, every option and canonical GPU placement.

use crate::cluster::ClusterSpec;
use crate::graph::{Dag, ModuleSet};
use crate::perf::PerfModel;
use crate::plan::{DeploymentOption, DeploymentPlan, ModuleAssignment, StageAllocation};
use crate::quota::{Granularity, QUOTA_SCALE};
use crate::surface::LookupError;
use rayon::prelude::*;
use std::collections::BTreeMap;
use thiserror::Error;

pub const ORACLE_MAX_MODULES: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("oracle supports at most {ORACLE_MAX_MODULES} modules, got {0}")]
    TooLarge(usize),
    #[error("no partition admits a feasible allocation")]
    NoFeasiblePlan,
    #[error(transparent)]
    Lookup(#[from] LookupError),
}

/// Every ordered partition of the modules where each edge points to a
/// strictly later stage.
pub fn enumerate_partitions(dag: &Dag) -> Result<Vec<Vec<ModuleSet>>, OracleError> {
    if dag.len() > ORACLE_MAX_MODULES {
        return Err(OracleError::TooLarge(dag.len()));
    }
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    extend(dag, ModuleSet::EMPTY, &mut prefix, &mut out);
    Ok(out)
}

fn extend(dag: &Dag, placed: ModuleSet, prefix: &mut Vec<ModuleSet>, out: &mut Vec<Vec<ModuleSet>>) {
    if placed == dag.all() {
        out.push(prefix.clone());
        return;
    }
    let ready = (0..dag.len())
        .filter(|&m| !placed.contains(m) && dag.preds(m).is_subset(placed))
        .fold(ModuleSet::EMPTY, |s, m| s.union(ModuleSet::singleton(m)));
    // non-empty submasks of `ready`, ascending
    let mut sub = 0u64;
    loop {
        sub = (sub.wrapping_sub(ready.0)) & ready.0;
        if sub == 0 {
            break;
        }
        prefix.push(ModuleSet(sub));
        extend(dag, placed.union(ModuleSet(sub)), prefix, out);
        prefix.pop();
    }
}

#[derive(Debug, Clone, Copy)]
struct Opt {
    option: DeploymentOption,
    latency: f64,
    b: f64,
    memory: f64,
}

fn module_options(dag: &Dag, m: usize, perf: &PerfModel, cluster: &ClusterSpec, g: Granularity) -> Result<Vec<Opt>, LookupError> {
    let surface = perf.surface(dag.id(m))?;
    let mut out = Vec::new();
    for &d in surface.d_values().iter().filter(|&&d| d as usize <= cluster.gpu_count) {
        for q in g.levels() {
            if !surface.contains(d, q.fraction()) {
                continue;
            }
            let est = surface.lookup(d, q.fraction())?;
            let memory = est.memory + dag.module(m).memory_base;
            if memory <= cluster.memory_capacity {
                out.push(Opt { option: DeploymentOption::new(d, q), latency: est.latency, b: est.bandwidth_util, memory });
            }
        }
    }
    Ok(out)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// `(option index, GPUs)` of one module.
type Choice = (usize, Vec<usize>);

struct Enumerator<'a> {
    perf: &'a PerfModel,
    cluster: &'a ClusterSpec,
    options: Vec<Vec<Opt>>,
    combos: BTreeMap<usize, Vec<Vec<usize>>>,
    units: Vec<u32>,
    memory: Vec<f64>,
    residents: Vec<Vec<(usize, usize)>>,
    chosen: Vec<Choice>,
    best: Option<(f64, Vec<Choice>)>,
}

impl Enumerator<'_> {
    fn latency(&self, pos: usize) -> f64 {
        let model = self.perf.interference();
        let (o, gpus) = &self.chosen[pos];
        let worst = gpus
            .iter()
            .map(|&g| {
                let bs: Vec<f64> = self.residents[g]
                    .iter()
                    .filter(|&&(p, _)| self.perf.include_self() || p != pos)
                    .map(|&(p, q)| self.options[p][q].b)
                    .collect();
                model.delay(&bs)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        self.options[pos][*o].latency + worst
    }

    fn run(&mut self, pos: usize) {
        if pos == self.options.len() {
            let t = (0..pos).map(|p| self.latency(p)).fold(0.0, f64::max);
            if self.best.as_ref().is_none_or(|b| t < b.0) {
                self.best = Some((t, self.chosen.clone()));
            }
            return;
        }
        let model = *self.perf.interference();
        let skip_dominated = !model.has_negative_coefficient();
        for o in 0..self.options[pos].len() {
            let opt = self.options[pos][o];
            if skip_dominated && self.best.as_ref().is_some_and(|b| opt.latency + model.e1 >= b.0) {
                continue;
            }
            let units = opt.option.sm_quota.units();
            for k in 0..self.combos[&(opt.option.dp_degree as usize)].len() {
                let gpus = self.combos[&(opt.option.dp_degree as usize)][k].clone();
                let fits = gpus.iter().all(|&g| {
                    self.units[g] + units <= QUOTA_SCALE && self.memory[g] + opt.memory <= self.cluster.memory_capacity
                });
                // canonical: never skip over an equal-state GPU with a lower index
                let canonical = gpus.iter().all(|&j| {
                    (0..j).all(|i| gpus.contains(&i) || self.residents[i] != self.residents[j])
                });
                if !fits || !canonical {
                    continue;
                }
                for &g in &gpus {
                    self.units[g] += units;
                    self.memory[g] += opt.memory;
                    self.residents[g].push((pos, o));
                }
                self.chosen.push((o, gpus.clone()));
                self.run(pos + 1);
                self.chosen.pop();
                for &g in &gpus {
                    self.units[g] -= units;
                    self.memory[g] -= opt.memory;
                    self.residents[g].pop();
                }
            }
        }
    }
}

/// Exhaustive minimum stage time of `set`, or `None` when it cannot be packed.
pub fn stage_optimum(
    dag: &Dag,
    set: ModuleSet,
    cluster: &ClusterSpec,
    perf: &PerfModel,
    g: Granularity,
) -> Result<Option<(f64, StageAllocation)>, OracleError> {
    let modules = set.indices();
    let options = modules
        .iter()
        .map(|&m| module_options(dag, m, perf, cluster, g))
        .collect::<Result<Vec<_>, _>>()?;
    let combos = (1..=cluster.gpu_count).map(|d| (d, combinations(cluster.gpu_count, d))).collect();
    let mut e = Enumerator {
        perf,
        cluster,
        options,
        combos,
        units: vec![0; cluster.gpu_count],
        memory: vec![0.0; cluster.gpu_count],
        residents: vec![Vec::new(); cluster.gpu_count],
        chosen: Vec::new(),
        best: None,
    };
    e.run(0);
    Ok(e.best.map(|(t, chosen)| {
        let assignments = modules
            .iter()
            .zip(chosen)
            .enumerate()
            .map(|(p, (&m, (o, gpus)))| {
                let opt = e.options[p][o];
                ModuleAssignment { module: dag.id(m).to_string(), option: opt.option, gpus, memory_bytes: opt.memory }
            })
            .collect();
        (t, StageAllocation { assignments })
    }))
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub plan: DeploymentPlan,
    pub partitions: usize,
    pub stages_solved: usize,
}

/// The minimum-iteration-time plan over all partitions and allocations.
///
/// Ties go to fewer stages, then to the lexicographically smaller list of
/// stage bitmasks.
pub fn brute_force_optimum(
    dag: &Dag,
    cluster: &ClusterSpec,
    perf: &PerfModel,
    g: Granularity,
) -> Result<OracleResult, OracleError> {
    let partitions = enumerate_partitions(dag)?;
    let mut sets: Vec<ModuleSet> = partitions.iter().flatten().copied().collect();
    sets.sort_by_key(|s| s.0);
    sets.dedup();
    let solved = sets
        .par_iter()
        .map(|&s| stage_optimum(dag, s, cluster, perf, g).map(|r| (s.0, r)))
        .collect::<Result<BTreeMap<_, _>, _>>()?;

    let mut best: Option<(f64, &Vec<ModuleSet>)> = None;
    for p in &partitions {
        let mut total = 0.0;
        let mut ok = true;
        for s in p {
            match &solved[&s.0] {
                Some((t, _)) => total += t,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let better = match &best {
            None => true,
            Some((bt, bp)) => {
                total < *bt
                    || (total == *bt
                        && (p.len(), p.iter().map(|s| s.0).collect::<Vec<_>>())
                            < (bp.len(), bp.iter().map(|s| s.0).collect::<Vec<_>>()))
            }
        };
        if better {
            best = Some((total, p));
        }
    }
    let (_, p) = best.ok_or(OracleError::NoFeasiblePlan)?;
    let (stages, times) = p
        .iter()
        .map(|s| {
            let (t, a) = solved[&s.0].clone().expect("feasible");
            (a, t)
        })
        .unzip();
    Ok(OracleResult { plan: DeploymentPlan::new(g, stages, times), partitions: partitions.len(), stages_solved: sets.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ModelGraph;
    use crate::interference::InterferenceModel;
    use crate::surface::{ScalingSurface, SurfacePoint};

    fn dag(ids: &[&str], edges: &[(&str, &str)]) -> Dag {
        Dag::new(&ModelGraph::from_ids(ids, edges)).unwrap()
    }

    /// Ordered Bell numbers by the recurrence a(n) = sum C(n,k) a(n-k).
    fn fubini(n: usize) -> usize {
        let mut a = vec![1usize; n + 1];
        for i in 1..=n {
            let mut c = 1usize;
            let mut s = 0;
            for k in 1..=i {
                c = c * (i - k + 1) / k;
                s += c * a[i - k];
            }
            a[i] = s;
        }
        a[n]
    }

    #[test]
    fn partition_counts() {
        let two = enumerate_partitions(&dag(&["a", "b"], &[])).unwrap();
        assert_eq!(two.len(), 3);
        assert_eq!(enumerate_partitions(&dag(&["a", "b"], &[("a", "b")])).unwrap().len(), 1);
        assert_eq!(fubini(3), 13);
        for n in 1..=5 {
            let ids: Vec<String> = (0..n).map(|i| format!("m{i}")).collect();
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            assert_eq!(enumerate_partitions(&dag(&refs, &[])).unwrap().len(), fubini(n));
        }
    }

    #[test]
    fn too_large_is_rejected() {
        let ids: Vec<String> = (0..9).map(|i| format!("m{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        assert_eq!(enumerate_partitions(&dag(&refs, &[])), Err(OracleError::TooLarge(9)));
    }

    fn power_surface(id: &str, l1: f64, p: f64) -> ScalingSurface {
        let pts = (1..=10)
            .map(|k| {
                let a = k as f64 / 10.0;
                SurfacePoint { d: 1, a, latency: l1 / a.powf(p), bandwidth_util: 0.0, memory: 1e9 }
            })
            .collect();
        ScalingSurface::from_points(id, pts).unwrap()
    }

    #[test]
    fn colocation_wins_when_quota_scaling_is_sublinear() {
        // 1/sqrt(a): sharing at 0.5 each costs sqrt(2) < 2
        let d = dag(&["x", "y"], &[]);
        let perf = PerfModel::new([power_surface("x", 1.0, 0.5), power_surface("y", 1.0, 0.5)], InterferenceModel::unaware());
        let r = brute_force_optimum(&d, &ClusterSpec::h100(1), &perf, Granularity::new(0.5).unwrap()).unwrap();
        assert_eq!(r.plan.stages.len(), 1);
        assert!((r.plan.predicted_iteration_time - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.partitions, 3);
    }

    #[test]
    fn single_module_is_its_best_option() {
        let d = dag(&["m"], &[]);
        let model = InterferenceModel::new(0.01, 0.1, 0.2);
        let perf = PerfModel::new([power_surface("m", 1.0, 1.0)], model);
        let r = brute_force_optimum(&d, &ClusterSpec::h100(1), &perf, Granularity::new(0.25).unwrap()).unwrap();
        assert!((r.plan.predicted_iteration_time - (1.0 + 0.01)).abs() < 1e-12);
    }
}
