#![allow(dead_code)]

use mosaic_core::graph::{Dag, ModuleSet};
use mosaic_core::instance::{random_instance, Instance, RandomInstanceConfig};
use mosaic_core::quota::Granularity;

pub fn instance(modules: usize, gpus: usize, seed: u64) -> Instance {
    random_instance(&RandomInstanceConfig { modules, gpus, edge_probability: 0.3 }, seed)
}

pub fn granularity(g: f64) -> Granularity {
    Granularity::new(g).unwrap()
}

/// Stage index of every module, or `None` if a module is missing or repeated.
pub fn positions(dag: &Dag, stages: &[ModuleSet]) -> Option<Vec<usize>> {
    let mut pos = vec![usize::MAX; dag.len()];
    for (k, s) in stages.iter().enumerate() {
        for i in s.iter() {
            if pos[i] != usize::MAX {
                return None;
            }
            pos[i] = k;
        }
    }
    pos.iter().all(|&p| p != usize::MAX).then_some(pos)
}

/// Every module appears once and every edge points to a strictly later stage.
pub fn order_ok(dag: &Dag, stages: &[ModuleSet]) -> bool {
    match positions(dag, stages) {
        Some(pos) => dag.edges().iter().all(|&(u, v)| pos[u] < pos[v]),
        None => false,
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}
