//! The model DAG: modules, dependency edges, and module-index bitmasks.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// Upper bound on modules per graph; stage sets are `u64` bitmasks.
pub const MAX_MODULES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub id: String,
    #[serde(default)]
    pub name: String,
    /// Parameter and optimizer-state bytes held regardless of SM quota.
    #[serde(default)]
    pub memory_base: f64,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl ModuleSpec {
    pub fn new(id: impl Into<String>) -> Self {
        let id = id.into();
        ModuleSpec { name: id.clone(), id, memory_base: 0.0, tags: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelGraph {
    pub modules: Vec<ModuleSpec>,
    /// `(upstream, downstream)` pairs.
    #[serde(default)]
    pub edges: Vec<(String, String)>,
}

impl ModelGraph {
    pub fn new(modules: Vec<ModuleSpec>, edges: Vec<(String, String)>) -> Self {
        ModelGraph { modules, edges }
    }

    /// Convenience constructor from bare ids and edges.
    pub fn from_ids(ids: &[&str], edges: &[(&str, &str)]) -> Self {
        ModelGraph {
            modules: ids.iter().map(|id| ModuleSpec::new(*id)).collect(),
            edges: edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("graph has no modules")]
    Empty,
    #[error("graph has {0} modules; at most {MAX_MODULES} are supported")]
    TooManyModules(usize),
    #[error("duplicate module id `{0}`")]
    DuplicateModule(String),
    #[error("module `{0}` has negative or non-finite memory_base")]
    InvalidMemory(String),
    #[error("edge references undefined module `{0}`")]
    DanglingEdge(String),
    #[error("self-edge on module `{0}`")]
    SelfEdge(String),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("dependency cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
}

/// A set of module indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModuleSet(pub u64);

impl ModuleSet {
    pub const EMPTY: ModuleSet = ModuleSet(0);

    pub fn singleton(i: usize) -> Self {
        ModuleSet(1u64 << i)
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        ModuleSet(indices.into_iter().fold(0u64, |acc, i| acc | (1u64 << i)))
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    pub fn union(self, other: ModuleSet) -> Self {
        ModuleSet(self.0 | other.0)
    }

    pub fn intersects(self, other: ModuleSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_subset(self, other: ModuleSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                return None;
            }
            let i = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            Some(i)
        })
    }

    pub fn indices(self) -> Vec<usize> {
        self.iter().collect()
    }
}

impl fmt::Display for ModuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, i) in self.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, "}}")
    }
}

/// A validated [`ModelGraph`] with modules indexed in lexicographic id order.
#[derive(Debug, Clone)]
pub struct Dag {
    modules: Vec<ModuleSpec>,
    index: BTreeMap<String, usize>,
    edges: Vec<(usize, usize)>,
    preds: Vec<ModuleSet>,
    succs: Vec<ModuleSet>,
    ancestors: Vec<ModuleSet>,
}

impl Dag {
    pub fn new(graph: &ModelGraph) -> Result<Self, GraphError> {
        if graph.modules.is_empty() {
            return Err(GraphError::Empty);
        }
        if graph.modules.len() > MAX_MODULES {
            return Err(GraphError::TooManyModules(graph.modules.len()));
        }
        let mut modules = graph.modules.clone();
        modules.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = BTreeMap::new();
        for (i, m) in modules.iter().enumerate() {
            if !(m.memory_base.is_finite() && m.memory_base >= 0.0) {
                return Err(GraphError::InvalidMemory(m.id.clone()));
            }
            if index.insert(m.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateModule(m.id.clone()));
            }
        }
        let n = modules.len();
        let mut seen = BTreeSet::new();
        let mut edges = Vec::with_capacity(graph.edges.len());
        let mut preds = vec![ModuleSet::EMPTY; n];
        let mut succs = vec![ModuleSet::EMPTY; n];
        for (up, down) in &graph.edges {
            let u = *index.get(up).ok_or_else(|| GraphError::DanglingEdge(up.clone()))?;
            let v = *index.get(down).ok_or_else(|| GraphError::DanglingEdge(down.clone()))?;
            if u == v {
                return Err(GraphError::SelfEdge(up.clone()));
            }
            if !seen.insert((u, v)) {
                return Err(GraphError::DuplicateEdge(up.clone(), down.clone()));
            }
            edges.push((u, v));
            preds[v] = preds[v].union(ModuleSet::singleton(u));
            succs[u] = succs[u].union(ModuleSet::singleton(v));
        }
        if let Some(cycle) = find_cycle(n, &succs) {
            return Err(GraphError::CycleDetected(
                cycle.into_iter().map(|i| modules[i].id.clone()).collect(),
            ));
        }
        let order = kahn_order(n, &preds);
        let mut ancestors = vec![ModuleSet::EMPTY; n];
        for &v in &order {
            let mut acc = preds[v];
            for u in preds[v].iter() {
                acc = acc.union(ancestors[u]);
            }
            ancestors[v] = acc;
        }
        Ok(Dag { modules, index, edges, preds, succs, ancestors })
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn modules(&self) -> &[ModuleSpec] {
        &self.modules
    }

    pub fn module(&self, i: usize) -> &ModuleSpec {
        &self.modules[i]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.modules[i].id
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn preds(&self, i: usize) -> ModuleSet {
        self.preds[i]
    }

    pub fn succs(&self, i: usize) -> ModuleSet {
        self.succs[i]
    }

    /// Transitive predecessors of `i`.
    pub fn ancestors(&self, i: usize) -> ModuleSet {
        self.ancestors[i]
    }

    pub fn all(&self) -> ModuleSet {
        if self.len() == 64 {
            ModuleSet(u64::MAX)
        } else {
            ModuleSet((1u64 << self.len()) - 1)
        }
    }

    /// Ids of the modules in `set`, in index (lexicographic) order.
    pub fn ids_of(&self, set: ModuleSet) -> Vec<String> {
        set.iter().map(|i| self.modules[i].id.clone()).collect()
    }

    /// Whether every edge points from an earlier to a strictly later stage.
    pub fn respects_order(&self, stages: &[ModuleSet]) -> bool {
        let mut position = vec![usize::MAX; self.len()];
        for (k, s) in stages.iter().enumerate() {
            for i in s.iter() {
                position[i] = k;
            }
        }
        self.edges.iter().all(|&(u, v)| position[u] < position[v])
    }

    /// Longest-path level of each module (0 for sources).
    pub fn levels(&self) -> Vec<usize> {
        let mut level = vec![0usize; self.len()];
        for v in kahn_order(self.len(), &self.preds) {
            level[v] = self.preds[v].iter().map(|u| level[u] + 1).max().unwrap_or(0);
        }
        level
    }
}

fn kahn_order(n: usize, preds: &[ModuleSet]) -> Vec<usize> {
    let mut placed = ModuleSet::EMPTY;
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let next = (0..n)
            .find(|&i| !placed.contains(i) && preds[i].is_subset(placed))
            .expect("graph is acyclic");
        placed = placed.union(ModuleSet::singleton(next));
        order.push(next);
    }
    order
}

fn find_cycle(n: usize, succs: &[ModuleSet]) -> Option<Vec<usize>> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color = vec![0u8; n];
    let mut stack: Vec<usize> = Vec::new();

    fn visit(
        u: usize,
        succs: &[ModuleSet],
        color: &mut [u8],
        stack: &mut Vec<usize>,
    ) -> Option<Vec<usize>> {
        color[u] = 1;
        stack.push(u);
        for v in succs[u].iter() {
            if color[v] == 1 {
                let start = stack.iter().position(|&x| x == v).unwrap();
                let mut cycle = stack[start..].to_vec();
                cycle.push(v);
                return Some(cycle);
            }
            if color[v] == 0 {
                if let Some(c) = visit(v, succs, color, stack) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        color[u] = 2;
        None
    }

    for s in 0..n {
        if color[s] == 0 {
            if let Some(c) = visit(s, succs, &mut color, &mut stack) {
                return Some(c);
            }
        }
    }
    None
}

pub fn validate_graph(graph: &ModelGraph) -> Result<(), GraphError> {
    Dag::new(graph).map(|_| ())
}

/// One stage per module in topological order, ties broken by module id.
pub fn topological_singleton_stages(dag: &Dag) -> Vec<ModuleSet> {
    kahn_order(dag.len(), &dag.preds).into_iter().map(ModuleSet::singleton).collect()
}
