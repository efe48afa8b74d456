use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ConnectivityError, ProjectionProfile};
use crate::rnn::Arch;

/// How edges were selected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeCriterion {
    /// `|z| > threshold`.
    ZThreshold(f64),
    /// The `k` largest-magnitude raw weights.
    TopK(usize),
}

/// Directed projection `source → target` into one of the two analyzed gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    /// 0 = input (GRU: update), 1 = forget (GRU: reset).
    pub gate: usize,
    pub weight: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionGraph {
    pub arch: Arch,
    pub n_nodes: usize,
    pub criterion: EdgeCriterion,
    pub edges: Vec<Edge>,
    /// Edge count per source unit.
    pub out_degree: Vec<usize>,
}

pub fn gate_label(arch: Arch, gate: usize) -> &'static str {
    match (arch, gate) {
        (Arch::Lstm, 0) => "input",
        (Arch::Lstm, _) => "forget",
        (Arch::Gru, 0) => "update",
        (Arch::Gru, _) => "reset",
    }
}

impl ProjectionGraph {
    fn from_edges(arch: Arch, n_nodes: usize, criterion: EdgeCriterion, edges: Vec<Edge>) -> Self {
        let mut out_degree = vec![0; n_nodes];
        for e in &edges {
            out_degree[e.source] += 1;
        }
        Self {
            arch,
            n_nodes,
            criterion,
            edges,
            out_degree,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Undirected neighbour sets; self-loops and duplicate pairs collapse.
    pub fn neighbours(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.n_nodes];
        for e in &self.edges {
            if e.source != e.target {
                adj[e.source].insert(e.target);
                adj[e.target].insert(e.source);
            }
        }
        adj
    }
}

fn entry(p: &ProjectionProfile, j: usize, hidden: usize) -> Edge {
    Edge {
        source: p.unit,
        target: j % hidden,
        gate: j / hidden,
        weight: p.raw[j],
        z: p.z[j],
    }
}

fn arch_and_hidden(profiles: &[ProjectionProfile]) -> (Arch, usize) {
    let arch = profiles.first().map_or(Arch::Lstm, |p| p.arch);
    (arch, profiles.len())
}

/// Every profile entry with `|z| > z_thresh`, ordered by (source, gate, target).
pub fn strong_projections(profiles: &[ProjectionProfile], z_thresh: f64) -> ProjectionGraph {
    let (arch, n) = arch_and_hidden(profiles);
    let edges = profiles
        .iter()
        .flat_map(|p| {
            (0..p.raw.len())
                .filter(|&j| p.z[j].abs() > z_thresh)
                .map(move |j| entry(p, j, n))
        })
        .collect();
    ProjectionGraph::from_edges(arch, n, EdgeCriterion::ZThreshold(z_thresh), edges)
}

/// The `k` largest-magnitude raw weights of the combined gate matrices. Ties
/// are broken by `(source, target, gate)` ascending.
pub fn binarized_top_k_graph(profiles: &[ProjectionProfile], k: usize) -> Result<ProjectionGraph, ConnectivityError> {
    let (arch, n) = arch_and_hidden(profiles);
    let total = n * 2 * n;
    if k == 0 || k > total {
        return Err(ConnectivityError::InvalidK { k, max: total });
    }
    let mut all: Vec<Edge> = profiles
        .iter()
        .flat_map(|p| (0..p.raw.len()).map(move |j| entry(p, j, n)))
        .collect();
    all.sort_by(|a, b| {
        b.weight
            .abs()
            .total_cmp(&a.weight.abs())
            .then((a.source, a.target, a.gate).cmp(&(b.source, b.target, b.gate)))
    });
    all.truncate(k);
    all.sort_by_key(|e| (e.source, e.gate, e.target));
    Ok(ProjectionGraph::from_edges(arch, n, EdgeCriterion::TopK(k), all))
}

/// Core decomposition of the symmetrized graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreAssignment {
    pub core: Vec<usize>,
    pub k_max: usize,
    /// Nodes with core number `k_max`; empty when the graph has no edges.
    pub main_core: Vec<usize>,
}

/// Batagelj–Zaversnik bucket peeling on undirected neighbour sets.
pub fn core_numbers(adj: &[BTreeSet<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut deg: Vec<usize> = adj.iter().map(BTreeSet::len).collect();
    let max_deg = deg.iter().copied().max().unwrap_or(0);
    let mut bin = vec![0usize; max_deg + 1];
    for &d in &deg {
        bin[d] += 1;
    }
    let mut start = 0;
    for b in bin.iter_mut() {
        let count = *b;
        *b = start;
        start += count;
    }
    let mut pos = vec![0usize; n];
    let mut vert = vec![0usize; n];
    for v in 0..n {
        pos[v] = bin[deg[v]];
        vert[pos[v]] = v;
        bin[deg[v]] += 1;
    }
    for d in (1..=max_deg).rev() {
        bin[d] = bin[d - 1];
    }
    bin[0] = 0;
    for i in 0..n {
        let v = vert[i];
        for &u in &adj[v] {
            if deg[u] > deg[v] {
                let du = deg[u];
                let pu = pos[u];
                let pw = bin[du];
                let w = vert[pw];
                if u != w {
                    pos[u] = pw;
                    vert[pu] = w;
                    pos[w] = pu;
                    vert[pw] = u;
                }
                bin[du] += 1;
                deg[u] -= 1;
            }
        }
    }
    deg
}

pub fn k_core(graph: &ProjectionGraph) -> CoreAssignment {
    let core = core_numbers(&graph.neighbours());
    let k_max = core.iter().copied().max().unwrap_or(0);
    let main_core = if k_max == 0 {
        Vec::new()
    } else {
        (0..core.len()).filter(|&v| core[v] == k_max).collect()
    };
    CoreAssignment { core, k_max, main_core }
}

/// Controller units: members of the main core.
pub fn identify_controllers(core: &CoreAssignment) -> Vec<usize> {
    core.main_core.clone()
}
