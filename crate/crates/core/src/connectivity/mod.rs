//! Hidden-to-gate projection analysis: strong projections, k-core
//! controllers, MDS embedding and integrator units.

mod embed;
mod graph;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{mean, pearson_test, sample_std, Correlation, NumericsError};
use crate::rnn::{Arch, Weights};
use crate::timescale::UnitTimescale;

pub use embed::{identify_integrators, mds_embed, profile_distances, DistanceMetric, MdsEmbedding};
pub use graph::{
    binarized_top_k_graph, core_numbers, gate_label, identify_controllers, k_core, strong_projections, CoreAssignment,
    Edge, EdgeCriterion, ProjectionGraph,
};

#[derive(Debug, Error)]
pub enum ConnectivityError {
    #[error("layer {layer} does not exist (model has {n_layers})")]
    InvalidLayer { layer: usize, n_layers: usize },
    #[error("zero-variance projection profiles for units {0:?}")]
    ZeroVariance(Vec<usize>),
    #[error("K must be in 1..={max}, got {k}")]
    InvalidK { k: usize, max: usize },
    #[error("need at least 3 profiles, got {0}")]
    TooFewProfiles(usize),
    #[error("need at least 3 included units, got {0}")]
    TooFewUnits(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Standardization domain of the projection weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZScope {
    /// Each unit's row separately.
    PerUnit,
    /// All entries of the combined matrix.
    Global,
}

impl std::str::FromStr for ZScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_unit" => Ok(ZScope::PerUnit),
            "global" => Ok(ZScope::Global),
            other => Err(format!("unknown z-score scope `{other}` (expected per_unit|global)")),
        }
    }
}

/// Outgoing projections of one unit into the first two gates: row `i` of the
/// input (update) gate block followed by row `i` of the forget (reset) block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionProfile {
    pub unit: usize,
    pub arch: Arch,
    pub raw: Vec<f64>,
    pub z: Vec<f64>,
}

fn standardize(v: &[f64], m: f64, s: f64) -> Vec<f64> {
    v.iter().map(|x| (x - m) / s).collect()
}

/// Builds profiles from raw rows (row `i` belongs to unit `i`).
pub fn profiles_from_rows(
    arch: Arch,
    rows: Vec<Vec<f64>>,
    scope: ZScope,
) -> Result<Vec<ProjectionProfile>, ConnectivityError> {
    let z: Vec<Vec<f64>> = match scope {
        ZScope::PerUnit => {
            let bad: Vec<usize> = rows
                .iter()
                .enumerate()
                .filter(|(_, r)| !(r.len() >= 2 && sample_std(r) > 0.0))
                .map(|(i, _)| i)
                .collect();
            if !bad.is_empty() {
                return Err(ConnectivityError::ZeroVariance(bad));
            }
            rows.iter().map(|r| standardize(r, mean(r), sample_std(r))).collect()
        }
        ZScope::Global => {
            let all: Vec<f64> = rows.iter().flatten().copied().collect();
            let s = if all.len() >= 2 { sample_std(&all) } else { 0.0 };
            if !(s > 0.0) {
                return Err(ConnectivityError::ZeroVariance((0..rows.len()).collect()));
            }
            let m = mean(&all);
            rows.iter().map(|r| standardize(r, m, s)).collect()
        }
    };
    Ok(rows
        .into_iter()
        .zip(z)
        .enumerate()
        .map(|(unit, (raw, z))| ProjectionProfile { unit, arch, raw, z })
        .collect())
}

/// Profiles of every unit of `layer`.
pub fn projection_profiles(
    weights: &Weights,
    layer: usize,
    scope: ZScope,
) -> Result<Vec<ProjectionProfile>, ConnectivityError> {
    let lw = weights.layers.get(layer).ok_or(ConnectivityError::InvalidLayer {
        layer,
        n_layers: weights.layers.len(),
    })?;
    let (a, b) = (lw.w_gate(0), lw.w_gate(1));
    let rows = (0..lw.hidden)
        .map(|i| a.row(i).iter().chain(b.row(i).iter()).copied().collect())
        .collect();
    profiles_from_rows(lw.arch, rows, scope)
}

/// Pearson correlation of timescale and strong-projection out-degree over
/// included units.
pub fn timescale_degree_correlation(
    records: &[UnitTimescale],
    graph: &ProjectionGraph,
) -> Result<Correlation, ConnectivityError> {
    let (ts, deg): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter(|r| r.included && r.unit < graph.n_nodes)
        .map(|r| (r.timescale as f64, graph.out_degree[r.unit] as f64))
        .unzip();
    if ts.len() < 3 {
        return Err(ConnectivityError::TooFewUnits(ts.len()));
    }
    Ok(pearson_test(&ts, &deg)?)
}

/// One row of the plottable node table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRow {
    pub unit: usize,
    pub timescale: Option<usize>,
    pub degree: usize,
    pub core: usize,
    pub mds_x: f64,
    pub mds_y: f64,
    pub radius: f64,
    pub is_controller: bool,
    pub is_integrator: bool,
}

pub fn node_table(
    records: &[UnitTimescale],
    graph: &ProjectionGraph,
    core: &CoreAssignment,
    embedding: &MdsEmbedding,
    controllers: &[usize],
    integrators: &[usize],
) -> Vec<NodeRow> {
    embedding
        .units
        .iter()
        .enumerate()
        .map(|(i, &unit)| NodeRow {
            unit,
            timescale: records
                .iter()
                .find(|r| r.unit == unit && r.included)
                .map(|r| r.timescale),
            degree: graph.out_degree.get(unit).copied().unwrap_or(0),
            core: core.core.get(unit).copied().unwrap_or(0),
            mds_x: embedding.coords[i][0],
            mds_y: embedding.coords[i][1],
            radius: embedding.radius[i],
            is_controller: controllers.contains(&unit),
            is_integrator: integrators.contains(&unit),
        })
        .collect()
}

/// `source,target,gate,weight,z`
pub fn write_edges_csv<W: Write>(graph: &ProjectionGraph, mut out: W) -> std::io::Result<()> {
    writeln!(out, "source,target,gate,weight,z")?;
    for e in &graph.edges {
        writeln!(
            out,
            "{},{},{},{:.9},{:.9}",
            e.source,
            e.target,
            gate_label(graph.arch, e.gate),
            e.weight,
            e.z
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenLevel;
    use crate::numerics::pairwise_euclidean;
    use crate::rnn::ModelConfig;
    use ndarray::Array2;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn toy_weights(arch: Arch, hidden: usize, seed: u64) -> Weights {
        let cfg = ModelConfig {
            arch,
            level: TokenLevel::Char,
            vocab_size: 5,
            embed_dim: 3,
            hidden: vec![hidden],
        };
        Weights::random(&cfg, 1.0, seed)
    }

    fn record(unit: usize, timescale: usize, included: bool) -> UnitTimescale {
        UnitTimescale {
            layer: 0,
            unit,
            timescale,
            included,
        }
    }

    fn graph_from_pairs(n: usize, pairs: &[(usize, usize)]) -> ProjectionGraph {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..2 * n)
                    .map(|j| if pairs.contains(&(i, j % n)) && j < n { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let profiles: Vec<ProjectionProfile> = rows
            .into_iter()
            .enumerate()
            .map(|(unit, raw)| ProjectionProfile {
                unit,
                arch: Arch::Lstm,
                z: raw.clone(),
                raw,
            })
            .collect();
        strong_projections(&profiles, 0.5)
    }

    fn brute_force_cores(adj: &[BTreeSet<usize>]) -> Vec<usize> {
        let n = adj.len();
        let mut core = vec![0; n];
        for k in 1..=n {
            let mut alive = vec![true; n];
            loop {
                let drop: Vec<usize> = (0..n)
                    .filter(|&v| alive[v] && adj[v].iter().filter(|&&u| alive[u]).count() < k)
                    .collect();
                if drop.is_empty() {
                    break;
                }
                for v in drop {
                    alive[v] = false;
                }
            }
            for v in 0..n {
                if alive[v] {
                    core[v] = k;
                }
            }
        }
        core
    }

    #[test]
    fn profiles_concatenate_first_two_gate_rows() {
        for arch in [Arch::Lstm, Arch::Gru] {
            let w = toy_weights(arch, 3, 7);
            let p = projection_profiles(&w, 0, ZScope::PerUnit).unwrap();
            assert_eq!(p.len(), 3);
            let lw = &w.layers[0];
            for (i, prof) in p.iter().enumerate() {
                assert_eq!(prof.raw.len(), 6);
                let mut manual = Vec::new();
                for j in 0..3 {
                    manual.push(lw.w[[i, j]]);
                }
                for j in 0..3 {
                    manual.push(lw.w[[i, 3 + j]]);
                }
                assert_eq!(prof.raw, manual);
                assert!(mean(&prof.z).abs() < 1e-12);
                assert!((sample_std(&prof.z) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_variance_rows_are_listed() {
        let mut w = toy_weights(Arch::Lstm, 4, 1);
        for j in 0..16 {
            w.layers[0].w[[2, j]] = 0.25;
        }
        match projection_profiles(&w, 0, ZScope::PerUnit) {
            Err(ConnectivityError::ZeroVariance(units)) => assert_eq!(units, vec![2]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            projection_profiles(&w, 3, ZScope::PerUnit),
            Err(ConnectivityError::InvalidLayer { .. })
        ));
    }

    #[test]
    fn single_outlier_gives_one_edge() {
        let n = 60;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..2 * n)
                    .map(|j| {
                        let base = if j % 2 == 0 { 0.01 } else { -0.01 };
                        if i == 4 && j == 70 {
                            1.0
                        } else {
                            base
                        }
                    })
                    .collect()
            })
            .collect();
        let p = profiles_from_rows(Arch::Lstm, rows, ZScope::PerUnit).unwrap();
        assert!(p[4].z[70] > 10.0);
        let g = strong_projections(&p, 5.0);
        assert_eq!(g.n_edges(), 1);
        let e = &g.edges[0];
        assert_eq!((e.source, e.target, e.gate), (4, 10, 1));
        assert_eq!(g.out_degree[4], 1);
        assert_eq!(g.out_degree.iter().sum::<usize>(), 1);
    }

    #[test]
    fn top_k_selection_and_ties() {
        let mut rows = vec![vec![0.0; 6]; 3];
        rows[1][4] = -9.0;
        rows[0][2] = 5.0;
        rows[2][0] = 5.0;
        rows[2][5] = 4.0;
        rows[0][1] = 3.0;
        rows[1][0] = 0.5;
        let p = profiles_from_rows(Arch::Lstm, rows, ZScope::Global).unwrap();
        let g1 = binarized_top_k_graph(&p, 1).unwrap();
        assert_eq!(g1.edges.len(), 1);
        assert_eq!((g1.edges[0].source, g1.edges[0].target, g1.edges[0].gate), (1, 1, 1));
        // Tie at 5.0 resolved by source index.
        let g2 = binarized_top_k_graph(&p, 2).unwrap();
        let picked: Vec<(usize, usize)> = g2.edges.iter().map(|e| (e.source, e.target)).collect();
        assert_eq!(picked, vec![(0, 2), (1, 1)]);
        let g5 = binarized_top_k_graph(&p, 5).unwrap();
        let mut picked: Vec<f64> = g5.edges.iter().map(|e| e.weight).collect();
        picked.sort_by(f64::total_cmp);
        assert_eq!(picked, vec![-9.0, 3.0, 4.0, 5.0, 5.0]);
        assert!(matches!(
            binarized_top_k_graph(&p, 0),
            Err(ConnectivityError::InvalidK { .. })
        ));
        assert!(matches!(
            binarized_top_k_graph(&p, 19),
            Err(ConnectivityError::InvalidK { .. })
        ));
    }

    #[test]
    fn known_cores() {
        let tri = graph_from_pairs(3, &[(0, 1), (1, 2), (2, 0)]);
        let c = k_core(&tri);
        assert_eq!(c.core, vec![2, 2, 2]);
        assert_eq!(c.main_core, vec![0, 1, 2]);

        let empty = graph_from_pairs(4, &[]);
        let c = k_core(&empty);
        assert_eq!(c.core, vec![0; 4]);
        assert!(identify_controllers(&c).is_empty());

        let mut pairs = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    pairs.push((i, j));
                }
            }
        }
        pairs.extend([(6, 0), (7, 1), (8, 8), (9, 6)]);
        let g = graph_from_pairs(10, &pairs);
        let c = k_core(&g);
        assert_eq!(c.k_max, 5);
        assert_eq!(identify_controllers(&c), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(c.core[8], 0);
    }

    #[test]
    fn mds_recovers_planar_distances() {
        let pts = [[0.0, 0.0], [3.0, 0.0], [0.0, 4.0], [2.0, 2.0]];
        let profiles: Vec<ProjectionProfile> = pts
            .iter()
            .enumerate()
            .map(|(unit, p)| ProjectionProfile {
                unit,
                arch: Arch::Lstm,
                raw: p.to_vec(),
                z: p.to_vec(),
            })
            .collect();
        let e = mds_embed(&profiles, DistanceMetric::Euclidean).unwrap();
        let target = pairwise_euclidean(&Array2::from_shape_fn((4, 2), |(i, j)| pts[i][j]));
        let got = pairwise_euclidean(&Array2::from_shape_fn((4, 2), |(i, j)| e.coords[i][j]));
        for (a, b) in target.iter().zip(got.iter()) {
            assert!((a - b).abs() <= 1e-8 * a.max(1.0));
        }
    }

    #[test]
    fn identical_profiles_have_zero_radius() {
        let raw = vec![0.3, -1.0, 2.0, 0.5];
        let profiles: Vec<ProjectionProfile> = (0..5)
            .map(|unit| ProjectionProfile {
                unit,
                arch: Arch::Lstm,
                raw: raw.clone(),
                z: raw.clone(),
            })
            .collect();
        let e = mds_embed(&profiles, DistanceMetric::Correlation).unwrap();
        assert!(e.radius.iter().all(|&r| r.abs() < 1e-7));
        assert!(matches!(
            mds_embed(&profiles[..2], DistanceMetric::Correlation),
            Err(ConnectivityError::TooFewProfiles(2))
        ));
    }

    #[test]
    fn integrators_are_central_long_units() {
        let n = 105;
        let mut coords = Vec::new();
        for i in 0..100 {
            let a = i as f64 * std::f64::consts::TAU / 100.0;
            coords.push([a.cos(), a.sin()]);
        }
        for _ in 0..5 {
            coords.push([0.0, 0.0]);
        }
        let emb = MdsEmbedding {
            units: (0..n).collect(),
            radius: coords.iter().map(|c| c[0].hypot(c[1])).collect(),
            coords,
            eigenvalues: vec![],
        };
        let records: Vec<UnitTimescale> = (0..n).map(|u| record(u, if u >= 100 { 20 } else { 2 }, true)).collect();
        assert_eq!(
            identify_integrators(&emb, &records, 85.0, 30.0),
            vec![100, 101, 102, 103, 104]
        );
        let flat: Vec<UnitTimescale> = (0..n).map(|u| record(u, 4, true)).collect();
        assert!(identify_integrators(&emb, &flat, 85.0, 30.0).is_empty());
    }

    #[test]
    fn degree_correlation() {
        let g = graph_from_pairs(4, &[(0, 1), (1, 2), (1, 3), (2, 0), (2, 1), (2, 3)]);
        let recs: Vec<UnitTimescale> = (0..4).map(|u| record(u, g.out_degree[u], true)).collect();
        let c = timescale_degree_correlation(&recs, &g).unwrap();
        assert!((c.r - 1.0).abs() < 1e-12);
        let flat = graph_from_pairs(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
        assert!(matches!(
            timescale_degree_correlation(&recs, &flat),
            Err(ConnectivityError::Numerics(NumericsError::UndefinedCorrelation))
        ));
        let few: Vec<UnitTimescale> = (0..4).map(|u| record(u, u, u < 2)).collect();
        assert!(matches!(
            timescale_degree_correlation(&few, &g),
            Err(ConnectivityError::TooFewUnits(2))
        ));
    }

    #[test]
    fn edge_csv_names_gates() {
        let g = graph_from_pairs(2, &[(0, 1)]);
        let mut buf = Vec::new();
        write_edges_csv(&g, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next().unwrap(), "source,target,gate,weight,z");
        assert!(s.lines().nth(1).unwrap().starts_with("0,1,input,"));
    }

    fn random_adj() -> impl Strategy<Value = Vec<BTreeSet<usize>>> {
        (1usize..30, prop::sample::select(vec![0.05, 0.1, 0.3]), any::<u64>()).prop_map(|(n, p, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut adj = vec![BTreeSet::new(); n];
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random::<f64>() < p {
                        adj[i].insert(j);
                        adj[j].insert(i);
                    }
                }
            }
            adj
        })
    }

    proptest! {
        #[test]
        fn cores_match_peeling(adj in random_adj()) {
            let core = core_numbers(&adj);
            prop_assert_eq!(&core, &brute_force_cores(&adj));
            for v in 0..adj.len() {
                prop_assert!(core[v] <= adj[v].len());
            }
        }

        #[test]
        fn structure_is_scale_and_sign_invariant(seed in any::<u64>(), scale in 0.01f64..100.0, k in 1usize..40) {
            let w = toy_weights(Arch::Lstm, 8, seed);
            let mut scaled = w.clone();
            scaled.layers[0].w.mapv_inplace(|x| -scale * x);
            let p = projection_profiles(&w, 0, ZScope::PerUnit).unwrap();
            let q = projection_profiles(&scaled, 0, ZScope::PerUnit).unwrap();
            let key = |g: &ProjectionGraph| g.edges.iter().map(|e| (e.source, e.target, e.gate)).collect::<Vec<_>>();
            let (gp, gq) = (binarized_top_k_graph(&p, k).unwrap(), binarized_top_k_graph(&q, k).unwrap());
            prop_assert_eq!(key(&gp), key(&gq));
            prop_assert_eq!(k_core(&gp), k_core(&gq));
            let (sp, sq) = (strong_projections(&p, 1.5), strong_projections(&q, 1.5));
            prop_assert_eq!(key(&sp), key(&sq));
        }

        #[test]
        fn main_core_members_meet_k_within_core(adj in random_adj()) {
            let core = core_numbers(&adj);
            let k_max = core.iter().copied().max().unwrap_or(0);
            if k_max > 0 {
                let members: BTreeSet<usize> = (0..adj.len()).filter(|&v| core[v] == k_max).collect();
                for &v in &members {
                    prop_assert!(adj[v].iter().filter(|u| members.contains(u)).count() >= k_max);
                }
            }
        }

        #[test]
        fn mds_distances_invariant_to_unit_order(seed in any::<u64>()) {
            let w = toy_weights(Arch::Lstm, 6, seed);
            let p = projection_profiles(&w, 0, ZScope::PerUnit).unwrap();
            let mut rev = p.clone();
            rev.reverse();
            let a = mds_embed(&p, DistanceMetric::Correlation).unwrap();
            let b = mds_embed(&rev, DistanceMetric::Correlation).unwrap();
            let da = pairwise_euclidean(&Array2::from_shape_fn((6, 2), |(i, j)| a.coords[i][j]));
            let db = pairwise_euclidean(&Array2::from_shape_fn((6, 2), |(i, j)| b.coords[i][j]));
            for i in 0..6 {
                for j in 0..6 {
                    prop_assert!((da[[i, j]] - db[[5 - i, 5 - j]]).abs() < 1e-7);
                }
            }
        }
    }
}
