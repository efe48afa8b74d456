use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ConnectivityError, ProjectionProfile};
use crate::numerics::{classical_mds, pairwise_euclidean, pearson, percentile};
use crate::timescale::UnitTimescale;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// `1 − r` between raw profiles.
    Correlation,
    Euclidean,
}

impl std::str::FromStr for DistanceMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "correlation" => Ok(DistanceMetric::Correlation),
            "euclidean" => Ok(DistanceMetric::Euclidean),
            other => Err(format!("unknown metric `{other}` (expected correlation|euclidean)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdsEmbedding {
    pub units: Vec<usize>,
    pub coords: Vec<[f64; 2]>,
    pub eigenvalues: Vec<f64>,
    /// Distance of each unit from the embedding centroid.
    pub radius: Vec<f64>,
}

pub fn profile_distances(
    profiles: &[ProjectionProfile],
    metric: DistanceMetric,
) -> Result<Array2<f64>, ConnectivityError> {
    let n = profiles.len();
    match metric {
        DistanceMetric::Euclidean => {
            let dim = profiles.first().map_or(0, |p| p.raw.len());
            let flat: Vec<f64> = profiles.iter().flat_map(|p| p.raw.iter().copied()).collect();
            let pts = Array2::from_shape_vec((n, dim), flat).expect("profiles share a length");
            Ok(pairwise_euclidean(&pts))
        }
        DistanceMetric::Correlation => {
            let rows: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            if i == j {
                                Ok(0.0)
                            } else {
                                pearson(&profiles[i].raw, &profiles[j].raw).map(|r| (1.0 - r).max(0.0))
                            }
                        })
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<_, _>>()?;
            let mut d = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    // Average the two orders so the matrix is exactly symmetric.
                    d[[i, j]] = 0.5 * (rows[i][j] + rows[j][i]);
                }
            }
            Ok(d)
        }
    }
}

/// 2-D classical MDS of the raw profiles.
pub fn mds_embed(profiles: &[ProjectionProfile], metric: DistanceMetric) -> Result<MdsEmbedding, ConnectivityError> {
    if profiles.len() < 3 {
        return Err(ConnectivityError::TooFewProfiles(profiles.len()));
    }
    let d = profile_distances(profiles, metric)?;
    let mds = classical_mds(&d, 2)?;
    let coords: Vec<[f64; 2]> = mds.coords.rows().into_iter().map(|r| [r[0], r[1]]).collect();
    let n = coords.len() as f64;
    let cx = coords.iter().map(|c| c[0]).sum::<f64>() / n;
    let cy = coords.iter().map(|c| c[1]).sum::<f64>() / n;
    let radius = coords.iter().map(|c| (c[0] - cx).hypot(c[1] - cy)).collect();
    Ok(MdsEmbedding {
        units: profiles.iter().map(|p| p.unit).collect(),
        coords,
        eigenvalues: mds.eigenvalues,
        radius,
    })
}

/// Units whose timescale is strictly above the `ts_pct` percentile of
/// included timescales and whose radius is at most the `radius_pct`
/// percentile of all radii.
pub fn identify_integrators(
    embedding: &MdsEmbedding,
    records: &[UnitTimescale],
    ts_pct: f64,
    radius_pct: f64,
) -> Vec<usize> {
    let included: Vec<&UnitTimescale> = records.iter().filter(|r| r.included).collect();
    if included.is_empty() || embedding.radius.is_empty() {
        return Vec::new();
    }
    let ts: Vec<f64> = included.iter().map(|r| r.timescale as f64).collect();
    let ts_cut = percentile(&ts, ts_pct);
    let r_cut = percentile(&embedding.radius, radius_pct);
    let mut out: Vec<usize> = included
        .iter()
        .filter(|r| r.timescale as f64 > ts_cut)
        .filter_map(|r| {
            let i = embedding.units.iter().position(|&u| u == r.unit)?;
            (embedding.radius[i] <= r_cut).then_some(r.unit)
        })
        .collect();
    out.sort_unstable();
    out
}
