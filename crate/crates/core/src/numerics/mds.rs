use ndarray::Array2;

use super::eigen::symmetric_eig;
use super::NumericsError;

/// Classical (Torgerson) MDS output.
#[derive(Debug, Clone)]
pub struct MdsResult {
    /// `n x dims` coordinates.
    pub coords: Array2<f64>,
    /// Full spectrum of the double-centered Gram matrix, descending.
    pub eigenvalues: Vec<f64>,
}

fn validate_distances(d: &Array2<f64>) -> Result<(), NumericsError> {
    let (r, c) = d.dim();
    if r != c {
        return Err(NumericsError::NotSquare { rows: r, cols: c });
    }
    for i in 0..r {
        if d[[i, i]].abs() > 1e-12 {
            return Err(NumericsError::InvalidDistance(format!(
                "diagonal entry ({i},{i}) is {}",
                d[[i, i]]
            )));
        }
        for j in 0..r {
            let v = d[[i, j]];
            if !v.is_finite() || v < 0.0 {
                return Err(NumericsError::InvalidDistance(format!("entry ({i},{j}) is {v}")));
            }
        }
    }
    Ok(())
}

/// Embeds a distance matrix in `dims` dimensions via `B = -1/2 J D^2 J`.
pub fn classical_mds(d: &Array2<f64>, dims: usize) -> Result<MdsResult, NumericsError> {
    validate_distances(d)?;
    let n = d.nrows();
    let sq = d.mapv(|x| x * x);
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let col_means: Vec<f64> = (0..n).map(|j| sq.column(j).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n.max(1) as f64;
    let mut b = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            b[[i, j]] = -0.5 * (sq[[i, j]] - row_means[i] - col_means[j] + grand);
        }
    }
    // Symmetrize away rounding from the centering.
    let b = (&b + &b.t()) * 0.5;
    let eig = symmetric_eig(&b)?;
    let mut coords = Array2::zeros((n, dims));
    for k in 0..dims.min(n) {
        let lambda = eig.values[k];
        if lambda <= 0.0 {
            continue;
        }
        let s = lambda.sqrt();
        for i in 0..n {
            coords[[i, k]] = eig.vectors[[i, k]] * s;
        }
    }
    Ok(MdsResult {
        coords,
        eigenvalues: eig.values,
    })
}

/// Euclidean distance matrix between the rows of `points`.
pub fn pairwise_euclidean(points: &Array2<f64>) -> Array2<f64> {
    let n = points.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    out
}

/// Kruskal stress-1 of an embedding against the target distances.
pub fn stress(target: &Array2<f64>, coords: &Array2<f64>) -> f64 {
    let got = pairwise_euclidean(coords);
    let num: f64 = (&got - target).mapv(|x| x * x).sum();
    let den: f64 = target.mapv(|x| x * x).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}
