//! Cyclic Jacobi eigensolver for dense symmetric matrices.

use ndarray::Array2;

use super::NumericsError;

const MAX_SWEEPS: usize = 100;

/// Eigen decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Sorted in descending order.
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: Array2<f64>,
}

fn check_symmetric(m: &Array2<f64>) -> Result<(), NumericsError> {
    let (r, c) = m.dim();
    if r != c {
        return Err(NumericsError::NotSquare { rows: r, cols: c });
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let mut worst = 0.0f64;
    for i in 0..r {
        for j in i + 1..r {
            worst = worst.max((m[[i, j]] - m[[j, i]]).abs());
        }
    }
    if worst > 1e-10 * scale || m.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::Asymmetric { max_diff: worst });
    }
    Ok(())
}

#[inline]
fn rotate(a: &mut [f64], n: usize, (i, j): (usize, usize), (k, l): (usize, usize), s: f64, tau: f64) {
    let g = a[i * n + j];
    let h = a[k * n + l];
    a[i * n + j] = g - s * (h + g * tau);
    a[k * n + l] = h + s * (g - h * tau);
}

/// Eigenvalues (descending) and orthonormal eigenvectors of `m`.
///
/// Each eigenvector is sign-normalized so that its largest-magnitude
/// component is positive, which makes the output deterministic.
pub fn symmetric_eig(m: &Array2<f64>) -> Result<SymmetricEigen, NumericsError> {
    check_symmetric(m)?;
    let n = m.nrows();
    if n == 0 {
        return Ok(SymmetricEigen {
            values: Vec::new(),
            vectors: Array2::zeros((0, 0)),
        });
    }
    // Work on the symmetrized upper triangle.
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (m[[i, j]] + m[[j, i]]);
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let mut d: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    let mut b = d.clone();
    let mut z = vec![0.0; n];

    let mut converged = false;
    for sweep in 1..=MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q].abs();
            }
        }
        if off == 0.0 {
            converged = true;
            break;
        }
        let thresh = if sweep < 4 { 0.2 * off / (n * n) as f64 } else { 0.0 };
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                let g = 100.0 * apq.abs();
                if sweep > 4 && d[p].abs() + g == d[p].abs() && d[q].abs() + g == d[q].abs() {
                    a[p * n + q] = 0.0;
                } else if apq.abs() > thresh {
                    let h = d[q] - d[p];
                    let t = if h.abs() + g == h.abs() {
                        apq / h
                    } else {
                        let theta = 0.5 * h / apq;
                        let t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                        if theta < 0.0 {
                            -t
                        } else {
                            t
                        }
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    let tau = s / (1.0 + c);
                    let h = t * apq;
                    z[p] -= h;
                    z[q] += h;
                    d[p] -= h;
                    d[q] += h;
                    a[p * n + q] = 0.0;
                    for j in 0..p {
                        rotate(&mut a, n, (j, p), (j, q), s, tau);
                    }
                    for j in p + 1..q {
                        rotate(&mut a, n, (p, j), (j, q), s, tau);
                    }
                    for j in q + 1..n {
                        rotate(&mut a, n, (p, j), (q, j), s, tau);
                    }
                    for j in 0..n {
                        rotate(&mut v, n, (j, p), (j, q), s, tau);
                    }
                }
            }
        }
        for i in 0..n {
            b[i] += z[i];
            d[i] = b[i];
            z[i] = 0.0;
        }
    }
    if !converged {
        return Err(NumericsError::NoConvergence {
            what: "jacobi eigensolver",
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]).then(i.cmp(&j)));
    let mut vectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for r in 0..n {
            if v[r * n + src].abs() > v[pivot * n + src].abs() + 1e-14 {
                pivot = r;
            }
        }
        let sign = if v[pivot * n + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors[[r, col]] = sign * v[r * n + src];
        }
    }
    Ok(SymmetricEigen {
        values: order.iter().map(|&i| d[i]).collect(),
        vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let x: f64 = rng.random_range(-1.0..1.0);
                m[[i, j]] = x;
                m[[j, i]] = x;
            }
        }
        m
    }

    #[test]
    fn identity_and_diagonal() {
        let e = symmetric_eig(&Array2::eye(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);

        let m = Array2::from_diag(&ndarray::arr1(&[3.0, 1.0, 2.0]));
        let e = symmetric_eig(&m).unwrap();
        assert_eq!(e.values, vec![3.0, 2.0, 1.0]);
        // eigenvectors are the permuted axes
        assert_eq!(e.vectors.column(0).to_vec(), vec![1.0, 0.0, 0.0]);
        assert_eq!(e.vectors.column(1).to_vec(), vec![0.0, 0.0, 1.0]);
        assert_eq!(e.vectors.column(2).to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn rejects_asymmetric_and_non_square() {
        let m = ndarray::arr2(&[[1.0, 2.0], [2.1, 1.0]]);
        assert!(matches!(symmetric_eig(&m), Err(NumericsError::Asymmetric { .. })));
        let m = Array2::<f64>::zeros((2, 3));
        assert!(matches!(symmetric_eig(&m), Err(NumericsError::NotSquare { .. })));
    }

    #[test]
    fn reconstructs_random_50x50() {
        let m = random_symmetric(50, 7);
        let e = symmetric_eig(&m).unwrap();
        let lambda = Array2::from_diag(&ndarray::Array1::from(e.values.clone()));
        let rebuilt = e.vectors.dot(&lambda).dot(&e.vectors.t());
        let err = (&rebuilt - &m).mapv(|x| x * x).sum().sqrt();
        let norm = m.mapv(|x| x * x).sum().sqrt();
        assert!(err / norm < 1e-8, "relative error {}", err / norm);

        // orthonormal columns
        let gram = e.vectors.t().dot(&e.vectors);
        let dev = (&gram - &Array2::<f64>::eye(50))
            .mapv(f64::abs)
            .fold(0.0, |a: f64, &b| a.max(b));
        assert!(dev < 1e-10);

        // residual per pair
        for i in 0..50 {
            let v = e.vectors.column(i);
            let r = m.dot(&v) - &(&v * e.values[i]);
            assert!(r.mapv(f64::abs).sum() < 1e-8 * norm);
        }
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn eigenvalue_sum_equals_trace() {
        for seed in 0..10 {
            let m = random_symmetric(5 + seed as usize * 3, seed);
            let e = symmetric_eig(&m).unwrap();
            let trace: f64 = m.diag().sum();
            let sum: f64 = e.values.iter().sum();
            let abs_sum: f64 = e.values.iter().map(|v| v.abs()).sum();
            assert!((sum - trace).abs() <= 1e-10 * abs_sum.max(1.0));
        }
    }
}
