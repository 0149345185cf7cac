//! Cyclic Jacobi eigensolver for small dense symmetric matrices.

use crate::error::{Error, Result};

/// Sweeps allowed before giving up on the off-diagonal tolerance.
const MAX_SWEEPS: usize = 100;

/// Relative asymmetry accepted on input.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Eigen-decomposition with eigenvalues ascending; `vectors[j]` is the unit
/// eigenvector for `values[j]`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Option<Vec<Vec<f64>>>,
}

/// Eigenvalues (ascending) of a symmetric matrix.
pub fn eigen_sym(matrix: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(jacobi(matrix, false)?.values)
}

/// Eigenvalues and eigenvectors of a symmetric matrix.
pub fn eigen_sym_vectors(matrix: &[Vec<f64>]) -> Result<SymEigen> {
    jacobi(matrix, true)
}

fn jacobi(matrix: &[Vec<f64>], want_vectors: bool) -> Result<SymEigen> {
    let n = matrix.len();
    if let Some(row) = matrix.iter().find(|r| r.len() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: row.len(),
        });
    }
    let scale = matrix.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut asym = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((matrix[i][j] - matrix[j][i]).abs());
        }
    }
    if asym > SYMMETRY_TOLERANCE * scale {
        return Err(Error::NotSymmetric(asym));
    }

    let mut a: Vec<f64> = matrix.iter().flatten().copied().collect();
    // symmetrize so rotations act on an exactly symmetric array
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    let mut v = if want_vectors {
        let mut id = vec![0.0; n * n];
        for i in 0..n {
            id[i * n + i] = 1.0;
        }
        Some(id)
    } else {
        None
    };

    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += a[i * n + j] * a[i * n + j];
            }
        }
        (2.0 * s).sqrt()
    };
    let initial = off(&a);
    let tol = 1e-12 * initial;

    let mut sweeps = 0;
    while off(&a) > tol && initial > 0.0 {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Internal(format!(
                "Jacobi iteration did not converge in {MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                if let Some(v) = v.as_mut() {
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = v.map(|v| {
        order
            .iter()
            .map(|&j| (0..n).map(|k| v[k * n + j]).collect())
            .collect()
    });
    Ok(SymEigen { values, vectors })
}
