//! Exact 2-D principal component projection.
//!
//! Chosen over stochastic neighbor embeddings on purpose: the projection is a
//! deterministic linear map whose variance capture is checkable against an
//! independent eigen-decomposition, so plots stay oracle-testable.

use crate::CliError;

#[derive(Debug, Clone)]
pub struct Projection {
    /// One (x, y) per input row, in input order.
    pub points: Vec<[f64; 2]>,
    /// Top-2 eigenvalue share of total variance; 1.0 for degenerate
    /// zero-variance inputs.
    pub variance_fraction: f64,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

/// Project `rows` (each of dimension `dim`) onto their top two principal
/// components. Signs are fixed so each component's largest-magnitude entry is
/// positive, making the output reproducible bit-for-bit.
pub fn project_2d(rows: &[Vec<f64>], dim: usize) -> Result<Projection, CliError> {
    if rows.is_empty() {
        return Err(CliError::Runtime("PCA of an empty point set".into()));
    }
    if dim < 2 {
        return Err(CliError::Runtime(format!("PCA needs dimension >= 2, got {dim}")));
    }
    for r in rows {
        if r.len() != dim {
            return Err(CliError::Runtime(format!(
                "PCA row of length {}, expected {dim}",
                r.len()
            )));
        }
    }

    let n = rows.len();
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // covariance (population normalization; the eigenvector basis and the
    // variance fractions are normalization-invariant)
    let mut cov = vec![0.0; dim * dim];
    for r in rows {
        for i in 0..dim {
            let di = r[i] - mean[i];
            for j in i..dim {
                cov[i * dim + j] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / n as f64;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }

    let (eigenvalues, vectors) = sym_eigen_desc(&cov, dim);
    let total: f64 = eigenvalues.iter().sum();
    let variance_fraction = if total > 0.0 { (eigenvalues[0] + eigenvalues[1]) / total } else { 1.0 };

    let mut axes = [vec![0.0; dim], vec![0.0; dim]];
    for (a, axis) in axes.iter_mut().enumerate() {
        for (i, slot) in axis.iter_mut().enumerate() {
            *slot = vectors[i * dim + a];
        }
        // deterministic sign: dominant entry positive
        let dominant = axis
            .iter()
            .cloned()
            .max_by(|x, y| x.abs().total_cmp(&y.abs()))
            .unwrap_or(0.0);
        if dominant < 0.0 {
            for v in axis.iter_mut() {
                *v = -*v;
            }
        }
    }

    let points = rows
        .iter()
        .map(|r| {
            let mut p = [0.0; 2];
            for (a, axis) in axes.iter().enumerate() {
                p[a] = (0..dim).map(|i| (r[i] - mean[i]) * axis[i]).sum();
            }
            p
        })
        .collect();

    Ok(Projection { points, variance_fraction, eigenvalues })
}

/// Eigen-decomposition of a symmetric matrix via cyclic Jacobi rotations.
/// Returns eigenvalues descending and column eigenvectors in matching order.
fn sym_eigen_desc(m: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = m.to_vec();
    let mut v = vec![0.0; dim * dim];
    for i in 0..dim {
        v[i * dim + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..dim {
            for q in (p + 1)..dim {
                off += a[p * dim + q] * a[p * dim + q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..dim {
            for q in (p + 1)..dim {
                let apq = a[p * dim + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * dim + p];
                let aqq = a[q * dim + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..dim {
                    let aip = a[i * dim + p];
                    let aiq = a[i * dim + q];
                    a[i * dim + p] = c * aip - s * aiq;
                    a[i * dim + q] = s * aip + c * aiq;
                }
                for j in 0..dim {
                    let apj = a[p * dim + j];
                    let aqj = a[q * dim + j];
                    a[p * dim + j] = c * apj - s * aqj;
                    a[q * dim + j] = s * apj + c * aqj;
                }
                for i in 0..dim {
                    let vip = v[i * dim + p];
                    let viq = v[i * dim + q];
                    v[i * dim + p] = c * vip - s * viq;
                    v[i * dim + q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| a[j * dim + j].total_cmp(&a[i * dim + i]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * dim + i]).collect();
    let mut vectors = vec![0.0; dim * dim];
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..dim {
            vectors[i * dim + new_col] = v[i * dim + old_col];
        }
    }
    (eigenvalues, vectors)
}
