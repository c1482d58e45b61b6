//! Dense f64 helpers for the verification side: cyclic Jacobi
//! eigendecomposition of symmetric matrices and a plain matmul.

/// `C += A(m x k) B(k x n)`, row-major.
pub fn matmul_f64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// rows of the second result.
pub fn sym_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1e-300);
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[q * n + j];
                    a[p * n + j] = c * apj - s * aqj;
                    a[q * n + j] = s * apj + c * aqj;
                }
                for j in 0..n {
                    let vpj = v[p * n + j];
                    let vqj = v[q * n + j];
                    v[p * n + j] = c * vpj - s * vqj;
                    v[q * n + j] = s * vpj + c * vqj;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors: Vec<Vec<f64>> = order.iter().map(|&i| v[i * n..(i + 1) * n].to_vec()).collect();
    (values, vectors)
}

/// Singular values (descending) of an arbitrary `rows x cols` matrix via the
/// eigenvalues of the smaller Gram matrix.
pub fn singular_values(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(m.len(), rows * cols);
    let k = rows.min(cols);
    let mut gram = vec![0.0f64; k * k];
    if rows <= cols {
        // G = M M^T
        for i in 0..rows {
            for j in i..rows {
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += m[i * cols + c] * m[j * cols + c];
                }
                gram[i * rows + j] = acc;
                gram[j * rows + i] = acc;
            }
        }
    } else {
        // G = M^T M
        for i in 0..cols {
            for j in i..cols {
                let mut acc = 0.0;
                for r in 0..rows {
                    acc += m[r * cols + i] * m[r * cols + j];
                }
                gram[i * cols + j] = acc;
                gram[j * cols + i] = acc;
            }
        }
    }
    let (vals, _) = sym_eigen(&gram, k);
    vals.into_iter().map(|l| l.max(0.0).sqrt()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn eigen_diagonal_matrix() {
        let m = vec![3.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 7.0];
        let (vals, _) = sym_eigen(&m, 3);
        assert!((vals[0] - 7.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        assert!((vals[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let mut rng = stream(1, 0);
        let n = 8;
        let mut m = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.gen_range(-1.0..1.0);
                m[i * n + j] = v;
                m[j * n + i] = v;
            }
        }
        let (vals, vecs) = sym_eigen(&m, n);
        // sum_k lambda_k v_k v_k^T must reproduce M
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += vals[k] * vecs[k][i] * vecs[k][j];
                }
                assert!((acc - m[i * n + j]).abs() < 1e-9, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn singular_values_match_known_rank_one() {
        // outer product u v^T has a single singular value ||u|| ||v||
        let u = [1.0, 2.0, 2.0]; // norm 3
        let v = [3.0, 4.0]; // norm 5
        let mut m = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                m[i * 2 + j] = u[i] * v[j];
            }
        }
        let sv = singular_values(&m, 3, 2);
        assert!((sv[0] - 15.0).abs() < 1e-9);
        assert!(sv[1].abs() < 1e-9);
    }
}
