//! Truncated SVD by one-sided Jacobi rotations.
//!
//! Good enough at d <= 128: rotations orthogonalize column pairs of the
//! input until every pair is numerically orthogonal, after which column
//! norms are the singular values.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;

/// Best rank-r Frobenius approximation of `w` as U * V^T with the singular
/// values folded into U.
pub fn truncated_svd(w: &Tensor, r: usize) -> Result<(Tensor, Tensor)> {
    if w.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "truncated_svd requires a matrix, got {:?}",
            w.shape()
        )));
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    if r == 0 || r > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "rank {r} out of range for {m}x{n} matrix"
        )));
    }
    if m >= n {
        let (b, v, sigma) = one_sided_jacobi(w)?;
        // w = B V^T with B = U diag(sigma); keep the r largest.
        let order = sort_desc(&sigma);
        let u_out = take_columns(&b, &order[..r]);
        let v_out = take_columns(&v, &order[..r]);
        Ok((u_out, v_out))
    } else {
        // Factor the transpose: w^T = B V^T  =>  w = V B^T.
        let wt = w.transpose();
        let (b, v, sigma) = one_sided_jacobi(&wt)?;
        let order = sort_desc(&sigma);
        // Fold sigma into the left factor of w: U = V diag(sigma), V_out = B/sigma.
        let mut u_out = take_columns(&v, &order[..r]);
        let mut v_out = take_columns(&b, &order[..r]);
        for (c, &idx) in order[..r].iter().enumerate() {
            let s = sigma[idx];
            for i in 0..u_out.rows() {
                let val = u_out.at(i, c) * s;
                u_out.set(i, c, val);
            }
            for i in 0..v_out.rows() {
                let val = if s > 0.0 { v_out.at(i, c) / s } else { 0.0 };
                v_out.set(i, c, val);
            }
        }
        Ok((u_out, v_out))
    }
}

/// Orthogonalizes the columns of `a` (m >= n required by callers).
/// Returns (B, V, sigma) with a = B V^T, B's columns orthogonal with norms
/// sigma, and V orthonormal.
fn one_sided_jacobi(a: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut b = a.clone();
    let mut v = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut off = 0usize;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let x = b.at(i, p);
                    let y = b.at(i, q);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= JACOBI_TOL * (app * aqq).sqrt() {
                    continue;
                }
                off += 1;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let x = b.at(i, p);
                    let y = b.at(i, q);
                    b.set(i, p, c * x - s * y);
                    b.set(i, q, s * x + c * y);
                }
                for i in 0..n {
                    let x = v.at(i, p);
                    let y = v.at(i, q);
                    v.set(i, p, c * x - s * y);
                    v.set(i, q, s * x + c * y);
                }
            }
        }
        if off == 0 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )));
    }
    let sigma: Vec<f64> = (0..n)
        .map(|j| {
            let mut s = 0.0;
            for i in 0..m {
                let x = b.at(i, j);
                s += x * x;
            }
            s.sqrt()
        })
        .collect();
    Ok((b, v, sigma))
}

fn sort_desc(sigma: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    order
}

fn take_columns(t: &Tensor, cols: &[usize]) -> Tensor {
    let m = t.rows();
    let mut out = Tensor::zeros(vec![m, cols.len()]);
    for (c, &src) in cols.iter().enumerate() {
        for i in 0..m {
            out.set(i, c, t.at(i, src));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{kernels, Prng};

    fn frob(t: &Tensor) -> f64 {
        t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn reconstruct(u: &Tensor, v: &Tensor) -> Tensor {
        kernels::matmul(u, &v.transpose()).unwrap()
    }

    fn diff(a: &Tensor, b: &Tensor) -> Tensor {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        Tensor::new(a.shape().to_vec(), data).unwrap()
    }

    /// Two-sided Jacobi eigendecomposition of a symmetric matrix; the test
    /// oracle path, independent of the one-sided implementation.
    fn sym_eigenvalues(a: &Tensor) -> Vec<f64> {
        let n = a.rows();
        let mut m = a.clone();
        for _ in 0..200 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += m.at(p, q).abs();
                }
            }
            if off < 1e-14 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m.at(p, q);
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m.at(q, q) - m.at(p, p)) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..n {
                        let x = m.at(i, p);
                        let y = m.at(i, q);
                        m.set(i, p, c * x - s * y);
                        m.set(i, q, s * x + c * y);
                    }
                    for i in 0..n {
                        let x = m.at(p, i);
                        let y = m.at(q, i);
                        m.set(p, i, c * x - s * y);
                        m.set(q, i, s * x + c * y);
                    }
                }
            }
        }
        (0..n).map(|i| m.at(i, i)).collect()
    }

    fn random_matrix(rng: &mut Prng, m: usize, n: usize) -> Tensor {
        Tensor::new(vec![m, n], (0..m * n).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn full_rank_recovery() {
        let mut rng = Prng::from_seed(21);
        let w = random_matrix(&mut rng, 6, 4);
        let (u, v) = truncated_svd(&w, 4).unwrap();
        assert_eq!(u.shape(), &[6, 4]);
        assert_eq!(v.shape(), &[4, 4]);
        assert!(frob(&diff(&reconstruct(&u, &v), &w)) <= 1e-9);
    }

    #[test]
    fn rank_one_exact() {
        let mut rng = Prng::from_seed(22);
        let a = Tensor::vector((0..5).map(|_| rng.normal(0.0, 1.0)).collect());
        let b = Tensor::vector((0..7).map(|_| rng.normal(0.0, 1.0)).collect());
        let mut w = Tensor::zeros(vec![5, 7]);
        for i in 0..5 {
            for j in 0..7 {
                w.set(i, j, a.data()[i] * b.data()[j]);
            }
        }
        let (u, v) = truncated_svd(&w, 1).unwrap();
        assert!(frob(&diff(&reconstruct(&u, &v), &w)) <= 1e-9);
    }

    #[test]
    fn reconstruction_error_is_smallest_singular_value() {
        let mut rng = Prng::from_seed(23);
        let w = random_matrix(&mut rng, 8, 8);
        let (u, v) = truncated_svd(&w, 7).unwrap();
        let err = frob(&diff(&reconstruct(&u, &v), &w));
        // Oracle: eigenvalues of W^T W give the squared singular values.
        let wtw = kernels::matmul(&w.transpose(), &w).unwrap();
        let mut eigs = sym_eigenvalues(&wtw);
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let sigma_min = eigs[0].max(0.0).sqrt();
        assert!(
            (err - sigma_min).abs() <= 1e-9,
            "err {err} vs sigma_min {sigma_min}"
        );
    }

    #[test]
    fn wide_matrix_handled() {
        let mut rng = Prng::from_seed(24);
        let w = random_matrix(&mut rng, 4, 9);
        let (u, v) = truncated_svd(&w, 4).unwrap();
        assert_eq!(u.shape(), &[4, 4]);
        assert_eq!(v.shape(), &[9, 4]);
        assert!(frob(&diff(&reconstruct(&u, &v), &w)) <= 1e-9);
    }

    #[test]
    fn rank_out_of_range() {
        let w = Tensor::zeros(vec![3, 5]);
        assert!(truncated_svd(&w, 0).is_err());
        assert!(truncated_svd(&w, 4).is_err());
    }

    #[test]
    fn truncation_error_decreases_with_rank() {
        let mut rng = Prng::from_seed(25);
        let w = random_matrix(&mut rng, 8, 8);
        let errs: Vec<f64> = [1usize, 4, 7]
            .iter()
            .map(|&r| {
                let (u, v) = truncated_svd(&w, r).unwrap();
                frob(&diff(&reconstruct(&u, &v), &w))
            })
            .collect();
        assert!(errs[0] >= errs[1] && errs[1] >= errs[2]);
    }
}
