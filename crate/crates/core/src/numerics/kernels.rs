//! Dense kernels with pinned accumulation order.
//!
//! Every reduction walks its index in ascending order with a single scalar
//! accumulator per output element and no fused multiply-add, so results are
//! bit-identical between runs regardless of how callers batch or slice rows.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// c[i][j] = sum_t a[i][t] * b[t][j], t ascending.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul requires rank-2 operands, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        // i-t-j order: each out[i][j] still accumulates t ascending, and the
        // inner loop has independent accumulators so it vectorizes.
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b.data()[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Treats a rank-1 tensor as a single row and multiplies.
pub fn vec_matmul(v: &Tensor, b: &Tensor) -> Result<Tensor> {
    let row = Tensor::new(vec![1, v.numel()], v.data().to_vec())?;
    let out = matmul(&row, b)?;
    let n = out.numel();
    out.reshaped(vec![n])
}

/// Row-wise softmax under a {0,1} mask.
///
/// Masked entries receive additive -inf before exponentiation, making their
/// outputs exactly 0.0; each row then sums to 1 over its unmasked entries.
/// A row with no unmasked entry is rejected.
pub fn row_softmax_masked(scores: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if scores.shape() != mask.shape() || scores.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "softmax scores {:?} vs mask {:?}",
            scores.shape(),
            mask.shape()
        )));
    }
    let (m, n) = (scores.shape()[0], scores.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let srow = scores.row(i);
        let mrow = mask.row(i);
        if !mrow.iter().any(|&v| v == 1.0) {
            return Err(Error::DegenerateMaskRow(i));
        }
        let orow = &mut out[i * n..(i + 1) * n];
        // Additive -inf mask, then max-shift for stability. exp(-inf) == 0.0
        // exactly, so masked entries contribute exact zeros to the sum.
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            let v = if mrow[j] == 1.0 {
                srow[j]
            } else {
                srow[j] + f64::NEG_INFINITY
            };
            orow[j] = v;
            max = max.max(v);
        }
        let mut denom = 0.0;
        for o in orow.iter_mut() {
            *o = (*o - max).exp();
            denom += *o;
        }
        for o in orow.iter_mut() {
            *o /= denom;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// out[i] = gamma[i] * x[i] / sqrt(mean(x^2) + eps) for a rank-1 x.
pub fn rms_norm(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() != 1 || x.shape() != gamma.shape() {
        return Err(Error::ShapeMismatch(format!(
            "rms_norm x {:?} vs gamma {:?}",
            x.shape(),
            gamma.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("rms_norm eps must be > 0".into()));
    }
    let d = x.numel();
    let mut ms = 0.0;
    for &v in x.data() {
        ms += v * v;
    }
    ms /= d as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    let data = x
        .data()
        .iter()
        .zip(gamma.data())
        .map(|(&v, &g)| g * v * inv)
        .collect();
    Ok(Tensor::vector(data))
}

/// rms_norm applied to each row of a matrix with a shared gamma.
pub fn rms_norm_rows(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() != 2 || gamma.numel() != x.cols() {
        return Err(Error::ShapeMismatch(format!(
            "rms_norm_rows x {:?} vs gamma {:?}",
            x.shape(),
            gamma.shape()
        )));
    }
    let (m, _) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..m {
        let r = rms_norm(&x.row_tensor(i), gamma, eps)?;
        out.row_mut(i).copy_from_slice(r.data());
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// x * sigmoid(x), elementwise.
pub fn silu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Elementwise sum; shapes must match.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "add {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Adds a rank-1 bias to every row of a matrix.
pub fn add_row_broadcast(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || bias.numel() != x.cols() {
        return Err(Error::ShapeMismatch(format!(
            "add_row_broadcast {:?} vs {:?}",
            x.shape(),
            bias.shape()
        )));
    }
    let mut out = x.clone();
    for i in 0..x.rows() {
        for (o, &b) in out.row_mut(i).iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let data = x.data().iter().map(|&v| v * c).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Index of the runner-up value (lowest index among ties), requires len >= 2.
pub fn second_argmax(row: &[f64]) -> usize {
    let top = argmax(row);
    let mut best = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if i == top {
            continue;
        }
        if best == usize::MAX || v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Prng;

    fn random_matrix(rng: &mut Prng, m: usize, n: usize) -> Tensor {
        let data = (0..m * n).map(|_| rng.normal(0.0, 1.0)).collect();
        Tensor::new(vec![m, n], data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap();
        let a = Tensor::matrix(2, 2, vec![3., -1., 0.5, 7.]).unwrap();
        assert!(matmul(&eye, &a).unwrap().bit_eq(&a));
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::matrix(2, 1, vec![0., 1.]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = Prng::from_seed(99);
        let a = random_matrix(&mut rng, 8, 8);
        let b = random_matrix(&mut rng, 8, 8);
        let c = matmul(&a, &b).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = 0.0;
                for t in 0..8 {
                    acc += a.at(i, t) * b.at(t, j);
                }
                assert_eq!(c.at(i, j).to_bits(), acc.to_bits(), "({i},{j})");
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_uniform_when_equal() {
        let scores = Tensor::matrix(1, 4, vec![2.5; 4]).unwrap();
        let mask = Tensor::matrix(1, 4, vec![1.0; 4]).unwrap();
        let p = row_softmax_masked(&scores, &mask).unwrap();
        for &v in p.data() {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn softmax_single_unmasked_is_one() {
        let scores = Tensor::matrix(2, 3, vec![5., -2., 0.3, 1., 1., 1.]).unwrap();
        let mask = Tensor::matrix(2, 3, vec![0., 1., 0., 0., 0., 1.]).unwrap();
        let p = row_softmax_masked(&scores, &mask).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(p.row(1), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_causal_matches_exp_sum_oracle() {
        let mut rng = Prng::from_seed(4);
        let scores = random_matrix(&mut rng, 3, 3);
        let mut mask = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            for j in 0..=i {
                mask.set(i, j, 1.0);
            }
        }
        let p = row_softmax_masked(&scores, &mask).unwrap();
        for i in 0..3 {
            let mut denom = 0.0;
            for j in 0..=i {
                denom += scores.at(i, j).exp();
            }
            for j in 0..3 {
                let expect = if j <= i {
                    scores.at(i, j).exp() / denom
                } else {
                    0.0
                };
                assert!((p.at(i, j) - expect).abs() <= 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn softmax_degenerate_row_rejected() {
        let scores = Tensor::matrix(1, 2, vec![0., 0.]).unwrap();
        let mask = Tensor::matrix(1, 2, vec![0., 0.]).unwrap();
        assert!(matches!(
            row_softmax_masked(&scores, &mask),
            Err(Error::DegenerateMaskRow(0))
        ));
    }

    #[test]
    fn softmax_ignores_masked_values_bitwise() {
        let mut rng = Prng::from_seed(12);
        let mask = Tensor::matrix(2, 4, vec![1., 0., 1., 0., 0., 1., 1., 1.]).unwrap();
        let a = random_matrix(&mut rng, 2, 4);
        let mut b = a.clone();
        for i in 0..2 {
            for j in 0..4 {
                if mask.at(i, j) == 0.0 {
                    b.set(i, j, 0.0);
                }
            }
        }
        let pa = row_softmax_masked(&a, &mask).unwrap();
        let pb = row_softmax_masked(&b, &mask).unwrap();
        assert!(pa.bit_eq(&pb));
    }

    #[test]
    fn rms_norm_zero_vector() {
        let x = Tensor::vector(vec![0.0; 4]);
        let g = Tensor::vector(vec![1.0; 4]);
        let y = rms_norm(&x, &g, 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
    }

    #[test]
    fn rms_norm_unit_scale() {
        // mean square exactly 1
        let x = Tensor::vector(vec![1.0, -1.0, 1.0, -1.0]);
        let g = Tensor::vector(vec![1.0; 4]);
        let y = rms_norm(&x, &g, 1e-14).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn rms_norm_matches_scalar_loop() {
        let mut rng = Prng::from_seed(8);
        let x = Tensor::vector((0..8).map(|_| rng.normal(0.0, 2.0)).collect());
        let g = Tensor::vector((0..8).map(|_| rng.normal(1.0, 0.1)).collect());
        let eps = 1e-5;
        let y = rms_norm(&x, &g, eps).unwrap();
        let mut ms = 0.0;
        for &v in x.data() {
            ms += v * v;
        }
        ms /= 8.0;
        for i in 0..8 {
            let expect = g.data()[i] * x.data()[i] / (ms + eps).sqrt();
            assert!((y.data()[i] - expect).abs() <= 1e-15);
        }
    }

    #[test]
    fn argmax_tie_takes_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(second_argmax(&[1.0, 3.0, 3.0, 2.0]), 2);
        assert_eq!(second_argmax(&[5.0, 1.0, 1.0]), 1);
    }
}
