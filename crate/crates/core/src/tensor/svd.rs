//! One-sided (Hestenes) Jacobi SVD for small square matrices.

use super::kernels::dot;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Largest normalized column inner product accepted as orthogonal.
pub const SVD_TOLERANCE: f64 = 1e-12;
pub const SVD_MAX_SWEEPS: usize = 100;

/// `m = u · diag(s) · vᵀ` with `s` descending and non-negative.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor<f64>,
    pub s: Vec<f64>,
    pub v: Tensor<f64>,
    pub sweeps: usize,
}

impl Svd {
    /// `u · diag(s) · vᵀ`.
    pub fn reconstruct(&self) -> Tensor<f64> {
        let d = self.s.len();
        let mut us = self.u.clone();
        for row in us.data_mut().chunks_exact_mut(d) {
            for (x, &s) in row.iter_mut().zip(&self.s) {
                *x *= s;
            }
        }
        us.matmul(&self.v.transpose().unwrap()).unwrap()
    }
}

pub fn svd_small<F: Real>(m: &Tensor<F>) -> Result<Svd> {
    let (rows, d) = m.dims2("svd_small")?;
    if rows != d {
        return Err(Error::shape("svd_small", m.shape(), &[d, d]));
    }
    if !m.is_finite() {
        return Err(Error::Contract("svd_small input has non-finite entries".into()));
    }

    // Column-major working copies: cols[j] is column j of A·V.
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|j| (0..d).map(|i| m.data()[i * d + j].as_f64()).collect())
        .collect();
    let mut vcols: Vec<Vec<f64>> = (0..d)
        .map(|j| (0..d).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut sweeps = 0;
    let mut off = f64::INFINITY;
    while sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        off = 0.0;
        for p in 0..d {
            for q in p + 1..d {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                if rel <= SVD_TOLERANCE {
                    continue;
                }
                off = off.max(rel);
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = (1.0 + t * t).sqrt().recip();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if off <= SVD_TOLERANCE {
            break;
        }
    }
    if off > SVD_TOLERANCE {
        return Err(Error::NonConvergence {
            what: "jacobi svd",
            residual: off,
        });
    }

    let mut order: Vec<(f64, usize)> = cols.iter().enumerate().map(|(j, c)| (dot(c, c).sqrt(), j)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let smax = order.first().map_or(0.0, |o| o.0);
    let cutoff = smax * f64::EPSILON * d as f64;
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut s = Vec::with_capacity(d);
    let mut deficient = Vec::new();
    for (k, &(sigma, j)) in order.iter().enumerate() {
        if sigma > cutoff && sigma > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / sigma).collect());
        } else {
            ucols.push(Vec::new());
            deficient.push(k);
        }
        s.push(if sigma > cutoff { sigma } else { 0.0 });
    }
    complete_basis(&mut ucols, &deficient, d);

    let mut u = Tensor::zeros([d, d]);
    let mut v = Tensor::zeros([d, d]);
    for (k, &(_, j)) in order.iter().enumerate() {
        for i in 0..d {
            u.data_mut()[i * d + k] = ucols[k][i];
            v.data_mut()[i * d + k] = vcols[j][i];
        }
    }
    Ok(Svd { u, s, v, sweeps })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the columns listed in `missing` with unit vectors orthogonal to the rest.
fn complete_basis(ucols: &mut [Vec<f64>], missing: &[usize], d: usize) {
    let mut candidate = 0;
    for &k in missing {
        loop {
            assert!(candidate < d, "basis completion ran out of candidates");
            let mut e = vec![0.0; d];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for other in ucols.iter().filter(|c| !c.is_empty()) {
                    let proj = dot(&e, other);
                    for (x, o) in e.iter_mut().zip(other) {
                        *x -= proj * o;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                ucols[k] = e.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ortho_error(q: &Tensor<f64>) -> f64 {
        let d = q.shape()[0];
        q.transpose().unwrap().matmul(q).unwrap().sub(&Tensor::eye(d)).unwrap().norm()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, d: usize) -> Tensor<f64> {
        Tensor::new([d, d], (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity() {
        let svd = svd_small(&Tensor::<f64>::eye(4)).unwrap();
        assert_eq!(svd.s, vec![1.0; 4]);
        let uvt = svd.u.matmul(&svd.v.transpose().unwrap()).unwrap();
        assert!(uvt.sub(&Tensor::eye(4)).unwrap().norm() < 1e-12);
        assert_eq!(svd.reconstruct(), Tensor::eye(4));
    }

    #[test]
    fn diagonal_values_come_back_sorted() {
        let m = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap();
        let svd = svd_small(&m).unwrap();
        assert_eq!(svd.s, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn random_five_by_five_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_matrix(&mut rng, 5);
        let svd = svd_small(&m).unwrap();
        assert!(svd.reconstruct().sub(&m).unwrap().norm() < 1e-10);
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rank_deficient_still_orthogonal() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let svd = svd_small(&m).unwrap();
        assert!(ortho_error(&svd.u) < 1e-10);
        assert!(ortho_error(&svd.v) < 1e-10);
        assert!(svd.reconstruct().sub(&m).unwrap().norm() < 1e-10);
        assert_eq!(svd.s[2], 0.0);
    }

    #[test]
    fn zero_matrix() {
        let svd = svd_small(&Tensor::<f64>::zeros([3, 3])).unwrap();
        assert_eq!(svd.s, vec![0.0; 3]);
        assert!(ortho_error(&svd.u) < 1e-12);
    }

    #[test]
    fn rejects_non_square_and_non_finite() {
        assert!(svd_small(&Tensor::<f64>::zeros([2, 3])).is_err());
        let m = Tensor::new([2, 2], vec![1.0, f64::NAN, 0.0, 1.0]).unwrap();
        assert!(svd_small(&m).is_err());
    }

    #[test]
    fn hundred_random_matrices_meet_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..100 {
            let d = 2 + case % 9;
            let m = random_matrix(&mut rng, d);
            let svd = svd_small(&m).unwrap();
            if svd.s[0] / svd.s[d - 1] >= 1e6 {
                continue;
            }
            assert!(ortho_error(&svd.u) < 1e-6, "case {case}");
            assert!(ortho_error(&svd.v) < 1e-6, "case {case}");
            let resid = svd.reconstruct().sub(&m).unwrap().norm();
            assert!(resid < 1e-6 * m.norm(), "case {case}: {resid}");
            assert!(svd.s.iter().all(|&s| s >= 0.0));
        }
    }
}
