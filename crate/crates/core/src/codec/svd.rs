use super::Matrix;
use crate::error::{Error, Result};

/// Sweep limit of the Jacobi iteration.
pub const MAX_SWEEPS: usize = 30;
/// Stop once the off-diagonal norm of the column Gram matrix falls below
/// this fraction of `‖A‖_F²`.
pub const CONVERGENCE: f64 = 1e-10;

/// Thin factorisation `A ≈ U·diag(σ)·V` with `U: [P, K]`, `V: [K, Q]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    /// Nonnegative, descending.
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.cols())
    }

    pub fn reconstruct(&self) -> Result<Matrix> {
        let (p, q) = self.shape();
        let k = self.rank();
        let mut us = self.u.clone();
        for r in 0..p {
            for c in 0..k {
                us.set(r, c, self.u.get(r, c) * self.sigma[c]);
            }
        }
        let out = us.matmul(&self.v)?;
        debug_assert_eq!((out.rows(), out.cols()), (p, q));
        Ok(out)
    }
}

/// Full thin SVD with `K = min(P, Q)` by one-sided (Hestenes) Jacobi.
pub fn svd_decompose(a: &Matrix) -> Result<SvdFactors> {
    if a.rows() >= a.cols() {
        let (u, sigma, v) = jacobi_tall(a)?;
        Ok(SvdFactors { u, sigma, v: v.transpose() })
    } else {
        // Aᵀ = U' Σ V'ᵀ  ⇒  A = V' Σ U'ᵀ
        let (u_t, sigma, v_t) = jacobi_tall(&a.transpose())?;
        Ok(SvdFactors {
            u: v_t,
            sigma,
            v: u_t.transpose(),
        })
    }
}

/// Keeps the leading `k` singular triplets.
pub fn truncate(f: &SvdFactors, k: usize) -> Result<SvdFactors> {
    if k == 0 || k > f.rank() {
        return Err(Error::arg(format!("rank {k} outside 1..={}", f.rank())));
    }
    let (p, q) = f.shape();
    let mut u = Matrix::zeros(p, k);
    for r in 0..p {
        for c in 0..k {
            u.set(r, c, f.u.get(r, c));
        }
    }
    let v = Matrix::new(k, q, f.v.data()[..k * q].to_vec())?;
    Ok(SvdFactors {
        u,
        sigma: f.sigma[..k].to_vec(),
        v,
    })
}

/// Column-major working copy so rotations touch contiguous memory.
struct Columns {
    rows: usize,
    cols: Vec<Vec<f64>>,
}

impl Columns {
    fn of(m: &Matrix) -> Self {
        let cols = (0..m.cols()).map(|c| (0..m.rows()).map(|r| m.get(r, c)).collect()).collect();
        Columns { rows: m.rows(), cols }
    }

    fn rotate(&mut self, i: usize, j: usize, c: f64, s: f64) {
        let (lo, hi) = self.cols.split_at_mut(j);
        for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
            let (xi, yj) = (*x, *y);
            *x = c * xi - s * yj;
            *y = s * xi + c * yj;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `(U [P,Q], σ [Q], V [Q,Q])` with `A = U diag(σ) Vᵀ`, for `P ≥ Q`.
fn jacobi_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (p, q) = (a.rows(), a.cols());
    let norm2 = a.frobenius().powi(2);
    let mut w = Columns::of(a);
    let mut v = Columns::of(&Matrix::identity(q));
    let mut converged = q == 1 || norm2 == 0.0;
    let mut off = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut off2 = 0.0;
        for i in 0..q {
            for j in i + 1..q {
                let alpha = dot(&w.cols[i], &w.cols[i]);
                let beta = dot(&w.cols[j], &w.cols[j]);
                let gamma = dot(&w.cols[i], &w.cols[j]);
                off2 += gamma * gamma;
                if gamma == 0.0 {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                w.rotate(i, j, c, s);
                v.rotate(i, j, c, s);
            }
        }
        off = off2.sqrt();
        converged = off < CONVERGENCE * norm2;
    }
    if !converged {
        let residual = off / norm2;
        return Err(Error::Numeric(format!(
            "Jacobi SVD did not converge in {MAX_SWEEPS} sweeps (relative off-diagonal norm {residual:.3e})"
        )));
    }

    let norms: Vec<f64> = w.cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let tiny = f64::EPSILON * (p.max(q) as f64) * norm2.sqrt();
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut sigma = Vec::with_capacity(q);
    for &k in &order {
        let s = norms[k];
        if s > tiny {
            u_cols.push(w.cols[k].iter().map(|x| x / s).collect());
            sigma.push(s);
        } else {
            sigma.push(0.0);
            u_cols.push(orthonormal_completion(&u_cols, p));
        }
    }
    let mut u = Matrix::zeros(p, q);
    let mut vm = Matrix::zeros(q, q);
    for (c, &k) in order.iter().enumerate() {
        for r in 0..p {
            u.set(r, c, u_cols[c][r]);
        }
        for r in 0..q {
            vm.set(r, c, v.cols[k][r]);
        }
    }
    debug_assert_eq!(w.rows, p);
    Ok((u, sigma, vm))
}

/// A unit vector orthogonal to `basis`, found by Gram–Schmidt over the
/// standard basis.
fn orthonormal_completion(basis: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut best = vec![0.0; n];
    let mut best_norm = -1.0;
    for e in 0..n {
        let mut x = vec![0.0; n];
        x[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d = dot(&x, b);
                for (xi, bi) in x.iter_mut().zip(b) {
                    *xi -= d * bi;
                }
            }
        }
        let norm = dot(&x, &x).sqrt();
        if norm > 0.5 {
            return x.into_iter().map(|v| v / norm).collect();
        }
        if norm > best_norm {
            best_norm = norm;
            best = x;
        }
    }
    best.into_iter().map(|v| v / best_norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(p: usize, q: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(p, q, (0..p * q).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn orthonormal_rows(m: &Matrix) -> f64 {
        let g = m.matmul(&m.transpose()).unwrap();
        g.distance(&Matrix::identity(m.rows())).unwrap()
    }

    #[test]
    fn identity_and_diagonal() {
        let f = svd_decompose(&Matrix::identity(3)).unwrap();
        assert_eq!(f.sigma.len(), 3);
        for s in &f.sigma {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let f = svd_decompose(&Matrix::from_diag(&[1.0, 3.0, 2.0]).unwrap()).unwrap();
        for (s, e) in f.sigma.iter().zip([3.0, 2.0, 1.0]) {
            assert!((s - e).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstructs_tall_and_wide() {
        for (p, q) in [(5, 4), (4, 5), (64, 4), (1, 3), (3, 1)] {
            let a = random(p, q, (p * 10 + q) as u64);
            let f = svd_decompose(&a).unwrap();
            assert_eq!(f.rank(), p.min(q));
            let err = f.reconstruct().unwrap().distance(&a).unwrap();
            assert!(err <= 1e-5 * a.frobenius(), "{p}x{q}: {err}");
            assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
            assert!(orthonormal_rows(&f.u.transpose()) < 1e-5);
            assert!(orthonormal_rows(&f.v) < 1e-5);
        }
    }

    #[test]
    fn rank_deficient_completes_u() {
        let mut a = Matrix::zeros(6, 3);
        for r in 0..6 {
            a.set(r, 0, r as f64);
            a.set(r, 1, 2.0 * r as f64);
        }
        let f = svd_decompose(&a).unwrap();
        assert!(f.sigma[1].abs() < 1e-9 && f.sigma[2].abs() < 1e-9);
        assert!(orthonormal_rows(&f.u.transpose()) < 1e-9);
        assert!(f.reconstruct().unwrap().distance(&a).unwrap() < 1e-9);

        let z = svd_decompose(&Matrix::zeros(4, 2)).unwrap();
        assert_eq!(z.sigma, vec![0.0, 0.0]);
        assert!(orthonormal_rows(&z.u.transpose()) < 1e-12);
    }

    #[test]
    fn truncation_matches_discarded_energy() {
        let a = Matrix::from_diag(&[3.0, 2.0, 1.0]).unwrap();
        let f = svd_decompose(&a).unwrap();
        let t = truncate(&f, 2).unwrap();
        let err = t.reconstruct().unwrap().distance(&a).unwrap();
        assert!((err - 1.0).abs() < 1e-12);
        assert!(truncate(&f, 0).is_err());
        assert!(truncate(&f, 4).is_err());
    }
}
