//! One-sided Jacobi SVD.
//!
//! Deterministic (fixed sweep order, no randomized pivoting) and accurate for
//! the small dense matrices used here (d up to a few hundred).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::Matrix;

const MAX_SWEEPS: usize = 80;
const ROT_EPS: f64 = 1e-15;

/// Thin SVD `A = U diag(s) Vᵀ` with singular values sorted descending.
///
/// `u` is m×k and `v` is n×k with k = min(m, n). Columns of `u` belonging to
/// zero singular values are zero.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub s: DVector<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, sj) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(*sj);
        }
        us * self.v.transpose()
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("svd input"));
    }
    if a.nrows() >= a.ncols() {
        Ok(jacobi_tall(a))
    } else {
        let t = jacobi_tall(&a.transpose());
        Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

pub fn singular_values(a: &Matrix) -> Result<DVector<f64>> {
    svd(a).map(|s| s.s)
}

fn jacobi_tall(a: &Matrix) -> Svd {
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let cp = w.column(p);
                    let cq = w.column(q);
                    (cp.norm_squared(), cq.norm_squared(), cp.dot(&cq))
                };
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= ROT_EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(usize, f64)> = (0..n).map(|j| (j, w.column(j).norm())).collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));

    let mut u = Matrix::zeros(m, n);
    let mut vs = Matrix::zeros(n, n);
    let mut s = DVector::zeros(n);
    for (k, (j, sigma)) in order.into_iter().enumerate() {
        s[k] = sigma;
        if sigma > 0.0 {
            u.set_column(k, &(w.column(j) / sigma));
        }
        vs.set_column(k, &v.column(j));
    }
    Svd { u, s, v: vs }
}

fn rotate(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let a = m[(i, p)];
        let b = m[(i, q)];
        m[(i, p)] = c * a - s * b;
        m[(i, q)] = s * a + c * b;
    }
}
