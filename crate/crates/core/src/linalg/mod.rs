//! Linear-algebra kernel: SVD-based norms and ranks, half-space feasibility,
//! Gram-matrix eigenvalue bounds.

mod lp;
mod svd;

pub use lp::{Constraint, LinearProgram, LpSolution, Relation};
pub use svd::{singular_values, svd, Svd};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::Matrix;

/// Singular values at or below this are treated as zero when inverting.
pub const SV_CUTOFF: f64 = 1e-12;
/// Default relative tolerance for [`numerical_rank`].
pub const RANK_REL_TOL: f64 = 1e-3;
/// Optimal margin above which a half-space is reported feasible.
pub const HALFSPACE_TOL: f64 = 1e-9;

pub fn frobenius_sq(m: &Matrix) -> f64 {
    m.norm_squared()
}

pub fn nuclear_norm(m: &Matrix) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    Ok(singular_values(m)?.sum())
}

pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    Ok(singular_values(m)?.max())
}

/// Number of singular values strictly above `rel_tol · σ_max`.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(invalid(format!("rank tolerance {rel_tol} outside (0, 1)")));
    }
    if m.is_empty() {
        return Ok(0);
    }
    let s = singular_values(m)?;
    let smax = s.max();
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&x| x > rel_tol * smax).count())
}

/// Moore-Penrose pseudo-inverse with an absolute singular-value cutoff.
pub fn pinv(m: &Matrix) -> Result<Matrix> {
    let f = svd(m)?;
    let mut vs = f.v.clone();
    for (j, &sj) in f.s.iter().enumerate() {
        let inv = if sj > SV_CUTOFF { 1.0 / sj } else { 0.0 };
        vs.column_mut(j).scale_mut(inv);
    }
    Ok(vs * f.u.transpose())
}

/// Orthonormal basis of the column space, dropping directions with
/// σ ≤ rel_tol · σ_max.
pub fn orthonormal_range(m: &Matrix, rel_tol: f64) -> Result<Matrix> {
    let r = numerical_rank(m, rel_tol)?;
    let f = svd(m)?;
    Ok(f.u.columns(0, r).into_owned())
}

/// Orthonormal basis of the complement of span(q), where q has orthonormal
/// columns.
pub fn orthogonal_complement(q: &Matrix) -> Result<Matrix> {
    let d = q.nrows();
    let k = q.ncols();
    if k >= d {
        return Ok(Matrix::zeros(d, 0));
    }
    let p = Matrix::identity(d, d) - q * q.transpose();
    let f = svd(&p)?;
    Ok(f.u.columns(0, d - k).into_owned())
}

/// Haar-random orthogonal matrix (QR of a Gaussian matrix with sign fix).
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Matrix {
    let g = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

#[derive(Clone, Debug)]
pub struct HalfSpace {
    pub feasible: bool,
    /// Optimal `t` in: maximize t subject to uᵀvᵢ ≥ t, ‖u‖_∞ ≤ 1.
    pub margin: f64,
    pub witness: Option<DVector<f64>>,
    /// Set when some input vector is zero, so no strict half-space can exist.
    pub degenerate: bool,
}

/// Decides whether some u has uᵀvᵢ > 0 for every vᵢ.
pub fn strict_half_space(vectors: &[DVector<f64>]) -> Result<HalfSpace> {
    let Some(first) = vectors.first() else {
        return Err(invalid("strict_half_space needs at least one vector"));
    };
    let n = first.len();
    if vectors.iter().any(|v| v.len() != n) {
        return Err(invalid("vectors of different dimension"));
    }
    if vectors.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("half-space input"));
    }
    let scale = vectors.iter().map(|v| v.amax()).fold(0.0, f64::max);
    if vectors
        .iter()
        .any(|v| v.amax() <= 1e-14 * scale.max(1e-300))
    {
        return Ok(HalfSpace {
            feasible: false,
            margin: 0.0,
            witness: None,
            degenerate: true,
        });
    }

    // u = y - 1 with 0 ≤ y ≤ 2; t = t⁺ - t⁻.
    let mut obj = vec![0.0; n + 2];
    obj[n] = 1.0;
    obj[n + 1] = -1.0;
    let mut lp = LinearProgram::new(obj);
    for v in vectors {
        let mut row: Vec<f64> = v.iter().copied().collect();
        row.push(-1.0);
        row.push(1.0);
        lp.add(row, Relation::Ge, v.sum());
    }
    for k in 0..n {
        let mut row = vec![0.0; n + 2];
        row[k] = 1.0;
        lp.add(row, Relation::Le, 2.0);
    }
    match lp.solve()? {
        LpSolution::Optimal { x, value } => {
            let u = DVector::from_iterator(n, x[..n].iter().map(|y| y - 1.0));
            let feasible = value > HALFSPACE_TOL * scale;
            Ok(HalfSpace {
                feasible,
                margin: value,
                witness: feasible.then_some(u),
                degenerate: false,
            })
        }
        other => Err(invalid(format!("half-space LP ended as {other:?}"))),
    }
}

/// For unit columns with pairwise |⟨uᵢ,uⱼ⟩| ≤ φ and an odd count m = 1 + 2C,
/// returns 1 - 2Cφ, a lower bound on λ_min(UᵀU).
pub fn gram_min_eig_bound(u: &Matrix, phi: f64) -> Result<f64> {
    let m = u.ncols();
    if m == 0 || m.is_multiple_of(2) {
        return Err(invalid(format!("expected 1 + 2C columns, got {m}")));
    }
    for j in 0..m {
        let nj = u.column(j).norm();
        if (nj - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("column {j} has norm {nj}, expected 1")));
        }
    }
    for i in 0..m {
        for j in (i + 1)..m {
            let inner = u.column(i).dot(&u.column(j));
            if inner.abs() > phi + 1e-12 {
                return Err(Error::NearOrthogonality { i, j, inner, phi });
            }
        }
    }
    let c = (m - 1) / 2;
    let bound = 1.0 - 2.0 * c as f64 * phi;
    let smin = singular_values(u)?.min();
    debug_assert!(smin * smin >= bound - 1e-10);
    Ok(bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nuclear_norm_of_diag() {
        let m = Matrix::from_diagonal(&DVector::from_vec(vec![3.0, -2.0, 0.5]));
        assert!((nuclear_norm(&m).unwrap() - 5.5).abs() < 1e-14);
    }

    #[test]
    fn rank_of_outer_product_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Matrix::from_fn(8, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        assert_eq!(
            numerical_rank(&(&a * a.transpose()), RANK_REL_TOL).unwrap(),
            3
        );
        assert_eq!(
            numerical_rank(&Matrix::zeros(4, 4), RANK_REL_TOL).unwrap(),
            0
        );
        assert!(numerical_rank(&a, 0.0).is_err());
    }

    #[test]
    fn pinv_inverts_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::from_fn(5, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let p = pinv(&a).unwrap();
        assert!((p * &a - Matrix::identity(5, 5)).amax() < 1e-9);
    }

    #[test]
    fn complement_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_orthogonal(6, &mut rng);
        let q2 = q.columns(0, 2).into_owned();
        let c = orthogonal_complement(&q2).unwrap();
        assert_eq!(c.ncols(), 4);
        assert!((q2.transpose() * &c).amax() < 1e-12);
        assert!((c.transpose() * &c - Matrix::identity(4, 4)).amax() < 1e-12);
    }

    #[test]
    fn half_space_basic_cases() {
        let e = |v: &[f64]| DVector::from_column_slice(v);
        let hs = strict_half_space(&[e(&[1.0, 0.0]), e(&[0.0, 1.0])]).unwrap();
        assert!(hs.feasible);
        let u = hs.witness.unwrap();
        assert!(u[0] > 0.0 && u[1] > 0.0);

        let hs = strict_half_space(&[e(&[1.0, 0.0]), e(&[-1.0, 0.0])]).unwrap();
        assert!(!hs.feasible && !hs.degenerate);

        let hs = strict_half_space(&[e(&[1.0, 0.0]), e(&[0.0, 0.0])]).unwrap();
        assert!(!hs.feasible && hs.degenerate);
    }

    #[test]
    fn gram_bound_holds_and_rejects_violations() {
        let u = Matrix::identity(5, 3);
        assert_eq!(gram_min_eig_bound(&u, 0.0).unwrap(), 1.0);
        let mut v = Matrix::identity(3, 3);
        v.set_column(1, &DVector::from_vec(vec![0.6, 0.8, 0.0]));
        assert!(matches!(
            gram_min_eig_bound(&v, 0.1),
            Err(Error::NearOrthogonality { i: 0, j: 1, .. })
        ));
    }
}
