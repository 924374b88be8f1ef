//! When can a bilinear score make every query prefer the BOS key?
//!
//! For normalized tokens z₀ (BOS), z₁…z_T and a query set J, some W gives
//! zⱼᵀWz₀ > zⱼᵀWzᵢ for all j ∈ J, i ≥ 1 exactly when both {z₀ - zᵢ} and
//! {zⱼ : j ∈ J} lie in strict half-spaces. The witness is then rank one.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::block::TokenMatrix;
use crate::error::{invalid, Error, Result};
use crate::linalg::{
    numerical_rank, orthonormal_range, strict_half_space, HalfSpace, RANK_REL_TOL,
};
use crate::Matrix;

#[derive(Clone, Debug)]
pub struct SinkCheckReport {
    pub representable: bool,
    pub diff_halfspace: HalfSpace,
    pub query_halfspace: HalfSpace,
    pub witness_w: Option<Matrix>,
    /// Positions i with z₀ = zᵢ, for which no W can separate.
    pub boundary: Vec<usize>,
    /// min over (i, j) of zⱼᵀW(z₀ - zᵢ) for the witness.
    pub witness_margin: Option<f64>,
}

/// `z` holds z₀ (BOS) in column 0; `queries` are 1-based context positions.
pub fn sink_representable(z: &TokenMatrix, queries: &[usize]) -> Result<SinkCheckReport> {
    let t = z.len().saturating_sub(1);
    if t == 0 {
        return Err(invalid("need BOS plus at least one context token"));
    }
    if queries.is_empty() || queries.iter().any(|&j| j == 0 || j > t) {
        return Err(invalid(format!(
            "query set must be a non-empty subset of 1..={t}"
        )));
    }
    let z0 = z.col(0);
    let diffs: Vec<DVector<f64>> = (1..=t).map(|i| &z0 - z.col(i)).collect();
    let scale = z.0.amax().max(1e-300);
    let boundary: Vec<usize> = diffs
        .iter()
        .enumerate()
        .filter(|(_, v)| v.amax() <= 1e-14 * scale)
        .map(|(i, _)| i + 1)
        .collect();
    let qs: Vec<DVector<f64>> = queries.iter().map(|&j| z.col(j)).collect();

    let diff_halfspace = strict_half_space(&diffs)?;
    let query_halfspace = strict_half_space(&qs)?;
    let representable = diff_halfspace.feasible && query_halfspace.feasible && boundary.is_empty();

    let (witness_w, witness_margin) = match (&query_halfspace.witness, &diff_halfspace.witness) {
        (Some(u), Some(v)) if representable => {
            let w = u * v.transpose();
            let m = qs
                .iter()
                .flat_map(|q| diffs.iter().map(move |df| (q, df)))
                .map(|(q, df)| q.dot(&(&w * df)))
                .fold(f64::INFINITY, f64::min);
            (Some(w), Some(m))
        }
        _ => (None, None),
    };
    Ok(SinkCheckReport {
        representable,
        diff_halfspace,
        query_halfspace,
        witness_w,
        boundary,
        witness_margin,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Five-number summary with linearly interpolated quartiles.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(invalid("no values to summarize"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let x = p * (v.len() - 1) as f64;
        let lo = x.floor() as usize;
        let hi = x.ceil() as usize;
        v[lo] + (x - lo as f64) * (v[hi] - v[lo])
    };
    Ok(Summary {
        n: v.len(),
        min: v[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: v[v.len() - 1],
    })
}

/// cos(z₀, zᵢ) for every context token.
pub fn bos_cosines(z: &TokenMatrix) -> Result<Vec<f64>> {
    if z.len() < 2 {
        return Err(invalid("need BOS plus at least one context token"));
    }
    let norms: Vec<f64> = z.0.column_iter().map(|c| c.norm()).collect();
    if let Some(j) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroColumn { index: j });
    }
    let z0 = z.0.column(0);
    Ok((1..z.len())
        .map(|i| z0.dot(&z.0.column(i)) / (norms[0] * norms[i]))
        .collect())
}

pub fn bos_alignment_stats(z: &TokenMatrix) -> Result<Summary> {
    summarize(&bos_cosines(z)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchPreconditions {
    /// Every sequence's context tokens lie in a strict half-space.
    pub halfspace_ok: bool,
    /// Every sequence's context tokens are linearly independent.
    pub fullrank_ok: bool,
    /// Every sequence satisfies at least one of the two conditions above.
    pub per_sequence_ok: bool,
    pub rank_equality_ok: bool,
    pub value_fullrank_on_span: bool,
    pub rank_inputs: usize,
    pub rank_outputs: usize,
}

/// Evaluates the preconditions under which a head that switches tokens off
/// must do so through the sink.
///
/// `sequences` are the head's inputs (BOS in column 0), `outputs` the
/// attention-layer outputs for the same tokens. The aᵢ/bᵢ collections use
/// positions 1..T-1 of every sequence.
pub fn switch_preconditions(
    sequences: &[TokenMatrix],
    outputs: &[TokenMatrix],
    w_vo: &Matrix,
) -> Result<SwitchPreconditions> {
    if sequences.is_empty() {
        return Err(invalid("no sequences"));
    }
    if sequences.len() != outputs.len() {
        return Err(invalid("need one output matrix per sequence"));
    }
    let d = sequences[0].dim();
    if w_vo.shape() != (d, d) {
        return Err(Error::Shape {
            context: "switch_preconditions",
            expected: format!("{d}x{d} value map"),
            found: format!("{:?}", w_vo.shape()),
        });
    }
    let mut a_cols = Vec::new();
    let mut b_cols = Vec::new();
    let (mut hs_all, mut fr_all, mut either_all) = (true, true, true);
    for (x, y) in sequences.iter().zip(outputs) {
        if x.0.shape() != y.0.shape() || x.dim() != d {
            return Err(invalid("sequence and output shapes differ"));
        }
        let t = x.len() - 1;
        if t < 2 {
            return Err(invalid("sequences need at least two context tokens"));
        }
        let ctx: Vec<DVector<f64>> = (1..=t).map(|i| x.col(i)).collect();
        let hs = strict_half_space(&ctx)?.feasible;
        let fr = numerical_rank(&x.0.columns(1, t).into_owned(), RANK_REL_TOL)? == t;
        hs_all &= hs;
        fr_all &= fr;
        either_all &= hs || fr;
        for i in 1..t {
            a_cols.push(x.col(i));
            b_cols.push(y.col(i));
        }
    }
    let a = Matrix::from_columns(&a_cols);
    let b = Matrix::from_columns(&b_cols);
    let rank_inputs = numerical_rank(&a, RANK_REL_TOL)?;
    let rank_outputs = numerical_rank(&b, RANK_REL_TOL)?;
    let basis = orthonormal_range(&a, RANK_REL_TOL)?;
    let value_fullrank_on_span =
        basis.ncols() == 0 || numerical_rank(&(w_vo * &basis), RANK_REL_TOL)? == basis.ncols();
    Ok(SwitchPreconditions {
        halfspace_ok: hs_all,
        fullrank_ok: fr_all,
        per_sequence_ok: either_all,
        rank_equality_ok: rank_inputs == rank_outputs,
        value_fullrank_on_span,
        rank_inputs,
        rank_outputs,
    })
}

/// numerical_rank(W_V Z) / min(d_v, T).
pub fn value_rank_profile(z: &TokenMatrix, w_v: &Matrix, rel_tol: f64) -> Result<f64> {
    if w_v.ncols() != z.dim() {
        return Err(Error::Shape {
            context: "value_rank_profile",
            expected: format!("W_V with {} columns", z.dim()),
            found: format!("{:?}", w_v.shape()),
        });
    }
    let m = w_v * &z.0;
    let den = w_v.nrows().min(z.len());
    if den == 0 {
        return Err(invalid("empty value matrix"));
    }
    Ok(numerical_rank(&m, rel_tol)? as f64 / den as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opposite_queries_not_representable() {
        let z = TokenMatrix(Matrix::from_column_slice(
            2,
            3,
            &[1.0, 0.0, 0.0, 1.0, 0.0, -1.0],
        ));
        let r = sink_representable(&z, &[1, 2]).unwrap();
        assert!(!r.representable && !r.query_halfspace.feasible);
    }

    #[test]
    fn boundary_token_flagged() {
        let z = TokenMatrix(Matrix::from_column_slice(
            2,
            3,
            &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        ));
        let r = sink_representable(&z, &[2]).unwrap();
        assert!(!r.representable);
        assert_eq!(r.boundary, vec![1]);
    }

    #[test]
    fn anti_aligned_context_is_representable() {
        let z = TokenMatrix(Matrix::from_column_slice(
            3,
            4,
            &[
                1.0, 0.0, 0.0, -1.0, 0.2, 0.0, -0.5, -0.4, 0.3, -0.9, 0.0, -0.3,
            ],
        ));
        assert!(bos_alignment_stats(&z).unwrap().max < 0.0);
        for j in [vec![1], vec![2, 3], vec![1, 2, 3]] {
            let r = sink_representable(&z, &j).unwrap();
            assert!(r.representable);
            assert!(r.witness_margin.unwrap() > 0.0);
        }
    }

    #[test]
    fn summary_quartiles() {
        let s = summarize(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!(
            (s.min, s.q1, s.median, s.q3, s.max),
            (1.0, 2.0, 3.0, 4.0, 5.0)
        );
        let z = TokenMatrix(Matrix::from_column_slice(
            2,
            3,
            &[1.0, 0.0, -1.0, 0.0, -2.0, 0.0],
        ));
        assert_eq!(bos_alignment_stats(&z).unwrap().max, -1.0);
    }

    #[test]
    fn switch_flags() {
        let mut x = Matrix::zeros(4, 4);
        for i in 1..4 {
            x[(i, i)] = 1.0;
        }
        x[(0, 0)] = 1.0;
        let seq = TokenMatrix(x.clone());
        let p = switch_preconditions(
            std::slice::from_ref(&seq),
            std::slice::from_ref(&seq),
            &Matrix::identity(4, 4),
        )
        .unwrap();
        assert!(p.halfspace_ok && p.fullrank_ok && p.rank_equality_ok && p.value_fullrank_on_span);

        let mut w = Matrix::identity(4, 4);
        w[(1, 1)] = 0.0;
        let p = switch_preconditions(std::slice::from_ref(&seq), std::slice::from_ref(&seq), &w)
            .unwrap();
        assert!(!p.value_fullrank_on_span);
    }

    #[test]
    fn value_rank() {
        let z = TokenMatrix(Matrix::identity(5, 3));
        assert_eq!(
            value_rank_profile(&z, &Matrix::identity(5, 5), 1e-3).unwrap(),
            1.0
        );
        let u = DVector::from_element(5, 1.0);
        let w = &u * u.transpose();
        assert!((value_rank_profile(&z, &w, 1e-3).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }
}
