//! Explicit sink and diagonal weights for the synthetic tasks, their
//! regularization cost, and the closed-form cost bounds.
//!
//! Score matrices are stored query-left: s(q, k) = qᵀ M k / √d with
//! M = W_Qᵀ W_K. Factored pairs are split with balanced square roots of the
//! SVD, so ‖W_Q‖_F² + ‖W_K‖_F² = 2‖M‖_*.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::block::{block_forward_traced, row_margins, AttentionMode, BlockWeights};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::linalg::{frobenius_sq, nuclear_norm, orthonormal_range, spectral_norm, svd};
use crate::tasks::{
    BackcopyFrames, BackcopySpec, Frames, GenericGeometry, LabeledSequence, TaskGeometry,
};
use crate::Matrix;

/// (W_Q, W_K) with W_Qᵀ W_K = m and ‖W_Q‖_F² = ‖W_K‖_F² = ‖m‖_*.
pub fn balanced_qk(m: &Matrix) -> Result<(Matrix, Matrix)> {
    let f = svd(m)?;
    let root = Matrix::from_diagonal(&f.s.map(f64::sqrt));
    Ok((&root * f.u.transpose(), &root * f.v.transpose()))
}

/// (W_V, W_O) with W_O W_V = n, balanced.
pub fn balanced_vo(n: &Matrix) -> Result<(Matrix, Matrix)> {
    let f = svd(n)?;
    let root = Matrix::from_diagonal(&f.s.map(f64::sqrt));
    Ok((&root * f.v.transpose(), &f.u * &root))
}

/// ReLU MLP computing z ↦ n z on every input with ‖z‖ ≤ `max_norm`: the input
/// bias keeps all preactivations positive and the output bias removes it.
pub fn linear_mlp(
    n: &Matrix,
    max_norm: f64,
) -> Result<(Matrix, DVector<f64>, Matrix, DVector<f64>)> {
    let f = svd(n)?;
    let root = Matrix::from_diagonal(&f.s.map(f64::sqrt));
    let w_1 = &root * f.v.transpose();
    let w_2 = &f.u * &root;
    let offset = spectral_norm(&w_1)? * max_norm + 1.0;
    let b_1 = DVector::from_element(w_1.nrows(), offset);
    let b_2 = -(&w_2 * &b_1);
    Ok((w_1, b_1, w_2, b_2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub qk_nuclear: f64,
    pub vo_nuclear: f64,
    pub mlp_frobsq: f64,
    /// 2‖W_QK‖_* + 2‖W_VO‖_* + ‖W₁‖_F² + ‖W₂‖_F²: the Frobenius cost of a
    /// balanced factorization.
    pub total: f64,
    /// ‖W_QK‖_* + ‖W_VO‖_* + ‖W₁‖_F² + ‖W₂‖_F².
    pub nuclear_total: f64,
    /// ‖W_Q‖_F² + ‖W_K‖_F² + ‖W_V‖_F² + ‖W_O‖_F² + MLP, as stored.
    pub raw_frobsq: f64,
}

/// Biases carry no cost.
pub fn block_cost(w: &BlockWeights) -> Result<CostReport> {
    w.validate()?;
    let qk = nuclear_norm(&w.w_qk())?;
    let vo = nuclear_norm(&w.w_vo())?;
    let mlp = frobenius_sq(&w.w_1) + frobenius_sq(&w.w_2);
    let raw = frobenius_sq(&w.w_q)
        + frobenius_sq(&w.w_k)
        + frobenius_sq(&w.w_v)
        + frobenius_sq(&w.w_o)
        + mlp;
    Ok(CostReport {
        qk_nuclear: qk,
        vo_nuclear: vo,
        mlp_frobsq: mlp,
        total: 2.0 * qk + 2.0 * vo + mlp,
        nuclear_total: qk + vo + mlp,
        raw_frobsq: raw,
    })
}

fn outer_sum<'a>(
    pairs: impl IntoIterator<Item = (&'a DVector<f64>, &'a DVector<f64>)>,
    d: usize,
) -> Matrix {
    let mut m = Matrix::zeros(d, d);
    for (a, b) in pairs {
        m += a * b.transpose();
    }
    m
}

/// Sink solution of the backcopy task.
///
/// Dormant queries score 2κ on BOS and κ on the preceding token; copy-paste
/// queries score κ on the preceding token. The value map is the identity on
/// the content and position frames that can be attended to, and the MLP
/// doubles dormant tokens while a −2·𝟏 row term gates copy-paste tokens off.
/// Needs standard-basis frames so that the ReLU sees nonnegative inputs.
pub fn backcopy_sink_weights(spec: &BackcopySpec) -> Result<BlockWeights> {
    if spec.frames != Frames::StandardBasis {
        return Err(invalid("the ReLU gate needs standard-basis frames"));
    }
    let f = BackcopyFrames::new(spec)?;
    let d = spec.d;
    let t = spec.t;
    let sd = (d as f64).sqrt();
    let nd = spec.n_dormant;
    let dormant = &f.h[1..=nd];
    let copy = &f.h[1 + nd..];

    let bos_key = &f.h[0] + &f.p[0];
    let mut m = outer_sum(dormant.iter().map(|h| (h, &bos_key)), d);
    m += outer_sum((1..t).map(|s| (&f.p[s + 1], &f.p[s])), d);
    m *= 2.0 * spec.kappa / sd;

    let vo = outer_sum(f.h[1..].iter().map(|h| (h, h)), d)
        + outer_sum(f.p[1..t].iter().map(|p| (p, p)), d);

    let keep = outer_sum(dormant.iter().map(|h| (h, h)), d)
        + outer_sum(f.p[1..=t].iter().map(|p| (p, p)), d);
    let ones = DVector::from_element(d, 1.0);
    let gate: DVector<f64> = copy.iter().sum::<DVector<f64>>();
    let w1 = &keep - &ones * gate.transpose() * 2.0;
    let w2 = keep;
    let a = (frobenius_sq(&w2) / frobenius_sq(&w1)).powf(0.25);

    let (w_q, w_k) = balanced_qk(&m)?;
    let (w_v, w_o) = balanced_vo(&vo)?;
    Ok(BlockWeights {
        w_q,
        w_k,
        w_v,
        w_o,
        w_1: w1 * a,
        b_1: DVector::zeros(d),
        w_2: w2 / a,
        b_2: DVector::zeros(d),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thm2Bound {
    pub lhs: f64,
    pub rhs: f64,
    pub c1: f64,
    pub sink_cheaper: bool,
}

/// Sink-versus-diagonal comparison for backcopy. `c1` defaults to its
/// smallest admissible value d/(T+|C|+|D|+2).
pub fn thm2_bounds(spec: &BackcopySpec, c1: Option<f64>) -> Result<Thm2Bound> {
    let (t, nd, nc) = (spec.t as f64, spec.n_dormant as f64, spec.n_copy as f64);
    let d = spec.d as f64;
    let c1_min = d / (t + nc + nd + 2.0);
    let c1 = c1.unwrap_or(c1_min);
    if !(c1 >= c1_min * (1.0 - 1e-12)) {
        return Err(invalid(format!("c1 = {c1} below the minimum {c1_min}")));
    }
    let k = spec.kappa;
    let lhs = 2.0 * k / d.sqrt() * ((2.0 * nd).sqrt() + t - 1.0)
        + 3.0 * t
        + 3.0 * nd
        + nc
        + 4.0 * c1 * (t + nc + nd + 2.0) * nc
        - 2.0;
    let rhs = k / (3.0 * d).sqrt() * nc.min(nd).sqrt() * t.powf(1.5);
    Ok(Thm2Bound {
        lhs,
        rhs,
        c1,
        sink_cheaper: lhs < rhs,
    })
}

/// Quantities shared by the grouped-task constructions.
pub struct GenericFrame {
    pub u: Matrix,
    /// (UᵀU)⁻¹Uᵀ, mapping special vectors to √d·e_k and annihilating η.
    pub pi: Matrix,
    pub p_eta: Matrix,
    pub t_base: Matrix,
    pub lambda: f64,
}

impl GenericFrame {
    pub fn new(g: &GenericGeometry) -> Result<Self> {
        let d = g.spec.d;
        let c = g.spec.n_groups;
        let sd = (d as f64).sqrt();
        let cols: Vec<DVector<f64>> = g.special().into_iter().map(|v| v / sd).collect();
        let u = Matrix::from_columns(&cols);
        let gram = u.transpose() * &u;
        let gram_inv = gram
            .try_inverse()
            .ok_or_else(|| invalid("Gram matrix of special vectors is singular"))?;
        let pi = gram_inv * u.transpose();
        let etas: Vec<DVector<f64>> = g.eta.iter().flatten().cloned().collect();
        let p_eta = if g.spec.delta > 0.0 {
            let q = orthonormal_range(&Matrix::from_columns(&etas), 1e-9)?;
            &q * q.transpose()
        } else {
            Matrix::zeros(d, d)
        };
        let mut sel = Matrix::zeros(1 + 2 * c, 1 + 2 * c);
        for k in 1..=c {
            sel[(k, k)] = 1.0;
        }
        let t_base = &p_eta + &u * sel * &pi;
        Ok(Self {
            u,
            pi,
            p_eta,
            t_base,
            lambda: g.spec.lambda_centroid(),
        })
    }
}

/// Sink solution of the grouped copy-paste task.
pub fn generic_sink_weights(g: &GenericGeometry) -> Result<BlockWeights> {
    let fr = GenericFrame::new(g)?;
    let d = g.spec.d;
    let c = g.spec.n_groups;
    let m = 1 + 2 * c;
    let sd = (d as f64).sqrt();
    let (k, lam) = (g.spec.kappa, fr.lambda);
    let a = k / (lam * sd);
    let b = k * (1.0 + lam) / (lam * lam * sd);
    let mut mm = Matrix::zeros(m, m);
    for r in 1..m {
        mm[(r, 0)] = a;
    }
    for cc in 1..=c {
        mm[(c + cc, cc)] += b;
    }
    let w_qk = fr.pi.transpose() * mm * &fr.pi;
    let (w_q, w_k) = balanced_qk(&w_qk)?;
    let (w_v, w_o) = balanced_vo(&(&fr.t_base * 0.5))?;
    let (w_1, b_1, w_2, b_2) = linear_mlp(&(&fr.t_base * (1.0 + g.spec.eps_tol)), sd)?;
    Ok(BlockWeights {
        w_q,
        w_k,
        w_v,
        w_o,
        w_1,
        b_1,
        w_2,
        b_2,
    })
}

/// Diagonal solution of the grouped copy-paste task. Needs a finite Δ_diag.
pub fn generic_diag_weights(g: &GenericGeometry, delta_diag: f64) -> Result<BlockWeights> {
    if !delta_diag.is_finite() || delta_diag <= 0.0 {
        return Err(invalid(
            "diagonal construction needs a finite, positive Delta_diag",
        ));
    }
    let fr = GenericFrame::new(g)?;
    let d = g.spec.d;
    let c = g.spec.n_groups;
    let m = 1 + 2 * c;
    let sd = (d as f64).sqrt();
    let (k, lam) = (g.spec.kappa, fr.lambda);
    let s = k / (lam * lam * sd);
    let a = k / sd;
    let b = 2.0 * k / (lam * sd);
    let alpha = 2.0 * k * sd / delta_diag;
    let mut mm = Matrix::zeros(m, m);
    for cc in 1..=c {
        mm[(cc, cc)] = s;
        mm[(c + cc, c + cc)] = a;
        mm[(c + cc, cc)] = b;
    }
    let w_qk = fr.pi.transpose() * mm * &fr.pi + &fr.p_eta * alpha;
    let (w_q, w_k) = balanced_qk(&w_qk)?;
    let (w_v, w_o) = balanced_vo(&(&fr.t_base * (1.0 - g.spec.eps_tol)))?;
    let mut w = BlockWeights::zeros(d, d);
    w.w_q = w_q;
    w.w_k = w_k;
    w.w_v = w_v;
    w.w_o = w_o;
    Ok(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenericBounds {
    pub u_sink: f64,
    pub l_diag: f64,
    pub u_diag: f64,
    pub l_sink: f64,
    pub eq4_lhs: f64,
    pub eq4_rhs: f64,
    /// Sink provably cheaper than any diagonal solution.
    pub eq4_holds: bool,
}

pub fn generic_bounds(g: &GenericGeometry, geo: &TaskGeometry) -> Result<GenericBounds> {
    g.spec.check_bound_constraints()?;
    let k = g.spec.kappa;
    let c = g.spec.n_groups as f64;
    let sd = (g.spec.d as f64).sqrt();
    let delta = g.spec.delta;
    let r_eta = geo.r_eta as f64;
    let u_sink = 12.0 * k * c / sd + 5.0 * (r_eta + c);
    let l_diag = if delta > 0.0 {
        k / (delta * delta * sd) * geo.r_eff + k * c / (2.0 * sd)
    } else {
        k * c / (2.0 * sd)
    };
    let u_diag = 13.0 * k * c / sd + 4.0 * k * sd / geo.delta_diag * r_eta + 3.0 * (r_eta + c);
    let l_sink = k * c / (2.0 * sd);
    let eq4_rhs = l_diag - k * c / (2.0 * sd);
    Ok(GenericBounds {
        u_sink,
        l_diag,
        u_diag,
        l_sink,
        eq4_lhs: u_sink,
        eq4_rhs,
        eq4_holds: u_sink < eq4_rhs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    /// Largest Euclidean distance from an output token to its admissible set.
    pub max_output_err: f64,
    /// Smallest gap between a row's top logit and the best logit outside its
    /// tie set.
    pub min_attention_margin: f64,
    pub labels_ok: bool,
}

pub fn verify_construction(
    w: &BlockWeights,
    data: &[LabeledSequence],
    mode: AttentionMode,
    tol: f64,
    exec: Exec,
) -> Result<VerifyReport> {
    if data.is_empty() {
        return Err(invalid("no sequences to verify"));
    }
    let per_seq: Vec<Result<(f64, f64)>> = exec.map(data, |s| {
        let tr = block_forward_traced(&s.inputs, w, mode)?;
        let mut err: f64 = 0.0;
        for (p, target) in s.relaxed.iter().enumerate() {
            err = err.max(target.distance(&tr.out.column(p).into_owned()));
        }
        let margin = row_margins(&tr.scores)
            .into_iter()
            .flatten()
            .fold(f64::INFINITY, f64::min);
        Ok((err, margin))
    });
    let mut max_err: f64 = 0.0;
    let mut min_margin = f64::INFINITY;
    for r in per_seq {
        let (e, m) = r?;
        if !e.is_finite() {
            return Err(Error::NonFinite("verification output"));
        }
        max_err = max_err.max(e);
        min_margin = min_margin.min(m);
    }
    Ok(VerifyReport {
        max_output_err: max_err,
        min_attention_margin: min_margin,
        labels_ok: max_err <= tol,
    })
}
