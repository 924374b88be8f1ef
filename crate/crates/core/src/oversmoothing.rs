//! Oversmoothing under interpolated uniform attention.
//!
//! Model: normalized tokens zᵢ = z̄ + εᵢ with E[εᵢεᵢᵀ] = Σ_V and E[εᵢεⱼᵀ] = Σ_C
//! for i ≠ j. The layer update is `Y(λ) = βZ + W Z ((1-λ)I + λA_u)ᵀ`, where
//! A_u is the uniform causal map. With B = Σ_V - Σ_C and C = z̄z̄ᵀ + Σ_C the
//! expected inner products of output tokens have closed forms, and the sign
//! of βtr(BW) (and of βtr(BW) + tr(BWᵀW)) decides whether mixing in more
//! uniform attention raises or lowers average cosine similarity.
//!
//! Positions passed to [`theory_pair_inner`] are 1-based, matching the 1/i
//! weights of A_u.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::block::{rms_norm, AttentionMap, TokenMatrix};
use crate::error::{invalid, Error, Result};
use crate::linalg::{numerical_rank, orthogonal_complement, pinv, svd};
use crate::Matrix;

const SYM_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-8;
const PSD_CLIP: f64 = -1e-6;
const PSD_FAIL: f64 = -1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub z_bar: DVector<f64>,
    pub sigma_v: Matrix,
    pub sigma_c: Matrix,
    pub beta: f64,
}

impl TokenStats {
    pub fn new(z_bar: DVector<f64>, sigma_v: Matrix, sigma_c: Matrix, beta: f64) -> Result<Self> {
        let d = z_bar.len();
        if sigma_v.shape() != (d, d) || sigma_c.shape() != (d, d) {
            return Err(Error::Shape {
                context: "token stats",
                expected: format!("{d}x{d} covariances"),
                found: format!("{:?} and {:?}", sigma_v.shape(), sigma_c.shape()),
            });
        }
        let s = Self {
            z_bar,
            sigma_v,
            sigma_c,
            beta,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.z_bar.len()
    }

    pub fn b(&self) -> Matrix {
        &self.sigma_v - &self.sigma_c
    }

    pub fn c(&self) -> Matrix {
        &self.z_bar * self.z_bar.transpose() + &self.sigma_c
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite()
            || self
                .z_bar
                .iter()
                .chain(self.sigma_v.iter())
                .chain(self.sigma_c.iter())
                .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite("token stats"));
        }
        for (name, m) in [("Sigma_V", &self.sigma_v), ("Sigma_C", &self.sigma_c)] {
            let asym = (m - m.transpose()).amax();
            if asym > SYM_TOL * m.amax().max(1.0) {
                return Err(Error::ModelViolation(format!(
                    "{name} is not symmetric (max asymmetry {asym:e})"
                )));
            }
        }
        let lmin = self.b().symmetric_eigen().eigenvalues.min();
        if lmin < -PSD_TOL * self.b().amax().max(1.0) {
            return Err(Error::ModelViolation(format!(
                "B = Sigma_V - Sigma_C has eigenvalue {lmin:e} < 0"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimCurve {
    pub lambda_grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl SimCurve {
    pub fn rows(&self) -> Vec<Vec<String>> {
        self.lambda_grid
            .iter()
            .zip(&self.values)
            .map(|(l, v)| vec![format!("{l}"), format!("{v}")])
            .collect()
    }

    pub fn strictly_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] > w[0])
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] < w[0])
    }
}

/// `n` evenly spaced points in [0, 1] (21 is the usual choice).
pub fn lambda_grid(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|k| k as f64 / (n - 1) as f64).collect(),
    }
}

pub fn avg_cos_sim(x: &TokenMatrix) -> Result<f64> {
    let t = x.len();
    if t < 2 {
        return Err(invalid("average cosine similarity needs at least 2 tokens"));
    }
    let mut u = x.0.clone();
    for (j, mut c) in u.column_iter_mut().enumerate() {
        let n = c.norm();
        if n == 0.0 {
            return Err(Error::ZeroColumn { index: j });
        }
        c /= n;
    }
    let g = u.transpose() * &u;
    let mut s = 0.0;
    for i in 0..t {
        for j in (i + 1)..t {
            s += g[(i, j)];
        }
    }
    Ok(2.0 * s / (t * (t - 1)) as f64)
}

pub fn uniform_causal(t: usize) -> AttentionMap {
    AttentionMap(Matrix::from_fn(t, t, |i, j| {
        if j <= i {
            1.0 / (i + 1) as f64
        } else {
            0.0
        }
    }))
}

pub fn interpolated_update(
    z: &TokenMatrix,
    w: &Matrix,
    beta: f64,
    lambda: f64,
) -> Result<TokenMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let d = z.dim();
    if w.shape() != (d, d) {
        return Err(Error::Shape {
            context: "interpolated_update",
            expected: format!("{d}x{d}"),
            found: format!("{:?}", w.shape()),
        });
    }
    let t = z.len();
    let mix = Matrix::identity(t, t) * (1.0 - lambda) + uniform_causal(t).0 * lambda;
    Ok(TokenMatrix(&z.0 * beta + w * &z.0 * mix.transpose()))
}

fn tr_prod(a: &Matrix, b: &Matrix) -> f64 {
    // tr(AB) without forming the product
    a.component_mul(&b.transpose()).sum()
}

/// Trace quantities entering the closed forms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Traces {
    pub tr_c: f64,
    pub tr_cw: f64,
    pub tr_cwtw: f64,
    pub tr_b: f64,
    pub tr_bw: f64,
    pub tr_bwtw: f64,
}

impl Traces {
    pub fn new(stats: &TokenStats, w: &Matrix) -> Result<Self> {
        let d = stats.dim();
        if w.shape() != (d, d) {
            return Err(Error::Shape {
                context: "trace computation",
                expected: format!("{d}x{d}"),
                found: format!("{:?}", w.shape()),
            });
        }
        let b = stats.b();
        let c = stats.c();
        let wtw = w.transpose() * w;
        Ok(Self {
            tr_c: c.trace(),
            tr_cw: tr_prod(&c, w),
            tr_cwtw: tr_prod(&c, &wtw),
            tr_b: b.trace(),
            tr_bw: tr_prod(&b, w),
            tr_bwtw: tr_prod(&b, &wtw),
        })
    }

    fn cross(&self, beta: f64, j: usize, lambda: f64) -> f64 {
        beta * beta * self.tr_c
            + 2.0 * beta * self.tr_cw
            + self.tr_cwtw
            + lambda / j as f64 * (beta * self.tr_bw + self.tr_bwtw)
    }

    fn diag(&self, beta: f64, k: usize, lambda: f64) -> f64 {
        let f = 1.0 - 1.0 / k as f64;
        beta * beta * (self.tr_b + self.tr_c)
            + 2.0 * beta * (self.tr_bw + self.tr_cw)
            + (self.tr_bwtw + self.tr_cwtw)
            - 2.0 * f * (beta * self.tr_bw + self.tr_bwtw) * lambda
            + f * self.tr_bwtw * lambda * lambda
    }
}

/// E[Yᵢ(λ)ᵀYⱼ(λ)] for 1-based positions; i = j gives E‖Yᵢ‖².
pub fn theory_pair_inner(
    stats: &TokenStats,
    w: &Matrix,
    i: usize,
    j: usize,
    lambda: f64,
) -> Result<f64> {
    if i == 0 || j == 0 {
        return Err(invalid("positions are 1-based"));
    }
    stats.validate()?;
    let tr = Traces::new(stats, w)?;
    Ok(if i == j {
        tr.diag(stats.beta, i, lambda)
    } else {
        tr.cross(stats.beta, i.max(j), lambda)
    })
}

/// Ratio approximation of E[ρ(Y(λ))] over a λ grid.
pub fn theory_avg_sim(stats: &TokenStats, w: &Matrix, t: usize, grid: &[f64]) -> Result<SimCurve> {
    if t < 2 {
        return Err(invalid("need at least 2 tokens"));
    }
    stats.validate()?;
    let tr = Traces::new(stats, w)?;
    let beta = stats.beta;
    let mut values = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let norms: Vec<f64> = (1..=t)
            .map(|k| {
                let v = tr.diag(beta, k, lambda);
                if v > 0.0 {
                    Ok(v.sqrt())
                } else {
                    Err(Error::ModelViolation(format!(
                        "E|Y_{k}|^2 = {v} <= 0 at lambda = {lambda}"
                    )))
                }
            })
            .collect::<Result<_>>()?;
        let mut s = 0.0;
        for j in 2..=t {
            let num = tr.cross(beta, j, lambda);
            for i in 1..j {
                s += num / (norms[i - 1] * norms[j - 1]);
            }
        }
        values.push(2.0 * s / (t * (t - 1)) as f64);
    }
    Ok(SimCurve {
        lambda_grid: grid.to_vec(),
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceConditions {
    pub cond_i: bool,
    pub cond_ii: bool,
    pub lambda_star: Option<f64>,
    pub beta_tr_bw: f64,
    pub tr_bwtw: f64,
}

pub fn trace_conditions(stats: &TokenStats, w: &Matrix) -> Result<TraceConditions> {
    let tr = Traces::new(stats, w)?;
    let a = stats.beta * tr.tr_bw;
    let cond_i = a > 0.0;
    let cond_ii = a + tr.tr_bwtw < 0.0;
    let lambda_star =
        (!cond_i && !cond_ii && tr.tr_bwtw > 0.0).then(|| (a + tr.tr_bwtw) / tr.tr_bwtw);
    Ok(TraceConditions {
        cond_i,
        cond_ii,
        lambda_star,
        beta_tr_bw: a,
        tr_bwtw: tr.tr_bwtw,
    })
}

/// Fits the covariance model to raw token matrices (tokens as columns).
///
/// Tokens are RMS-normalized first; β is the mean of ‖xᵢ‖/√d. ε is pooled
/// across positions and sequences.
pub fn estimate_stats(batch: &[TokenMatrix]) -> Result<TokenStats> {
    if batch.len() < 2 {
        return Err(invalid(
            "need at least 2 sequences to estimate cross-token covariance",
        ));
    }
    let d = batch[0].dim();
    if batch.iter().any(|x| x.dim() != d || x.len() < 2) {
        return Err(invalid(
            "sequences must share the dimension and have at least 2 tokens",
        ));
    }
    let sqrt_d = (d as f64).sqrt();
    let zs: Vec<Matrix> = batch
        .iter()
        .map(|x| rms_norm(&x.0))
        .collect::<Result<_>>()?;

    let n_tok: usize = zs.iter().map(|z| z.ncols()).sum();
    let beta = batch
        .iter()
        .flat_map(|x| {
            x.0.column_iter()
                .map(|c| c.norm() / sqrt_d)
                .collect::<Vec<_>>()
        })
        .sum::<f64>()
        / n_tok as f64;

    let mut z_bar = DVector::zeros(d);
    for z in &zs {
        z_bar += z.column_sum();
    }
    z_bar /= n_tok as f64;

    let mut sigma_v = Matrix::zeros(d, d);
    let mut sigma_c = Matrix::zeros(d, d);
    for z in &zs {
        let t = z.ncols();
        let mut eps = z.clone();
        for mut c in eps.column_iter_mut() {
            c -= &z_bar;
        }
        let outer = &eps * eps.transpose();
        let s = eps.column_sum();
        sigma_v += &outer;
        sigma_c += (&s * s.transpose() - &outer) / (t * (t - 1)) as f64;
    }
    sigma_v /= n_tok as f64;
    sigma_c /= zs.len() as f64;
    sigma_v = (&sigma_v + sigma_v.transpose()) * 0.5;
    sigma_c = (&sigma_c + sigma_c.transpose()) * 0.5;

    let b = repair_psd(&sigma_v - &sigma_c)?;
    let sigma_v = &sigma_c + b;
    TokenStats::new(z_bar, sigma_v, sigma_c, beta)
}

fn repair_psd(b: Matrix) -> Result<Matrix> {
    let eig = b.clone().symmetric_eigen();
    let lmin = eig.eigenvalues.min();
    if lmin < PSD_FAIL {
        return Err(Error::ModelViolation(format!(
            "estimated B has eigenvalue {lmin:e}; pooled covariance model does not fit"
        )));
    }
    if lmin >= PSD_CLIP {
        return Ok(b);
    }
    let vals = eig.eigenvalues.map(|l| if l < PSD_CLIP { 0.0 } else { l });
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Mean of tr(εεᵀ) per position, for spotting position dependence the pooled
/// model ignores.
pub fn position_variances(batch: &[TokenMatrix]) -> Result<Vec<f64>> {
    let t = batch
        .first()
        .map(|x| x.len())
        .ok_or_else(|| invalid("empty batch"))?;
    if batch.iter().any(|x| x.len() != t) {
        return Err(invalid("per-position mode needs equal sequence lengths"));
    }
    let zs: Vec<Matrix> = batch
        .iter()
        .map(|x| rms_norm(&x.0))
        .collect::<Result<_>>()?;
    let n = zs.len() as f64;
    Ok((0..t)
        .map(|i| {
            let mean = zs
                .iter()
                .map(|z| z.column(i).into_owned())
                .sum::<DVector<f64>>()
                / n;
            zs.iter()
                .map(|z| (z.column(i) - &mean).norm_squared())
                .sum::<f64>()
                / n
        })
        .collect())
}

/// W_VO = s·V L (VᵀV)⁻¹ Vᵀ with V = RMS(X0) and L upper bidiagonal (1 on the
/// diagonal, -1 above). Under uniform-attention dynamics every normalized
/// token then stays fixed.
pub fn anti_smoothing_wvo(x0: &TokenMatrix, scale: f64) -> Result<Matrix> {
    let (d, t) = x0.0.shape();
    if d < t {
        return Err(invalid(format!("need d >= T, got d = {d}, T = {t}")));
    }
    let rank = numerical_rank(&x0.0, 1e-10)?;
    if rank < t {
        return Err(Error::RankDeficient { rank, needed: t });
    }
    let v = rms_norm(&x0.0)?;
    let l = Matrix::from_fn(t, t, |i, j| {
        if i == j {
            1.0
        } else if j == i + 1 {
            -1.0
        } else {
            0.0
        }
    });
    let gram_inv = (v.transpose() * &v)
        .try_inverse()
        .ok_or(Error::RankDeficient {
            rank: t - 1,
            needed: t,
        })?;
    Ok(&v * l * gram_inv * v.transpose() * scale)
}

/// Iterates X ← X + W_VO RMS(X) A_uᵀ and returns every layer, input first.
pub fn uniform_attention_dynamics(
    x0: &TokenMatrix,
    w_vo: &Matrix,
    layers: usize,
) -> Result<Vec<TokenMatrix>> {
    let a_t = uniform_causal(x0.len()).0.transpose();
    let mut out = vec![x0.clone()];
    for _ in 0..layers {
        let x = &out.last().unwrap().0;
        let next = x + w_vo * rms_norm(x)? * &a_t;
        out.push(TokenMatrix::new(next)?);
    }
    Ok(out)
}

/// Builds W_VO = X(B - I)(Aᵀ)⁻¹D⁻¹X⁺ with B = σX⁺QX, where
/// Q = [U₁ U₂] diag(Q₁, Q₂) [U₁ U₂]ᵀ and U₁ spans the tokens. One step of the
/// uniform-attention dynamics then maps X to σQX.
pub fn span_preserving_update(
    x: &TokenMatrix,
    q1: &Matrix,
    q2: &Matrix,
    sigma: f64,
) -> Result<(Matrix, TokenMatrix)> {
    let (d, t) = x.0.shape();
    if !(sigma > 0.0) {
        return Err(invalid("sigma must be positive"));
    }
    if t > d || q1.shape() != (t, t) || q2.shape() != (d - t, d - t) {
        return Err(Error::Shape {
            context: "span_preserving_update",
            expected: format!(
                "Q1 {t}x{t}, Q2 {}x{}",
                d.saturating_sub(t),
                d.saturating_sub(t)
            ),
            found: format!("{:?}, {:?}", q1.shape(), q2.shape()),
        });
    }
    for (name, q) in [("Q1", q1), ("Q2", q2)] {
        let n = q.nrows();
        if (q.transpose() * q - Matrix::identity(n, n)).amax() > 1e-9 {
            return Err(invalid(format!("{name} is not orthogonal")));
        }
    }
    let rank = numerical_rank(&x.0, 1e-10)?;
    if rank < t {
        return Err(Error::RankDeficient { rank, needed: t });
    }
    let u1 = svd(&x.0)?.u;
    let u2 = orthogonal_complement(&u1)?;
    let mut u = Matrix::zeros(d, d);
    u.columns_mut(0, t).copy_from(&u1);
    u.columns_mut(t, d - t).copy_from(&u2);
    let mut blk = Matrix::zeros(d, d);
    blk.view_mut((0, 0), (t, t)).copy_from(q1);
    blk.view_mut((t, t), (d - t, d - t)).copy_from(q2);
    let q = &u * blk * u.transpose();

    let xp = pinv(&x.0)?;
    let b = &xp * &q * &x.0 * sigma;
    let a_t_inv = uniform_causal(t)
        .0
        .transpose()
        .try_inverse()
        .ok_or_else(|| invalid("uniform causal map is singular"))?;
    let sqrt_d = (d as f64).sqrt();
    let d_inv = Matrix::from_diagonal(&DVector::from_iterator(
        t,
        x.0.column_iter().map(|c| c.norm() / sqrt_d),
    ));
    let w_vo = &x.0 * (b - Matrix::identity(t, t)) * a_t_inv * d_inv * xp;
    let next = uniform_attention_dynamics(x, &w_vo, 1)?.pop().unwrap();
    Ok((w_vo, next))
}

/// u(A) = (1/T)(1 + Σ_{i≥2} Hᵢ/log i), Hᵢ the entropy of row i (1-based).
pub fn uniformity_coefficient(a: &AttentionMap) -> f64 {
    let t = a.len();
    if t == 0 {
        return 0.0;
    }
    let mut s = 1.0;
    for i in 1..t {
        let h: f64 = (0..=i)
            .map(|j| a.0[(i, j)])
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        s += h / ((i + 1) as f64).ln();
    }
    s / t as f64
}

/// Mean full-update column norm over the mean (across heads) of each head's
/// mean column norm.
pub fn head_rescale_factor(full: &TokenMatrix, heads: &[TokenMatrix]) -> Result<f64> {
    if heads.is_empty() {
        return Err(invalid("no head updates"));
    }
    if heads.iter().any(|h| h.0.shape() != full.0.shape()) {
        return Err(invalid("head update shapes differ from the full update"));
    }
    let mean_norm = |m: &Matrix| m.column_iter().map(|c| c.norm()).sum::<f64>() / m.ncols() as f64;
    let den = heads.iter().map(|h| mean_norm(&h.0)).sum::<f64>() / heads.len() as f64;
    if den == 0.0 {
        return Err(invalid("head updates are all zero"));
    }
    Ok(mean_norm(&full.0) / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn spd(d: usize, seed: u64, s: f64) -> Matrix {
        let a = random(d, d, seed);
        &a * a.transpose() * s
    }

    #[test]
    fn cos_sim_basics() {
        let x = TokenMatrix(Matrix::from_column_slice(
            2,
            3,
            &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0],
        ));
        assert!((avg_cos_sim(&x).unwrap() - 1.0).abs() < 1e-15);
        let x = TokenMatrix(Matrix::identity(2, 2));
        assert_eq!(avg_cos_sim(&x).unwrap(), 0.0);

        let x = TokenMatrix(random(8, 5, 4));
        let mut brute = 0.0;
        for i in 0..5 {
            for j in (i + 1)..5 {
                let a = x.0.column(i);
                let b = x.0.column(j);
                brute += a.dot(&b) / (a.norm() * b.norm());
            }
        }
        assert!((avg_cos_sim(&x).unwrap() - brute / 10.0).abs() < 1e-14);
    }

    #[test]
    fn uniform_causal_rows() {
        let a = uniform_causal(3);
        assert_eq!(a.0[(2, 1)], 1.0 / 3.0);
        assert_eq!(a.0[(1, 0)], 0.5);
        AttentionMap::new(a.0.clone()).unwrap();
        assert!((uniformity_coefficient(&a) - 1.0).abs() < 1e-15);
        assert!(
            (uniformity_coefficient(&AttentionMap(Matrix::identity(4, 4))) - 0.25).abs() < 1e-15
        );
    }

    #[test]
    fn uniformity_two_rows() {
        let p: f64 = 0.3;
        let a = AttentionMap(Matrix::from_row_slice(2, 2, &[1.0, 0.0, p, 1.0 - p]));
        let h = -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
        assert!((uniformity_coefficient(&a) - (1.0 + h / 2f64.ln()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn interpolated_update_matches_product() {
        let z = TokenMatrix(random(4, 5, 1));
        let w = random(4, 4, 2);
        let y = interpolated_update(&z, &w, 0.7, 0.5).unwrap();
        let t = 5;
        let mut oracle = Matrix::zeros(4, t);
        for i in 0..t {
            let mut mixed = z.0.column(i) * 0.5;
            for j in 0..=i {
                mixed += z.0.column(j) * (0.5 / (i + 1) as f64);
            }
            oracle.set_column(i, &(z.0.column(i) * 0.7 + &w * mixed));
        }
        assert!((y.0 - oracle).amax() < 1e-14);
        let y0 = interpolated_update(&z, &Matrix::zeros(4, 4), 2.0, 0.0).unwrap();
        assert_eq!(y0.0, &z.0 * 2.0);
    }

    fn stats(d: usize, seed: u64) -> TokenStats {
        let sc = spd(d, seed, 0.05);
        let b = spd(d, seed + 1, 0.1);
        let zb = random(d, 1, seed + 2).column(0).into_owned();
        TokenStats::new(zb, &sc + b, sc, 0.8).unwrap()
    }

    // Exact expectation assembled from the second moments of ε and the
    // running means mᵢ = (1/i)Σ_{a≤i} ε_a, independent of the closed form.
    fn oracle_inner(s: &TokenStats, w: &Matrix, i: usize, j: usize, lambda: f64) -> f64 {
        let d = s.dim();
        let (i, j) = (i.min(j), i.max(j));
        let p = Matrix::identity(d, d) * s.beta + w * (1.0 - lambda);
        let mean = (Matrix::identity(d, d) * s.beta + w) * &s.z_bar;
        let b = s.b();
        let e_ee = if i == j {
            s.sigma_v.clone()
        } else {
            s.sigma_c.clone()
        };
        let e_em = &s.sigma_c + &b / j as f64; // E[ε_i m_jᵀ], i ≤ j
        let e_me = if i == j {
            e_em.clone()
        } else {
            s.sigma_c.clone()
        }; // E[m_i ε_jᵀ]
        let e_mm = &s.sigma_c + &b / j as f64;
        let tr = |m: Matrix| m.trace();
        mean.dot(&mean)
            + tr(&p * e_ee * p.transpose())
            + lambda * tr(&p * e_em * w.transpose())
            + lambda * tr(w * e_me * p.transpose())
            + lambda * lambda * tr(w * e_mm * w.transpose())
    }

    #[test]
    fn closed_form_matches_moment_oracle() {
        let s = stats(5, 10);
        let w = random(5, 5, 20);
        for &(i, j) in &[(1, 1), (1, 2), (2, 5), (4, 4), (3, 7)] {
            for &l in &[0.0, 0.3, 1.0] {
                let a = theory_pair_inner(&s, &w, i, j, l).unwrap();
                let b = oracle_inner(&s, &w, i, j, l);
                assert!(
                    (a - b).abs() < 1e-10 * b.abs().max(1.0),
                    "({i},{j},{l}): {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn lambda_coefficient_scales_as_one_over_j() {
        let s = stats(4, 3);
        let w = random(4, 4, 4);
        let tr = trace_conditions(&s, &w).unwrap();
        for j in 2..6 {
            let c = theory_pair_inner(&s, &w, 1, j, 1.0).unwrap()
                - theory_pair_inner(&s, &w, 1, j, 0.0).unwrap();
            assert!((c - (tr.beta_tr_bw + tr.tr_bwtw) / j as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn conditions_and_monotonicity() {
        let s = stats(6, 7);
        let w = Matrix::identity(6, 6);
        let c = trace_conditions(&s, &w).unwrap();
        assert!(c.cond_i && !c.cond_ii);
        let curve = theory_avg_sim(&s, &w, 8, &lambda_grid(21)).unwrap();
        assert!(curve.strictly_increasing());

        let w = -s.b() * 0.05;
        let c = trace_conditions(&s, &w).unwrap();
        assert!(c.cond_ii && !c.cond_i);
        let curve = theory_avg_sim(&s, &w, 8, &lambda_grid(21)).unwrap();
        assert!(curve.strictly_decreasing());

        let flat = theory_avg_sim(&s, &Matrix::zeros(6, 6), 8, &lambda_grid(5)).unwrap();
        assert!(flat.values.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-15));
    }

    #[test]
    fn anti_smoothing_keeps_tokens() {
        let x0 = TokenMatrix(random(8, 4, 5));
        let w = anti_smoothing_wvo(&x0, 0.7).unwrap();
        let traj = uniform_attention_dynamics(&x0, &w, 50).unwrap();
        let z0 = rms_norm(&x0.0).unwrap();
        let r0 = avg_cos_sim(&x0).unwrap();
        for x in &traj {
            assert!((rms_norm(&x.0).unwrap() - &z0).amax() < 1e-6);
            assert!((avg_cos_sim(x).unwrap() - r0).abs() < 1e-6);
        }

        let x1 = TokenMatrix(random(3, 1, 6));
        let w = anti_smoothing_wvo(&x1, 2.0).unwrap();
        let v = x1.col(0);
        assert!((&w - &v * v.transpose() * (2.0 / v.norm_squared())).amax() < 1e-12);
    }

    #[test]
    fn span_preserving_identity_and_scaling() {
        let x = TokenMatrix(random(6, 3, 8));
        let (_, next) =
            span_preserving_update(&x, &Matrix::identity(3, 3), &Matrix::identity(3, 3), 1.0)
                .unwrap();
        assert!((next.0 - &x.0).amax() < 1e-10);
        let (_, next) =
            span_preserving_update(&x, &Matrix::identity(3, 3), &Matrix::identity(3, 3), 2.0)
                .unwrap();
        for (a, b) in next.0.column_iter().zip(x.0.column_iter()) {
            assert!((a.norm() - 2.0 * b.norm()).abs() < 1e-10);
        }
    }

    #[test]
    fn rescale_factor() {
        let full = TokenMatrix(random(4, 3, 1));
        assert!(
            (head_rescale_factor(&full, std::slice::from_ref(&full)).unwrap() - 1.0).abs() < 1e-15
        );
        let part = TokenMatrix(&full.0 / 4.0);
        let heads = vec![part; 4];
        assert!((head_rescale_factor(&full, &heads).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_identical_tokens() {
        let x = TokenMatrix(Matrix::from_fn(3, 4, |i, _| (i + 1) as f64));
        let s = estimate_stats(&[x.clone(), x]).unwrap();
        assert!(s.sigma_v.amax() < 1e-14 && s.sigma_c.amax() < 1e-14);
        assert!(estimate_stats(&[TokenMatrix(Matrix::identity(2, 2))]).is_err());
    }
}
