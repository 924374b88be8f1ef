//! Synthetic input/output distributions: the backcopy task and the grouped
//! copy-paste task.
//!
//! Backcopy: tokens are x_{t,i} = √(d/2)(hᵢ + p_t) over orthonormal content
//! frames h and position frames p. Dormant tokens must map to 2x, copy-paste
//! tokens to x plus the preceding token.
//!
//! Grouped copy-paste: C groups, each with a centroid d̄_c and a copy-paste
//! token c_c. Dormant tokens d_{ci} = λ d̄_c + η_{ci} carry a nuisance part
//! η ⊥ span of the special vectors. Dormant targets are (1+φ)d; copy-paste
//! targets add φ times the mean of the preceding same-group dormant tokens.

use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::TokenMatrix;
use crate::dump::Tensor;
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::linalg::{numerical_rank, random_orthogonal};
use crate::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Token {
    Bos,
    Dormant { group: usize, index: usize },
    CopyPaste { group: usize },
}

impl Token {
    pub fn is_dormant(self) -> bool {
        matches!(self, Token::Dormant { .. })
    }
}

/// Admissible outputs `anchor + θ·direction` for θ in `range`; exact when
/// `direction` is None.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedTarget {
    pub anchor: DVector<f64>,
    pub direction: Option<DVector<f64>>,
    pub range: (f64, f64),
}

impl RelaxedTarget {
    pub fn exact(v: DVector<f64>) -> Self {
        Self {
            anchor: v,
            direction: None,
            range: (0.0, 0.0),
        }
    }

    /// Closest admissible output to `y`.
    pub fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        match &self.direction {
            None => self.anchor.clone(),
            Some(u) => {
                let nn = u.norm_squared();
                if nn == 0.0 {
                    return self.anchor.clone();
                }
                let theta = ((y - &self.anchor).dot(u) / nn).clamp(self.range.0, self.range.1);
                &self.anchor + u * theta
            }
        }
    }

    pub fn distance(&self, y: &DVector<f64>) -> f64 {
        (y - self.project(y)).norm()
    }
}

#[derive(Clone, Debug)]
pub struct LabeledSequence {
    pub inputs: TokenMatrix,
    pub targets: TokenMatrix,
    pub tokens: Vec<Token>,
    pub relaxed: Vec<RelaxedTarget>,
}

impl LabeledSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn seq_rng(seed: u64, k: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1 << 32).wrapping_add(k as u64));
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Frames {
    StandardBasis,
    RandomOrthogonal { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackcopySpec {
    pub d: usize,
    pub t: usize,
    pub n_dormant: usize,
    pub n_copy: usize,
    pub kappa: f64,
    pub frames: Frames,
}

impl BackcopySpec {
    /// Smallest d holding all frames: BOS, |D| + |C| tokens, T + 1 positions.
    pub fn min_dim(t: usize, n_dormant: usize, n_copy: usize) -> usize {
        t + n_dormant + n_copy + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.n_dormant == 0 {
            return Err(invalid(
                "backcopy needs T >= 1 and at least one dormant token",
            ));
        }
        let need = Self::min_dim(self.t, self.n_dormant, self.n_copy);
        if self.d < need {
            return Err(invalid(format!(
                "d = {} too small for frames, need {need}",
                self.d
            )));
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(invalid("kappa must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Content frames h (index 0 = BOS, then dormant, then copy-paste) and
/// position frames p₀…p_T.
#[derive(Clone, Debug)]
pub struct BackcopyFrames {
    pub h: Vec<DVector<f64>>,
    pub p: Vec<DVector<f64>>,
    pub n_dormant: usize,
}

impl BackcopyFrames {
    pub fn new(spec: &BackcopySpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.d;
        let nh = 1 + spec.n_dormant + spec.n_copy;
        let basis: Matrix = match spec.frames {
            Frames::StandardBasis => Matrix::identity(d, d),
            Frames::RandomOrthogonal { seed } => {
                random_orthogonal(d, &mut ChaCha8Rng::seed_from_u64(seed))
            }
        };
        let col = |k: usize| basis.column(k).into_owned();
        Ok(Self {
            h: (0..nh).map(col).collect(),
            p: (0..=spec.t).map(|t| col(nh + t)).collect(),
            n_dormant: spec.n_dormant,
        })
    }

    pub fn content(&self, tok: Token) -> &DVector<f64> {
        match tok {
            Token::Bos => &self.h[0],
            Token::Dormant { index, .. } => &self.h[1 + index],
            Token::CopyPaste { group } => &self.h[1 + self.n_dormant + group],
        }
    }

    pub fn embed(&self, tok: Token, t: usize) -> DVector<f64> {
        let d = self.h[0].len() as f64;
        (self.content(tok) + &self.p[t]) * (d / 2.0).sqrt()
    }
}

/// Position 1 always holds a dormant token; later positions are uniform over
/// dormant and copy-paste tokens.
pub fn gen_backcopy(
    spec: &BackcopySpec,
    n_seqs: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<LabeledSequence>> {
    let frames = BackcopyFrames::new(spec)?;
    let n_tok = spec.n_dormant + spec.n_copy;
    Ok(exec.map_range(n_seqs, |k| {
        let mut rng = seq_rng(seed, k, 0);
        let mut tokens = vec![Token::Bos];
        for t in 1..=spec.t {
            let r = if t == 1 {
                rng.random_range(0..spec.n_dormant)
            } else {
                rng.random_range(0..n_tok)
            };
            tokens.push(if r < spec.n_dormant {
                Token::Dormant { group: 0, index: r }
            } else {
                Token::CopyPaste {
                    group: r - spec.n_dormant,
                }
            });
        }
        backcopy_sequence(&frames, tokens)
    }))
}

pub fn backcopy_sequence(frames: &BackcopyFrames, tokens: Vec<Token>) -> LabeledSequence {
    let x: Vec<DVector<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| frames.embed(tok, t))
        .collect();
    let y: Vec<DVector<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, tok)| match tok {
            Token::Bos => x[t].clone(),
            Token::Dormant { .. } => &x[t] * 2.0,
            Token::CopyPaste { .. } => &x[t] + &x[t - 1],
        })
        .collect();
    let relaxed = y.iter().cloned().map(RelaxedTarget::exact).collect();
    LabeledSequence {
        inputs: TokenMatrix(Matrix::from_columns(&x)),
        targets: TokenMatrix(Matrix::from_columns(&y)),
        tokens,
        relaxed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenericSpec {
    pub d: usize,
    pub t: usize,
    pub n_groups: usize,
    pub phi: f64,
    pub delta: f64,
    pub eps_tol: f64,
    pub dormant_per_group: usize,
    /// Dimension of the subspace holding the nuisance vectors η. None gives
    /// every dormant token its own orthogonal direction.
    pub nuisance_rank: Option<usize>,
    pub kappa: f64,
    pub geometry_seed: u64,
}

impl GenericSpec {
    pub fn lambda_centroid(&self) -> f64 {
        (1.0 - self.delta * self.delta).sqrt()
    }

    pub fn n_dormant(&self) -> usize {
        self.n_groups * self.dormant_per_group
    }

    pub fn nuisance_dim(&self) -> usize {
        self.nuisance_rank.unwrap_or(self.n_dormant())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.dormant_per_group == 0 || self.t == 0 {
            return Err(invalid(
                "need at least one group, one dormant token per group and T >= 1",
            ));
        }
        if !(0.0..1.0).contains(&self.phi) || !(0.0..1.0).contains(&self.delta) {
            return Err(invalid("need 0 <= phi < 1 and 0 <= delta < 1"));
        }
        if !(self.eps_tol >= 0.0 && self.eps_tol < 1.0) {
            return Err(invalid("eps_tol must lie in [0, 1)"));
        }
        if 2.0 * self.n_groups as f64 * self.phi >= 1.0 {
            return Err(Error::Constraint(
                "2 C phi < 1 needed for a well-conditioned Gram matrix".into(),
            ));
        }
        let need = 1 + 2 * self.n_groups + usize::from(self.phi > 0.0) + self.nuisance_dim();
        if self.d < need {
            return Err(invalid(format!(
                "infeasible geometry: d = {} but need {need}",
                self.d
            )));
        }
        if self.delta > 0.0 && self.nuisance_dim() == 0 {
            return Err(invalid("delta > 0 needs a nonempty nuisance subspace"));
        }
        Ok(())
    }

    /// The parameter ranges under which the cost bounds are stated.
    pub fn check_bound_constraints(&self) -> Result<()> {
        self.validate()?;
        let c = self.n_groups as f64;
        let checks = [
            (2.0 * c * self.phi <= 0.25, "2 C phi <= 1/4"),
            (self.phi <= 0.05, "phi <= 1/20"),
            (self.delta <= 0.5, "delta <= 1/2"),
            ((0.05..=0.25).contains(&self.eps_tol), "1/20 <= eps <= 1/4"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(Error::Constraint(what.into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GenericGeometry {
    pub spec: GenericSpec,
    pub bos: DVector<f64>,
    pub centroids: Vec<DVector<f64>>,
    pub copies: Vec<DVector<f64>>,
    pub eta: Vec<Vec<DVector<f64>>>,
    pub dormant: Vec<Vec<DVector<f64>>>,
}

impl GenericGeometry {
    pub fn build(spec: &GenericSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.d;
        let c = spec.n_groups;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.geometry_seed);
        let q = random_orthogonal(d, &mut rng);
        let sd = (d as f64).sqrt();
        let m = 1 + 2 * c;
        let shared_col = m;
        let nuis_start = m + usize::from(spec.phi > 0.0);

        let special = |k: usize| -> DVector<f64> {
            let mut v = q.column(k) * (1.0 - spec.phi).sqrt();
            if spec.phi > 0.0 {
                v += q.column(shared_col) * spec.phi.sqrt();
            }
            v * sd
        };
        let bos = special(0);
        let centroids: Vec<_> = (1..=c).map(special).collect();
        let copies: Vec<_> = (c + 1..=2 * c).map(special).collect();

        let r = spec.nuisance_dim();
        let nuis = q.columns(nuis_start, r).into_owned();
        let orthogonal = spec.nuisance_rank.is_none();
        let lam = spec.lambda_centroid();
        let mut eta = Vec::with_capacity(c);
        let mut dormant = Vec::with_capacity(c);
        for g in 0..c {
            let mut eg = Vec::with_capacity(spec.dormant_per_group);
            for i in 0..spec.dormant_per_group {
                let dir = if orthogonal {
                    nuis.column(g * spec.dormant_per_group + i).into_owned()
                } else {
                    let coef = DVector::from_fn(r, |_, _| {
                        rng.sample::<f64, _>(rand_distr::StandardNormal)
                    });
                    let v = &nuis * coef;
                    let n = v.norm();
                    v / n
                };
                eg.push(dir * (spec.delta * sd));
            }
            dormant.push(eg.iter().map(|e| &centroids[g] * lam + e).collect());
            eta.push(eg);
        }
        Ok(Self {
            spec: spec.clone(),
            bos,
            centroids,
            copies,
            eta,
            dormant,
        })
    }

    /// Special vectors in the order BOS, centroids, copy-paste tokens.
    pub fn special(&self) -> Vec<DVector<f64>> {
        let mut v = vec![self.bos.clone()];
        v.extend(self.centroids.iter().cloned());
        v.extend(self.copies.iter().cloned());
        v
    }

    pub fn embed(&self, tok: Token) -> &DVector<f64> {
        match tok {
            Token::Bos => &self.bos,
            Token::Dormant { group, index } => &self.dormant[group][index],
            Token::CopyPaste { group } => &self.copies[group],
        }
    }

    pub fn r_eta(&self) -> Result<usize> {
        let all: Vec<DVector<f64>> = self.eta.iter().flatten().cloned().collect();
        if all.is_empty() || self.spec.delta == 0.0 {
            return Ok(0);
        }
        numerical_rank(&Matrix::from_columns(&all), 1e-9)
    }
}

fn sample_generic_tokens(spec: &GenericSpec, rng: &mut ChaCha8Rng) -> Vec<Token> {
    let mut tokens = vec![Token::Bos];
    for _ in 0..spec.t {
        let r = rng.random_range(0..2 * spec.n_groups);
        let group = r / 2;
        tokens.push(if r % 2 == 0 {
            Token::Dormant {
                group,
                index: rng.random_range(0..spec.dormant_per_group),
            }
        } else {
            Token::CopyPaste { group }
        });
    }
    tokens
}

/// Ordered (group, earlier index, later index) triples of distinct dormant
/// tokens co-occurring in a sequence.
pub fn ordered_dormant_pairs<'a>(
    seqs: impl IntoIterator<Item = &'a [Token]>,
) -> BTreeSet<(usize, usize, usize)> {
    let mut out = BTreeSet::new();
    for toks in seqs {
        for (a, ta) in toks.iter().enumerate() {
            if let Token::Dormant { group: g, index: i } = *ta {
                for tb in &toks[a + 1..] {
                    if let Token::Dormant { group: h, index: j } = *tb {
                        if g == h && i != j {
                            out.insert((g, i, j));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Samples token sequences, then patches them until every ordered pair of
/// distinct same-group dormant tokens occurs somewhere in the dataset.
pub fn sample_generic_tokens_covering(
    spec: &GenericSpec,
    n_seqs: usize,
    seed: u64,
) -> Result<Vec<Vec<Token>>> {
    let mut seqs: Vec<Vec<Token>> = (0..n_seqs)
        .map(|k| sample_generic_tokens(spec, &mut seq_rng(seed, k, 1)))
        .collect();
    let n = spec.dormant_per_group;
    if n < 2 || spec.delta == 0.0 || n_seqs == 0 {
        return Ok(seqs);
    }
    if spec.t < 2 {
        return Err(invalid("pair coverage needs T >= 2"));
    }
    let mut rng = seq_rng(seed, 0, 2);
    for _ in 0..50 {
        let have = ordered_dormant_pairs(seqs.iter().map(|s| s.as_slice()));
        let missing: Vec<(usize, usize, usize)> = (0..spec.n_groups)
            .flat_map(|g| (0..n).flat_map(move |i| (0..n).map(move |j| (g, i, j))))
            .filter(|&(_, i, j)| i != j)
            .filter(|p| !have.contains(p))
            .collect();
        if missing.is_empty() {
            return Ok(seqs);
        }
        for (g, i, j) in missing {
            let k = rng.random_range(0..n_seqs);
            let a = rng.random_range(1..spec.t);
            let b = rng.random_range(a + 1..=spec.t);
            seqs[k][a] = Token::Dormant { group: g, index: i };
            seqs[k][b] = Token::Dormant { group: g, index: j };
        }
    }
    Err(invalid(
        "could not cover all dormant pair orderings; increase n_seqs or T",
    ))
}

pub fn gen_generic(
    geom: &GenericGeometry,
    n_seqs: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<LabeledSequence>> {
    let token_seqs = sample_generic_tokens_covering(&geom.spec, n_seqs, seed)?;
    Ok(exec.map_range(n_seqs, |k| {
        let mut rng = seq_rng(seed, k, 3);
        generic_sequence(geom, token_seqs[k].clone(), &mut rng)
    }))
}

/// Builds inputs and targets for a fixed token sequence; φ coefficients are
/// drawn from [1-ε, 1+ε] per position.
pub fn generic_sequence(
    geom: &GenericGeometry,
    tokens: Vec<Token>,
    rng: &mut ChaCha8Rng,
) -> LabeledSequence {
    let eps = geom.spec.eps_tol;
    let (lo, hi) = (1.0 - eps, 1.0 + eps);
    let mut draw = || {
        if eps > 0.0 {
            rng.random_range(lo..=hi)
        } else {
            1.0
        }
    };
    let x: Vec<DVector<f64>> = tokens.iter().map(|&t| geom.embed(t).clone()).collect();
    let mut y = Vec::with_capacity(x.len());
    let mut relaxed = Vec::with_capacity(x.len());
    for (pos, &tok) in tokens.iter().enumerate() {
        match tok {
            Token::Bos => {
                y.push(x[pos].clone());
                relaxed.push(RelaxedTarget::exact(x[pos].clone()));
            }
            Token::Dormant { .. } => {
                let phi = draw();
                y.push(&x[pos] * (1.0 + phi));
                relaxed.push(RelaxedTarget {
                    anchor: x[pos].clone(),
                    direction: Some(x[pos].clone()),
                    range: (lo, hi),
                });
            }
            Token::CopyPaste { group } => {
                let prev: Vec<usize> = (1..pos)
                    .filter(|&p| matches!(tokens[p], Token::Dormant { group: g, .. } if g == group))
                    .collect();
                if prev.is_empty() {
                    y.push(x[pos].clone());
                    relaxed.push(RelaxedTarget::exact(x[pos].clone()));
                } else {
                    let mu = prev.iter().map(|&p| x[p].clone()).sum::<DVector<f64>>()
                        / prev.len() as f64;
                    let phi = draw();
                    y.push(&x[pos] + &mu * phi);
                    relaxed.push(RelaxedTarget {
                        anchor: x[pos].clone(),
                        direction: Some(mu),
                        range: (lo, hi),
                    });
                }
            }
        }
    }
    LabeledSequence {
        inputs: TokenMatrix(Matrix::from_columns(&x)),
        targets: TokenMatrix(Matrix::from_columns(&y)),
        tokens,
        relaxed,
    }
}

#[derive(Clone, Debug)]
pub struct TaskGeometry {
    pub sigma_d: Matrix,
    /// tr(Σ_D)/‖Σ_D‖₂; 0 when Σ_D = 0 (see `r_eff_defined`).
    pub r_eff: f64,
    pub r_eff_defined: bool,
    pub r_eta: usize,
    /// +∞ when no two distinct same-group dormant tokens co-occur.
    pub delta_diag: f64,
    /// Number of unordered pairs whose both orders occur.
    pub n_pairs: usize,
}

pub fn task_geometry(geom: &GenericGeometry, data: &[LabeledSequence]) -> Result<TaskGeometry> {
    let d = geom.spec.d;
    let ordered = ordered_dormant_pairs(data.iter().map(|s| s.tokens.as_slice()));
    let mut sigma_d = Matrix::zeros(d, d);
    let mut n_pairs = 0;
    let mut delta_diag = f64::INFINITY;
    // tokens have squared norm about d; coincident ones differ only by rounding
    let zero = 1e-20 * d as f64;
    for &(g, i, j) in &ordered {
        let mut diff = &geom.dormant[g][i] - &geom.dormant[g][j];
        if diff.norm_squared() <= zero {
            diff.fill(0.0);
        }
        delta_diag = delta_diag.min(diff.norm_squared());
        if i < j && ordered.contains(&(g, j, i)) {
            sigma_d += &diff * diff.transpose();
            n_pairs += 1;
        }
    }
    let tr = sigma_d.trace();
    let (r_eff, r_eff_defined) = if tr > 0.0 {
        let top = crate::linalg::spectral_norm(&sigma_d)?;
        (tr / top, true)
    } else {
        (0.0, false)
    };
    Ok(TaskGeometry {
        sigma_d,
        r_eff,
        r_eff_defined,
        r_eta: geom.r_eta()?,
        delta_diag,
        n_pairs,
    })
}

/// ‖c + ½μ‖/√d for every copy-paste position with a preceding same-group
/// dormant token.
pub fn copy_paste_rms_ratios(data: &[LabeledSequence]) -> Vec<f64> {
    let mut out = Vec::new();
    for s in data {
        let sd = (s.inputs.dim() as f64).sqrt();
        for (tok, r) in s.tokens.iter().zip(&s.relaxed) {
            if let (Token::CopyPaste { .. }, Some(mu)) = (tok, &r.direction) {
                out.push((&r.anchor + mu * 0.5).norm() / sd);
            }
        }
    }
    out
}

/// Inputs and targets as `seq{k}.X` / `seq{k}.Y` tensors (token-major).
pub fn dataset_tensors(data: &[LabeledSequence]) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(2 * data.len());
    for (k, s) in data.iter().enumerate() {
        out.push(Tensor::from_matrix(
            format!("seq{k}.X"),
            &s.inputs.0.transpose(),
        ));
        out.push(Tensor::from_matrix(
            format!("seq{k}.Y"),
            &s.targets.0.transpose(),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bspec() -> BackcopySpec {
        BackcopySpec {
            d: BackcopySpec::min_dim(2, 1, 1),
            t: 2,
            n_dormant: 1,
            n_copy: 1,
            kappa: 10.0,
            frames: Frames::StandardBasis,
        }
    }

    #[test]
    fn backcopy_by_hand() {
        let spec = bspec();
        let f = BackcopyFrames::new(&spec).unwrap();
        let toks = vec![
            Token::Bos,
            Token::Dormant { group: 0, index: 0 },
            Token::CopyPaste { group: 0 },
        ];
        let s = backcopy_sequence(&f, toks);
        let c = (spec.d as f64 / 2.0).sqrt();
        // h: e0 bos, e1 dormant, e2 copy; p: e3, e4, e5
        assert_eq!(s.inputs.0[(1, 1)], c);
        assert_eq!(s.inputs.0[(4, 1)], c);
        assert_eq!(s.targets.0[(1, 1)], 2.0 * c);
        let y2 = s.targets.col(2);
        for (k, v) in [(1, c), (2, c), (4, c), (5, c)] {
            assert_eq!(y2[k], v);
        }
        for col in s.inputs.0.column_iter() {
            assert!((col.norm() - (spec.d as f64).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn backcopy_first_position_dormant_and_seeded() {
        let mut spec = bspec();
        spec.t = 6;
        spec.d = BackcopySpec::min_dim(6, 1, 1);
        let a = gen_backcopy(&spec, 20, 5, Exec::Sequential).unwrap();
        let b = gen_backcopy(&spec, 20, 5, Exec::Parallel).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.tokens[1].is_dormant());
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.inputs, y.inputs);
        }
        spec.d -= 1;
        assert!(gen_backcopy(&spec, 1, 0, Exec::Sequential).is_err());
    }

    fn gspec() -> GenericSpec {
        GenericSpec {
            d: 40,
            t: 20,
            n_groups: 2,
            phi: 0.04,
            delta: 0.3,
            eps_tol: 0.1,
            dormant_per_group: 3,
            nuisance_rank: None,
            kappa: 5.0,
            geometry_seed: 1,
        }
    }

    #[test]
    fn generic_geometry_invariants() {
        let g = GenericGeometry::build(&gspec()).unwrap();
        let d = 40.0;
        let s = g.special();
        for (a, x) in s.iter().enumerate() {
            assert!((x.norm_squared() - d).abs() < 1e-9);
            for y in &s[a + 1..] {
                assert!(x.dot(y).abs() <= 0.04 * d + 1e-9);
            }
            for e in g.eta.iter().flatten() {
                assert!(x.dot(e).abs() < 1e-10);
            }
        }
        for v in g.dormant.iter().flatten() {
            assert!((v.norm_squared() - d).abs() < 1e-9);
        }
        assert_eq!(g.r_eta().unwrap(), 6);
    }

    #[test]
    fn generic_pairs_cover_and_delta_diag() {
        let g = GenericGeometry::build(&gspec()).unwrap();
        let data = gen_generic(&g, 10, 3, Exec::Sequential).unwrap();
        let geo = task_geometry(&g, &data).unwrap();
        assert_eq!(geo.n_pairs, 2 * 3);
        assert!((geo.delta_diag - 2.0 * 0.09 * 40.0).abs() < 1e-9);
        assert!(geo.sigma_d.trace() <= 4.0 * 0.09 * 40.0 * geo.n_pairs as f64 + 1e-9);
    }

    #[test]
    fn zero_delta_collapses_groups() {
        let mut spec = gspec();
        spec.delta = 0.0;
        let g = GenericGeometry::build(&spec).unwrap();
        assert_eq!(g.dormant[0][0], g.dormant[0][1]);
        let data = gen_generic(&g, 5, 3, Exec::Sequential).unwrap();
        let geo = task_geometry(&g, &data).unwrap();
        assert!(!geo.r_eff_defined && geo.sigma_d.amax() == 0.0);
    }

    #[test]
    fn copy_paste_target_by_hand() {
        let mut spec = gspec();
        spec.n_groups = 1;
        spec.eps_tol = 0.0;
        let g = GenericGeometry::build(&spec).unwrap();
        let toks = vec![
            Token::Bos,
            Token::Dormant { group: 0, index: 0 },
            Token::CopyPaste { group: 0 },
        ];
        let s = generic_sequence(&g, toks, &mut ChaCha8Rng::seed_from_u64(0));
        let want = &g.copies[0] + &g.dormant[0][0];
        assert!((s.targets.col(2) - want).amax() < 1e-12);
    }

    #[test]
    fn relaxed_projection() {
        let r = RelaxedTarget {
            anchor: DVector::from_vec(vec![1.0, 0.0]),
            direction: Some(DVector::from_vec(vec![0.0, 1.0])),
            range: (0.9, 1.1),
        };
        assert_eq!(r.distance(&DVector::from_vec(vec![1.0, 1.05])), 0.0);
        assert!((r.distance(&DVector::from_vec(vec![1.0, 2.0])) - 0.9).abs() < 1e-12);
    }
}
