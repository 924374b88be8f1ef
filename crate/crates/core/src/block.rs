//! Single-head attention + MLP block with pre-RMSNorm.
//!
//! Tokens are columns: a [`TokenMatrix`] is d × n where column 0 is usually
//! the BOS token. Scores use the query as the row index,
//! `S[i][j] = (W_Q zᵢ)ᵀ(W_K zⱼ)/√d`, masked causally (j ≤ i).

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix(pub Matrix);

impl TokenMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("token matrix"));
        }
        Ok(Self(m))
    }

    pub fn from_columns(cols: &[DVector<f64>]) -> Result<Self> {
        if cols.is_empty() {
            return Err(invalid("no tokens"));
        }
        Self::new(Matrix::from_columns(cols))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn len(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.0.ncols() == 0
    }

    pub fn col(&self, i: usize) -> DVector<f64> {
        self.0.column(i).into_owned()
    }
}

/// Row-stochastic, lower-triangular attention weights (row = query).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(pub Matrix);

impl AttentionMap {
    pub fn new(a: Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(invalid("attention map must be square"));
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("attention map"));
        }
        for i in 0..a.nrows() {
            let mut s = 0.0;
            for j in 0..a.ncols() {
                let x = a[(i, j)];
                if x < -1e-12 || (j > i && x.abs() > 1e-12) {
                    return Err(invalid(format!(
                        "attention entry ({i},{j}) = {x} not causal/nonnegative"
                    )));
                }
                s += x;
            }
            if (s - 1.0).abs() > 1e-6 {
                return Err(invalid(format!("attention row {i} sums to {s}")));
            }
        }
        Ok(Self(a))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttentionMode {
    Soft,
    /// A row whose top logit beats every other by at least `kappa` puts
    /// uniform mass on its maximizers; other rows fall back to softmax.
    Hard {
        kappa: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_1: Matrix,
    pub b_1: DVector<f64>,
    pub w_2: Matrix,
    pub b_2: DVector<f64>,
}

impl BlockWeights {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            w_1: Matrix::zeros(hidden, d),
            b_1: DVector::zeros(hidden),
            w_2: Matrix::zeros(d, hidden),
            b_2: DVector::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_o.nrows()
    }

    /// Score matrix M with sᵢⱼ = zᵢᵀ M zⱼ / √d.
    pub fn w_qk(&self) -> Matrix {
        self.w_q.transpose() * &self.w_k
    }

    pub fn w_vo(&self) -> Matrix {
        &self.w_o * &self.w_v
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_o.nrows();
        let h = self.w_1.nrows();
        let dk = self.w_q.nrows();
        let dv = self.w_v.nrows();
        let ok = self.w_q.shape() == (dk, d)
            && self.w_k.shape() == (dk, d)
            && self.w_v.shape() == (dv, d)
            && self.w_o.shape() == (d, dv)
            && self.w_1.shape() == (h, d)
            && self.b_1.len() == h
            && self.w_2.shape() == (d, h)
            && self.b_2.len() == d;
        if !ok {
            return Err(Error::Shape {
                context: "block weights",
                expected: format!("consistent shapes for d = {d}, hidden = {h}"),
                found: format!(
                    "Wq {:?} Wk {:?} Wv {:?} Wo {:?} W1 {:?} W2 {:?}",
                    self.w_q.shape(),
                    self.w_k.shape(),
                    self.w_v.shape(),
                    self.w_o.shape(),
                    self.w_1.shape(),
                    self.w_2.shape()
                ),
            });
        }
        let all = [
            &self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.w_1, &self.w_2,
        ];
        if all.iter().any(|m| m.iter().any(|x| !x.is_finite()))
            || self
                .b_1
                .iter()
                .chain(self.b_2.iter())
                .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite("block weights"));
        }
        Ok(())
    }
}

/// zᵢ = √d · xᵢ/‖xᵢ‖.
pub fn rms_norm(x: &Matrix) -> Result<Matrix> {
    let d = x.nrows() as f64;
    let mut z = x.clone();
    for (j, mut col) in z.column_iter_mut().enumerate() {
        let n = col.norm();
        if !n.is_finite() {
            return Err(Error::NonFinite("rms_norm input"));
        }
        if n == 0.0 {
            return Err(Error::ZeroColumn { index: j });
        }
        col.scale_mut(d.sqrt() / n);
    }
    Ok(z)
}

/// RMSNorm followed by an elementwise learnable gain.
pub fn rms_norm_scaled(x: &Matrix, gain: &DVector<f64>) -> Result<Matrix> {
    if gain.len() != x.nrows() {
        return Err(invalid("gain length differs from token dimension"));
    }
    let mut z = rms_norm(x)?;
    for mut col in z.column_iter_mut() {
        col.component_mul_assign(gain);
    }
    Ok(z)
}

pub fn attention_scores(z: &Matrix, w_q: &Matrix, w_k: &Matrix) -> Matrix {
    let d = z.nrows() as f64;
    let q = w_q * z;
    let k = w_k * z;
    (q.transpose() * k) / d.sqrt()
}

pub fn causal_softmax(s: &Matrix) -> Matrix {
    let n = s.nrows();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        softmax_row(s, &mut a, i);
    }
    a
}

fn softmax_row(s: &Matrix, a: &mut Matrix, i: usize) {
    let m = (0..=i).map(|j| s[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for j in 0..=i {
        let e = (s[(i, j)] - m).exp();
        a[(i, j)] = e;
        z += e;
    }
    for j in 0..=i {
        a[(i, j)] /= z;
    }
}

/// Tie tolerance on logits, relative to the row maximum.
pub(crate) fn tie_tol(m: f64) -> f64 {
    1e-9 * m.abs().max(1.0)
}

pub fn hard_attention(s: &Matrix, kappa: f64) -> Matrix {
    let n = s.nrows();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        let m = (0..=i).map(|j| s[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let tol = tie_tol(m);
        let ties: Vec<usize> = (0..=i).filter(|&j| s[(i, j)] >= m - tol).collect();
        let runner_up = (0..=i)
            .filter(|&j| s[(i, j)] < m - tol)
            .map(|j| s[(i, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        if m - runner_up >= kappa - 1e-9 * kappa.abs().max(1.0) {
            let w = 1.0 / ties.len() as f64;
            for j in ties {
                a[(i, j)] = w;
            }
        } else {
            softmax_row(s, &mut a, i);
        }
    }
    a
}

/// Per-row gap between the top logit and the best logit outside the tie set
/// of maximizers. Rows where every key ties are skipped (None).
pub fn row_margins(s: &Matrix) -> Vec<Option<f64>> {
    (0..s.nrows())
        .map(|i| {
            let m = (0..=i).map(|j| s[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            let tol = tie_tol(m);
            let r = (0..=i)
                .filter(|&j| s[(i, j)] < m - tol)
                .map(|j| s[(i, j)])
                .fold(f64::NEG_INFINITY, f64::max);
            r.is_finite().then_some(m - r)
        })
        .collect()
}

pub fn attention(z: &Matrix, w: &BlockWeights, mode: AttentionMode) -> Matrix {
    let s = attention_scores(z, &w.w_q, &w.w_k);
    match mode {
        AttentionMode::Soft => causal_softmax(&s),
        AttentionMode::Hard { kappa } => hard_attention(&s, kappa),
    }
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub z: Matrix,
    pub scores: Matrix,
    pub attn: Matrix,
    pub h: Matrix,
    pub z2: Matrix,
    pub pre: Matrix,
    pub out: Matrix,
}

pub fn block_forward_traced(
    x: &TokenMatrix,
    w: &BlockWeights,
    mode: AttentionMode,
) -> Result<BlockTrace> {
    w.validate()?;
    if x.dim() != w.dim() {
        return Err(Error::Shape {
            context: "block_forward",
            expected: format!("token dimension {}", w.dim()),
            found: x.dim().to_string(),
        });
    }
    let z = rms_norm(&x.0)?;
    let scores = attention_scores(&z, &w.w_q, &w.w_k);
    let attn = match mode {
        AttentionMode::Soft => causal_softmax(&scores),
        AttentionMode::Hard { kappa } => hard_attention(&scores, kappa),
    };
    forward_from_attention(x, w, z, scores, attn)
}

/// Runs the block with a prescribed attention map instead of the scores.
pub fn block_forward_with_attention(
    x: &TokenMatrix,
    w: &BlockWeights,
    attn: &AttentionMap,
) -> Result<BlockTrace> {
    w.validate()?;
    if attn.len() != x.len() {
        return Err(invalid("attention map size differs from sequence length"));
    }
    let z = rms_norm(&x.0)?;
    let scores = attention_scores(&z, &w.w_q, &w.w_k);
    forward_from_attention(x, w, z, scores, attn.0.clone())
}

fn forward_from_attention(
    x: &TokenMatrix,
    w: &BlockWeights,
    z: Matrix,
    scores: Matrix,
    attn: Matrix,
) -> Result<BlockTrace> {
    let v = &w.w_v * &z;
    let h = &x.0 + &w.w_o * (v * attn.transpose());
    let z2 = rms_norm(&h)?;
    let mut pre = &w.w_1 * &z2;
    for mut col in pre.column_iter_mut() {
        col += &w.b_1;
    }
    let mut out = &w.w_2 * pre.map(|p| p.max(0.0));
    for mut col in out.column_iter_mut() {
        col += &w.b_2;
    }
    out += &h;
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("block output"));
    }
    Ok(BlockTrace {
        z,
        scores,
        attn,
        h,
        z2,
        pre,
        out,
    })
}

pub fn block_forward(
    x: &TokenMatrix,
    w: &BlockWeights,
    mode: AttentionMode,
) -> Result<TokenMatrix> {
    block_forward_traced(x, w, mode).map(|t| TokenMatrix(t.out))
}
