//! Reverse-mode gradients of the block objective.

use serde::{Deserialize, Serialize};

use crate::block::{causal_softmax, hard_attention, rms_norm, BlockWeights, TokenMatrix};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::tasks::RelaxedTarget;
use crate::Matrix;

/// One training sequence with its attention target.
#[derive(Clone, Debug)]
pub struct Example {
    pub inputs: TokenMatrix,
    /// RMS-normalized inputs.
    pub z: Matrix,
    pub relaxed: Vec<RelaxedTarget>,
    /// Keys each query row should attend to, split uniformly.
    pub target_sets: Vec<Vec<usize>>,
    pub target_attn: Matrix,
}

impl Example {
    pub fn new(
        inputs: TokenMatrix,
        relaxed: Vec<RelaxedTarget>,
        target_sets: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n = inputs.len();
        if relaxed.len() != n || target_sets.len() != n {
            return Err(invalid(
                "one relaxed target and one target set per position",
            ));
        }
        let mut target_attn = Matrix::zeros(n, n);
        for (i, set) in target_sets.iter().enumerate() {
            if set.is_empty() || set.iter().any(|&j| j > i) {
                return Err(invalid(format!(
                    "target set of row {i} must be a non-empty subset of 0..={i}"
                )));
            }
            for &j in set {
                target_attn[(i, j)] = 1.0 / set.len() as f64;
            }
        }
        let z = rms_norm(&inputs.0)?;
        Ok(Self {
            inputs,
            z,
            relaxed,
            target_sets,
            target_attn,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradMode {
    /// Softmax attention, differentiated end to end.
    Soft,
    /// The block uses the target attention map; scores are trained only by
    /// the pattern and margin penalties.
    Forced,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub mode: GradMode,
    pub reg_weight: f64,
    /// Weight of ‖W_Q‖_F² + ‖W_K‖_F² inside the regularizer.
    pub qk_scale: f64,
    /// Cross-entropy between softmax(S) rows and the target rows.
    pub pattern_penalty: f64,
    /// Squared hinge pushing every target logit `margin_target` above every
    /// non-target logit, plus a squared penalty on gaps inside a target set.
    pub margin_penalty: f64,
    pub margin_target: f64,
    /// Margin used when measuring compliance.
    pub kappa: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Mean squared distance of output tokens to their admissible sets.
    pub task: f64,
    /// Unweighted regularizer value.
    pub reg: f64,
    pub pattern: f64,
    pub margin: f64,
    pub total: f64,
    /// Mean attention mass on the target sets under hard(κ) attention,
    /// over rows past BOS.
    pub compliance: f64,
}

pub struct Gradient {
    pub loss: LossParts,
    pub grad: BlockWeights,
}

pub(crate) fn fields(w: &BlockWeights) -> [&[f64]; 8] {
    [
        w.w_q.as_slice(),
        w.w_k.as_slice(),
        w.w_v.as_slice(),
        w.w_o.as_slice(),
        w.w_1.as_slice(),
        w.b_1.as_slice(),
        w.w_2.as_slice(),
        w.b_2.as_slice(),
    ]
}

pub(crate) fn fields_mut(w: &mut BlockWeights) -> [&mut [f64]; 8] {
    [
        w.w_q.as_mut_slice(),
        w.w_k.as_mut_slice(),
        w.w_v.as_mut_slice(),
        w.w_o.as_mut_slice(),
        w.w_1.as_mut_slice(),
        w.b_1.as_mut_slice(),
        w.w_2.as_mut_slice(),
        w.b_2.as_mut_slice(),
    ]
}

pub(crate) fn zeros_like(w: &BlockWeights) -> BlockWeights {
    BlockWeights::zeros(w.dim(), w.w_1.nrows())
}

fn add_into(acc: &mut BlockWeights, g: &BlockWeights) {
    for (a, b) in fields_mut(acc).into_iter().zip(fields(g)) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

pub fn regularizer(w: &BlockWeights, qk_scale: f64) -> f64 {
    let f = |m: &Matrix| m.norm_squared();
    qk_scale * (f(&w.w_q) + f(&w.w_k)) + f(&w.w_v) + f(&w.w_o) + f(&w.w_1) + f(&w.w_2)
}

/// Column-wise backward pass of z = √d·h/‖h‖.
fn rms_backward(z: &Matrix, h: &Matrix, dz: &Matrix) -> Matrix {
    let d = z.nrows() as f64;
    let mut dh = Matrix::zeros(z.nrows(), z.ncols());
    for j in 0..z.ncols() {
        let zc = z.column(j);
        let g = dz.column(j);
        let s = d.sqrt() / h.column(j).norm();
        let proj = zc.dot(&g) / d;
        dh.set_column(j, &((g - zc * proj) * s));
    }
    dh
}

fn add_bias(m: &mut Matrix, b: &crate::Vector) {
    for mut col in m.column_iter_mut() {
        col += b;
    }
}

struct SeqOut {
    task: f64,
    pattern: f64,
    margin: f64,
    compliance: f64,
    grad: BlockWeights,
}

fn seq_gradient(
    w: &BlockWeights,
    ex: &Example,
    obj: &Objective,
    tok_norm: f64,
    row_norm: f64,
) -> Result<SeqOut> {
    let z = &ex.z;
    let n = z.ncols();
    let c = 1.0 / (z.nrows() as f64).sqrt();
    let q = &w.w_q * z;
    let k = &w.w_k * z;
    let s = (q.transpose() * &k) * c;
    let soft = causal_softmax(&s);
    let a = match obj.mode {
        GradMode::Soft => &soft,
        GradMode::Forced => &ex.target_attn,
    };
    let v = &w.w_v * z;
    let o = &v * a.transpose();
    let h = &ex.inputs.0 + &w.w_o * &o;
    let z2 = rms_norm(&h)?;
    let mut pre = &w.w_1 * &z2;
    add_bias(&mut pre, &w.b_1);
    let r = pre.map(|p| p.max(0.0));
    let mut out = &w.w_2 * &r + &h;
    add_bias(&mut out, &w.b_2);
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("training forward pass"));
    }

    let mut task = 0.0;
    let mut d_out = Matrix::zeros(out.nrows(), n);
    for (p, target) in ex.relaxed.iter().enumerate() {
        let y = out.column(p).into_owned();
        let e = &y - target.project(&y);
        task += e.norm_squared();
        d_out.set_column(p, &(e * (2.0 / tok_norm)));
    }

    let mut g = zeros_like(w);
    g.w_2 = &d_out * r.transpose();
    g.b_2 = d_out.column_sum();
    let mut d_pre = w.w_2.transpose() * &d_out;
    d_pre.zip_apply(&pre, |dp, p| {
        if p <= 0.0 {
            *dp = 0.0
        }
    });
    g.w_1 = &d_pre * z2.transpose();
    g.b_1 = d_pre.column_sum();
    let d_z2 = w.w_1.transpose() * &d_pre;
    let d_h = &d_out + rms_backward(&z2, &h, &d_z2);
    g.w_o = &d_h * o.transpose();
    let d_o = w.w_o.transpose() * &d_h;
    let d_v = &d_o * a;
    g.w_v = &d_v * z.transpose();

    let mut d_s = Matrix::zeros(n, n);
    if obj.mode == GradMode::Soft {
        let d_a = d_o.transpose() * &v;
        for i in 0..n {
            let dot: f64 = (0..=i).map(|j| soft[(i, j)] * d_a[(i, j)]).sum();
            for j in 0..=i {
                d_s[(i, j)] = soft[(i, j)] * (d_a[(i, j)] - dot);
            }
        }
    }

    let mut pattern = 0.0;
    if obj.pattern_penalty > 0.0 {
        let wgt = obj.pattern_penalty / row_norm;
        for i in 1..n {
            for j in 0..=i {
                let t = ex.target_attn[(i, j)];
                if t > 0.0 {
                    pattern -= t * soft[(i, j)].max(f64::MIN_POSITIVE).ln();
                }
                d_s[(i, j)] += wgt * (soft[(i, j)] - t);
            }
        }
    }

    let mut margin = 0.0;
    let mut compliance = 0.0;
    let hard = hard_attention(&s, obj.kappa);
    let wgt = obj.margin_penalty / row_norm;
    let mut in_set = vec![false; n];
    for i in 1..n {
        let set = &ex.target_sets[i];
        compliance += set.iter().map(|&j| hard[(i, j)]).sum::<f64>();
        if obj.margin_penalty <= 0.0 {
            continue;
        }
        for &j in set {
            in_set[j] = true;
        }
        for &t in set {
            for j in (0..=i).filter(|&j| !in_set[j]) {
                let gap = obj.margin_target - s[(i, t)] + s[(i, j)];
                if gap > 0.0 {
                    margin += gap * gap;
                    d_s[(i, t)] -= 2.0 * gap * wgt;
                    d_s[(i, j)] += 2.0 * gap * wgt;
                }
            }
        }
        for (x, &t) in set.iter().enumerate() {
            for &u in &set[x + 1..] {
                let diff = s[(i, t)] - s[(i, u)];
                margin += diff * diff;
                d_s[(i, t)] += 2.0 * diff * wgt;
                d_s[(i, u)] -= 2.0 * diff * wgt;
            }
        }
        for &j in set {
            in_set[j] = false;
        }
    }

    let d_q = &k * d_s.transpose() * c;
    let d_k = &q * &d_s * c;
    g.w_q = d_q * z.transpose();
    g.w_k = d_k * z.transpose();
    Ok(SeqOut {
        task,
        pattern,
        margin,
        compliance,
        grad: g,
    })
}

/// Loss parts and exact gradient of
/// task + reg_weight·reg + pattern_penalty·CE + margin_penalty·hinge.
pub fn block_gradients(
    w: &BlockWeights,
    batch: &[Example],
    obj: &Objective,
    exec: Exec,
) -> Result<Gradient> {
    w.validate()?;
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    if batch.iter().any(|e| e.inputs.dim() != w.dim()) {
        return Err(invalid("example dimension differs from the weights"));
    }
    let tok_norm = batch.iter().map(|e| e.inputs.len()).sum::<usize>() as f64;
    let row_norm = (batch.iter().map(|e| e.inputs.len() - 1).sum::<usize>() as f64).max(1.0);
    let parts = exec.map(batch, |e| seq_gradient(w, e, obj, tok_norm, row_norm));

    let mut grad = zeros_like(w);
    let mut loss = LossParts::default();
    for p in parts {
        let p = p?;
        loss.task += p.task / tok_norm;
        loss.pattern += p.pattern / row_norm;
        loss.margin += p.margin / row_norm;
        loss.compliance += p.compliance / row_norm;
        add_into(&mut grad, &p.grad);
    }
    loss.reg = regularizer(w, obj.qk_scale);
    loss.total = loss.task
        + obj.reg_weight * loss.reg
        + obj.pattern_penalty * loss.pattern
        + obj.margin_penalty * loss.margin;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }

    let lam = 2.0 * obj.reg_weight;
    grad.w_q += &w.w_q * (lam * obj.qk_scale);
    grad.w_k += &w.w_k * (lam * obj.qk_scale);
    grad.w_v += &w.w_v * lam;
    grad.w_o += &w.w_o * lam;
    grad.w_1 += &w.w_1 * lam;
    grad.w_2 += &w.w_2 * lam;
    Ok(Gradient { loss, grad })
}
